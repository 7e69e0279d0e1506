//! Trains the desk preset and prints a greedy evaluation after every epoch,
//! then the full beam-search report and a few samples.
//!
//! `cargo run --release -p cyclegen --example desk_run -- [epochs] [lr] [batch] [warmup] [nodenoise]`

use std::time::Instant;

use cyclegen::corpus::build_vocab;
use cyclegen::experiment::{evaluate, EvalOptions, Preset};
use cyclegen::formats;
use cyclegen::inference::{BeamConfig, Translator};
use cyclegen::training::Trainer;

fn arg<T: std::str::FromStr>(args: &[String], i: usize) -> Option<T> {
    args.get(i).and_then(|a| a.parse().ok())
}

fn main() -> cyclegen::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut p = Preset::desk();
    p.train.epochs = arg(&args, 0).unwrap_or(p.train.epochs);
    p.train.learning_rate = arg(&args, 1).unwrap_or(p.train.learning_rate);
    p.train.batch_size = arg(&args, 2).unwrap_or(p.train.batch_size);
    let sources = p.sources()?;
    let mut cfg = p.train_for(&sources);
    cfg.warmup_steps = arg(&args, 3).unwrap_or(cfg.warmup_steps);
    cfg.denoising = args.get(4).map(String::as_str) != Some("nodenoise");

    let vocab = build_vocab(&sources, 1)?;
    let mut mc = p.model.clone();
    mc.vocab_size = vocab.len();
    let mut tr = Trainer::new(mc, vocab, cfg.clone())?;
    let steps = cfg.steps_per_epoch(&sources);
    println!("vocab {}, {steps} steps/epoch, warmup {}", tr.vocab.len(), cfg.warmup_steps);
    let t0 = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            total += tr.train_step(&sources)?.total / steps as f64;
        }
        let mut opts = EvalOptions::fast(tr.model.config.max_len);
        opts.max_pairs = Some(25);
        let a = evaluate(&tr.model, &tr.vocab, &sources, &opts)?.aggregate;
        println!(
            "epoch {epoch} ({:.0} s) loss {total:.3}: entity F1 {:.1} relation F1 {:.1} BLEU {:.1} errors {:.1}% identity {:.1}%",
            t0.elapsed().as_secs_f64(),
            a.entity.f1,
            a.relation.f1,
            a.bleu,
            a.format_error_pct,
            a.identity_pct
        );
    }

    let ml = tr.model.config.max_len;
    let ev = evaluate(&tr.model, &tr.vocab, &sources, &EvalOptions::new(ml))?;
    print!("{}", ev.to_csv());
    let t = Translator::new(&tr.model, &tr.vocab);
    let s = &sources[0];
    for (text, rec) in s.eval_pairs.iter().take(3) {
        println!("text: {text}\n  d2t: {}", t.d2t(rec, &BeamConfig::d2t_default(ml))?);
        println!("record: {}\n  t2d: {}", formats::serialize(rec)?, t.t2d(text, s.format, &BeamConfig::t2d_default(ml))?.raw);
    }
    Ok(())
}
