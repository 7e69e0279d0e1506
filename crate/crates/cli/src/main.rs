use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use cyclegen::corpus::{self, build_vocab, read_corpus, tokenize, write_corpus, Source, Vocab, WorldConfig};
use cyclegen::experiment::{evaluate, gradient_check, EvalOptions, Evaluation, Preset};
use cyclegen::formats::{self, FormatId};
use cyclegen::inference::{BeamConfig, Translator};
use cyclegen::model::ModelConfig;
use cyclegen::noise::{self, NoiseConfig};
use cyclegen::training::{self, load_run, LossReport, StyleMode, TrainConfig, CONFIG_SCHEMA};
use cyclegen::Error;

const FORMAT_ERROR: &str = "#FORMAT_ERROR";
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cyclegen", version, about = "Unsupervised data-to-text and text-to-data conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source corpus.
    GenCorpus(GenCorpusArgs),
    /// Unsupervised training with denoising and back-translation.
    Train(TrainArgs),
    /// Supervised baseline on the aligned training pairs.
    TrainSupervised(TrainArgs),
    /// Convert records to text (d2t) or text to records (t2d).
    Infer(InferArgs),
    /// Evaluate a checkpoint on the held-out pairs of a corpus.
    Eval(EvalArgs),
    /// Train one model per style dimension and report diversity metrics.
    EvalSweep(SweepArgs),
    /// Convert linearized records between formats.
    Convert(ConvertArgs),
    /// Print `input TAB noised` for each input line.
    NoisePreview(NoiseArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// World configuration (JSON); missing fields take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Unaligned texts per source.
    #[arg(long)]
    n_texts: Option<usize>,
    /// Unaligned records per source.
    #[arg(long)]
    n_records: Option<usize>,
    /// Held-out aligned pairs per source.
    #[arg(long)]
    n_eval: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    /// Learning rate 1e-3, batch 8, warmup over half the schedule.
    Desk,
    /// Learning rate 1e-4, batch 16, warmup 200 steps.
    Paper,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON with optional `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetName,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Denoising-only steps before the cycle losses join.
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Source-sampling temperature T.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_mmd: Option<f64>,
    /// Style used when generating synthetic text: zero or sample.
    #[arg(long)]
    style_mode: Option<StyleMode>,
    /// Drop the denoising objective (collapse ablation).
    #[arg(long)]
    no_denoising: bool,
    #[arg(long)]
    d_style: Option<usize>,
    /// Minimum token count for the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    D2t,
    T2d,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(value_enum)]
    direction: Direction,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    format: FormatId,
    /// Input file, one item per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit K style-sampled generations per record, TAB-separated.
    #[arg(long)]
    diverse: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Beam width (default 5 for d2t, 8 for t2d).
    #[arg(long)]
    beams: Option<usize>,
    /// Exit with status 2 if any output fails to parse.
    #[arg(long)]
    strict: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Also compute Self-BLEU and Distinct-n over style samples.
    #[arg(long)]
    diversity: bool,
    /// Style samples per record.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Sampling seeds for the diversity metrics.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_pairs: Option<usize>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated style dimensions.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    style_dims: Vec<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetName,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 10)]
    max_pairs: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(clap::Args)]
struct ConvertArgs {
    #[arg(long)]
    from: FormatId,
    #[arg(long)]
    to: FormatId,
    /// Input file; stdin when absent.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseFn {
    Swap,
    Drop,
    Blank,
    Repeat,
    /// All token-level noise in sequence.
    Corrupt,
    /// Rule noise: lines parsing as --format records become rule text,
    /// other lines become pseudo-records in --format.
    Rule,
}

#[derive(clap::Args)]
struct NoiseArgs {
    #[arg(long = "fn", value_enum)]
    function: NoiseFn,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input file; stdin when absent.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "kg")]
    format: FormatId,
    /// Probability for drop, blank or repeat.
    #[arg(long)]
    p: Option<f64>,
    /// Maximum displacement for swap.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 4)]
    per_param: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let mut cmd = Cli::command();
            let sub = std::env::args()
                .skip(1)
                .find_map(|a| cmd.find_subcommand(&a).map(|c| c.get_name().to_string()));
            let help = match sub {
                Some(name) => cmd.find_subcommand_mut(&name).unwrap().render_help(),
                None => cmd.render_help(),
            };
            eprintln!("\n{help}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a, false),
        Command::TrainSupervised(a) => train_cmd(a, true),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::EvalSweep(a) => sweep(a),
        Command::Convert(a) => convert(a),
        Command::NoisePreview(a) => noise_preview(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn read_input(path: Option<&Path>) -> CliResult<String> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)?),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn lines(s: &str) -> Vec<&str> {
    s.lines().collect()
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn gen_corpus(a: GenCorpusArgs) -> CliResult {
    let mut world = serde_json::to_value(WorldConfig::default())?;
    if let Some(p) = &a.config {
        merge(&mut world, serde_json::from_str(&fs::read_to_string(p)?)?);
    }
    let mut world: WorldConfig = serde_json::from_value(world)?;
    for s in &mut world.sources {
        s.n_texts = a.n_texts.unwrap_or(s.n_texts);
        s.n_records = a.n_records.unwrap_or(s.n_records);
        s.n_eval = a.n_eval.unwrap_or(s.n_eval);
    }
    let sources = corpus::generate_synthetic_world(a.seed, &world)?;
    write_corpus(&a.out, &sources)?;
    fs::write(a.out.join("world.json"), serde_json::to_string_pretty(&world)?)?;
    for s in &sources {
        eprintln!(
            "{} ({}): {} texts, {} records, {} eval pairs",
            s.name,
            s.format,
            s.texts.len(),
            s.records.len(),
            s.eval_pairs.len()
        );
    }
    Ok(())
}

fn preset(name: PresetName) -> Preset {
    match name {
        PresetName::Desk => Preset::desk(),
        PresetName::Paper => Preset {
            train: TrainConfig::default(),
            ..Preset::desk()
        },
    }
}

/// Effective model and training configuration: flag > config file > preset.
fn resolve_config(
    name: PresetName,
    config: Option<&Path>,
    sources: &[Source],
    apply_flags: impl FnOnce(&mut ModelConfig, &mut TrainConfig),
) -> CliResult<(ModelConfig, TrainConfig)> {
    let p = preset(name);
    let mut value = serde_json::json!({ "model": p.model, "train": p.train });
    let mut warmup_given = false;
    if let Some(path) = config {
        let mut patch: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(v) = patch.as_object_mut().and_then(|o| o.remove("schema")) {
            if v.as_str() != Some(CONFIG_SCHEMA) {
                return Err(Failure::Usage(format!("{}: schema {v}, expected \"{CONFIG_SCHEMA}\"", path.display())));
            }
        }
        warmup_given = patch.pointer("/train/warmup_steps").is_some();
        merge(&mut value, patch);
    }
    let mut model: ModelConfig = serde_json::from_value(value["model"].take())?;
    let mut train: TrainConfig = serde_json::from_value(value["train"].take())?;
    let before = train.warmup_steps;
    apply_flags(&mut model, &mut train);
    warmup_given |= train.warmup_steps != before;
    if matches!(name, PresetName::Desk) && !warmup_given {
        train.warmup_steps = train.steps_per_epoch(sources) * train.epochs / 2;
    }
    Ok((model, train))
}

fn train_cmd(a: TrainArgs, supervised: bool) -> CliResult {
    let sources = read_corpus(&a.corpus)?;
    let (model, train) = resolve_config(a.preset, a.config.as_deref(), &sources, |m, t| {
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.lr {
            t.learning_rate = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if a.steps_per_epoch.is_some() {
            t.steps_per_epoch = a.steps_per_epoch;
        }
        if let Some(v) = a.warmup_steps {
            t.warmup_steps = v;
        }
        if let Some(v) = a.temperature {
            t.temperature = v;
        }
        if let Some(v) = a.lambda_mmd {
            t.lambda_mmd = v;
        }
        if let Some(v) = a.style_mode {
            t.style_mode_for_bt = v;
        }
        if a.no_denoising {
            t.denoising = false;
        }
        if let Some(v) = a.d_style {
            m.d_style = v;
        }
    })?;
    let vocab = build_vocab(&sources, a.min_count)?;
    eprintln!(
        "config: flags > {} > preset {}",
        a.config.as_ref().map_or("no config file".to_string(), |p| p.display().to_string()),
        a.preset.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string())
    );
    eprintln!("model {}", serde_json::to_string(&model)?);
    eprintln!("train {}", serde_json::to_string(&train)?);
    eprintln!("vocab {} tokens, {} sources", vocab.len(), sources.len());
    let steps = train.steps_per_epoch(&sources);
    let mut progress = |r: &LossReport| {
        if (r.step + 1) % steps == 0 {
            eprintln!("epoch {} step {} total {:.4}", r.epoch, r.step + 1, r.total);
        }
    };
    let out = if supervised {
        training::train_supervised(&sources, vocab, model, &train, Some(&a.out), Some(&mut progress))?
    } else {
        training::train(&sources, vocab, model, &train, Some(&a.out), Some(&mut progress))?
    };
    for c in &out.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

fn infer(a: InferArgs) -> CliResult {
    let (model, vocab, _) = load_run(&a.ckpt)?;
    let tr = Translator::new(&model, &vocab);
    let text = fs::read_to_string(&a.input)?;
    let ml = model.config.max_len;
    let mut out = output(a.out.as_deref())?;
    let mut errors = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    match a.direction {
        Direction::D2t => {
            let mut beam = BeamConfig::d2t_default(ml);
            beam.n_beams = a.beams.unwrap_or(beam.n_beams);
            for (i, line) in lines(&text).into_iter().enumerate() {
                let rec = formats::parse(line, a.format)
                    .map_err(|e| Failure::Data(format!("line {}: {e}", i + 1)))?;
                match a.diverse {
                    Some(k) => writeln!(out, "{}", tr.d2t_diverse(&rec, k, &beam, &mut rng)?.join("\t"))?,
                    None => writeln!(out, "{}", tr.d2t(&rec, &beam)?)?,
                }
            }
        }
        Direction::T2d => {
            let mut beam = BeamConfig::t2d_default(ml);
            beam.n_beams = a.beams.unwrap_or(beam.n_beams);
            for line in lines(&text) {
                let r = tr.t2d(line, a.format, &beam)?;
                match r.record {
                    Ok(rec) => writeln!(out, "{}", formats::serialize(&rec)?)?,
                    Err(_) => {
                        errors += 1;
                        writeln!(out, "{FORMAT_ERROR} {}", r.raw)?;
                    }
                }
            }
        }
    }
    out.flush()?;
    if errors > 0 {
        eprintln!("{errors} format errors");
        if a.strict {
            return Err(Failure::Data(format!("{errors} outputs failed to parse")));
        }
    }
    Ok(())
}

fn eval_options(max_len: usize, greedy: bool, jobs: usize, max_pairs: Option<usize>) -> EvalOptions {
    let mut o = if greedy {
        EvalOptions::fast(max_len)
    } else {
        EvalOptions::new(max_len)
    };
    o.jobs = jobs.max(1);
    o.max_pairs = max_pairs;
    o
}

fn write_reports(dir: &Path, ev: &Evaluation) -> CliResult {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(ev)?)?;
    fs::write(dir.join("report.csv"), ev.to_csv())?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let (model, vocab, _) = load_run(&a.ckpt)?;
    let sources = read_corpus(&a.corpus)?;
    let mut opts = eval_options(model.config.max_len, a.greedy, a.jobs, a.max_pairs);
    if a.diversity {
        opts.diversity_k = Some(a.k);
        opts.diversity_seeds = (0..a.seeds).collect();
    }
    let ev = evaluate(&model, &vocab, &sources, &opts)?;
    write_reports(&a.out, &ev)?;
    print!("{}", ev.to_csv());
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let sources = read_corpus(&a.corpus)?;
    let vocab: Vocab = build_vocab(&sources, 1)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from(
        "d_style,self_bleu,self_bleu_ci95,distinct1,distinct1_ci95,distinct2,distinct2_ci95,bleu,entity_f1\n",
    );
    for &d in &a.style_dims {
        let (model, train) = resolve_config(a.preset, a.config.as_deref(), &sources, |m, t| {
            m.d_style = d;
            t.seed = a.seed;
            if let Some(e) = a.epochs {
                t.epochs = e;
            }
        })?;
        eprintln!("d_style {d}: training");
        let run_dir = a.out.join(format!("d{d}"));
        let out = training::train(&sources, vocab.clone(), model, &train, Some(&run_dir), None)?;
        let mut opts = eval_options(out.model.config.max_len, true, a.jobs, Some(a.max_pairs));
        opts.diversity_k = Some(a.k);
        opts.diversity_seeds = (0..a.seeds).collect();
        let ev = evaluate(&out.model, &out.vocab, &sources, &opts)?;
        write_reports(&run_dir, &ev)?;
        let dv = ev.diversity.unwrap_or_default();
        csv.push_str(&format!(
            "{d},{:.4},{:.4},{:.5},{:.5},{:.5},{:.5},{:.4},{:.4}\n",
            dv.self_bleu.mean,
            dv.self_bleu.ci95,
            dv.distinct1.mean,
            dv.distinct1.ci95,
            dv.distinct2.mean,
            dv.distinct2.ci95,
            ev.aggregate.bleu,
            ev.aggregate.entity.f1
        ));
    }
    fs::write(a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn convert(a: ConvertArgs) -> CliResult {
    let text = read_input(a.input.as_deref())?;
    let mut out = output(None)?;
    let mut errors = 0usize;
    for line in lines(&text) {
        match formats::parse(line, a.from) {
            Ok(rec) => writeln!(out, "{}", formats::serialize(&formats::convert(&rec, a.to)?)?)?,
            Err(e) => {
                errors += 1;
                writeln!(out, "{FORMAT_ERROR} {line}")?;
                eprintln!("{e}");
            }
        }
    }
    out.flush()?;
    if errors > 0 && a.strict {
        return Err(Failure::Data(format!("{errors} lines failed to parse")));
    }
    Ok(())
}

fn noise_preview(a: NoiseArgs) -> CliResult {
    let text = read_input(a.input.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let defaults = NoiseConfig::default();
    let mut out = output(None)?;
    let mut tokens: Vec<String> = corpus::reserved_tokens().into_iter().map(String::from).collect();
    for line in text.lines() {
        for t in tokenize(line) {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
    }
    let vocab = Vocab::from_tokens(tokens);
    for line in io::Cursor::new(text.as_bytes()).lines() {
        let line = line?;
        let ids = vocab.payload_ids(&line);
        let noisy = match a.function {
            NoiseFn::Swap => noise::swap(&ids, a.window.unwrap_or(defaults.swap_window), &vocab, &mut rng),
            NoiseFn::Drop => noise::drop(&ids, a.p.unwrap_or(defaults.p_drop), &vocab, &mut rng),
            NoiseFn::Blank => noise::blank(&ids, a.p.unwrap_or(defaults.p_blank), &vocab, &mut rng),
            NoiseFn::Repeat => noise::repeat(&ids, a.p.unwrap_or(defaults.p_repeat), &vocab, &mut rng),
            NoiseFn::Corrupt => noise::corrupt(&ids, &defaults, &vocab, &mut rng),
            NoiseFn::Rule => {
                let after = match formats::parse(&line, a.format) {
                    Ok(rec) => noise::rule_noise_data_to_text(&rec)?.1,
                    Err(_) => noise::rule_noise_text_to_data(&line, a.format, &mut rng)?.1,
                };
                writeln!(out, "{line}\t{after}")?;
                continue;
            }
        };
        let toks: Vec<&str> = noisy.iter().map(|&i| vocab.token(i)).collect();
        writeln!(out, "{line}\t{}", toks.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let r = gradient_check(a.seed, a.per_param, a.h)?;
    println!("checked {} coordinates", r.checked);
    if let Some((name, idx)) = &r.worst {
        println!("worst {name}[{idx}]");
    }
    println!("max relative error {:.3e}", r.max_rel_error);
    if r.max_rel_error < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure::Data(format!("max relative error above {GRADCHECK_TOL:e}")))
    }
}
