//! Desk-scale experiment presets and the evaluation pipeline shared by the
//! command-line tool and the end-to-end tests.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Source, Vocab, WorldConfig};
use crate::error::{Error, Result};
use crate::corpus::STYLE_ID;
use crate::formats::{self, FormatId};
use crate::inference::{BeamConfig, Translator};
use crate::metrics::{self, EvalReport, PairOutcome};
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{self, GradCheckReport};
use crate::nn::{ParamId, Tape, Tensor, Var};
use crate::training::TrainConfig;

/// World, model and training settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Preset {
    /// The default synthetic world trained with lr 1e-3, batch 8 and
    /// denoising-only warmup over the first half of the schedule, so that
    /// ten epochs of a from-scratch model converge on one core.
    pub fn desk() -> Preset {
        Preset {
            world_seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    /// A smaller world for repeated comparisons.
    pub fn small() -> Preset {
        let mut p = Preset::desk();
        for s in &mut p.world.sources {
            s.n_texts = 200;
            s.n_records = 200;
            s.n_eval = 50;
        }
        p
    }

    /// Training config for `sources` with warmup set to half the scheduled
    /// steps.
    pub fn train_for(&self, sources: &[Source]) -> TrainConfig {
        let mut t = self.train.clone();
        t.warmup_steps = t.steps_per_epoch(sources) * t.epochs / 2;
        t
    }

    pub fn sources(&self) -> Result<Vec<Source>> {
        crate::corpus::generate_synthetic_world(self.world_seed, &self.world)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub d2t_beam: BeamConfig,
    pub t2d_beam: BeamConfig,
    /// Evaluate at most this many pairs per source.
    pub max_pairs: Option<usize>,
    /// Style samples per record for the diversity metrics; `None` skips them.
    pub diversity_k: Option<usize>,
    /// Seeds of the diversity sampling; metrics are averaged over them.
    pub diversity_seeds: Vec<u64>,
    pub diverse_beam: BeamConfig,
    /// Worker threads for per-pair decoding.
    pub jobs: usize,
}

impl EvalOptions {
    pub fn new(max_len: usize) -> EvalOptions {
        EvalOptions {
            d2t_beam: BeamConfig::d2t_default(max_len),
            t2d_beam: BeamConfig::t2d_default(max_len),
            max_pairs: None,
            diversity_k: None,
            diversity_seeds: (0..10).collect(),
            diverse_beam: BeamConfig::d2t_default(max_len),
            jobs: 1,
        }
    }

    /// Greedy decoding everywhere.
    pub fn fast(max_len: usize) -> EvalOptions {
        EvalOptions {
            d2t_beam: BeamConfig::greedy(max_len),
            t2d_beam: BeamConfig::greedy(max_len),
            diverse_beam: BeamConfig::greedy(max_len),
            ..EvalOptions::new(max_len)
        }
    }
}

/// Mean and 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

impl MeanCi {
    pub fn of(xs: &[f64]) -> MeanCi {
        if xs.is_empty() {
            return MeanCi::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return MeanCi { mean, ci95: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        MeanCi {
            mean,
            ci95: 1.96 * (var / n).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub k: usize,
    pub seeds: usize,
    pub self_bleu: MeanCi,
    pub distinct1: MeanCi,
    pub distinct2: MeanCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub name: String,
    pub format: formats::FormatId,
    pub report: EvalReport,
    pub diversity: Option<DiversitySummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sources: Vec<SourceReport>,
    pub aggregate: EvalReport,
    pub diversity: Option<DiversitySummary>,
}

impl Evaluation {
    pub const CSV_HEADER: &'static str = "source,n_pairs,bleu,rouge_l,entity_p,entity_r,entity_f1,relation_p,relation_r,relation_f1,sembleu,format_error_pct,identity_pct,self_bleu,distinct1,distinct2";

    pub fn to_csv(&self) -> String {
        let row = |name: &str, r: &EvalReport| {
            let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
            format!(
                "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{}",
                r.n_pairs,
                r.bleu,
                r.rouge_l,
                r.entity.precision,
                r.entity.recall,
                r.entity.f1,
                r.relation.precision,
                r.relation.recall,
                r.relation.f1,
                r.sembleu,
                r.format_error_pct,
                r.identity_pct,
                opt(r.self_bleu),
                opt(r.distinct1),
                opt(r.distinct2),
            )
        };
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.sources {
            out.push_str(&row(&s.name, &s.report));
            out.push('\n');
        }
        out.push_str(&row("aggregate", &self.aggregate));
        out.push('\n');
        out
    }
}

fn outcome(tr: &Translator, text: &str, gold: &formats::StructuredRecord, format: formats::FormatId, opts: &EvalOptions) -> Result<PairOutcome> {
    let (mem, draft, post) = tr.d2t_prepare(gold)?;
    let d2t = tr.vocab.decode(&tr.beam(&mem, &post.mu, &opts.d2t_beam)?.tokens);
    let serialized = formats::serialize(gold)?;
    let t2d = tr.t2d(text, format, &opts.t2d_beam)?;
    Ok(PairOutcome {
        reference_text: text.to_string(),
        gold: gold.clone(),
        d2t,
        d2t_identity: draft == tr.vocab.payload_ids(&serialized),
        t2d: t2d.record.ok(),
        diverse: None,
    })
}

fn map_jobs<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn diversity(tr: &Translator, pairs: &[(String, formats::StructuredRecord)], opts: &EvalOptions, k: usize) -> Result<(DiversitySummary, Vec<Vec<(f64, f64, f64)>>)> {
    if k < 2 {
        return Err(Error::TooFew { needed: 2, got: k });
    }
    // per seed, per pair: (self-BLEU, distinct-1, distinct-2)
    let mut per_seed = Vec::new();
    for &seed in &opts.diversity_seeds {
        let idx: Vec<usize> = (0..pairs.len()).collect();
        let scores = map_jobs(&idx, opts.jobs, |&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let g = tr.d2t_diverse(&pairs[i].1, k, &opts.diverse_beam, &mut rng)?;
            Ok((metrics::self_bleu(&g)?, metrics::distinct_n(&g, 1), metrics::distinct_n(&g, 2)))
        })?;
        per_seed.push(scores);
    }
    Ok((summarize(&per_seed, k), per_seed))
}

fn summarize(per_seed: &[Vec<(f64, f64, f64)>], k: usize) -> DiversitySummary {
    let mean = |v: &Vec<(f64, f64, f64)>, f: fn(&(f64, f64, f64)) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        }
    };
    let col = |f: fn(&(f64, f64, f64)) -> f64| MeanCi::of(&per_seed.iter().map(|v| mean(v, f)).collect::<Vec<_>>());
    DiversitySummary {
        k,
        seeds: per_seed.len(),
        self_bleu: col(|t| t.0),
        distinct1: col(|t| t.1),
        distinct2: col(|t| t.2),
    }
}

fn with_diversity(mut r: EvalReport, d: &DiversitySummary) -> EvalReport {
    r.self_bleu = Some(d.self_bleu.mean);
    r.distinct1 = Some(d.distinct1.mean);
    r.distinct2 = Some(d.distinct2.mean);
    r
}

/// Runs data-to-text and text-to-data over the held-out pairs of every
/// source and scores them, per source and pooled.
pub fn evaluate(model: &Model, vocab: &Vocab, sources: &[Source], opts: &EvalOptions) -> Result<Evaluation> {
    let tr = Translator::new(model, vocab);
    let mut all = Vec::new();
    let mut reports = Vec::new();
    let mut all_div: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); opts.diversity_seeds.len()];
    for s in sources {
        let n = opts.max_pairs.map_or(s.eval_pairs.len(), |m| m.min(s.eval_pairs.len()));
        let pairs = &s.eval_pairs[..n];
        let outs = map_jobs(pairs, opts.jobs, |(text, gold)| outcome(&tr, text, gold, s.format, opts))?;
        let mut report = metrics::report(&outs)?;
        let div = match opts.diversity_k {
            Some(k) if !pairs.is_empty() => {
                let (d, per_seed) = diversity(&tr, pairs, opts, k)?;
                for (acc, v) in all_div.iter_mut().zip(per_seed) {
                    acc.extend(v);
                }
                report = with_diversity(report, &d);
                Some(d)
            }
            _ => None,
        };
        reports.push(SourceReport {
            name: s.name.clone(),
            format: s.format,
            report,
            diversity: div,
        });
        all.extend(outs);
    }
    let mut aggregate = metrics::report(&all)?;
    let diversity = opts.diversity_k.filter(|_| !all.is_empty()).map(|k| summarize(&all_div, k));
    if let Some(d) = &diversity {
        aggregate = with_diversity(aggregate, d);
    }
    Ok(Evaluation {
        sources: reports,
        aggregate,
        diversity,
    })
}

/// Fraction (0–1) of greedy zero-style D2T drafts that reproduce their
/// serialized input token for token.
pub fn identity_fraction(model: &Model, vocab: &Vocab, sources: &[Source], max_pairs: Option<usize>) -> Result<f64> {
    let tr = Translator::new(model, vocab);
    let (mut hits, mut total) = (0usize, 0usize);
    for s in sources {
        let n = max_pairs.map_or(s.eval_pairs.len(), |m| m.min(s.eval_pairs.len()));
        for (_, rec) in &s.eval_pairs[..n] {
            let (_, draft, _) = tr.d2t_prepare(rec)?;
            hits += usize::from(draft == vocab.payload_ids(&formats::serialize(rec)?));
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Configuration of the small model used by [`gradient_check`].
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 24,
        d_style: 3,
        vocab_size: 24,
        max_len: 12,
        n_formats: FormatId::COUNT,
    }
}

/// Reconstruction in both directions plus λ·MMD on a fixed toy batch.
fn gradcheck_loss(m: &Model, tape: &mut Tape) -> Result<Var> {
    let src: Vec<Vec<u32>> = vec![vec![1, 6, 7, STYLE_ID, 12, 13, 2], vec![1, 6, 8, STYLE_ID, 14, 20, 21, 2]];
    let tgt: Vec<Vec<u32>> = vec![vec![1, 15, 16, 17, 2], vec![1, 18, 22, 2]];
    let src_r: Vec<&[u32]> = src.iter().map(Vec::as_slice).collect();
    let tgt_r: Vec<&[u32]> = tgt.iter().map(Vec::as_slice).collect();
    let ds = m.config.d_style;
    let enc = m.encode(tape, &src_r)?;
    let pos = Model::style_positions(&src_r)?;
    let (mu, lv) = m.style_posterior(tape, &enc, &pos)?;
    let eps = Tensor::from_fn(2, ds, |r, c| 0.4 * r as f64 - 0.3 * c as f64 + 0.2);
    let s = Model::reparameterize(tape, mu, lv, eps)?;
    let rec = m.decode_loss(tape, &enc, s, &tgt_r)?;
    let prior = Tensor::from_fn(3, ds, |r, c| ((r * ds + c) as f64 * 0.9).sin());
    let mmd = m.mmd_term(tape, s, prior)?;
    let mmd = tape.scale(mmd, 10.0);
    let enc2 = m.encode(tape, &tgt_r)?;
    let f = m.format_embedding(tape, &[FormatId::Kg, FormatId::Totto])?;
    let rec2 = m.decode_loss(tape, &enc2, f, &src_r)?;
    let a = tape.add(rec, mmd)?;
    tape.add(a, rec2)
}

/// Central finite differences against backpropagation for the full loss
/// on a d_model = 16 model, sampling `per_param` coordinates of every
/// parameter tensor.
pub fn gradient_check(seed: u64, per_param: usize, h: f64) -> Result<GradCheckReport> {
    let mut m = Model::new(gradcheck_model_config(), seed)?;
    let mut tape = Tape::new();
    let loss = gradcheck_loss(&m, &mut tape)?;
    tape.backward(loss)?;
    let mut analytic = m.params.clone();
    analytic.zero_grads();
    tape.accumulate_into(&mut analytic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let ids: Vec<ParamId> = m.params.ids().collect();
    let mut coords = Vec::new();
    for id in ids {
        let n = m.params.value(id).len();
        for i in sample(&mut rng, n, n.min(per_param)) {
            coords.push((id, i));
        }
    }
    let cfg = m.config.clone();
    gradcheck::check(&mut m.params, &analytic, &coords, h, |p| {
        let mm = Model::from_params(cfg.clone(), p)?;
        let mut t = Tape::new();
        let l = gradcheck_loss(&mm, &mut t)?;
        Ok(t.value(l).item())
    })
}
