//! Unsupervised training by denoising plus iterative back-translation, and
//! the supervised conditional-likelihood baseline.
//!
//! Every loss component runs on its own tape; gradients of all components
//! are accumulated in the parameter store and applied in one AdamW step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{next_batch, MixedBatch, Source, TaskPrefix, Vocab};
use crate::error::{Error, Result};
use crate::formats::{self, FormatId, StructuredRecord};
use crate::inference::{frame, frame_target, greedy};
use crate::model::{Model, ModelConfig};
use crate::nn::{checkpoint, AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::noise::{self, NoiseConfig, NoiseKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMode {
    /// `s = 0`, the prior mean.
    Zero,
    /// `s ~ N(0, I)`.
    Sample,
}

impl std::str::FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(StyleMode::Zero),
            "sample" => Ok(StyleMode::Sample),
            other => Err(Error::Config(format!("unknown style mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass over the larger of
    /// the text and record pools, summed over sources.
    pub steps_per_epoch: Option<usize>,
    pub temperature: f64,
    pub lambda_mmd: f64,
    pub noise: NoiseConfig,
    pub style_mode_for_bt: StyleMode,
    /// Denoising-only steps before the cycle losses join.
    pub warmup_steps: usize,
    /// Turning this off leaves the cycle losses alone (collapse ablation).
    pub denoising: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            steps_per_epoch: None,
            temperature: 2.0,
            lambda_mmd: 10.0,
            noise: NoiseConfig::default(),
            style_mode_for_bt: StyleMode::Zero,
            warmup_steps: 200,
            denoising: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return bad("learning_rate, epochs and batch_size must be positive");
        }
        if !(self.temperature > 0.0) || self.lambda_mmd < 0.0 {
            return bad("temperature must be positive and lambda_mmd non-negative");
        }
        self.noise.validate()
    }

    pub fn steps_per_epoch(&self, sources: &[Source]) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| {
            let items: usize = sources.iter().map(|s| s.texts.len().max(s.records.len())).sum();
            items.div_ceil(self.batch_size).max(1)
        })
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Per-token loss components of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub source: usize,
    pub denoising_text: f64,
    pub denoising_data: f64,
    /// `−L_x` reconstruction term, text side.
    pub cycle_text: f64,
    /// `−L_y` reconstruction term, data side.
    pub cycle_data: f64,
    pub mmd_term: f64,
    pub total: f64,
    /// Back-translation pairs dropped because the synthetic text was empty.
    pub skipped: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,epoch,source,denoising_text,denoising_data,cycle_text,cycle_data,mmd_term,total,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.step,
            self.epoch,
            self.source,
            self.denoising_text,
            self.denoising_data,
            self.cycle_text,
            self.cycle_data,
            self.mmd_term,
            self.total,
            self.skipped
        )
    }
}

/// Runs `loss` on a fresh tape, backpropagates and accumulates into the
/// model's gradients. Returns the loss value.
fn accumulate(model: &mut Model, loss: impl FnOnce(&Model, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    let value = tape.value(l).item();
    tape.backward(l)?;
    tape.accumulate_into(&mut model.params);
    Ok(value)
}

fn refs(v: &[Vec<u32>]) -> Vec<&[u32]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Tokenized training material of one batch.
struct Prepared {
    format: FormatId,
    texts: Vec<Vec<u32>>,
    records: Vec<Vec<u32>>,
    raw_texts: Vec<String>,
    raw_records: Vec<StructuredRecord>,
}

fn prepare(vocab: &Vocab, batch: &MixedBatch) -> Result<Prepared> {
    Ok(Prepared {
        format: batch.format,
        texts: batch.texts.iter().map(|t| vocab.payload_ids(t)).collect(),
        records: batch
            .records
            .iter()
            .map(|r| Ok(vocab.payload_ids(&formats::serialize(r)?)))
            .collect::<Result<_>>()?,
        raw_texts: batch.texts.clone(),
        raw_records: batch.records.clone(),
    })
}

/// Loss of generating `targets` (text payloads) from encoder `inputs`
/// framed with the text prefix, under styles `cond` `[B, d_style]`.
pub fn text_loss(model: &Model, vocab: &Vocab, tape: &mut Tape, inputs: &[Vec<u32>], targets: &[Vec<u32>], cond: Var) -> Result<Var> {
    let ml = model.config.max_len;
    let enc_in: Vec<Vec<u32>> = inputs.iter().map(|p| frame(vocab, p, TaskPrefix::Text, false, ml)).collect();
    let tgt: Vec<Vec<u32>> = targets.iter().map(|p| frame_target(p, ml)).collect();
    let enc = model.encode(tape, &refs(&enc_in))?;
    model.decode_loss(tape, &enc, cond, &refs(&tgt))
}

/// Loss of generating record payloads from `inputs` framed with the data
/// prefix, conditioned on the format embedding.
pub fn data_loss(model: &Model, vocab: &Vocab, tape: &mut Tape, inputs: &[Vec<u32>], targets: &[Vec<u32>], format: FormatId) -> Result<Var> {
    let ml = model.config.max_len;
    let enc_in: Vec<Vec<u32>> = inputs.iter().map(|p| frame(vocab, p, TaskPrefix::Data, false, ml)).collect();
    let tgt: Vec<Vec<u32>> = targets.iter().map(|p| frame_target(p, ml)).collect();
    let enc = model.encode(tape, &refs(&enc_in))?;
    let cond = model.format_embedding(tape, &vec![format; inputs.len()])?;
    model.decode_loss(tape, &enc, cond, &refs(&tgt))
}

/// Text reconstruction with a style drawn from `q(s|x)` of the target text,
/// plus the MMD penalty against prior samples. Returns `(nll, mmd)`.
#[allow(clippy::too_many_arguments)]
pub fn styled_text_loss(
    model: &Model,
    vocab: &Vocab,
    tape: &mut Tape,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    eps: Tensor,
    prior: Tensor,
) -> Result<(Var, Var)> {
    let ml = model.config.max_len;
    let style_in: Vec<Vec<u32>> = targets.iter().map(|p| frame(vocab, p, TaskPrefix::Text, true, ml)).collect();
    let style_refs = refs(&style_in);
    let pos = Model::style_positions(&style_refs)?;
    let senc = model.encode(tape, &style_refs)?;
    let (mu, lv) = model.style_posterior(tape, &senc, &pos)?;
    let s = Model::reparameterize(tape, mu, lv, eps)?;
    let nll = text_loss(model, vocab, tape, inputs, targets, s)?;
    let mmd = model.mmd_term(tape, s, prior)?;
    Ok((nll, mmd))
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn zeros_cond(tape: &mut Tape, rows: usize, d_style: usize) -> Var {
    tape.constant(Tensor::zeros(&[rows, d_style]))
}

/// Greedy synthetic texts for record payloads (no gradient).
pub fn synthesize_texts<R: Rng + ?Sized>(model: &Model, vocab: &Vocab, records: &[Vec<u32>], mode: StyleMode, rng: &mut R) -> Result<Vec<Vec<u32>>> {
    let ml = model.config.max_len;
    let inputs: Vec<Vec<u32>> = records.iter().map(|p| frame(vocab, p, TaskPrefix::Text, false, ml)).collect();
    let mems = model.encode_plain(&refs(&inputs))?;
    let conds: Vec<Vec<f64>> = (0..records.len())
        .map(|_| match mode {
            StyleMode::Zero => model.zero_style(),
            StyleMode::Sample => (0..model.config.d_style).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let mut st = model.start_decoding(&mems, &conds)?;
    Ok(greedy(&mut st, records.len(), ml - 1)?.into_iter().map(|h| h.tokens).collect())
}

/// Greedy synthetic records for text payloads (no gradient).
pub fn synthesize_records(model: &Model, vocab: &Vocab, texts: &[Vec<u32>], format: FormatId) -> Result<Vec<Vec<u32>>> {
    let ml = model.config.max_len;
    let inputs: Vec<Vec<u32>> = texts.iter().map(|p| frame(vocab, p, TaskPrefix::Data, false, ml)).collect();
    let mems = model.encode_plain(&refs(&inputs))?;
    let conds = vec![model.format_vector(format); texts.len()];
    let mut st = model.start_decoding(&mems, &conds)?;
    Ok(greedy(&mut st, texts.len(), ml - 1)?.into_iter().map(|h| h.tokens).collect())
}

/// One-step trainer state: model, optimizer, vocabulary and RNG stream.
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, vocab: Vocab, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(model_config, rng.random())?;
        let optimizer = AdamW::new(config.optimizer(), &model.params);
        Ok(Trainer {
            model,
            vocab,
            config,
            optimizer,
            rng,
            step: 0,
        })
    }

    /// Denoising terms of Eq. 13 for one batch; accumulates gradients and
    /// returns `(text, data)` per-token losses.
    pub fn denoising_step(&mut self, batch: &MixedBatch) -> Result<(f64, f64)> {
        let p = prepare(&self.vocab, batch)?;
        let cfg = self.config.noise.clone();
        let rule = cfg.is_enabled(NoiseKind::Rule) && cfg.rule_rate > 0.0;
        let mut text_in = Vec::new();
        for (ids, raw) in p.texts.iter().zip(&p.raw_texts) {
            let pair = if rule && self.rng.random_bool(cfg.rule_rate) {
                noise::rule_noise_text_to_data(raw, p.format, &mut self.rng).ok()
            } else {
                None
            };
            text_in.push(match pair {
                Some((_, pseudo)) => self.vocab.payload_ids(&pseudo),
                None => noise::corrupt(ids, &cfg, &self.vocab, &mut self.rng),
            });
        }
        let mut data_in = Vec::new();
        for (ids, raw) in p.records.iter().zip(&p.raw_records) {
            data_in.push(if rule && self.rng.random_bool(cfg.rule_rate) {
                let (_, pseudo) = noise::rule_noise_data_to_text(raw)?;
                self.vocab.payload_ids(&pseudo)
            } else {
                noise::corrupt(ids, &cfg, &self.vocab, &mut self.rng)
            });
        }
        let vocab = &self.vocab;
        let d_style = self.model.config.d_style;
        let lt = if p.texts.is_empty() {
            0.0
        } else {
            accumulate(&mut self.model, |m, tape| {
                let cond = zeros_cond(tape, text_in.len(), d_style);
                text_loss(m, vocab, tape, &text_in, &p.texts, cond)
            })?
        };
        let ld = if p.records.is_empty() {
            0.0
        } else {
            accumulate(&mut self.model, |m, tape| data_loss(m, vocab, tape, &data_in, &p.records, p.format))?
        };
        Ok((lt, ld))
    }

    /// T2D cycle `y → x̂ → y`: returns the data-side loss, the synthetic
    /// texts used and the number of skipped pairs.
    pub fn t2d_cycle_step(&mut self, batch: &MixedBatch) -> Result<(f64, Vec<Vec<u32>>, usize)> {
        let p = prepare(&self.vocab, batch)?;
        let synth = synthesize_texts(&self.model, &self.vocab, &p.records, self.config.style_mode_for_bt, &mut self.rng)?;
        let (inputs, targets): (Vec<_>, Vec<_>) = synth
            .iter()
            .zip(&p.records)
            .filter(|(x, _)| !x.is_empty())
            .map(|(x, y)| (x.clone(), y.clone()))
            .unzip();
        let skipped = synth.len() - inputs.len();
        if inputs.is_empty() {
            return Ok((0.0, synth, skipped));
        }
        let vocab = &self.vocab;
        let l = accumulate(&mut self.model, |m, tape| data_loss(m, vocab, tape, &inputs, &targets, p.format))?;
        Ok((l, synth, skipped))
    }

    /// D2T cycle `x → ŷ → x` with style posterior and MMD: returns
    /// `(reconstruction, mmd)` and the synthetic records used.
    pub fn d2t_cycle_step(&mut self, batch: &MixedBatch) -> Result<(f64, f64, Vec<Vec<u32>>)> {
        let p = prepare(&self.vocab, batch)?;
        if p.texts.is_empty() {
            return Ok((0.0, 0.0, Vec::new()));
        }
        let synth = synthesize_records(&self.model, &self.vocab, &p.texts, p.format)?;
        let ds = self.model.config.d_style;
        let eps = normal_matrix(p.texts.len(), ds, &mut self.rng);
        let prior = normal_matrix(p.texts.len(), ds, &mut self.rng);
        let lambda = self.config.lambda_mmd;
        let vocab = &self.vocab;
        let mut parts = (0.0, 0.0);
        accumulate(&mut self.model, |m, tape| {
            let (nll, mmd) = styled_text_loss(m, vocab, tape, &synth, &p.texts, eps, prior)?;
            parts = (tape.value(nll).item(), tape.value(mmd).item());
            let weighted = tape.scale(mmd, lambda);
            tape.add(nll, weighted)
        })?;
        Ok((parts.0, parts.1, synth))
    }

    /// One iteration of the training loop: draw a batch, accumulate all
    /// enabled terms, take one optimizer step.
    pub fn train_step(&mut self, sources: &[Source]) -> Result<LossReport> {
        let batch = next_batch(sources, self.config.batch_size, self.config.temperature, &mut self.rng);
        let mut r = LossReport {
            step: self.step,
            source: batch.source_index,
            ..LossReport::default()
        };
        if self.config.denoising {
            let (t, d) = self.denoising_step(&batch)?;
            r.denoising_text = t;
            r.denoising_data = d;
        }
        if self.step >= self.config.warmup_steps || !self.config.denoising {
            let (ly, _, skipped) = self.t2d_cycle_step(&batch)?;
            let (lx, mmd, _) = self.d2t_cycle_step(&batch)?;
            r.cycle_data = ly;
            r.cycle_text = lx;
            r.mmd_term = mmd;
            r.skipped = skipped;
        }
        r.total = r.denoising_text + r.denoising_data + r.cycle_text + r.cycle_data + self.config.lambda_mmd * r.mmd_term;
        self.check_finite(&r)?;
        self.optimizer.step(&mut self.model.params);
        self.step += 1;
        Ok(r)
    }

    fn check_finite(&self, r: &LossReport) -> Result<()> {
        for (name, v) in [
            ("denoising_text", r.denoising_text),
            ("denoising_data", r.denoising_data),
            ("cycle_text", r.cycle_text),
            ("cycle_data", r.cycle_data),
            ("mmd_term", r.mmd_term),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.into(),
                    step: self.step,
                });
            }
        }
        Ok(())
    }

    /// Supervised step on aligned pairs of one source: both directions by
    /// direct conditional likelihood, text side with style and MMD.
    pub fn supervised_step(&mut self, pairs: &[(String, StructuredRecord)], format: FormatId) -> Result<LossReport> {
        let texts: Vec<Vec<u32>> = pairs.iter().map(|(t, _)| self.vocab.payload_ids(t)).collect();
        let records: Vec<Vec<u32>> = pairs
            .iter()
            .map(|(_, r)| Ok(self.vocab.payload_ids(&formats::serialize(r)?)))
            .collect::<Result<_>>()?;
        let ds = self.model.config.d_style;
        let eps = normal_matrix(pairs.len(), ds, &mut self.rng);
        let prior = normal_matrix(pairs.len(), ds, &mut self.rng);
        let lambda = self.config.lambda_mmd;
        let vocab = &self.vocab;
        let mut parts = (0.0, 0.0);
        accumulate(&mut self.model, |m, tape| {
            let (nll, mmd) = styled_text_loss(m, vocab, tape, &records, &texts, eps, prior)?;
            parts = (tape.value(nll).item(), tape.value(mmd).item());
            let weighted = tape.scale(mmd, lambda);
            tape.add(nll, weighted)
        })?;
        let ly = accumulate(&mut self.model, |m, tape| data_loss(m, vocab, tape, &texts, &records, format))?;
        let r = LossReport {
            step: self.step,
            cycle_text: parts.0,
            mmd_term: parts.1,
            cycle_data: ly,
            total: parts.0 + ly + lambda * parts.1,
            ..LossReport::default()
        };
        self.check_finite(&r)?;
        self.optimizer.step(&mut self.model.params);
        self.step += 1;
        Ok(r)
    }
}

/// Metadata stored next to checkpoints so a run directory is self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Always [`CONFIG_SCHEMA`].
    pub schema: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub supervised: bool,
}

pub const CONFIG_FILE: &str = "config.json";
/// Version tag of `config.json`, shared with the checkpoint magic.
pub const CONFIG_SCHEMA: &str = "CTXT1";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOSSES_FILE: &str = "losses.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}")
}

/// A trained model with its vocabulary and loss history.
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocab,
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_run_header(out: &Path, run: &RunConfig, vocab: &Vocab) -> Result<fs::File> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(run)?)?;
    fs::write(out.join(VOCAB_FILE), serde_json::to_string(vocab)?)?;
    let mut f = fs::File::create(out.join(LOSSES_FILE))?;
    writeln!(f, "{}", LossReport::CSV_HEADER)?;
    Ok(f)
}

/// Loads the model and vocabulary of a checkpoint inside a run directory.
pub fn load_run(ckpt: &Path) -> Result<(Model, Vocab, RunConfig)> {
    let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
    let run: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    if run.schema != CONFIG_SCHEMA {
        return Err(Error::Checkpoint(format!("config schema `{}`, expected `{CONFIG_SCHEMA}`", run.schema)));
    }
    let vocab = Vocab::from_json(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    let params = checkpoint::load(ckpt)?;
    let model = Model::from_params(run.model.clone(), &params)?;
    Ok((model, vocab, run))
}

/// Observer of training progress: called after every step.
pub type Progress<'a> = &'a mut dyn FnMut(&LossReport);

/// Unsupervised training over `sources`. When `out` is given, writes
/// `config.json`, `vocab.json`, `losses.csv` and one checkpoint per epoch.
pub fn train(sources: &[Source], vocab: Vocab, model_config: ModelConfig, cfg: &TrainConfig, out: Option<&Path>, progress: Option<Progress>) -> Result<TrainOutcome> {
    run_training(sources, vocab, model_config, cfg, out, progress, false)
}

/// Supervised baseline on the aligned training pairs of every source.
pub fn train_supervised(sources: &[Source], vocab: Vocab, model_config: ModelConfig, cfg: &TrainConfig, out: Option<&Path>, progress: Option<Progress>) -> Result<TrainOutcome> {
    if sources.iter().all(|s| s.train_pairs.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    run_training(sources, vocab, model_config, cfg, out, progress, true)
}

fn run_training(
    sources: &[Source],
    vocab: Vocab,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut progress: Option<Progress>,
    supervised: bool,
) -> Result<TrainOutcome> {
    if sources.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model_config = model_config;
    model_config.vocab_size = vocab.len();
    let run = RunConfig {
        schema: CONFIG_SCHEMA.to_string(),
        model: model_config.clone(),
        train: cfg.clone(),
        supervised,
    };
    let mut log = match out {
        Some(dir) => Some(write_run_header(dir, &run, &vocab)?),
        None => None,
    };
    let mut trainer = Trainer::new(model_config, vocab, cfg.clone())?;
    let steps = if supervised {
        let pooled: Vec<Source> = sources
            .iter()
            .map(|s| Source {
                texts: s.train_pairs.iter().map(|(t, _)| t.clone()).collect(),
                records: Vec::new(),
                ..s.clone()
            })
            .collect();
        cfg.steps_per_epoch(&pooled)
    } else {
        cfg.steps_per_epoch(sources)
    };
    let sizes: Vec<usize> = sources.iter().map(|s| s.train_pairs.len()).collect();
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.epochs {
        for _ in 0..steps {
            let mut r = if supervised {
                let probs = crate::corpus::source_probabilities(&sizes, cfg.temperature);
                let u: f64 = trainer.rng.random();
                let mut acc = 0.0;
                let mut i = probs.len() - 1;
                for (j, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        i = j;
                        break;
                    }
                }
                let src = &sources[i];
                let n = cfg.batch_size.min(src.train_pairs.len());
                let picks = rand::seq::index::sample(&mut trainer.rng, src.train_pairs.len(), n);
                let pairs: Vec<_> = picks.into_iter().map(|j| src.train_pairs[j].clone()).collect();
                let mut r = trainer.supervised_step(&pairs, src.format)?;
                r.source = i;
                r
            } else {
                trainer.train_step(sources)?
            };
            r.epoch = epoch;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", r.csv_row())?;
            }
            if let Some(cb) = progress.as_mut() {
                cb(&r);
            }
            reports.push(r);
        }
        if let Some(dir) = out {
            let path = dir.join(checkpoint_name(epoch));
            checkpoint::save(&path, &trainer.model.params)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        vocab: trainer.vocab,
        reports,
        checkpoints,
    })
}
