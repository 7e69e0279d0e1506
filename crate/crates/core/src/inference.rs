//! Greedy and beam decoding, text-to-data conversion and the two-step
//! data-to-text procedure with style inference.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskPrefix, Vocab, BOS_ID, EOS_ID, STYLE_ID};
use crate::error::{Error, FormatError, Result};
use crate::formats::{self, FormatId, StructuredRecord};
use crate::model::{DecodeState, Model, StylePosterior};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub n_beams: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// α in `score = logprob / len^α`.
    pub length_penalty: f64,
}

impl BeamConfig {
    pub fn d2t_default(max_len: usize) -> Self {
        BeamConfig {
            n_beams: 5,
            max_len,
            length_penalty: 0.0,
        }
    }

    pub fn t2d_default(max_len: usize) -> Self {
        BeamConfig {
            n_beams: 8,
            max_len,
            length_penalty: 0.0,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        BeamConfig {
            n_beams: 1,
            max_len,
            length_penalty: 0.0,
        }
    }
}

/// A decoded payload (no BOS/EOS) with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length including EOS when finished.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.logprob
        } else {
            self.logprob / (self.length().max(1) as f64).powf(alpha)
        }
    }
}

/// Anything that turns one token per row into next-token logits and can
/// reorder its rows.
pub trait IncrementalDecoder {
    fn step(&mut self, tokens: &[u32]) -> Result<Tensor>;
    fn select(&mut self, parents: &[usize]);
}

impl IncrementalDecoder for DecodeState<'_> {
    fn step(&mut self, tokens: &[u32]) -> Result<Tensor> {
        DecodeState::step(self, tokens)
    }

    fn select(&mut self, parents: &[usize]) {
        DecodeState::select(self, parents)
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of every row of `dec` at once.
pub fn greedy<D: IncrementalDecoder>(dec: &mut D, n_rows: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    let mut out: Vec<Hypothesis> = (0..n_rows)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
        })
        .collect();
    let mut alive: Vec<usize> = (0..n_rows).collect();
    let mut last = vec![BOS_ID; n_rows];
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let logits = dec.step(&last)?;
        let mut keep = Vec::new();
        let mut next_alive = Vec::new();
        let mut next_last = Vec::new();
        for (r, &item) in alive.iter().enumerate() {
            let row = logits.row(r);
            let tok = argmax(row);
            let h = &mut out[item];
            h.logprob += log_softmax(row)[tok];
            if tok as u32 == EOS_ID {
                h.finished = true;
            } else {
                h.tokens.push(tok as u32);
                keep.push(r);
                next_alive.push(item);
                next_last.push(tok as u32);
            }
        }
        if keep.len() != alive.len() {
            dec.select(&keep);
        }
        alive = next_alive;
        last = next_last;
    }
    Ok(out)
}

/// Beam search over a decoder holding a single row.
pub fn beam_search<D: IncrementalDecoder>(dec: &mut D, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.n_beams == 0 {
        return Err(Error::Config("n_beams must be at least 1".into()));
    }
    let k = cfg.n_beams;
    let alpha = cfg.length_penalty;
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut last = vec![BOS_ID];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let logits = dec.step(&last)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lp = log_softmax(logits.row(b));
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&i, &j| lp[j].total_cmp(&lp[i]).then(i.cmp(&j)));
            for &t in idx.iter().take(k) {
                cands.push((beam.logprob + lp[t], b, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (rank, &(lp, b, t)) in cands.iter().enumerate() {
            if next.len() == k {
                break;
            }
            let mut h = beams[b].clone();
            h.logprob = lp;
            if t as u32 == EOS_ID {
                if rank < k {
                    h.finished = true;
                    finished.push(h);
                }
            } else {
                h.tokens.push(t as u32);
                next.push(h);
                parents.push(b);
            }
        }
        if next.is_empty() {
            beams = next;
            break;
        }
        let best_finished = finished.iter().map(|h| h.score(alpha)).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = next.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        last = next.iter().map(|h| *h.tokens.last().expect("alive beam has a token")).collect();
        beams = next;
        // With α = 0 extensions only lower scores, so a finished hypothesis
        // at least as good as every live beam is final.
        if finished.len() >= k || (alpha == 0.0 && best_finished >= best_alive) {
            break;
        }
        dec.select(&parents);
    }
    let pool = if finished.is_empty() { beams } else { finished };
    pool.into_iter()
        .reduce(|a, b| if b.score(alpha) > a.score(alpha) { b } else { a })
        .ok_or_else(|| Error::Config("beam search produced no hypothesis".into()))
}

/// Encoder input with BOS, task prefix, optional `[STYLE]`, payload and
/// EOS; the payload is truncated to fit `max_len`.
pub fn frame(vocab: &Vocab, payload: &[u32], prefix: TaskPrefix, style: bool, max_len: usize) -> Vec<u32> {
    let overhead = 4 + usize::from(style);
    let n = payload.len().min(max_len.saturating_sub(overhead));
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.prefix_ids(prefix));
    if style {
        ids.push(STYLE_ID);
    }
    ids.extend(&payload[..n]);
    ids.push(EOS_ID);
    ids
}

/// Decoder target BOS, payload, EOS (payload truncated to fit).
pub fn frame_target(payload: &[u32], max_len: usize) -> Vec<u32> {
    let n = payload.len().min(max_len.saturating_sub(2));
    let mut ids = vec![BOS_ID];
    ids.extend(&payload[..n]);
    ids.push(EOS_ID);
    ids
}

/// Outcome of text-to-data conversion: the raw decoded string and its parse.
#[derive(Clone, Debug, PartialEq)]
pub struct T2dOutput {
    pub raw: String,
    pub record: std::result::Result<StructuredRecord, FormatError>,
}

/// Conversion front-end binding a model to its vocabulary.
pub struct Translator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
}

impl<'a> Translator<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab) -> Self {
        Translator { model, vocab }
    }

    fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn gen_len(&self) -> usize {
        self.max_len() - 1
    }

    fn input(&self, text: &str, prefix: TaskPrefix, style: bool) -> Vec<u32> {
        frame(self.vocab, &self.vocab.payload_ids(text), prefix, style, self.max_len())
    }

    /// Greedy decodes for a batch of framed inputs under the given conditions.
    pub fn greedy_batch(&self, inputs: &[Vec<u32>], conds: &[Vec<f64>]) -> Result<Vec<Hypothesis>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let mems = self.model.encode_plain(&refs)?;
        let mut st = self.model.start_decoding(&mems, conds)?;
        greedy(&mut st, inputs.len(), self.gen_len())
    }

    pub fn beam(&self, memory: &Tensor, cond: &[f64], beam: &BeamConfig) -> Result<Hypothesis> {
        let mut st = self.model.start_decoding(std::slice::from_ref(memory), &[cond.to_vec()])?;
        let cfg = BeamConfig {
            max_len: beam.max_len.min(self.gen_len()),
            ..beam.clone()
        };
        beam_search(&mut st, &cfg)
    }

    /// Text to record under the format embedding of `format`.
    pub fn t2d(&self, text: &str, format: FormatId, beam: &BeamConfig) -> Result<T2dOutput> {
        let input = self.input(text, TaskPrefix::Data, false);
        let mem = self.model.encode_plain(&[&input])?.remove(0);
        let h = self.beam(&mem, &self.model.format_vector(format), beam)?;
        let raw = self.vocab.decode(&h.tokens);
        let record = formats::parse(&raw, format);
        Ok(T2dOutput { raw, record })
    }

    /// Style posteriors of texts given as token payloads.
    pub fn style_of(&self, payloads: &[Vec<u32>]) -> Result<Vec<StylePosterior>> {
        let inputs: Vec<Vec<u32>> = payloads
            .iter()
            .map(|p| frame(self.vocab, p, TaskPrefix::Text, true, self.max_len()))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        self.model.style_posterior_plain(&refs)
    }

    /// Steps (1) and (2) of data-to-text inference: the record's encoder
    /// memory and the style posterior of a greedy zero-style draft.
    pub fn d2t_prepare(&self, record: &StructuredRecord) -> Result<(Tensor, Vec<u32>, StylePosterior)> {
        let input = self.input(&formats::serialize(record)?, TaskPrefix::Text, false);
        let mem = self.model.encode_plain(&[&input])?.remove(0);
        let mut st = self.model.start_decoding(std::slice::from_ref(&mem), &[self.model.zero_style()])?;
        let draft = greedy(&mut st, 1, self.gen_len())?.remove(0).tokens;
        let post = self.style_of(std::slice::from_ref(&draft))?.remove(0);
        Ok((mem, draft, post))
    }

    /// Deterministic data-to-text: decode with the posterior mean style.
    pub fn d2t(&self, record: &StructuredRecord, beam: &BeamConfig) -> Result<String> {
        let (mem, _, post) = self.d2t_prepare(record)?;
        let h = self.beam(&mem, &post.mu, beam)?;
        Ok(self.vocab.decode(&h.tokens))
    }

    /// Only step (1): the zero-style greedy draft.
    pub fn d2t_draft(&self, record: &StructuredRecord) -> Result<String> {
        let (_, draft, _) = self.d2t_prepare(record)?;
        Ok(self.vocab.decode(&draft))
    }

    /// `k` decodes with styles sampled from the draft's posterior.
    pub fn d2t_diverse<R: Rng + ?Sized>(&self, record: &StructuredRecord, k: usize, beam: &BeamConfig, rng: &mut R) -> Result<Vec<String>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let (mem, _, post) = self.d2t_prepare(record)?;
        (0..k)
            .map(|_| {
                let eps: Vec<f64> = (0..post.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
                let s = sample_with(&post, &eps);
                let h = self.beam(&mem, &s, beam)?;
                Ok(self.vocab.decode(&h.tokens))
            })
            .collect()
    }
}

/// `μ + exp(½ log σ²) ⊙ ε` for a given `ε`.
pub fn sample_with(post: &StylePosterior, eps: &[f64]) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// First-order Markov toy: logits depend only on the previous token.
    struct Markov {
        table: Vec<Vec<f64>>,
    }

    impl IncrementalDecoder for Markov {
        fn step(&mut self, tokens: &[u32]) -> Result<Tensor> {
            let v = self.table[0].len();
            Tensor::matrix(tokens.len(), v, tokens.iter().flat_map(|&t| self.table[t as usize].clone()).collect())
        }

        fn select(&mut self, _parents: &[usize]) {}
    }

    // tokens: 0 pad, 1 BOS, 2 EOS, 3 a, 4 b
    fn toy() -> Markov {
        let n = f64::NEG_INFINITY;
        Markov {
            table: vec![
                vec![n, n, 0.0, n, n],
                vec![n, n, (0.1f64).ln(), (0.5f64).ln(), (0.4f64).ln()],
                vec![n, n, 0.0, n, n],
                vec![n, n, (0.3f64).ln(), (0.35f64).ln(), (0.35f64).ln()],
                vec![n, n, (0.9f64).ln(), (0.05f64).ln(), (0.05f64).ln()],
            ],
        }
    }

    fn enumerate(m: &Markov, max_len: usize) -> (Vec<u32>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 1u32, 0.0)];
        while let Some((toks, last, lp)) = stack.pop() {
            let row = log_softmax(&m.table[last as usize]);
            if toks.len() + 1 <= max_len {
                let end = lp + row[EOS_ID as usize];
                if end > best.1 {
                    best = (toks.clone(), end);
                }
            }
            if toks.len() + 1 < max_len {
                for t in 3..5u32 {
                    let mut next = toks.clone();
                    next.push(t);
                    stack.push((next, t, lp + row[t as usize]));
                }
            }
        }
        best
    }

    #[test]
    fn beam_finds_exhaustive_optimum_where_greedy_fails() {
        let mut m = toy();
        let g = greedy(&mut m, 1, 6).unwrap().remove(0);
        assert_eq!(g.tokens, vec![3; 6]);
        assert!(!g.finished);
        let (best, lp) = enumerate(&toy(), 6);
        assert_eq!(best, vec![4]);
        let h = beam_search(&mut toy(), &BeamConfig { n_beams: 2, max_len: 6, length_penalty: 0.0 }).unwrap();
        assert_eq!(h.tokens, best);
        assert!((h.logprob - lp).abs() < 1e-12);
        assert!(h.score(0.0) >= g.logprob);
    }

    #[test]
    fn one_beam_is_greedy() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            d_style: 2,
            vocab_size: 30,
            max_len: 16,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 3).unwrap();
        for seed in 0..5u32 {
            let input: Vec<u32> = vec![1, 6, 7, 10 + seed, 12, 2];
            let mem = model.encode_plain(&[&input]).unwrap();
            let cond = vec![vec![0.3 * seed as f64, -0.2]];
            let mut st = model.start_decoding(&mem, &cond).unwrap();
            let g = greedy(&mut st, 1, 15).unwrap().remove(0);
            let mut st = model.start_decoding(&mem, &cond).unwrap();
            let b = beam_search(&mut st, &BeamConfig::greedy(15)).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!((g.logprob - b.logprob).abs() < 1e-12);
            let mut prev = b.logprob;
            for n in [2, 4, 8] {
                let mut st = model.start_decoding(&mem, &cond).unwrap();
                let h = beam_search(&mut st, &BeamConfig { n_beams: n, max_len: 15, length_penalty: 0.0 }).unwrap();
                assert!(h.logprob >= g.logprob - 1e-12);
                assert!(h.logprob >= prev - 1e-12);
                prev = h.logprob;
            }
        }
    }

    #[test]
    fn batched_greedy_matches_single() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            d_style: 2,
            vocab_size: 30,
            max_len: 16,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 8).unwrap();
        let inputs: Vec<Vec<u32>> = (0..4).map(|i| vec![1, 6, 7, 10 + i, 20 - i, 2]).collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let mems = model.encode_plain(&refs).unwrap();
        let conds = vec![vec![0.0, 0.0]; 4];
        let mut st = model.start_decoding(&mems, &conds).unwrap();
        let all = greedy(&mut st, 4, 15).unwrap();
        for i in 0..4 {
            let mut st = model.start_decoding(&mems[i..=i], &conds[i..=i]).unwrap();
            assert_eq!(greedy(&mut st, 1, 15).unwrap()[0], all[i]);
        }
    }

    #[test]
    fn frame_truncates_payload() {
        let v = Vocab::reserved_only();
        let ids = frame(&v, &[20; 100], TaskPrefix::Text, true, 16);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[3], STYLE_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(frame_target(&[20; 100], 16).len(), 16);
    }
}
