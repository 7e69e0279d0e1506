//! Corruption functions for the denoising objective.
//!
//! The structural noises act on token-id payloads (no BOS/EOS). Grammar
//! tokens of serialized records never move, vanish, get blanked or repeat.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Vocab, BLANK_ID};
use crate::error::{Error, Result};
use crate::formats::{self, FormatId, StructuredRecord, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Swap,
    Drop,
    Blank,
    Repeat,
    Rule,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "swap" => NoiseKind::Swap,
            "drop" => NoiseKind::Drop,
            "blank" => NoiseKind::Blank,
            "repeat" => NoiseKind::Repeat,
            "rule" => NoiseKind::Rule,
            other => return Err(Error::Config(format!("unknown noise function `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_blank: f64,
    pub p_repeat: f64,
    pub swap_window: usize,
    /// Probability that a denoising item is replaced by a rule pair.
    pub rule_rate: f64,
    pub enabled: BTreeSet<NoiseKind>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_drop: 0.1,
            p_blank: 0.2,
            p_repeat: 0.2,
            swap_window: 3,
            rule_rate: 0.2,
            enabled: [NoiseKind::Swap, NoiseKind::Drop, NoiseKind::Blank, NoiseKind::Repeat, NoiseKind::Rule]
                .into_iter()
                .collect(),
        }
    }
}

impl NoiseConfig {
    /// No corruption at all: denoising becomes plain autoencoding.
    pub fn none() -> Self {
        NoiseConfig {
            p_drop: 0.0,
            p_blank: 0.0,
            p_repeat: 0.0,
            swap_window: 1,
            rule_rate: 0.0,
            enabled: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_drop", self.p_drop),
            ("p_blank", self.p_blank),
            ("p_repeat", self.p_repeat),
            ("rule_rate", self.rule_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.swap_window < 1 {
            return Err(Error::Config("swap_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_enabled(&self, kind: NoiseKind) -> bool {
        self.enabled.contains(&kind)
    }
}

/// Bounded local shuffle: each maximal run of content tokens is reordered by
/// sorting on `i + U(0, window + 1)`, so no token moves more than `window`
/// places. Structural tokens stay where they are.
pub fn swap<R: Rng + ?Sized>(seq: &[u32], window: usize, vocab: &Vocab, rng: &mut R) -> Vec<u32> {
    let mut out = seq.to_vec();
    let mut start = 0;
    while start < seq.len() {
        if vocab.is_structural(seq[start]) {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < seq.len() && !vocab.is_structural(seq[end]) {
            end += 1;
        }
        if end - start > 1 {
            let mut keys: Vec<(f64, usize)> = (start..end)
                .map(|i| ((i - start) as f64 + rng.random::<f64>() * (window as f64 + 1.0), i))
                .collect();
            keys.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (k, (_, i)) in keys.into_iter().enumerate() {
                out[start + k] = seq[i];
            }
        }
        start = end;
    }
    out
}

/// Removes each content token with probability `p`; at least one content
/// token survives when there was one.
pub fn drop<R: Rng + ?Sized>(seq: &[u32], p: f64, vocab: &Vocab, rng: &mut R) -> Vec<u32> {
    let mut keep: Vec<bool> = seq
        .iter()
        .map(|&t| vocab.is_structural(t) || !rng.random_bool(p))
        .collect();
    let content: Vec<usize> = (0..seq.len()).filter(|&i| !vocab.is_structural(seq[i])).collect();
    if !content.is_empty() && content.iter().all(|&i| !keep[i]) {
        keep[content[rng.random_range(0..content.len())]] = true;
    }
    seq.iter().zip(keep).filter(|(_, k)| *k).map(|(&t, _)| t).collect()
}

pub fn blank<R: Rng + ?Sized>(seq: &[u32], p: f64, vocab: &Vocab, rng: &mut R) -> Vec<u32> {
    seq.iter()
        .map(|&t| if !vocab.is_structural(t) && rng.random_bool(p) { BLANK_ID } else { t })
        .collect()
}

pub fn repeat<R: Rng + ?Sized>(seq: &[u32], p: f64, vocab: &Vocab, rng: &mut R) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len() * 2);
    for &t in seq {
        out.push(t);
        if !vocab.is_structural(t) && rng.random_bool(p) {
            out.push(t);
        }
    }
    out
}

/// Applies the enabled structural noises in the order swap, drop, blank, repeat.
pub fn corrupt<R: Rng + ?Sized>(seq: &[u32], config: &NoiseConfig, vocab: &Vocab, rng: &mut R) -> Vec<u32> {
    let mut s = seq.to_vec();
    if config.is_enabled(NoiseKind::Swap) {
        s = swap(&s, config.swap_window, vocab, rng);
    }
    if config.is_enabled(NoiseKind::Drop) && config.p_drop > 0.0 {
        s = drop(&s, config.p_drop, vocab, rng);
    }
    if config.is_enabled(NoiseKind::Blank) && config.p_blank > 0.0 {
        s = blank(&s, config.p_blank, vocab, rng);
    }
    if config.is_enabled(NoiseKind::Repeat) && config.p_repeat > 0.0 {
        s = repeat(&s, config.p_repeat, vocab, rng);
    }
    s
}

/// `(serialized record, rule pseudo-text)`.
pub fn rule_noise_data_to_text(record: &StructuredRecord) -> Result<(String, String)> {
    Ok((formats::serialize(record)?, formats::rule_text(record)))
}

/// `(text, serialized pseudo-record)`: one to three triples built from
/// increasing token positions `i < j < k` of the text.
pub fn rule_noise_text_to_data<R: Rng + ?Sized>(text: &str, format: FormatId, rng: &mut R) -> Result<(String, String)> {
    let tokens = tokenize(text);
    let n = tokens.len();
    if n < 3 {
        return Err(Error::TooShort(n));
    }
    let n_triples = rng.random_range(1..=3);
    let mut triples: Vec<Triple> = Vec::new();
    let mut attempts = 0;
    while triples.len() < n_triples && attempts < 64 {
        attempts += 1;
        let mut pos = sample_indices(rng, n, 3).into_vec();
        pos.sort_unstable();
        let Ok(t) = Triple::new(&tokens[pos[0]], &tokens[pos[1]], &tokens[pos[2]]) else {
            continue;
        };
        if triples.contains(&t) {
            continue;
        }
        let mut candidate = triples.clone();
        candidate.push(t);
        if build_record(format, candidate.clone()).is_ok() {
            triples = candidate;
        }
    }
    if triples.is_empty() {
        return Err(Error::InvalidRecord(format!("no admissible triple in `{text}`")));
    }
    let record = build_record(format, triples)?;
    Ok((text.to_string(), formats::serialize(&record)?))
}

fn build_record(format: FormatId, triples: Vec<Triple>) -> Result<StructuredRecord> {
    let rec = match format {
        FormatId::Totto => StructuredRecord::table("", "", triples)?,
        f => StructuredRecord::new(f, triples, None)?,
    };
    formats::serialize(&rec)?;
    Ok(rec)
}
