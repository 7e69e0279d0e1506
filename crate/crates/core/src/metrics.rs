//! Text and structure metrics: corpus BLEU, ROUGE-L, entity/relation
//! precision-recall-F1, graph SemBLEU, Self-BLEU, Distinct-n and the
//! format-error rate.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, StructuredRecord};

pub const BLEU_ORDER: usize = 4;
pub const SEMBLEU_ORDER: usize = 3;
pub const ROUGE_BETA: f64 = 1.2;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped match and candidate counts per order, plus the lengths used by
/// the brevity penalty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    fn new(order: usize) -> Self {
        BleuStats {
            matches: vec![0; order],
            totals: vec![0; order],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, other: &BleuStats) {
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of precisions (order 1 unsmoothed, higher orders
    /// with +1 smoothing) times the brevity penalty, on a 0–100 scale.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.totals[0] == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let order = self.matches.len();
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..order {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / order as f64).exp()
    }
}

fn sentence_stats(hyp: &[&str], refs: &[Vec<&str>]) -> BleuStats {
    let mut st = BleuStats::new(BLEU_ORDER);
    for n in 1..=BLEU_ORDER {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.totals[n - 1] = h.values().sum();
        st.matches[n - 1] = h.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum();
    }
    st.hyp_len = hyp.len();
    // closest reference length, shorter wins ties
    st.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    st
}

/// Corpus BLEU-4 of hypotheses against their reference lists.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[Vec<R>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(hypotheses.len(), references.len()));
    }
    let mut total = BleuStats::new(BLEU_ORDER);
    for (h, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::TooFew { needed: 1, got: 0 });
        }
        let r: Vec<Vec<&str>> = refs.iter().map(|r| words(r.as_ref())).collect();
        total.add(&sentence_stats(&words(h.as_ref()), &r));
    }
    Ok(total.score())
}

pub fn sentence_bleu<R: AsRef<str>>(hypothesis: &str, references: &[R]) -> f64 {
    let r: Vec<Vec<&str>> = references.iter().map(|r| words(r.as_ref())).collect();
    sentence_stats(&words(hypothesis), &r).score()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.2, best over references, 0–100.
pub fn rouge_l<R: AsRef<str>>(hypothesis: &str, references: &[R]) -> f64 {
    let h = words(hypothesis);
    references
        .iter()
        .map(|r| {
            let r = words(r.as_ref());
            let l = lcs_len(&h, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / h.len() as f64;
            let rc = l / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            100.0 * (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Lowercase, trim, collapse whitespace and strip trailing punctuation.
pub fn normalize_field(s: &str) -> String {
    let s = formats::normalize_ws(&s.to_lowercase());
    s.trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_string()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Prf {
        let p = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
        let r = if gold == 0 { 0.0 } else { matched as f64 / gold as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Prf {
            precision: 100.0 * p,
            recall: 100.0 * r,
            f1: 100.0 * f,
        }
    }
}

/// Matched, predicted and gold counts of one comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.matched, self.predicted, self.gold)
    }
}

pub fn entity_set(r: &StructuredRecord) -> BTreeSet<String> {
    r.triples()
        .iter()
        .flat_map(|t| [normalize_field(t.subject()), normalize_field(t.object())])
        .collect()
}

pub fn relation_set(r: &StructuredRecord) -> BTreeSet<(String, String, String)> {
    r.triples()
        .iter()
        .map(|t| (normalize_field(t.subject()), normalize_field(t.relation()), normalize_field(t.object())))
        .collect()
}

fn set_counts<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Counts {
    Counts {
        matched: pred.intersection(gold).count(),
        predicted: pred.len(),
        gold: gold.len(),
    }
}

/// Entity and relation counts; an unparseable prediction is an empty set.
pub fn entity_relation_counts(pred: Option<&StructuredRecord>, gold: &StructuredRecord) -> (Counts, Counts) {
    let (pe, pr) = match pred {
        Some(p) => (entity_set(p), relation_set(p)),
        None => (BTreeSet::new(), BTreeSet::new()),
    };
    (set_counts(&pe, &entity_set(gold)), set_counts(&pr, &relation_set(gold)))
}

pub fn entity_relation_prf(pred: &StructuredRecord, gold: &StructuredRecord) -> (Prf, Prf) {
    let (e, r) = entity_relation_counts(Some(pred), gold);
    (e.prf(), r.prf())
}

/// Path n-grams of a record's graph: order 1 holds node and edge labels,
/// order `n ≥ 2` holds `node edge node …` sequences of directed paths with
/// `n` distinct nodes.
pub fn graph_ngrams(record: &StructuredRecord, max_order: usize) -> Vec<HashMap<Vec<String>, usize>> {
    let g = formats::to_graph(record);
    let mut out: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); max_order];
    for n in &g.nodes {
        *out[0].entry(vec![n.clone()]).or_insert(0) += 1;
    }
    for (_, r, _) in &g.edges {
        *out[0].entry(vec![r.clone()]).or_insert(0) += 1;
    }
    // extend paths edge by edge
    let mut frontier: Vec<(Vec<String>, Vec<&str>)> = g
        .nodes
        .iter()
        .map(|n| (vec![n.clone()], vec![n.as_str()]))
        .collect();
    for order in 2..=max_order {
        let mut next = Vec::new();
        for (labels, visited) in &frontier {
            let last = *visited.last().expect("path has a node");
            for (s, r, o) in &g.edges {
                if s == last && !visited.contains(&o.as_str()) {
                    let mut l = labels.clone();
                    l.push(r.clone());
                    l.push(o.clone());
                    let mut v = visited.clone();
                    v.push(o.as_str());
                    *out[order - 1].entry(l.clone()).or_insert(0) += 1;
                    next.push((l, v));
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn sembleu_stats(pred: Option<&StructuredRecord>, gold: &StructuredRecord) -> BleuStats {
    let k = SEMBLEU_ORDER;
    let gold_ng = graph_ngrams(gold, k);
    let pred_ng = pred.map(|p| graph_ngrams(p, k)).unwrap_or_else(|| vec![HashMap::new(); k]);
    let mut st = BleuStats::new(k);
    for n in 0..k {
        st.totals[n] = pred_ng[n].values().sum();
        st.matches[n] = pred_ng[n]
            .iter()
            .map(|(g, &c)| c.min(*gold_ng[n].get(g).unwrap_or(&0)))
            .sum();
    }
    st.hyp_len = st.totals[0];
    st.ref_len = gold_ng[0].values().sum();
    st
}

pub fn sembleu(pred: &StructuredRecord, gold: &StructuredRecord) -> f64 {
    sembleu_stats(Some(pred), gold).score()
}

/// Corpus SemBLEU with pooled counts; `None` predictions are format errors.
pub fn corpus_sembleu(pairs: &[(Option<&StructuredRecord>, &StructuredRecord)]) -> f64 {
    let mut total = BleuStats::new(SEMBLEU_ORDER);
    for (p, g) in pairs {
        total.add(&sembleu_stats(*p, g));
    }
    total.score()
}

/// Mean BLEU of each generation against all the others.
pub fn self_bleu<S: AsRef<str>>(generations: &[S]) -> Result<f64> {
    if generations.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: generations.len(),
        });
    }
    let total: f64 = (0..generations.len())
        .map(|i| {
            let others: Vec<&str> = generations
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, g)| g.as_ref())
                .collect();
            sentence_bleu(generations[i].as_ref(), &others)
        })
        .sum();
    Ok(total / generations.len() as f64)
}

/// Unique n-grams over all generations divided by total generated tokens.
pub fn distinct_n<S: AsRef<str>>(generations: &[S], n: usize) -> f64 {
    let mut uniq: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut tokens = 0;
    for g in generations {
        let w = words(g.as_ref());
        tokens += w.len();
        if w.len() >= n {
            for win in w.windows(n) {
                uniq.insert(win.to_vec());
            }
        }
    }
    if tokens == 0 {
        0.0
    } else {
        uniq.len() as f64 / tokens as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub bleu: f64,
    pub rouge_l: f64,
    pub self_bleu: Option<f64>,
    pub distinct1: Option<f64>,
    pub distinct2: Option<f64>,
    pub entity: Prf,
    pub relation: Prf,
    pub sembleu: f64,
    pub format_error_pct: f64,
    /// Share of D2T outputs identical to their serialized input.
    pub identity_pct: f64,
}

/// Everything needed to score one evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub reference_text: String,
    pub gold: StructuredRecord,
    pub d2t: String,
    pub d2t_identity: bool,
    pub t2d: Option<StructuredRecord>,
    pub diverse: Option<Vec<String>>,
}

/// Aggregates pair outcomes into one report (corpus-level BLEU and
/// SemBLEU, micro-averaged P/R/F1, mean ROUGE-L and diversity).
pub fn report(outcomes: &[PairOutcome]) -> Result<EvalReport> {
    let n = outcomes.len();
    if n == 0 {
        return Ok(EvalReport::default());
    }
    let hyps: Vec<&str> = outcomes.iter().map(|o| o.d2t.as_str()).collect();
    let refs: Vec<Vec<&str>> = outcomes.iter().map(|o| vec![o.reference_text.as_str()]).collect();
    let bleu_v = bleu(&hyps, &refs)?;
    let rouge = outcomes
        .iter()
        .map(|o| rouge_l(&o.d2t, &[&o.reference_text]))
        .sum::<f64>()
        / n as f64;
    let mut ent = Counts::default();
    let mut rel = Counts::default();
    let mut errors = 0;
    for o in outcomes {
        let (e, r) = entity_relation_counts(o.t2d.as_ref(), &o.gold);
        ent.add(e);
        rel.add(r);
        errors += usize::from(o.t2d.is_none());
    }
    let pairs: Vec<_> = outcomes.iter().map(|o| (o.t2d.as_ref(), &o.gold)).collect();
    let diverse: Vec<&Vec<String>> = outcomes.iter().filter_map(|o| o.diverse.as_ref()).collect();
    let (self_b, d1, d2) = if diverse.is_empty() {
        (None, None, None)
    } else {
        let m = diverse.len() as f64;
        let mut sb = 0.0;
        for g in &diverse {
            sb += self_bleu(g)?;
        }
        (
            Some(sb / m),
            Some(diverse.iter().map(|g| distinct_n(g, 1)).sum::<f64>() / m),
            Some(diverse.iter().map(|g| distinct_n(g, 2)).sum::<f64>() / m),
        )
    };
    Ok(EvalReport {
        n_pairs: n,
        bleu: bleu_v,
        rouge_l: rouge,
        self_bleu: self_b,
        distinct1: d1,
        distinct2: d2,
        entity: ent.prf(),
        relation: rel.prf(),
        sembleu: corpus_sembleu(&pairs),
        format_error_pct: 100.0 * errors as f64 / n as f64,
        identity_pct: 100.0 * outcomes.iter().filter(|o| o.d2t_identity).count() as f64 / n as f64,
    })
}
