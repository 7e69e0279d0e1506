//! Weight-shared transformer encoder–decoder with a Gaussian style head,
//! a learned format embedding and a conditioning memory row.
//!
//! Two forward paths share one parameter set: a batched tape path for
//! training (sequences packed row-wise, block-diagonal attention) and an
//! incremental KV-cached path for decoding.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::STYLE_ID;
use crate::error::{Error, Result};
use crate::formats::FormatId;
use crate::nn::tape::{gelu_scalar, layer_norm_rows, softmax_rows};
use crate::nn::tensor::gemm;
use crate::nn::{AttnLayout, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub d_style: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_formats: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            d_style: 8,
            vocab_size: 0,
            max_len: 64,
            n_formats: FormatId::COUNT,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_style == 0 {
            return bad("d_style must be at least 1".into());
        }
        if self.vocab_size == 0 || self.max_len < 2 || self.d_ff == 0 || self.n_formats == 0 {
            return bad("vocab_size, max_len, d_ff and n_formats must be positive".into());
        }
        Ok(())
    }
}

/// Gaussian posterior `q(s|x)` with diagonal covariance `exp(log_var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl StylePosterior {
    /// `s = μ + exp(½ log σ²) ⊙ ε`, `ε ~ N(0, I)`.
    pub fn reparameterize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Closed-form `KL(q ‖ N(0, I))`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
    }
}

/// Differential entropy of `N(0, I_d)`, `(d/2)(1 + ln 2π)`, which bounds
/// the information the style code can carry.
pub fn style_entropy_bound(d_style: usize) -> Result<f64> {
    if d_style == 0 {
        return Err(Error::Config("entropy bound needs d_style >= 1".into()));
    }
    Ok(d_style as f64 / 2.0 * (1.0 + (2.0 * PI).ln()))
}

/// Gaussian-kernel bandwidth σ² used by the style regularizer.
pub fn mmd_bandwidth(d_style: usize) -> f64 {
    d_style as f64
}

/// Unbiased MMD² between two sample sets (rows).
pub fn mmd(q_samples: &Tensor, prior_samples: &Tensor, bandwidth_sq: f64) -> f64 {
    crate::nn::tape::mmd_value(q_samples, prior_samples, bandwidth_sq)
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    cross: Option<CrossIds>,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct CrossIds {
    ln: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    out_bias: ParamId,
    enc: Vec<LayerIds>,
    enc_ln: (ParamId, ParamId),
    dec: Vec<LayerIds>,
    dec_ln: (ParamId, ParamId),
    w_mu: ParamId,
    b_mu: ParamId,
    w_lv: ParamId,
    b_lv: ParamId,
    w_f: ParamId,
    b_f: ParamId,
    w_c: ParamId,
}

/// Name of the projection that maps a style or format vector into the
/// conditioning memory row. Zeroing it cuts every path from `s` and `f`
/// to the decoder.
pub const COND_PROJECTION: &str = "cond.w";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn ln_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add_const(&format!("{name}.g"), &[d], 1.0),
        store.add_const(&format!("{name}.b"), &[d], 0.0),
    )
}

/// Encoded inputs of one batch on a tape: rows of all sequences stacked.
#[derive(Clone, Debug)]
pub struct TapeEncoding {
    pub memory: Var,
    pub segments: Vec<(usize, usize)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let ws = 1.0 / (d as f64).sqrt();
        let depth = (2 * (config.n_enc_layers + config.n_dec_layers)) as f64;
        let wo_std = ws / depth.sqrt();
        let tok_emb = p.add_normal("tok_emb", &[v, d], 0.1, &mut rng);
        let enc_pos = p.add_normal("enc_pos", &[config.max_len, d], 0.1, &mut rng);
        let dec_pos = p.add_normal("dec_pos", &[config.max_len, d], 0.1, &mut rng);
        let out_bias = p.add_const("out_bias", &[v], 0.0);
        let layer = |p: &mut ParamStore, name: String, cross: bool, rng: &mut ChaCha8Rng| LayerIds {
            ln1: ln_params(p, &format!("{name}.ln1"), d),
            wq: p.add_normal(&format!("{name}.wq"), &[d, d], ws, rng),
            wk: p.add_normal(&format!("{name}.wk"), &[d, d], ws, rng),
            wv: p.add_normal(&format!("{name}.wv"), &[d, d], ws, rng),
            wo: p.add_normal(&format!("{name}.wo"), &[d, d], wo_std, rng),
            cross: cross.then(|| CrossIds {
                ln: ln_params(p, &format!("{name}.lnc"), d),
                wq: p.add_normal(&format!("{name}.cq"), &[d, d], ws, rng),
                wk: p.add_normal(&format!("{name}.ck"), &[d, d], ws, rng),
                wv: p.add_normal(&format!("{name}.cv"), &[d, d], ws, rng),
                wo: p.add_normal(&format!("{name}.co"), &[d, d], wo_std, rng),
            }),
            ln2: ln_params(p, &format!("{name}.ln2"), d),
            w1: p.add_normal(&format!("{name}.w1"), &[d, ff], ws, rng),
            b1: p.add_const(&format!("{name}.b1"), &[ff], 0.0),
            w2: p.add_normal(&format!("{name}.w2"), &[ff, d], 1.0 / (ff as f64).sqrt() / depth.sqrt(), rng),
            b2: p.add_const(&format!("{name}.b2"), &[d], 0.0),
        };
        let enc = (0..config.n_enc_layers)
            .map(|i| layer(&mut p, format!("enc.{i}"), false, &mut rng))
            .collect();
        let enc_ln = ln_params(&mut p, "enc.ln", d);
        let dec = (0..config.n_dec_layers)
            .map(|i| layer(&mut p, format!("dec.{i}"), true, &mut rng))
            .collect();
        let dec_ln = ln_params(&mut p, "dec.ln", d);
        let ds = config.d_style;
        let ids = Ids {
            tok_emb,
            enc_pos,
            dec_pos,
            out_bias,
            enc,
            enc_ln,
            dec,
            dec_ln,
            w_mu: p.add_normal("style.w_mu", &[d, ds], ws * 0.5, &mut rng),
            b_mu: p.add_const("style.b_mu", &[ds], 0.0),
            w_lv: p.add_normal("style.w_lv", &[d, ds], ws * 0.1, &mut rng),
            b_lv: p.add_const("style.b_lv", &[ds], 0.0),
            w_f: p.add_normal("format.w", &[config.n_formats, ds], 1.0, &mut rng),
            b_f: p.add_const("format.b", &[ds], 0.0),
            w_c: p.add_normal(COND_PROJECTION, &[ds, d], 1.0 / (ds as f64).sqrt(), &mut rng),
        };
        Ok(Model { config, params: p, ids })
    }

    /// Rebuilds a model around stored parameters (shapes must match `config`).
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Model> {
        let mut m = Model::new(config, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::SeqTooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn ln(&self, tape: &mut Tape, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
        let g = self.p(tape, ids.0);
        let b = self.p(tape, ids.1);
        tape.layer_norm(x, g, b)
    }

    fn attn_block(
        &self,
        tape: &mut Tape,
        h: Var,
        kv: Var,
        w: (ParamId, ParamId, ParamId, ParamId),
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (self.p(tape, w.0), self.p(tape, w.1), self.p(tape, w.2), self.p(tape, w.3));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(kv, wk)?;
        let v = tape.matmul(kv, wv)?;
        let a = tape.attention(q, k, v, layout, self.config.n_heads)?;
        tape.matmul(a, wo)
    }

    fn ffn_block(&self, tape: &mut Tape, x: Var, l: &LayerIds) -> Result<Var> {
        let h = self.ln(tape, x, l.ln2)?;
        let (w1, b1, w2, b2) = (self.p(tape, l.w1), self.p(tape, l.b1), self.p(tape, l.w2), self.p(tape, l.b2));
        let u = tape.matmul(h, w1)?;
        let u = tape.add_row(u, b1)?;
        let u = tape.gelu(u);
        let o = tape.matmul(u, w2)?;
        let o = tape.add_row(o, b2)?;
        tape.add(x, o)
    }

    fn segments_of(lens: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
        let mut off = 0;
        lens.map(|l| {
            let s = (off, l);
            off += l;
            s
        })
        .collect()
    }

    /// Pre-LN encoder over a batch of framed sequences.
    pub fn encode(&self, tape: &mut Tape, seqs: &[&[u32]]) -> Result<TapeEncoding> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            self.check_len(s.len())?;
            if s.is_empty() {
                return Err(Error::Shape("empty input sequence".into()));
            }
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
        }
        let segments = Self::segments_of(seqs.iter().map(|s| s.len()));
        let layout = Rc::new(AttnLayout::self_attention(segments.clone(), false));
        let emb = self.p(tape, self.ids.tok_emb);
        let pe = self.p(tape, self.ids.enc_pos);
        let x = tape.embedding(emb, &ids)?;
        let px = tape.embedding(pe, &pos)?;
        let mut x = tape.add(x, px)?;
        for l in &self.ids.enc {
            let h = self.ln(tape, x, l.ln1)?;
            let a = self.attn_block(tape, h, h, (l.wq, l.wk, l.wv, l.wo), layout.clone())?;
            x = tape.add(x, a)?;
            x = self.ffn_block(tape, x, l)?;
        }
        let memory = self.ln(tape, x, self.ids.enc_ln)?;
        Ok(TapeEncoding { memory, segments })
    }

    /// Positions of `[STYLE]` within each sequence.
    pub fn style_positions(seqs: &[&[u32]]) -> Result<Vec<usize>> {
        seqs.iter()
            .map(|s| s.iter().position(|&t| t == STYLE_ID).ok_or(Error::MissingStyleToken))
            .collect()
    }

    /// `(μ, log σ²)` rows read from the encoder output at each `[STYLE]` slot.
    pub fn style_posterior(&self, tape: &mut Tape, enc: &TapeEncoding, style_positions: &[usize]) -> Result<(Var, Var)> {
        let rows: Vec<usize> = enc
            .segments
            .iter()
            .zip(style_positions)
            .map(|(&(start, _), &p)| start + p)
            .collect();
        let h = tape.gather_rows(enc.memory, &rows)?;
        let (wm, bm, wl, bl) = (
            self.p(tape, self.ids.w_mu),
            self.p(tape, self.ids.b_mu),
            self.p(tape, self.ids.w_lv),
            self.p(tape, self.ids.b_lv),
        );
        let mu = tape.matmul(h, wm)?;
        let mu = tape.add_row(mu, bm)?;
        let lv = tape.matmul(h, wl)?;
        let lv = tape.add_row(lv, bl)?;
        Ok((mu, lv))
    }

    /// `s = μ + exp(½ log σ²) ⊙ ε` with `ε` supplied by the caller.
    pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, eps: Tensor) -> Result<Var> {
        let half = tape.scale(log_var, 0.5);
        let std = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(std, e)?;
        tape.add(mu, noise)
    }

    /// `s_f = W_f onehot(f) + b_f` for each format.
    pub fn format_embedding(&self, tape: &mut Tape, formats: &[FormatId]) -> Result<Var> {
        let wf = self.p(tape, self.ids.w_f);
        let bf = self.p(tape, self.ids.b_f);
        let idx: Vec<usize> = formats.iter().map(|f| f.index()).collect();
        let rows = tape.embedding(wf, &idx)?;
        tape.add_row(rows, bf)
    }

    /// Decoder memory: the projected conditioning vector as one extra row
    /// in front of each item's encoder output.
    fn memory_with_cond(&self, tape: &mut Tape, enc: &TapeEncoding, cond: Var) -> Result<(Var, Vec<(usize, usize)>)> {
        let b = enc.segments.len();
        if tape.value(cond).rows() != b || tape.value(cond).cols() != self.config.d_style {
            return Err(Error::Shape(format!(
                "conditioning {:?} for {b} items of d_style {}",
                tape.value(cond).shape(),
                self.config.d_style
            )));
        }
        let wc = self.p(tape, self.ids.w_c);
        let c = tape.matmul(cond, wc)?;
        let all = tape.concat_rows(&[c, enc.memory])?;
        let mut order = Vec::new();
        let mut segs = Vec::new();
        for (i, &(start, len)) in enc.segments.iter().enumerate() {
            segs.push((order.len(), len + 1));
            order.push(i);
            order.extend((start..start + len).map(|r| r + b));
        }
        Ok((tape.gather_rows(all, &order)?, segs))
    }

    /// Teacher-forced next-token logits: row `t` of item `i` predicts
    /// `targets[i][t + 1]` from `targets[i][..=t]`.
    pub fn decode_logits(&self, tape: &mut Tape, enc: &TapeEncoding, cond: Var, targets: &[&[u32]]) -> Result<Var> {
        if targets.len() != enc.segments.len() {
            return Err(Error::Shape(format!("{} targets for {} encodings", targets.len(), enc.segments.len())));
        }
        let (mem, mem_segs) = self.memory_with_cond(tape, enc, cond)?;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for t in targets {
            self.check_len(t.len())?;
            if t.len() < 2 {
                return Err(Error::Shape("decoder target needs at least BOS and EOS".into()));
            }
            ids.extend(t[..t.len() - 1].iter().map(|&x| x as usize));
            pos.extend(0..t.len() - 1);
        }
        let segs = Self::segments_of(targets.iter().map(|t| t.len() - 1));
        let self_layout = Rc::new(AttnLayout::self_attention(segs.clone(), true));
        let cross_layout = Rc::new(AttnLayout {
            q_segments: segs,
            k_segments: mem_segs,
            causal: false,
        });
        let emb = self.p(tape, self.ids.tok_emb);
        let pe = self.p(tape, self.ids.dec_pos);
        let x = tape.embedding(emb, &ids)?;
        let px = tape.embedding(pe, &pos)?;
        let mut x = tape.add(x, px)?;
        for l in &self.ids.dec {
            let h = self.ln(tape, x, l.ln1)?;
            let a = self.attn_block(tape, h, h, (l.wq, l.wk, l.wv, l.wo), self_layout.clone())?;
            x = tape.add(x, a)?;
            let c = l.cross.as_ref().expect("decoder layer has cross-attention");
            let h = self.ln(tape, x, c.ln)?;
            let a = self.attn_block(tape, h, mem, (c.wq, c.wk, c.wv, c.wo), cross_layout.clone())?;
            x = tape.add(x, a)?;
            x = self.ffn_block(tape, x, l)?;
        }
        let h = self.ln(tape, x, self.ids.dec_ln)?;
        let logits = tape.matmul_t(h, emb)?;
        let ob = self.p(tape, self.ids.out_bias);
        tape.add_row(logits, ob)
    }

    /// Mean per-token negative log-likelihood of `targets`.
    pub fn decode_loss(&self, tape: &mut Tape, enc: &TapeEncoding, cond: Var, targets: &[&[u32]]) -> Result<Var> {
        let logits = self.decode_logits(tape, enc, cond, targets)?;
        let gold: Vec<usize> = targets
            .iter()
            .flat_map(|t| t[1..].iter().map(|&x| x as usize))
            .collect();
        tape.cross_entropy(logits, &gold)
    }

    /// Style regularizer `MMD²(samples, prior)` on the tape.
    pub fn mmd_term(&self, tape: &mut Tape, samples: Var, prior: Tensor) -> Result<Var> {
        tape.mmd(samples, prior, mmd_bandwidth(self.config.d_style))
    }

    // -----------------------------------------------------------------
    // Inference path
    // -----------------------------------------------------------------

    /// Encoder outputs of each sequence, computed without gradients.
    pub fn encode_plain(&self, seqs: &[&[u32]]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, seqs)?;
        let m = tape.value(enc.memory);
        let d = self.config.d_model;
        Ok(enc
            .segments
            .iter()
            .map(|&(s, l)| Tensor::matrix(l, d, m.data()[s * d..(s + l) * d].to_vec()).expect("slice shape"))
            .collect())
    }

    /// Style posterior for each `[STYLE]`-bearing sequence.
    pub fn style_posterior_plain(&self, seqs: &[&[u32]]) -> Result<Vec<StylePosterior>> {
        let pos = Self::style_positions(seqs)?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, seqs)?;
        let (mu, lv) = self.style_posterior(&mut tape, &enc, &pos)?;
        let (mu, lv) = (tape.value(mu), tape.value(lv));
        Ok((0..seqs.len())
            .map(|i| StylePosterior {
                mu: mu.row(i).to_vec(),
                log_var: lv.row(i).to_vec(),
            })
            .collect())
    }

    pub fn format_vector(&self, format: FormatId) -> Vec<f64> {
        let wf = self.params.value(self.ids.w_f);
        let bf = self.params.value(self.ids.b_f);
        wf.row(format.index()).iter().zip(bf.data()).map(|(w, b)| w + b).collect()
    }

    pub fn zero_style(&self) -> Vec<f64> {
        vec![0.0; self.config.d_style]
    }

    /// Prepares incremental decoding for items with the given encoder
    /// outputs and conditioning vectors.
    pub fn start_decoding(&self, memories: &[Tensor], conds: &[Vec<f64>]) -> Result<DecodeState<'_>> {
        if memories.len() != conds.len() {
            return Err(Error::Shape(format!("{} memories vs {} conditions", memories.len(), conds.len())));
        }
        let d = self.config.d_model;
        let wc = self.params.value(self.ids.w_c);
        let mut cross = Vec::with_capacity(memories.len());
        for (mem, cond) in memories.iter().zip(conds) {
            if cond.len() != self.config.d_style {
                return Err(Error::Shape(format!("conditioning of length {}", cond.len())));
            }
            let rows = mem.rows() + 1;
            let mut full = vec![0.0; rows * d];
            gemm(1, self.config.d_style, d, cond, false, wc.data(), false, &mut full[..d], false);
            full[d..].copy_from_slice(mem.data());
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for l in &self.ids.dec {
                let c = l.cross.as_ref().expect("decoder layer has cross-attention");
                ks.push(linear(&full, rows, self.params.value(c.wk)));
                vs.push(linear(&full, rows, self.params.value(c.wv)));
            }
            cross.push(Rc::new(CrossKv { rows, k: ks, v: vs }));
        }
        let n_layers = self.ids.dec.len();
        let rows = cross
            .into_iter()
            .map(|c| RowCache {
                cross: c,
                self_k: vec![Vec::new(); n_layers],
                self_v: vec![Vec::new(); n_layers],
            })
            .collect();
        Ok(DecodeState { model: self, rows, step: 0 })
    }

    /// Per-item mean token NLL of `targets` under teacher forcing, through
    /// the incremental path.
    pub fn sequence_nll(&self, memories: &[Tensor], conds: &[Vec<f64>], targets: &[&[u32]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(targets.len());
        for (i, t) in targets.iter().enumerate() {
            let mut st = self.start_decoding(&memories[i..=i], &conds[i..=i])?;
            let mut nll = 0.0;
            for w in t.windows(2) {
                let logits = st.step(&[w[0]])?;
                nll -= log_softmax_at(logits.row(0), w[1] as usize);
            }
            out.push(nll / (t.len() - 1) as f64);
        }
        Ok(out)
    }
}

pub fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn linear(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, false, w.data(), false, &mut out, false);
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

struct CrossKv {
    rows: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct RowCache {
    cross: Rc<CrossKv>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
}

/// KV-cached decoder state for a set of rows (items or beam hypotheses).
pub struct DecodeState<'a> {
    model: &'a Model,
    rows: Vec<RowCache>,
    step: usize,
}

/// One query row attending over `n` cached key/value rows, all heads.
fn attend_one(q: &[f64], k: &[f64], v: &[f64], n: usize, heads: usize, out: &mut [f64]) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_rows(&mut scores, n);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|x| *x = 0.0);
        for (j, &p) in scores.iter().enumerate() {
            let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, x) in oh.iter_mut().zip(vj) {
                *o += p * x;
            }
        }
    }
}

impl DecodeState<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Keeps rows `parents[i]` (duplicates allowed) in the given order.
    pub fn select(&mut self, parents: &[usize]) {
        self.rows = parents.iter().map(|&p| self.rows[p].clone()).collect();
    }

    /// Feeds one token per row and returns next-token logits `[rows, V]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let m = self.model;
        let cfg = &m.config;
        let (d, b) = (cfg.d_model, tokens.len());
        if b != self.rows.len() {
            return Err(Error::Shape(format!("{b} tokens for {} rows", self.rows.len())));
        }
        if self.step >= cfg.max_len {
            return Err(Error::SeqTooLong {
                len: self.step + 1,
                max_len: cfg.max_len,
            });
        }
        let p = &m.params;
        let emb = p.value(m.ids.tok_emb);
        let pos = p.value(m.ids.dec_pos).row(self.step);
        let mut x = vec![0.0; b * d];
        for (r, &t) in tokens.iter().enumerate() {
            let e = emb.row(t as usize);
            for c in 0..d {
                x[r * d + c] = e[c] + pos[c];
            }
        }
        let mut h = vec![0.0; b * d];
        let mut att = vec![0.0; b * d];
        let ln = |x: &[f64], ids: (ParamId, ParamId), out: &mut [f64]| {
            layer_norm_rows(x, d, p.value(ids.0).data(), p.value(ids.1).data(), out);
        };
        for (li, l) in m.ids.dec.iter().enumerate() {
            ln(&x, l.ln1, &mut h);
            let q = linear(&h, b, p.value(l.wq));
            let k = linear(&h, b, p.value(l.wk));
            let v = linear(&h, b, p.value(l.wv));
            for r in 0..b {
                let row = &mut self.rows[r];
                row.self_k[li].extend_from_slice(&k[r * d..(r + 1) * d]);
                row.self_v[li].extend_from_slice(&v[r * d..(r + 1) * d]);
                let n = row.self_k[li].len() / d;
                attend_one(&q[r * d..(r + 1) * d], &row.self_k[li], &row.self_v[li], n, cfg.n_heads, &mut att[r * d..(r + 1) * d]);
            }
            let o = linear(&att, b, p.value(l.wo));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let c = l.cross.as_ref().expect("decoder layer has cross-attention");
            ln(&x, c.ln, &mut h);
            let q = linear(&h, b, p.value(c.wq));
            for r in 0..b {
                let ck = &self.rows[r].cross;
                attend_one(&q[r * d..(r + 1) * d], &ck.k[li], &ck.v[li], ck.rows, cfg.n_heads, &mut att[r * d..(r + 1) * d]);
            }
            let o = linear(&att, b, p.value(c.wo));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            ln(&x, l.ln2, &mut h);
            let mut u = linear(&h, b, p.value(l.w1));
            add_bias(&mut u, p.value(l.b1).data());
            u.iter_mut().for_each(|z| *z = gelu_scalar(*z));
            let mut o = linear(&u, b, p.value(l.w2));
            add_bias(&mut o, p.value(l.b2).data());
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        ln(&x, m.ids.dec_ln, &mut h);
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; b * v];
        gemm(b, d, v, &h, false, emb.data(), true, &mut logits, false);
        add_bias(&mut logits, p.value(m.ids.out_bias).data());
        self.step += 1;
        Tensor::matrix(b, v, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::seq::index::sample;

    fn tiny(vocab: usize) -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 24,
            d_style: 3,
            vocab_size: vocab,
            max_len: 12,
            n_formats: 4,
        };
        Model::new(cfg, 11).unwrap()
    }

    fn inputs() -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let src = vec![vec![1, 6, 7, STYLE_ID, 12, 13, 2], vec![1, 6, 8, STYLE_ID, 14, 2]];
        let tgt = vec![vec![1, 15, 16, 17, 2], vec![1, 18, 2]];
        (src, tgt)
    }

    fn refs(v: &[Vec<u32>]) -> Vec<&[u32]> {
        v.iter().map(|s| s.as_slice()).collect()
    }

    /// Reconstruction plus MMD for the gradient check, on a fresh tape.
    fn full_loss(m: &Model, tape: &mut Tape) -> Var {
        let (src, tgt) = inputs();
        let (src, tgt) = (refs(&src), refs(&tgt));
        let enc = m.encode(tape, &src).unwrap();
        let pos = Model::style_positions(&src).unwrap();
        let (mu, lv) = m.style_posterior(tape, &enc, &pos).unwrap();
        let eps = Tensor::from_fn(2, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
        let s = Model::reparameterize(tape, mu, lv, eps).unwrap();
        let rec = m.decode_loss(tape, &enc, s, &tgt).unwrap();
        let prior = Tensor::from_fn(3, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin());
        let mmd = m.mmd_term(tape, s, prior).unwrap();
        let mmd = tape.scale(mmd, 10.0);
        // data direction through the format embedding
        let enc2 = m.encode(tape, &tgt).unwrap();
        let f = m.format_embedding(tape, &[FormatId::Mr, FormatId::Totto]).unwrap();
        let rec2 = m.decode_loss(tape, &enc2, f, &src).unwrap();
        let a = tape.add(rec, mmd).unwrap();
        tape.add(a, rec2).unwrap()
    }

    #[test]
    fn gradient_check_full_loss() {
        let mut m = tiny(20);
        let mut tape = Tape::new();
        let loss = full_loss(&m, &mut tape);
        tape.backward(loss).unwrap();
        let mut analytic = m.params.clone();
        analytic.zero_grads();
        tape.accumulate_into(&mut analytic);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<ParamId> = m.params.ids().collect();
        let mut coords = Vec::new();
        for &id in &ids {
            let n = m.params.value(id).len();
            for i in sample(&mut rng, n, n.min(4)) {
                coords.push((id, i));
            }
        }
        assert!(coords.len() >= 100);
        let cfg = m.config.clone();
        let report = gradcheck::check(&mut m.params, &analytic, &coords, 1e-5, |p| {
            let mm = Model::from_params(cfg.clone(), p)?;
            let mut t = Tape::new();
            let l = full_loss(&mm, &mut t);
            Ok(t.value(l).item())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn incremental_path_matches_tape() {
        let m = tiny(20);
        let (src, tgt) = inputs();
        let (src, tgt) = (refs(&src), refs(&tgt));
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &src).unwrap();
        let conds = vec![vec![0.5, -1.0, 0.25], vec![0.0, 0.3, 0.0]];
        let c = tape.constant(Tensor::matrix(2, 3, conds.concat()).unwrap());
        let logits = m.decode_logits(&mut tape, &enc, c, &tgt).unwrap();
        let lt = tape.value(logits).clone();
        let mems = m.encode_plain(&src).unwrap();
        let mut st = m.start_decoding(&mems, &conds).unwrap();
        // advance both rows in lockstep while both have tokens
        let mut offsets = [0usize, 4];
        for t in 0..2 {
            let out = st.step(&[tgt[0][t], tgt[1][t]]).unwrap();
            for (r, off) in offsets.iter_mut().enumerate() {
                for (a, b) in out.row(r).iter().zip(lt.row(*off)) {
                    assert!((a - b).abs() < 1e-10);
                }
                *off += 1;
            }
        }
        // loss equals mean NLL via the incremental path
        let loss = m.decode_loss(&mut tape, &enc, c, &tgt).unwrap();
        let nll = m.sequence_nll(&mems, &conds, &tgt).unwrap();
        let want = (nll[0] * 4.0 + nll[1] * 2.0) / 6.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-10);
    }

    #[test]
    fn encoder_is_position_sensitive_and_deterministic() {
        let m = tiny(20);
        let a = m.encode_plain(&[&[1, 6, 7, 12, 13, 2]]).unwrap();
        let b = m.encode_plain(&[&[1, 6, 7, 13, 12, 2]]).unwrap();
        let c = m.encode_plain(&[&[1, 6, 7, 12, 13, 2]]).unwrap();
        assert_eq!(a[0].rows(), 6);
        assert_ne!(a, b);
        assert_eq!(a, c);
        assert!(m.encode_plain(&[&[1; 13]]).is_err());
    }

    #[test]
    fn style_posterior_requires_token_and_reads_bias_at_zero_weights() {
        let mut m = tiny(20);
        assert!(matches!(m.style_posterior_plain(&[&[1, 6, 2]]), Err(Error::MissingStyleToken)));
        for name in ["style.w_mu", "style.w_lv"] {
            let id = m.param_id(name).unwrap();
            m.params.value_mut(id).fill(0.0);
        }
        let bm = m.param_id("style.b_mu").unwrap();
        m.params.value_mut(bm).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let post = m.style_posterior_plain(&[&[1, 6, STYLE_ID, 9, 2]]).unwrap();
        assert_eq!(post[0].mu, vec![0.1, 0.2, 0.3]);
        assert_eq!(post[0].log_var, vec![0.0; 3]);
    }

    #[test]
    fn conditioning_row_is_the_only_style_path() {
        let mut m = tiny(20);
        let mems = m.encode_plain(&[&[1, 6, 7, 2]]).unwrap();
        let run = |m: &Model, cond: Vec<f64>| {
            let mut st = m.start_decoding(&mems, &[cond]).unwrap();
            st.step(&[1]).unwrap()
        };
        assert_ne!(run(&m, vec![1.0, 0.0, 0.0]), run(&m, vec![0.0, -1.0, 2.0]));
        let id = m.param_id(COND_PROJECTION).unwrap();
        m.params.value_mut(id).fill(0.0);
        assert_eq!(run(&m, vec![1.0, 0.0, 0.0]), run(&m, vec![0.0, -1.0, 2.0]));
        assert_eq!(run(&m, m.format_vector(FormatId::Kg)), run(&m, m.format_vector(FormatId::Mr)));
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let post = StylePosterior {
            mu: vec![0.5, -0.3],
            log_var: vec![-0.4, 0.2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = post.reparameterize(&mut rng);
            // log q(s) - log p(s)
            let mut lr = 0.0;
            for i in 0..2 {
                let var = post.log_var[i].exp();
                lr += -0.5 * (post.log_var[i] + (s[i] - post.mu[i]).powi(2) / var) + 0.5 * s[i] * s[i];
            }
            acc += lr;
        }
        let mc = acc / n as f64;
        let exact = post.kl_to_standard_normal();
        assert!((mc - exact).abs() / exact < 0.02, "{mc} vs {exact}");
    }

    #[test]
    fn reparameterize_degenerate_and_mean() {
        let post = StylePosterior {
            mu: vec![1.5, -2.0],
            log_var: vec![-1e4, -1e4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(post.reparameterize(&mut rng), post.mu);
        let post = StylePosterior {
            mu: vec![1.5],
            log_var: vec![0.0],
        };
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| post.reparameterize(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn reparameterize_grad_wrt_mu_is_identity() {
        let mut tape = Tape::new();
        let mu = tape.input(Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap());
        let lv = tape.input(Tensor::matrix(1, 2, vec![0.2, 0.5]).unwrap());
        let s = Model::reparameterize(&mut tape, mu, lv, Tensor::matrix(1, 2, vec![0.7, -1.2]).unwrap()).unwrap();
        let w = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let picked = tape.mul(s, w).unwrap();
        let l = tape.sum(picked);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(mu).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn entropy_bound_values() {
        let one = style_entropy_bound(1).unwrap();
        assert!((one - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((style_entropy_bound(2).unwrap() - 2.0 * one).abs() < 1e-12);
        assert!(style_entropy_bound(0).is_err());
    }

    #[test]
    fn initial_loss_near_uniform() {
        let m = Model::new(ModelConfig::with_vocab(300), 1).unwrap();
        let mut tape = Tape::new();
        let src: Vec<u32> = vec![1, 6, 7, 40, 41, 42, 2];
        let tgt: Vec<u32> = vec![1, 50, 51, 52, 53, 2];
        let enc = m.encode(&mut tape, &[&src]).unwrap();
        let f = m.format_embedding(&mut tape, &[FormatId::Kg]).unwrap();
        let l = m.decode_loss(&mut tape, &enc, f, &[&tgt]).unwrap();
        let ln_v = (300f64).ln();
        assert!((tape.value(l).item() - ln_v).abs() / ln_v < 0.05, "{}", tape.value(l).item());
    }
}
