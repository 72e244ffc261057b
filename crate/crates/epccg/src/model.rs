//! A small trainable transformer with hand-written forward and backward
//! passes, usable in two masking modes: full bidirectional (MLM) and
//! prefix-LM (source tokens attend bidirectionally among themselves, target
//! tokens attend only leftward).
//!
//! Architecture: learned token + absolute position embeddings, pre-layer-norm
//! residual blocks (attention, then GELU feed-forward), a final layer norm,
//! and an output projection tied to the token embeddings. Per-head attention
//! applies an additive mask before the softmax:
//!   A = softmax(Q K^T / sqrt(d_k) + M) V

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

/// The additive mask value standing in for -infinity.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, hidden 64, 4 heads, ff 256.
    pub fn desk_scale(vocab_size: usize, max_positions: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            hidden_size: 64,
            ff_size: 256,
            vocab_size,
            max_positions,
            dropout_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_size == 0 || self.ff_size == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("vocab_size and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// All trainable tensors. The output projection is tied to `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
}

impl<F: Scalar> ModelParameters<F> {
    pub fn zeros(config: &ModelConfig) -> ModelParameters<F> {
        let d = config.hidden_size;
        let f = config.ff_size;
        let layer = || LayerParams {
            ln1_g: Tensor::zeros(1, d),
            ln1_b: Tensor::zeros(1, d),
            wq: Tensor::zeros(d, d),
            bq: Tensor::zeros(1, d),
            wk: Tensor::zeros(d, d),
            bk: Tensor::zeros(1, d),
            wv: Tensor::zeros(d, d),
            bv: Tensor::zeros(1, d),
            wo: Tensor::zeros(d, d),
            bo: Tensor::zeros(1, d),
            ln2_g: Tensor::zeros(1, d),
            ln2_b: Tensor::zeros(1, d),
            w1: Tensor::zeros(d, f),
            b1: Tensor::zeros(1, f),
            w2: Tensor::zeros(f, d),
            b2: Tensor::zeros(1, d),
        };
        ModelParameters {
            tok_emb: Tensor::zeros(config.vocab_size, d),
            pos_emb: Tensor::zeros(config.max_positions, d),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            lnf_g: Tensor::zeros(1, d),
            lnf_b: Tensor::zeros(1, d),
        }
    }

    /// Gaussian init (std 0.02) for weights and embeddings, zeros for biases,
    /// ones for layer-norm scales. Deterministic per config seed.
    pub fn init(config: &ModelConfig) -> ModelParameters<F> {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut fill = |t: &mut Tensor<F>| {
            for x in &mut t.data {
                *x = F::from_f64(normal.sample(&mut rng));
            }
        };
        fill(&mut params.tok_emb);
        fill(&mut params.pos_emb);
        for layer in &mut params.layers {
            fill(&mut layer.wq);
            fill(&mut layer.wk);
            fill(&mut layer.wv);
            fill(&mut layer.wo);
            fill(&mut layer.w1);
            fill(&mut layer.w2);
        }
        let ones = |t: &mut Tensor<F>| t.data.iter_mut().for_each(|x| *x = F::one());
        for layer in &mut params.layers {
            ones(&mut layer.ln1_g);
            ones(&mut layer.ln2_g);
        }
        ones(&mut params.lnf_g);
        params
    }

    /// Named tensors in deterministic order (the checkpoint table order).
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor<F>); 16] = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ];
            for (name, t) in fields {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor<F>); 16] = [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ];
            for (name, t) in fields {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// n x n additive attention mask; entries are 0 (attend) or -1e9 (blocked).
/// The diagonal is always 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Fully bidirectional mask (all zeros).
    pub fn full(n: usize) -> AttentionMask {
        AttentionMask { n, allowed: vec![true; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// 0 where attention is allowed, -1e9 where it is blocked.
    pub fn additive<F: Scalar>(&self, i: usize, j: usize) -> F {
        if self.allowed(i, j) {
            F::zero()
        } else {
            F::from_f64(MASK_NEG)
        }
    }
}

/// Prefix-LM mask: positions inside the prefix attend to the whole prefix;
/// positions at or past the prefix attend to everything up to themselves.
///   allowed(i,j) = (i < p && j < p) || (i >= p && j <= i)
pub fn build_prefix_mask(prefix_len: usize, total_len: usize) -> Result<AttentionMask> {
    if prefix_len == 0 || prefix_len > total_len {
        return Err(Error::Argument(format!(
            "prefix_len {prefix_len} must satisfy 0 < prefix_len <= total_len {total_len}"
        )));
    }
    let mut allowed = vec![false; total_len * total_len];
    for i in 0..total_len {
        for j in 0..total_len {
            let a = (i < prefix_len && j < prefix_len) || (i >= prefix_len && j <= i);
            allowed[i * total_len + j] = a;
        }
    }
    let mask = AttentionMask { n: total_len, allowed };
    debug_assert!((0..total_len).all(|i| mask.allowed(i, i)));
    Ok(mask)
}

struct LayerNormCache<F> {
    normalized: Tensor<F>, // (x - mean) / std, per row
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
) -> (Tensor<F>, LayerNormCache<F>) {
    let d = F::from_f64(x.cols as f64);
    let eps = F::from_f64(LN_EPS);
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut normalized = Tensor::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..x.cols {
            let norm = (x.at(r, c) - mean) * rs;
            *normalized.at_mut(r, c) = norm;
            *out.at_mut(r, c) = norm * gain.data[c] + bias.data[c];
        }
    }
    (out, LayerNormCache { normalized, rstd })
}

/// dL/dx for layer norm, plus accumulated gain/bias gradients.
fn layer_norm_backward<F: Scalar>(
    d_out: &Tensor<F>,
    cache: &LayerNormCache<F>,
    gain: &Tensor<F>,
    d_gain: &mut Tensor<F>,
    d_bias: &mut Tensor<F>,
) -> Tensor<F> {
    let cols = d_out.cols;
    let d = F::from_f64(cols as f64);
    let mut dx = Tensor::zeros(d_out.rows, cols);
    for r in 0..d_out.rows {
        let mut sum_dn = F::zero();
        let mut sum_dn_norm = F::zero();
        for c in 0..cols {
            let dn = d_out.at(r, c) * gain.data[c];
            sum_dn += dn;
            sum_dn_norm += dn * cache.normalized.at(r, c);
            d_gain.data[c] += d_out.at(r, c) * cache.normalized.at(r, c);
            d_bias.data[c] += d_out.at(r, c);
        }
        let mean_dn = sum_dn / d;
        let mean_dn_norm = sum_dn_norm / d;
        for c in 0..cols {
            let dn = d_out.at(r, c) * gain.data[c];
            *dx.at_mut(r, c) =
                cache.rstd[r] * (dn - mean_dn - cache.normalized.at(r, c) * mean_dn_norm);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

struct DropoutMask<F> {
    scale: F,
    keep: Vec<bool>,
}

fn sample_dropout<F: Scalar>(len: usize, prob: f64, rng: &mut ChaCha8Rng) -> DropoutMask<F> {
    let keep: Vec<bool> = (0..len).map(|_| rng.gen::<f64>() >= prob).collect();
    DropoutMask { scale: F::from_f64(1.0 / (1.0 - prob)), keep }
}

impl<F: Scalar> DropoutMask<F> {
    fn apply(&self, t: &mut Tensor<F>) {
        for (x, &k) in t.data.iter_mut().zip(&self.keep) {
            *x = if k { *x * self.scale } else { F::zero() };
        }
    }
}

struct LayerCache<F> {
    ln1: LayerNormCache<F>,
    ln1_out: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    attn_probs: Vec<Tensor<F>>,
    attn_drop: Vec<Option<DropoutMask<F>>>,
    concat: Tensor<F>,
    ln2: LayerNormCache<F>,
    ln2_out: Tensor<F>,
    ff_pre: Tensor<F>,
    ff_act: Tensor<F>,
    ff_drop: Option<DropoutMask<F>>,
}

struct ForwardCache<F> {
    ids: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    lnf: LayerNormCache<F>,
    hidden: Tensor<F>, // post final layer norm
}

fn forward_cached<F: Scalar>(
    ids: &[u32],
    mask: &AttentionMask,
    params: &ModelParameters<F>,
    config: &ModelConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<F>, ForwardCache<F>)> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if mask.len() != n {
        return Err(Error::Shape(format!("mask is {}x{0} but sequence has {n} tokens", mask.len())));
    }
    if n > config.max_positions {
        return Err(Error::Shape(format!(
            "sequence length {n} exceeds max_positions {}",
            config.max_positions
        )));
    }
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(Error::Range(format!("token id {id} >= vocab_size {}", config.vocab_size)));
        }
    }

    let d = config.hidden_size;
    let heads = config.num_heads;
    let dk = config.head_dim();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());

    let mut x = Tensor::zeros(n, d);
    for (i, &id) in ids.iter().enumerate() {
        let e = params.tok_emb.row(id as usize);
        let p = params.pos_emb.row(i);
        for (c, slot) in x.row_mut(i).iter_mut().enumerate() {
            *slot = e[c] + p[c];
        }
    }

    let mut layer_caches = Vec::with_capacity(config.num_layers);
    for layer in &params.layers {
        let (ln1_out, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
        let mut q = ln1_out.matmul(&layer.wq);
        q.add_bias(&layer.bq);
        let mut k = ln1_out.matmul(&layer.wk);
        k.add_bias(&layer.bk);
        let mut v = ln1_out.matmul(&layer.wv);
        v.add_bias(&layer.bv);

        let mut concat = Tensor::zeros(n, d);
        let mut attn_probs = Vec::with_capacity(heads);
        let mut attn_drop = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dk, dk);
            let kh = k.slice_cols(h * dk, dk);
            let vh = v.slice_cols(h * dk, dk);
            let mut scores = qh.matmul_nt(&kh);
            for i in 0..n {
                for j in 0..n {
                    let s = scores.at(i, j) * scale + mask.additive::<F>(i, j);
                    *scores.at_mut(i, j) = s;
                }
            }
            // Row-wise softmax.
            let mut probs = scores;
            for i in 0..n {
                let row = probs.row_mut(i);
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            let drop = match (&mut dropout, config.dropout_prob > 0.0) {
                (Some(rng), true) => {
                    let m = sample_dropout::<F>(n * n, config.dropout_prob, rng);
                    m.apply(&mut probs);
                    Some(m)
                }
                _ => None,
            };
            let out_h = probs.matmul(&vh);
            concat.add_into_cols(h * dk, &out_h);
            attn_probs.push(probs);
            attn_drop.push(drop);
        }
        let mut attn_out = concat.matmul(&layer.wo);
        attn_out.add_bias(&layer.bo);
        x.add_assign(&attn_out);

        let (ln2_out, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
        let mut ff_pre = ln2_out.matmul(&layer.w1);
        ff_pre.add_bias(&layer.b1);
        let mut ff_act = Tensor::zeros(n, config.ff_size);
        for (o, &p) in ff_act.data.iter_mut().zip(&ff_pre.data) {
            *o = gelu(p);
        }
        let mut ff_out = ff_act.matmul(&layer.w2);
        ff_out.add_bias(&layer.b2);
        let ff_drop = match (&mut dropout, config.dropout_prob > 0.0) {
            (Some(rng), true) => {
                let m = sample_dropout::<F>(n * d, config.dropout_prob, rng);
                m.apply(&mut ff_out);
                Some(m)
            }
            _ => None,
        };
        x.add_assign(&ff_out);

        layer_caches.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn_probs,
            attn_drop,
            concat,
            ln2,
            ln2_out,
            ff_pre,
            ff_act,
            ff_drop,

        });
    }

    let (hidden, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = hidden.matmul_nt(&params.tok_emb);
    let cache = ForwardCache { ids: ids.to_vec(), layers: layer_caches, lnf, hidden };
    Ok((logits, cache))
}

/// Deterministic inference pass (dropout disabled): n x vocab_size logits.
pub fn forward<F: Scalar>(
    ids: &[u32],
    mask: &AttentionMask,
    params: &ModelParameters<F>,
    config: &ModelConfig,
) -> Result<Tensor<F>> {
    forward_cached(ids, mask, params, config, None).map(|(logits, _)| logits)
}

/// Inference pass that also returns the first layer's attention-block output
/// (post output projection); used by mask-soundness probes.
pub fn forward_with_first_attention<F: Scalar>(
    ids: &[u32],
    mask: &AttentionMask,
    params: &ModelParameters<F>,
    config: &ModelConfig,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (logits, cache) = forward_cached(ids, mask, params, config, None)?;
    let layer = &cache.layers[0];
    let mut attn_out = layer.concat.matmul(&params.layers[0].wo);
    attn_out.add_bias(&params.layers[0].bo);
    Ok((logits, attn_out))
}

/// Mean cross-entropy over `positions` only.
pub fn mlm_loss<F: Scalar>(logits: &Tensor<F>, targets: &[u32], positions: &[usize]) -> Result<F> {
    if positions.is_empty() {
        return Err(Error::Argument("mlm_loss needs at least one predict position".into()));
    }
    if targets.len() != logits.rows {
        return Err(Error::Shape(format!(
            "targets length {} != sequence length {}",
            targets.len(),
            logits.rows
        )));
    }
    let mut total = F::zero();
    for &pos in positions {
        if pos >= logits.rows {
            return Err(Error::Argument(format!("predict position {pos} out of range")));
        }
        let row = logits.row(pos);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        total += lse - row[targets[pos] as usize];
    }
    Ok(total / F::from_f64(positions.len() as f64))
}

/// Forward + loss + full backward for one example; gradients are accumulated
/// into `grads`. Returns the example loss.
pub fn accumulate_gradients<F: Scalar>(
    ids: &[u32],
    mask: &AttentionMask,
    targets: &[u32],
    positions: &[usize],
    params: &ModelParameters<F>,
    config: &ModelConfig,
    grads: &mut ModelParameters<F>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<F> {
    let (logits, cache) = forward_cached(ids, mask, params, config, dropout)?;
    let loss = mlm_loss(&logits, targets, positions)?;

    let n = ids.len();
    let d = config.hidden_size;
    let heads = config.num_heads;
    let dk = config.head_dim();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());

    // d loss / d logits: (softmax - onehot) / |positions| at predict rows.
    let mut d_logits = Tensor::zeros(n, config.vocab_size);
    let inv = F::one() / F::from_f64(positions.len() as f64);
    for &pos in positions {
        let row = logits.row(pos);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
        let d_row = d_logits.row_mut(pos);
        for (c, &x) in row.iter().enumerate() {
            d_row[c] = (x - max).exp() / sum * inv;
        }
        d_row[targets[pos] as usize] -= inv;
    }

    // Tied output head: logits = hidden * tok_emb^T.
    let mut dx = d_logits.matmul(&params.tok_emb);
    grads.tok_emb.add_assign(&d_logits.matmul_tn(&cache.hidden));

    dx = layer_norm_backward(&dx, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    for (layer, (lp, lg)) in cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
        .map(|(c, pg)| (c, pg))
    {
        // Feed-forward block.
        let mut d_ff_out = dx.clone();
        if let Some(drop) = &layer.ff_drop {
            drop.apply(&mut d_ff_out);
        }
        lg.b2.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += d_ff_out.at(r, c);
            }
        });
        lg.w2.add_assign(&layer.ff_act.matmul_tn(&d_ff_out));
        let mut d_pre = d_ff_out.matmul_nt(&lp.w2);
        for (dp, &pre) in d_pre.data.iter_mut().zip(&layer.ff_pre.data) {
            *dp *= gelu_grad(pre);
        }
        lg.b1.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += d_pre.at(r, c);
            }
        });
        lg.w1.add_assign(&layer.ln2_out.matmul_tn(&d_pre));
        let d_ln2_out = d_pre.matmul_nt(&lp.w1);
        let d_mid_ln = layer_norm_backward(&d_ln2_out, &layer.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
        dx.add_assign(&d_mid_ln); // residual: d(x_mid) = dx + d through ln2

        // Attention block.
        let d_attn_out = dx.clone();
        lg.bo.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += d_attn_out.at(r, c);
            }
        });
        lg.wo.add_assign(&layer.concat.matmul_tn(&d_attn_out));
        let d_concat = d_attn_out.matmul_nt(&lp.wo);

        let mut dq = Tensor::zeros(n, d);
        let mut dk_t = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        for h in 0..heads {
            let d_out_h = d_concat.slice_cols(h * dk, dk);
            let probs = &layer.attn_probs[h];
            let vh = layer.v.slice_cols(h * dk, dk);
            let mut d_probs = d_out_h.matmul_nt(&vh);
            dv.add_into_cols(h * dk, &probs.matmul_tn(&d_out_h));
            if let Some(drop) = &layer.attn_drop[h] {
                drop.apply(&mut d_probs);
            }
            // Softmax backward per row: ds = p .* (dp - sum(dp .* p)).
            let mut d_scores = Tensor::zeros(n, n);
            for i in 0..n {
                let p_row = probs.row(i);
                let dp_row = d_probs.row(i);
                let dot: F = p_row.iter().zip(dp_row).map(|(&p, &dp)| p * dp).sum();
                for j in 0..n {
                    *d_scores.at_mut(i, j) = p_row[j] * (dp_row[j] - dot);
                }
            }
            d_scores.scale(scale);
            let qh = layer.q.slice_cols(h * dk, dk);
            let kh = layer.k.slice_cols(h * dk, dk);
            dq.add_into_cols(h * dk, &d_scores.matmul(&kh));
            dk_t.add_into_cols(h * dk, &d_scores.matmul_tn(&qh));
        }

        lg.bq.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += dq.at(r, c);
            }
        });
        lg.bk.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += dk_t.at(r, c);
            }
        });
        lg.bv.data.iter_mut().enumerate().for_each(|(c, b)| {
            for r in 0..n {
                *b += dv.at(r, c);
            }
        });
        lg.wq.add_assign(&layer.ln1_out.matmul_tn(&dq));
        lg.wk.add_assign(&layer.ln1_out.matmul_tn(&dk_t));
        lg.wv.add_assign(&layer.ln1_out.matmul_tn(&dv));

        let mut d_ln1_out = dq.matmul_nt(&lp.wq);
        d_ln1_out.add_assign(&dk_t.matmul_nt(&lp.wk));
        d_ln1_out.add_assign(&dv.matmul_nt(&lp.wv));
        let d_in_ln = layer_norm_backward(&d_ln1_out, &layer.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        dx.add_assign(&d_in_ln); // residual: d(x_in) = d(x_mid) + d through ln1
    }

    // Embedding lookups.
    for (i, &id) in cache.ids.iter().enumerate() {
        let dx_row = dx.row(i);
        let emb_row = grads.tok_emb.row_mut(id as usize);
        for (g, &v) in emb_row.iter_mut().zip(dx_row) {
            *g += v;
        }
        let pos_row = grads.pos_emb.row_mut(i);
        for (g, &v) in pos_row.iter_mut().zip(dx_row) {
            *g += v;
        }
    }

    Ok(loss)
}
