//! Attention, feed-forward and normalization blocks shared by the language
//! models and the translation model.
//!
//! Activations are laid out `[batch, positions, width]`. Attention masks are
//! additive constants broadcast over heads (`[batch, 1, queries, keys]`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, NEG_SENTINEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Query `c` sees keys `v <= c`.
    Forward,
    /// Query `c` sees keys `v >= c`.
    Backward,
    None,
    Cross,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<T> {
    pub kind: MaskKind,
    /// `[queries, keys]` of `0` / negative sentinel.
    pub matrix: Tensor<T>,
}

fn direction_allows(kind: MaskKind, c: usize, v: usize) -> bool {
    match kind {
        MaskKind::Forward => v <= c,
        MaskKind::Backward => v >= c,
        MaskKind::None | MaskKind::Cross => true,
    }
}

/// Square `k x k` mask of the given kind.
pub fn build_mask<T: Scalar>(k: usize, kind: MaskKind) -> Result<AttentionMask<T>> {
    if k == 0 {
        return Err(Error::Contract("mask length must be at least 1".into()));
    }
    let neg = T::lit(NEG_SENTINEL);
    let mut data = vec![T::zero(); k * k];
    for c in 0..k {
        for v in 0..k {
            if !direction_allows(kind, c, v) {
                data[c * k + v] = neg;
            }
        }
    }
    Ok(AttentionMask {
        kind,
        matrix: Tensor::new(&[k, k], data)?,
    })
}

/// Batched mask `[batch, 1, kq, kk]` combining direction with key padding.
///
/// Padded query rows may attend only to a single key (their own position for
/// self-attention, key 0 for cross-attention) so no row is fully masked;
/// their outputs are never read.
pub fn padded_mask<T: Scalar>(
    kind: MaskKind,
    q_lens: &[usize],
    k_lens: &[usize],
    kq: usize,
    kk: usize,
) -> Result<Tensor<T>> {
    if q_lens.len() != k_lens.len() {
        return Err(Error::dim("padded_mask", q_lens, k_lens));
    }
    let neg = T::lit(NEG_SENTINEL);
    let b = q_lens.len();
    let mut data = vec![neg; b * kq * kk];
    for (bi, (&ql, &kl)) in q_lens.iter().zip(k_lens).enumerate() {
        if ql == 0 || kl == 0 || ql > kq || kl > kk {
            return Err(Error::Contract(format!(
                "sequence lengths ({ql}, {kl}) invalid for padded sizes ({kq}, {kk})"
            )));
        }
        for c in 0..kq {
            let row = &mut data[(bi * kq + c) * kk..(bi * kq + c + 1) * kk];
            if c >= ql {
                let keep = if kind == MaskKind::Cross { 0 } else { c.min(kk - 1) };
                row[keep] = T::zero();
                continue;
            }
            for (v, slot) in row.iter_mut().enumerate().take(kl) {
                if direction_allows(kind, c, v) {
                    *slot = T::zero();
                }
            }
        }
    }
    Tensor::new(&[b, 1, kq, kk], data)
}

/// Sinusoidal position table `[k, d]`.
pub fn positional_encoding<T: Scalar>(k: usize, d: usize) -> Result<Tensor<T>> {
    if k == 0 || d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "positional encoding needs k >= 1 and even d >= 2, got ({k}, {d})"
        )));
    }
    let mut data = vec![T::zero(); k * d];
    for pos in 0..k {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = T::lit(angle.sin());
            data[pos * d + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Tensor::new(&[k, d], data)
}

/// Xavier-uniform matrix.
pub fn init_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Inverted dropout. Inactive without an RNG or with a zero rate.
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn inactive() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(&shape, data)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: store.add(format!("{prefix}.wq"), init_matrix(rng, d, d)),
            wk: store.add(format!("{prefix}.wk"), init_matrix(rng, d, d)),
            wv: store.add(format!("{prefix}.wv"), init_matrix(rng, d, d)),
            wo: store.add(format!("{prefix}.wo"), init_matrix(rng, d, d)),
            heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init_matrix(rng, d, d_ff)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
            w2: store.add(format!("{prefix}.w2"), init_matrix(rng, d_ff, d)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }
}

/// Parameters of one language-model layer: attention, feed-forward and one
/// normalization.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norm: LayerNormParams,
}

impl LayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(store, rng, &format!("{prefix}.attn"), d, heads)?,
            ffn: FeedForwardParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ff),
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), d),
        })
    }
}

fn swap_last_two(nd: usize) -> Vec<usize> {
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 1, nd - 2);
    axes
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` over the last two axes.
/// Returns the output and the attention weights.
pub fn directional_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().unwrap();
    let (ks, vs) = (g.shape(k), g.shape(v));
    if ks.last() != Some(&dk) || ks.len() != vs.len() || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::dim("directional_attention", g.shape(q), ks));
    }
    let kt = g.permute(k, &swap_last_two(g.shape(k).len()))?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::one() / T::lit(dk as f64).sqrt())?;
    let weights = g.softmax(scaled, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `[B, K, d] -> [B, H, K, d/H]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Multi-head attention of `x_q [B, Kq, d]` over `x_kv [B, Kk, d]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    x_q: Var,
    x_kv: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let qs = g.shape(x_q).to_vec();
    if qs.len() != 3 || g.shape(x_kv).len() != 3 || g.shape(x_kv)[2] != qs[2] {
        return Err(Error::dim("multi_head_attention", &qs, g.shape(x_kv)));
    }
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wo = g.param(store, p.wo);
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let (q, k, v) = (
        split_heads(g, q, p.heads)?,
        split_heads(g, k, p.heads)?,
        split_heads(g, v, p.heads)?,
    );
    let (heads, _) = directional_attention(g, q, k, v, mask)?;
    let merged = g.permute(heads, &[0, 2, 1, 3])?;
    let concat = g.reshape(merged, &qs)?;
    g.matmul(concat, wo)
}

pub fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &FeedForwardParams,
    x: Var,
) -> Result<Var> {
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    g.add(o, b2)
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &LayerNormParams,
    x: Var,
) -> Result<Var> {
    let gain = g.param(store, p.gain);
    let bias = g.param(store, p.bias);
    g.layer_norm(x, gain, bias)
}

/// Language-model layer: `LN(FFN(MultiHead(R, R, R)) + R)`. The residual
/// wraps the feed-forward output directly; there is none around attention.
pub fn slm_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &LayerParams,
    r_prev: Var,
    mask: Option<&Tensor<T>>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let h = multi_head_attention(g, store, &p.attn, r_prev, r_prev, mask)?;
    let f = feed_forward(g, store, &p.ffn, h)?;
    let f = dropout.apply(g, f)?;
    let s = g.add(f, r_prev)?;
    layer_norm(g, store, &p.norm, s)
}

/// Post-norm Transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(store, rng, &format!("{prefix}.attn"), d, heads)?,
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), d),
            ffn: FeedForwardParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ff),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), d),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let a = multi_head_attention(g, store, &self.attn, x, x, mask)?;
        let a = dropout.apply(g, a)?;
        let h = g.add(x, a)?;
        let h = layer_norm(g, store, &self.norm1, h)?;
        let f = feed_forward(g, store, &self.ffn, h)?;
        let f = dropout.apply(g, f)?;
        let o = g.add(h, f)?;
        layer_norm(g, store, &self.norm2, o)
    }
}

/// Post-norm Transformer decoder layer: causal self-attention, cross-attention
/// over the encoder output, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm3: LayerNormParams,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::new(store, rng, &format!("{prefix}.self_attn"), d, heads)?,
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), d),
            cross_attn: AttentionParams::new(store, rng, &format!("{prefix}.cross_attn"), d, heads)?,
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), d),
            ffn: FeedForwardParams::new(store, rng, &format!("{prefix}.ffn"), d, d_ff),
            norm3: LayerNormParams::new(store, &format!("{prefix}.norm3"), d),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: Var,
        memory: Var,
        self_mask: Option<&Tensor<T>>,
        cross_mask: Option<&Tensor<T>>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let a = multi_head_attention(g, store, &self.self_attn, y, y, self_mask)?;
        let a = dropout.apply(g, a)?;
        let h1 = g.add(y, a)?;
        let h1 = layer_norm(g, store, &self.norm1, h1)?;
        let c = multi_head_attention(g, store, &self.cross_attn, h1, memory, cross_mask)?;
        let c = dropout.apply(g, c)?;
        let h2 = g.add(h1, c)?;
        let h2 = layer_norm(g, store, &self.norm2, h2)?;
        let f = feed_forward(g, store, &self.ffn, h2)?;
        let f = dropout.apply(g, f)?;
        let o = g.add(h2, f)?;
        layer_norm(g, store, &self.norm3, o)
    }
}

/// Token embedding lookup scaled by `sqrt(d)` plus sinusoidal positions.
/// `ids` is `[batch * len]` row-major; returns `[batch, len, d]`.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let d = g.shape(table)[1];
    if ids.len() != batch * len {
        return Err(Error::dim("embed", &[ids.len()], &[batch, len]));
    }
    let e = g.gather(table, ids)?;
    let e = g.reshape(e, &[batch, len, d])?;
    let e = g.scale(e, T::lit(d as f64).sqrt())?;
    let pe = g.constant(positional_encoding(len, d)?);
    g.add(e, pe)
}
