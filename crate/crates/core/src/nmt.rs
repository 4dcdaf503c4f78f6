//! Encoder-decoder translation model with gated injection of language-model
//! layers into the encoder and an L2 pull of decoder states towards them.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::bslm::LayerRepresentations;
use crate::config::{Integration, Side, TrainConfig};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{embed, init_matrix, padded_mask, DecoderLayer, Dropout, EncoderLayer, MaskKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NmtDims {
    /// Encoder and decoder layers.
    pub layers: usize,
    /// Layers of the language models feeding the model.
    pub lm_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationConfig {
    pub fusion: Integration,
    pub kt: Integration,
    pub kt_scale: f64,
    pub uni_directional: bool,
    pub fusion_side: Side,
    pub kt_side: Side,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            fusion: Integration::Off,
            kt: Integration::Off,
            kt_scale: 1.0,
            uni_directional: false,
            fusion_side: Side::Source,
            kt_side: Side::Target,
        }
    }
}

impl IntegrationConfig {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            fusion: c.fusion,
            kt: c.kt,
            kt_scale: c.kt_scale,
            uni_directional: c.uni_directional,
            fusion_side: c.fusion_side,
            kt_side: c.kt_side,
        }
    }

    pub fn needs_source_reps(&self) -> bool {
        (self.fusion.is_on() && self.fusion_side == Side::Source) || (self.kt.is_on() && self.kt_side == Side::Source)
    }

    pub fn needs_target_reps(&self) -> bool {
        self.kt.is_on() && self.kt_side == Side::Target
    }
}

/// Trainable layer-importance matrix `[N, M]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub w: ParamId,
}

#[derive(Clone, Debug)]
pub struct NmtModel<T> {
    pub dims: NmtDims,
    pub integration: IntegrationConfig,
    pub store: ParamStore<T>,
    pub src_embedding: ParamId,
    /// `[tgt_vocab, d]`; also the transposed output projection.
    pub tgt_embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub fusion: FusionWeights,
}

/// Sentence pairs of one training step plus their language-model stacks.
pub struct NmtBatch<'a, T> {
    pub src: Vec<&'a [usize]>,
    pub tgt: Vec<&'a [usize]>,
    pub src_reps: Option<Vec<&'a LayerRepresentations<T>>>,
    pub tgt_reps: Option<Vec<&'a LayerRepresentations<T>>>,
}

pub struct EncoderPass {
    pub out: Var,
    pub layers: Vec<Var>,
    /// `[B, 1, d]` gate of every fused layer, `None` elsewhere.
    pub gates: Vec<Option<Var>>,
    pub lens: Vec<usize>,
    pub padded_len: usize,
}

pub struct DecoderPass {
    pub layers: Vec<Var>,
    /// `[B, J, V]`
    pub logits: Var,
    pub lens: Vec<usize>,
    pub padded_len: usize,
}

pub struct LossParts {
    pub total: Var,
    pub lm: Var,
    pub kt: Option<Var>,
    /// Unsmoothed token-mean negative log-likelihood.
    pub lm_nll: f64,
    pub target_tokens: usize,
}

fn pad_ids(batch: &[&[usize]], len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(batch.len() * len);
    for s in batch {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD, len - s.len()));
    }
    ids
}

/// Stacks per-sentence `[M, K_b, d]` into a zero-padded `[M, B, K, d]`.
pub fn pack_representations<T: Scalar>(reps: &[&LayerRepresentations<T>], padded_len: usize) -> Result<Tensor<T>> {
    let first = reps.first().ok_or_else(|| Error::Contract("no representations to pack".into()))?;
    let (m, d, b) = (first.layers(), first.width(), reps.len());
    let mut data = vec![T::zero(); m * b * padded_len * d];
    for (bi, r) in reps.iter().enumerate() {
        if r.layers() != m || r.width() != d || r.positions() > padded_len {
            return Err(Error::dim("pack_representations", first.stack.shape(), r.stack.shape()));
        }
        let k = r.positions();
        for l in 0..m {
            let src = &r.stack.data()[l * k * d..(l + 1) * k * d];
            let dst = ((l * b + bi) * padded_len) * d;
            data[dst..dst + k * d].copy_from_slice(src);
        }
    }
    Tensor::new(&[m, b, padded_len, d], data)
}

/// `[B, 1, K]` row weights averaging over each sentence's real positions.
fn mean_weights<T: Scalar>(lens: &[usize], padded_len: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); lens.len() * padded_len];
    for (b, &l) in lens.iter().enumerate() {
        let w = T::lit(1.0 / l as f64);
        data[b * padded_len..b * padded_len + l].fill(w);
    }
    Tensor::new(&[lens.len(), 1, padded_len], data)
}

/// `[B, K, 1]` indicator of the first `counts[b]` positions.
fn position_mask<T: Scalar>(counts: &[usize], padded_len: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); counts.len() * padded_len];
    for (b, &c) in counts.iter().enumerate() {
        data[b * padded_len..b * padded_len + c].fill(T::one());
    }
    Tensor::new(&[counts.len(), padded_len, 1], data)
}

/// Gate `sigmoid(mean over positions)` of a `[B, K, d]` state; `[B, 1, d]`.
pub fn gate_graph<T: Scalar>(g: &mut Graph<T>, state: Var, lens: &[usize]) -> Result<Var> {
    let k = g.shape(state)[1];
    let a = g.constant(mean_weights(lens, k)?);
    let mean = g.matmul(a, state)?;
    g.sigmoid(mean)
}

/// `sum_m w_row[m] * reps[m]` for `w_row [1, M]`, `reps [M, B, K, d]`.
pub fn weighted_layers_graph<T: Scalar>(g: &mut Graph<T>, w_row: Var, reps: Var) -> Result<Var> {
    let rs = g.shape(reps).to_vec();
    if rs.len() != 4 || g.shape(w_row) != [1, rs[0]] {
        return Err(Error::dim("task_specific_representation", g.shape(w_row), &rs));
    }
    let flat = g.reshape(reps, &[rs[0], rs[1] * rs[2] * rs[3]])?;
    let mixed = g.matmul(w_row, flat)?;
    g.reshape(mixed, &rs[1..])
}

/// `sum ||a - b||^2` over the positions selected by `mask [B, K, 1]`.
fn masked_sq_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, mask: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.mul(diff, diff)?;
    g.sum_all(sq)
}

impl<T: Scalar> NmtModel<T> {
    /// Parameters are drawn in the order source embedding, target embedding,
    /// encoder layers, decoder layers; the fusion matrix is set to `1/M`
    /// without touching the generator.
    pub fn new(dims: NmtDims, integration: IntegrationConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.layers == 0 || dims.lm_layers == 0 || !dims.d.is_multiple_of(2) || dims.heads == 0 || !dims.d.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!("invalid translation model dimensions {dims:?}")));
        }
        if integration.fusion.is_on() && integration.fusion_side == Side::Target {
            return Err(Error::Unsupported(
                "fusion on the target side would need language-model calls on partial translations".into(),
            ));
        }
        if integration.kt.is_on() && dims.layers != dims.lm_layers {
            return Err(Error::Config(format!(
                "knowledge transfer pairs layer n with language-model layer n: {} layers vs {}",
                dims.layers, dims.lm_layers
            )));
        }
        let mut store = ParamStore::new();
        let src_embedding = store.add("src.embedding", init_matrix(rng, dims.src_vocab, dims.d));
        let tgt_embedding = store.add("tgt.embedding", init_matrix(rng, dims.tgt_vocab, dims.d));
        let encoder = (0..dims.layers)
            .map(|n| EncoderLayer::new(&mut store, rng, &format!("encoder{n}"), dims.d, dims.d_ff, dims.heads))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..dims.layers)
            .map(|n| DecoderLayer::new(&mut store, rng, &format!("decoder{n}"), dims.d, dims.d_ff, dims.heads))
            .collect::<Result<Vec<_>>>()?;
        let w = store.add(
            "fusion.w",
            Tensor::full(&[dims.layers, dims.lm_layers], T::lit(1.0 / dims.lm_layers as f64)),
        );
        Ok(Self {
            dims,
            integration,
            store,
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
            fusion: FusionWeights { w },
        })
    }

    pub fn cast<U: Scalar>(&self) -> NmtModel<U> {
        NmtModel {
            dims: self.dims,
            integration: self.integration,
            store: self.store.cast(),
            src_embedding: self.src_embedding,
            tgt_embedding: self.tgt_embedding,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            fusion: self.fusion,
        }
    }

    fn check_ids(&self, batch: &[&[usize]], vocab: usize) -> Result<()> {
        for s in batch {
            if s.is_empty() {
                return Err(Error::Contract("empty sentence in batch".into()));
            }
            if let Some(&id) = s.iter().find(|&&t| t >= vocab) {
                return Err(Error::UnknownToken { id, size: vocab });
            }
        }
        Ok(())
    }

    /// Encoder over a padded batch; `src_reps` is `[M, B, I, d]` and is
    /// required when fusion is on.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        src: &[&[usize]],
        src_reps: Option<&Tensor<T>>,
        dropout: &mut Dropout,
    ) -> Result<EncoderPass> {
        if src.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.check_ids(src, self.dims.src_vocab)?;
        let lens: Vec<usize> = src.iter().map(|s| s.len()).collect();
        let padded_len = *lens.iter().max().unwrap();
        let fusion = self.integration.fusion;
        let reps = match (fusion.is_on(), src_reps) {
            (false, _) => None,
            (true, None) => return Err(Error::Contract("fusion needs source representations".into())),
            (true, Some(r)) => {
                let expected = [self.dims.lm_layers, src.len(), padded_len, self.dims.d];
                if r.shape() != expected {
                    return Err(Error::dim("fused encoder", &expected, r.shape()));
                }
                Some(g.constant(r.clone()))
            }
        };
        let mask = padded_mask(MaskKind::None, &lens, &lens, padded_len, padded_len)?;
        let table = g.param(&self.store, self.src_embedding);
        let ids = pad_ids(src, padded_len);
        let mut x = embed(g, table, &ids, src.len(), padded_len)?;
        x = dropout.apply(g, x)?;
        let w = reps.map(|_| g.param(&self.store, self.fusion.w));
        let mut layers = Vec::with_capacity(self.dims.layers);
        let mut gates = Vec::with_capacity(self.dims.layers);
        for (n, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(g, &self.store, x, Some(&mask), dropout)?;
            let mut gate = None;
            if let (Some(reps), Some(w)) = (reps, w) {
                if fusion.applies(n) {
                    let theta = gate_graph(g, x, &lens)?;
                    let row = g.slice(w, 0, n, 1)?;
                    let mixed = weighted_layers_graph(g, row, reps)?;
                    let injected = g.mul(theta, mixed)?;
                    x = g.add(x, injected)?;
                    gate = Some(theta);
                }
            }
            layers.push(x);
            gates.push(gate);
        }
        Ok(EncoderPass {
            out: x,
            layers,
            gates,
            lens,
            padded_len,
        })
    }

    /// Teacher-forced decoder over `dec_in` (each starting with `BOS`).
    /// `memory` is `[B or 1, I, d]`; `src_lens` gives the real source lengths.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        src_lens: &[usize],
        dec_in: &[&[usize]],
        dropout: &mut Dropout,
    ) -> Result<DecoderPass> {
        if dec_in.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.check_ids(dec_in, self.dims.tgt_vocab)?;
        let b = dec_in.len();
        let lens: Vec<usize> = dec_in.iter().map(|s| s.len()).collect();
        let padded_len = *lens.iter().max().unwrap();
        let mem_shape = g.shape(memory).to_vec();
        let src_padded = mem_shape[1];
        let self_mask = padded_mask(MaskKind::Forward, &lens, &lens, padded_len, padded_len)?;
        let cross_mask = if mem_shape[0] == b {
            if src_lens.len() != b {
                return Err(Error::dim("decode", &[src_lens.len()], &[b]));
            }
            if src_lens.iter().all(|&l| l == src_padded) && lens.iter().all(|&l| l == padded_len) {
                None
            } else {
                Some(padded_mask(MaskKind::Cross, &lens, src_lens, padded_len, src_padded)?)
            }
        } else if mem_shape[0] == 1 && src_lens.first() == Some(&src_padded) {
            None
        } else {
            return Err(Error::dim("decode memory", &mem_shape, &[b]));
        };
        let table = g.param(&self.store, self.tgt_embedding);
        let ids = pad_ids(dec_in, padded_len);
        let mut y = embed(g, table, &ids, b, padded_len)?;
        y = dropout.apply(g, y)?;
        let mut layers = Vec::with_capacity(self.dims.layers);
        for layer in &self.decoder {
            y = layer.forward(g, &self.store, y, memory, Some(&self_mask), cross_mask.as_ref(), dropout)?;
            layers.push(y);
        }
        let table = g.param(&self.store, self.tgt_embedding);
        let proj = g.permute(table, &[1, 0])?;
        let logits = g.matmul(y, proj)?;
        Ok(DecoderPass {
            layers,
            logits,
            lens,
            padded_len,
        })
    }

    /// `L_T = L_M + kt_scale * L_E` for one batch. `L_M` averages the
    /// label-smoothed cross-entropy over every target token including the
    /// final `EOS`; `L_E` sums squared distances over the configured layers
    /// and divides by the number of aligned positions.
    pub fn loss(&self, g: &mut Graph<T>, batch: &NmtBatch<T>, dropout: &mut Dropout, smoothing: f64) -> Result<LossParts> {
        if batch.src.len() != batch.tgt.len() {
            return Err(Error::dim("loss", &[batch.src.len()], &[batch.tgt.len()]));
        }
        let it = self.integration;
        let src_len = batch.src.iter().map(|s| s.len()).max().unwrap_or(0);
        let src_reps = match &batch.src_reps {
            Some(r) if it.needs_source_reps() => {
                for (s, rep) in batch.src.iter().zip(r) {
                    if rep.positions() != s.len() {
                        return Err(Error::dim("source representations", &[s.len()], rep.stack.shape()));
                    }
                }
                Some(pack_representations(r, src_len)?)
            }
            None if it.needs_source_reps() => {
                return Err(Error::Contract("configuration needs source representations".into()))
            }
            _ => None,
        };
        let enc = self.encode(g, &batch.src, src_reps.as_ref(), dropout)?;

        let dec_in: Vec<Vec<usize>> = batch
            .tgt
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let dec_refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let dec = self.decode(g, enc.out, &enc.lens, &dec_refs, dropout)?;

        let l = dec.padded_len;
        let total: usize = dec.lens.iter().sum();
        let w = T::lit(1.0 / total as f64);
        let mut targets = vec![PAD; batch.tgt.len() * l];
        let mut weights = vec![T::zero(); batch.tgt.len() * l];
        for (b, t) in batch.tgt.iter().enumerate() {
            for (j, &tok) in t.iter().chain(std::iter::once(&EOS)).enumerate() {
                targets[b * l + j] = tok;
                weights[b * l + j] = w;
            }
        }
        let lm = g.cross_entropy(dec.logits, &targets, &weights, T::lit(smoothing))?;
        let lm_nll = if smoothing == 0.0 {
            g.value(lm).item().as_f64()
        } else {
            let plain = g.cross_entropy(dec.logits, &targets, &weights, T::zero())?;
            g.value(plain).item().as_f64()
        };

        let kt = if it.kt.is_on() {
            let (states, reps, lens, padded) = match it.kt_side {
                Side::Target => {
                    let reps = batch
                        .tgt_reps
                        .as_ref()
                        .ok_or_else(|| Error::Contract("knowledge transfer needs target representations".into()))?;
                    (dec.layers.clone(), reps, batch.tgt.iter().map(|t| t.len()).collect::<Vec<_>>(), l)
                }
                Side::Source => {
                    let reps = batch
                        .src_reps
                        .as_ref()
                        .ok_or_else(|| Error::Contract("knowledge transfer needs source representations".into()))?;
                    (enc.layers.clone(), reps, enc.lens.clone(), enc.padded_len)
                }
            };
            Some(self.kt_graph(g, &states, reps, &lens, padded)?)
        } else {
            None
        };

        let total_loss = match kt {
            Some(kt) => {
                let scaled = g.scale(kt, T::lit(it.kt_scale))?;
                g.add(lm, scaled)?
            }
            None => lm,
        };
        Ok(LossParts {
            total: total_loss,
            lm,
            kt,
            lm_nll,
            target_tokens: total,
        })
    }

    fn kt_graph(
        &self,
        g: &mut Graph<T>,
        states: &[Var],
        reps: &[&LayerRepresentations<T>],
        lens: &[usize],
        padded: usize,
    ) -> Result<Var> {
        for (rep, &len) in reps.iter().zip(lens) {
            if rep.positions() != len || rep.layers() != states.len() {
                return Err(Error::dim("knowledge_transfer_loss", &[states.len(), len], rep.stack.shape()));
            }
        }
        let packed = pack_representations(reps, padded)?;
        let (m, b, d) = (packed.shape()[0], packed.shape()[1], packed.shape()[3]);
        let mask = g.constant(position_mask(lens, padded)?);
        let mut acc: Option<Var> = None;
        for (n, &state) in states.iter().enumerate() {
            if !self.integration.kt.applies(n) || n >= m {
                continue;
            }
            let layer = packed.index_axis0(n).reshape(&[b, padded, d])?;
            let target = g.constant(layer);
            let term = masked_sq_distance(g, state, target, mask)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let acc = acc.ok_or_else(|| Error::Contract("no layer selected for knowledge transfer".into()))?;
        let count: usize = lens.iter().sum();
        g.scale(acc, T::lit(1.0 / count as f64))
    }

    /// Encoder output `[1, I, d]` and fused-layer gates for one sentence.
    pub fn encode_sentence(&self, src: &[usize], reps: Option<&LayerRepresentations<T>>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let packed = match reps {
            Some(r) if self.integration.fusion.is_on() => Some(pack_representations(&[r], src.len())?),
            _ => None,
        };
        let enc = self.encode(&mut g, &[src], packed.as_ref(), &mut Dropout::inactive())?;
        let gates = enc.gates.iter().flatten().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(enc.out).clone(), gates))
    }

    /// Log-probabilities `[B, V]` of the next token after each prefix.
    pub fn next_token_log_probs(&self, memory: &Tensor<T>, src_len: usize, prefixes: &[&[usize]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mem = g.constant(memory.clone());
        let dec = self.decode(&mut g, mem, &[src_len], prefixes, &mut Dropout::inactive())?;
        let logits = g.value(dec.logits);
        let (l, v) = (dec.padded_len, self.dims.tgt_vocab);
        let mut out = Vec::with_capacity(prefixes.len() * v);
        for (b, p) in prefixes.iter().enumerate() {
            let row = &logits.data()[(b * l + p.len() - 1) * v..(b * l + p.len()) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lz = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            out.extend(row.iter().map(|&x| x - lz));
        }
        Tensor::new(&[prefixes.len(), v], out)
    }

    /// Row-softmax of the fusion matrix, `[N, M]`.
    pub fn fusion_heatmap(&self) -> Result<Tensor<T>> {
        if !self.integration.fusion.is_on() {
            return Err(Error::Contract("model was trained without fusion".into()));
        }
        let w = self.store.get(self.fusion.w);
        let m = w.shape()[1];
        let mut data = Vec::with_capacity(w.len());
        for row in w.data().chunks(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            data.extend(e.into_iter().map(|x| x / z));
        }
        Tensor::new(w.shape(), data)
    }
}

/// Gate of one `[I, d]` layer state; `[d]`, every entry in `(0, 1)`.
pub fn compute_gate<T: Scalar>(state: &Tensor<T>) -> Result<Tensor<T>> {
    if state.ndim() != 2 {
        return Err(Error::dim("compute_gate", state.shape(), &[0, 0]));
    }
    let (i, d) = (state.shape()[0], state.shape()[1]);
    let mut g = Graph::new();
    let x = g.constant(state.clone().reshape(&[1, i, d])?);
    let theta = gate_graph(&mut g, x, &[i])?;
    g.value(theta).clone().reshape(&[d])
}

/// `sum_m w_row[m] * R_m` over an `[M, K, d]` stack.
pub fn task_specific_representation<T: Scalar>(reps: &LayerRepresentations<T>, w_row: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, d) = (reps.layers(), reps.positions(), reps.width());
    if w_row.len() != m {
        return Err(Error::dim("task_specific_representation", w_row.shape(), reps.stack.shape()));
    }
    let mut g = Graph::new();
    let w = g.constant(w_row.clone().reshape(&[1, m])?);
    let r = g.constant(reps.stack.clone().reshape(&[m, 1, k, d])?);
    let out = weighted_layers_graph(&mut g, w, r)?;
    g.value(out).clone().reshape(&[k, d])
}

/// `(1/J) sum_n sum_j ||dec[n, j] - lm[n, j]||^2` over the layers selected
/// by `layers`, for `dec [N, J, d]` and an aligned language-model stack.
pub fn knowledge_transfer_loss<T: Scalar>(
    decoder_reps: &Tensor<T>,
    lm_reps: &LayerRepresentations<T>,
    layers: Integration,
) -> Result<T> {
    if decoder_reps.shape() != lm_reps.stack.shape() {
        return Err(Error::dim("knowledge_transfer_loss", decoder_reps.shape(), lm_reps.stack.shape()));
    }
    let (n, j) = (decoder_reps.shape()[0], decoder_reps.shape()[1]);
    let mut total = T::zero();
    let mut any = false;
    for layer in (0..n).filter(|&l| layers.applies(l)) {
        any = true;
        let (a, b) = (decoder_reps.index_axis0(layer), lm_reps.stack.index_axis0(layer));
        total += a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
    }
    if !any {
        return Err(Error::Contract("no layer selected for knowledge transfer".into()));
    }
    Ok(total / T::lit(j as f64))
}

/// Mean cross-entropy of `logits [J, V]` against `gold [J]`.
pub fn translation_loss<T: Scalar>(logits: &Tensor<T>, gold: &[usize], smoothing: f64) -> Result<T> {
    if logits.ndim() != 2 || logits.shape()[0] != gold.len() {
        return Err(Error::dim("translation_loss", logits.shape(), &[gold.len()]));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let w = vec![T::lit(1.0 / gold.len() as f64); gold.len()];
    let loss = g.cross_entropy(x, gold, &w, T::lit(smoothing))?;
    Ok(g.value(loss).item())
}

/// `L_T = L_M + L_E`.
pub fn joint_loss<T: Scalar>(lm: T, kt: T) -> T {
    lm + kt
}
