//! Directional self-attention language models and the summed
//! bi-directional representation stack they expose.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{embed, init_matrix, padded_mask, slm_layer, Dropout, LayerParams, MaskKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn mask_kind(self) -> MaskKind {
        match self {
            Direction::Forward => MaskKind::Forward,
            Direction::Backward => MaskKind::Backward,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// Architecture of one language model. `layers` counts the embedding layer,
/// so a model has `layers - 1` attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlmDims {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
}

impl SlmDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("invalid language model dimensions {self:?}")));
        }
        if self.vocab <= EOS {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        if !self.d.is_multiple_of(self.heads) || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d={} must be even and divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SlmModel<T> {
    pub direction: Direction,
    pub dims: SlmDims,
    pub store: ParamStore<T>,
    /// `[vocab, d]`; also the transposed output projection.
    pub embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

/// Whose layers a representation stack holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepSource {
    Forward,
    Backward,
    Summed,
}

/// Per-layer, per-position stack `[M, K, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRepresentations<T> {
    pub stack: Tensor<T>,
    pub source: RepSource,
}

impl<T: Scalar> LayerRepresentations<T> {
    pub fn layers(&self) -> usize {
        self.stack.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.stack.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.stack.shape()[2]
    }

    /// Elementwise sum of two aligned stacks.
    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.stack.shape() != other.stack.shape() {
            return Err(Error::dim("LayerRepresentations::sum", self.stack.shape(), other.stack.shape()));
        }
        let data = self
            .stack
            .data()
            .iter()
            .zip(other.stack.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            stack: Tensor::new(self.stack.shape(), data)?,
            source: RepSource::Summed,
        })
    }
}

/// Graph handles produced by a batched forward pass.
pub struct SlmPass {
    /// `M` activations `[B, K + 1, d]` over the framed input.
    pub framed: Vec<Var>,
    /// Framed input ids `[B * (K + 1)]`, `PAD` beyond each sentence.
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub padded_len: usize,
}

impl<T: Scalar> SlmModel<T> {
    pub fn new(direction: Direction, dims: SlmDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let prefix = direction.as_str();
        let embedding = store.add(format!("{prefix}.embedding"), init_matrix(rng, dims.vocab, dims.d));
        let layers = (1..dims.layers)
            .map(|m| LayerParams::new(&mut store, rng, &format!("{prefix}.layer{m}"), dims.d, dims.d_ff, dims.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            direction,
            dims,
            store,
            embedding,
            layers,
        })
    }

    pub fn cast<U: Scalar>(&self) -> SlmModel<U> {
        SlmModel {
            direction: self.direction,
            dims: self.dims,
            store: self.store.cast(),
            embedding: self.embedding,
            layers: self.layers.clone(),
        }
    }

    /// `BOS w1..wK` for the forward model, `w1..wK EOS` for the backward one.
    pub fn frame(&self, tokens: &[usize]) -> Vec<usize> {
        match self.direction {
            Direction::Forward => std::iter::once(BOS).chain(tokens.iter().copied()).collect(),
            Direction::Backward => tokens.iter().copied().chain(std::iter::once(EOS)).collect(),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("language model input must be non-empty".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::UnknownToken {
                id,
                size: self.dims.vocab,
            });
        }
        Ok(())
    }

    /// Runs all layers over a padded batch of sentences.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        batch: &[&[usize]],
        dropout: &mut Dropout,
    ) -> Result<SlmPass> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for s in batch {
            self.check_tokens(s)?;
        }
        let lens: Vec<usize> = batch.iter().map(|s| s.len() + 1).collect();
        let padded_len = *lens.iter().max().unwrap();
        let mut ids = Vec::with_capacity(batch.len() * padded_len);
        for s in batch {
            let framed = self.frame(s);
            ids.extend_from_slice(&framed);
            ids.extend(std::iter::repeat_n(PAD, padded_len - framed.len()));
        }
        let mask = padded_mask(self.direction.mask_kind(), &lens, &lens, padded_len, padded_len)?;
        let table = g.param(&self.store, self.embedding);
        let mut r = embed(g, table, &ids, batch.len(), padded_len)?;
        let mut framed = Vec::with_capacity(self.dims.layers);
        framed.push(r);
        for p in &self.layers {
            r = slm_layer(g, &self.store, p, r, Some(&mask), dropout)?;
            framed.push(r);
        }
        Ok(SlmPass {
            framed,
            ids,
            lens,
            padded_len,
        })
    }

    /// Offset of the framed position aligned with token 0.
    fn alignment_offset(&self) -> usize {
        match self.direction {
            Direction::Forward => 1,
            Direction::Backward => 0,
        }
    }

    /// Representation stack `[M, K, d]` aligned with `tokens`.
    pub fn representations(&self, tokens: &[usize]) -> Result<LayerRepresentations<T>> {
        let mut g = Graph::new();
        let pass = self.forward_batch(&mut g, &[tokens], &mut Dropout::inactive())?;
        let (k, d) = (tokens.len(), self.dims.d);
        let off = self.alignment_offset();
        let mut data = Vec::with_capacity(self.dims.layers * k * d);
        for &v in &pass.framed {
            data.extend_from_slice(&g.value(v).data()[off * d..(off + k) * d]);
        }
        Ok(LayerRepresentations {
            stack: Tensor::new(&[self.dims.layers, k, d], data)?,
            source: match self.direction {
                Direction::Forward => RepSource::Forward,
                Direction::Backward => RepSource::Backward,
            },
        })
    }

    /// Next-token logits `[B, K + 1, V]` from the top layer via the tied
    /// embedding.
    pub fn logits(&self, g: &mut Graph<T>, pass: &SlmPass) -> Result<Var> {
        let table = g.param(&self.store, self.embedding);
        let proj = g.permute(table, &[1, 0])?;
        g.matmul(*pass.framed.last().unwrap(), proj)
    }

    /// Mean negative log-likelihood over every token of the batch. The
    /// forward model predicts token `k` from framed position `k` (which has
    /// seen `BOS w1..w(k-1)`); the backward model from framed position `k + 1`.
    /// Returns the loss and the number of predicted tokens.
    pub fn lm_loss_batch(
        &self,
        g: &mut Graph<T>,
        batch: &[&[usize]],
        dropout: &mut Dropout,
        smoothing: f64,
    ) -> Result<(Var, usize)> {
        let pass = self.forward_batch(g, batch, dropout)?;
        let logits = self.logits(g, &pass)?;
        let l = pass.padded_len;
        let total: usize = batch.iter().map(|s| s.len()).sum();
        let w = T::lit(1.0 / total as f64);
        let mut targets = vec![PAD; batch.len() * l];
        let mut weights = vec![T::zero(); batch.len() * l];
        for (b, s) in batch.iter().enumerate() {
            for (k, &tok) in s.iter().enumerate() {
                let pos = match self.direction {
                    Direction::Forward => k,
                    Direction::Backward => k + 1,
                };
                targets[b * l + pos] = tok;
                weights[b * l + pos] = w;
            }
        }
        let loss = g.cross_entropy(logits, &targets, &weights, T::lit(smoothing))?;
        Ok((loss, total))
    }

    /// Unsmoothed mean negative log-likelihood of one sentence.
    pub fn lm_loss(&self, tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.lm_loss_batch(&mut g, &[tokens], &mut Dropout::inactive(), 0.0)?;
        Ok(g.value(loss).item().as_f64())
    }

    /// Next-token logits `[K, V]` of one sentence, row `k` predicting token `k`.
    pub fn prediction_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pass = self.forward_batch(&mut g, &[tokens], &mut Dropout::inactive())?;
        let logits = self.logits(&mut g, &pass)?;
        let (k, v) = (tokens.len(), self.dims.vocab);
        let start = match self.direction {
            Direction::Forward => 0,
            Direction::Backward => 1,
        };
        Tensor::new(&[k, v], g.value(logits).data()[start * v..(start + k) * v].to_vec())
    }
}

/// Training bookkeeping carried with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: f64,
}

/// A frozen forward/backward pair sharing one vocabulary.
#[derive(Debug)]
pub struct BslmCheckpoint<T> {
    pub forward: SlmModel<T>,
    pub backward: SlmModel<T>,
    pub vocab: Vocabulary,
    pub meta: TrainingMeta,
    extractions: AtomicUsize,
}

impl<T: Scalar> Clone for BslmCheckpoint<T> {
    fn clone(&self) -> Self {
        Self {
            forward: self.forward.clone(),
            backward: self.backward.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            extractions: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> BslmCheckpoint<T> {
    pub fn new(forward: SlmModel<T>, backward: SlmModel<T>, vocab: Vocabulary, meta: TrainingMeta) -> Result<Self> {
        if forward.direction != Direction::Forward || backward.direction != Direction::Backward {
            return Err(Error::Contract("checkpoint needs one forward and one backward model".into()));
        }
        if forward.dims != backward.dims {
            return Err(Error::Contract(format!(
                "directional models disagree: {:?} vs {:?}",
                forward.dims, backward.dims
            )));
        }
        if forward.dims.vocab != vocab.len() {
            return Err(Error::VocabularyMismatch {
                expected: format!("{} entries", forward.dims.vocab),
                found: format!("{} entries", vocab.len()),
            });
        }
        Ok(Self {
            forward,
            backward,
            vocab,
            meta,
            extractions: AtomicUsize::new(0),
        })
    }

    pub fn dims(&self) -> SlmDims {
        self.forward.dims
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    pub fn cast<U: Scalar>(&self) -> BslmCheckpoint<U> {
        BslmCheckpoint {
            forward: self.forward.cast(),
            backward: self.backward.cast(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            extractions: AtomicUsize::new(0),
        }
    }

    /// Number of sentences passed through [`Self::extract_representation`]
    /// or [`Self::extract_directional`] so far.
    pub fn extraction_count(&self) -> usize {
        self.extractions.load(Ordering::Relaxed)
    }

    pub fn reset_extraction_count(&self) {
        self.extractions.store(0, Ordering::Relaxed);
    }

    /// Sum of the forward and backward stacks, `[M, K, d]`. The result is a
    /// plain tensor, so nothing downstream can reach these parameters.
    pub fn extract_representation(&self, tokens: &[usize]) -> Result<LayerRepresentations<T>> {
        self.extract_directional(tokens, true)
    }

    /// Like [`Self::extract_representation`]; with `bidirectional == false`
    /// only the forward stack is returned.
    pub fn extract_directional(&self, tokens: &[usize], bidirectional: bool) -> Result<LayerRepresentations<T>> {
        self.extractions.fetch_add(1, Ordering::Relaxed);
        let fwd = self.forward.representations(tokens)?;
        if !bidirectional {
            return Ok(fwd);
        }
        let bwd = self.backward.representations(tokens)?;
        fwd.sum(&bwd)
    }

    /// Checks that `vocab` is the one this checkpoint was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let (expected, found) = (self.vocab_hash(), vocab.hash());
        if expected != found {
            return Err(Error::VocabularyMismatch { expected, found });
        }
        Ok(())
    }
}
