//! Language-model pretraining and joint translation training loops.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::bslm::{BslmCheckpoint, Direction, LayerRepresentations, SlmDims, SlmModel, TrainingMeta};
use crate::checkpoint::NmtCheckpoint;
use crate::config::TrainConfig;
use crate::data::{batch_by_length, detokenize, MonoCorpus, ParallelCorpus, Vocabulary};
use crate::decode::{bleu_lines, Translator};
use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::nmt::{IntegrationConfig, NmtBatch, NmtDims, NmtModel};
use crate::optim::{clip_global_norm, lr_schedule, AdamConfig, OptimizerState};
use crate::tensor::Scalar;

/// Consecutive steps above twice the initial loss that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 500;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Unsmoothed token-mean negative log-likelihood.
    pub lm_loss: f64,
    pub kt_loss: f64,
    /// `lm_loss + kt_scale * kt_loss`.
    pub total: f64,
    pub tokens_per_sec: f64,
}

impl StepRecord {
    pub const TSV_HEADER: &'static str = "step\tlr\tL_M\tL_E\tL_T\ttokens/sec";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.1}",
            self.step, self.lr, self.lm_loss, self.kt_loss, self.total, self.tokens_per_sec
        )
    }
}

/// Events reported while training.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    /// A language-model direction starts.
    Phase(Direction),
    Step(StepRecord),
    Validation { step: usize, bleu: f64, best: bool },
}

/// Tracks the divergence rule: loss above twice the first step's loss for
/// [`DIVERGENCE_PATIENCE`] consecutive steps.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 2.0 * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence { step, loss, initial });
        }
        Ok(())
    }
}

/// Endless epoch iterator over length-bucketed batches.
struct BatchStream {
    lengths: Vec<usize>,
    budget: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    fn new(lengths: Vec<usize>, budget: usize, seed: u64) -> Result<Self> {
        batch_by_length(&lengths, budget, None)?;
        Ok(Self {
            lengths,
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
        })
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue = batch_by_length(&self.lengths, self.budget, Some(&mut self.rng))?.into();
        }
        Ok(self.queue.pop_front().expect("non-empty corpus yields batches"))
    }
}

fn dims_for_lm(config: &TrainConfig, vocab: &Vocabulary) -> SlmDims {
    SlmDims {
        layers: config.lm_layers,
        d: config.d,
        d_ff: config.d_ff,
        heads: config.heads,
        vocab: vocab.len(),
    }
}

fn learning_rate(config: &TrainConfig, step: usize) -> Result<f64> {
    Ok(config.lr_scale * lr_schedule(step, config.d, config.warmup)?)
}

fn train_direction(
    model: &mut SlmModel<f32>,
    corpus: &MonoCorpus,
    config: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<f64> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let lengths = corpus.sentences.iter().map(|s| s.len() + 1).collect();
    let mut stream = BatchStream::new(lengths, config.token_budget, seeds.gen())?;
    let mut dropout = Dropout::new(config.dropout, ChaCha8Rng::seed_from_u64(seeds.gen()));
    let mut opt = OptimizerState::new(AdamConfig::default());
    let mut guard = DivergenceGuard::default();
    let mut recent = VecDeque::with_capacity(100);
    log(&TrainEvent::Phase(model.direction));
    for step in 1..=config.lm_steps {
        let start = Instant::now();
        let idx = stream.next_batch()?;
        let batch: Vec<&[usize]> = idx.iter().map(|&i| corpus.sentences[i].as_slice()).collect();
        let mut g = Graph::new();
        let (loss, tokens) = model.lm_loss_batch(&mut g, &batch, &mut dropout, config.label_smoothing)?;
        let objective = g.value(loss).item().as_f64();
        let nll = if config.label_smoothing == 0.0 {
            objective
        } else {
            // Same batch without smoothing, for the log only.
            let mut g2 = Graph::new();
            let (plain, _) = model.lm_loss_batch(&mut g2, &batch, &mut Dropout::inactive(), 0.0)?;
            g2.value(plain).item().as_f64()
        };
        let mut grads = g.backward(loss)?;
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = learning_rate(config, step)?;
        opt.adam_step(&mut model.store, &grads, lr)?;
        guard.check(step, objective)?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(nll);
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        log(&TrainEvent::Step(StepRecord {
            step,
            lr,
            lm_loss: nll,
            kt_loss: 0.0,
            total: nll,
            tokens_per_sec: tokens as f64 / secs,
        }));
    }
    Ok(recent.iter().sum::<f64>() / recent.len().max(1) as f64)
}

/// Trains the forward and backward language models independently on the
/// same corpus. Both are initialised from `config.seed`.
pub fn train_slm(
    corpus: &MonoCorpus,
    vocab: &Vocabulary,
    config: &TrainConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<BslmCheckpoint<f32>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for s in &corpus.sentences {
        vocab.check_ids(s)?;
    }
    let dims = dims_for_lm(config, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut forward = SlmModel::new(Direction::Forward, dims, &mut rng)?;
    let mut backward = SlmModel::new(Direction::Backward, dims, &mut rng)?;
    let (fs, bs): (u64, u64) = (rng.gen(), rng.gen());
    let lf = train_direction(&mut forward, corpus, config, fs, log)?;
    let lb = train_direction(&mut backward, corpus, config, bs, log)?;
    let meta = TrainingMeta {
        steps: config.lm_steps,
        final_loss: 0.5 * (lf + lb),
    };
    BslmCheckpoint::new(forward, backward, vocab.clone(), meta)
}

/// Language models feeding a translation model.
#[derive(Clone, Copy, Default)]
pub struct LanguageModels<'a> {
    pub source: Option<&'a BslmCheckpoint<f32>>,
    pub target: Option<&'a BslmCheckpoint<f32>>,
}

/// Held-out data scored with greedy decoding during training.
pub struct Validation<'a> {
    pub corpus: &'a ParallelCorpus,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

pub struct NmtOutcome {
    pub checkpoint: NmtCheckpoint<f32>,
    pub best_bleu: Option<f64>,
    pub final_record: Option<StepRecord>,
}

pub fn nmt_dims(config: &TrainConfig, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> NmtDims {
    NmtDims {
        layers: config.layers,
        lm_layers: config.lm_layers,
        d: config.d,
        d_ff: config.d_ff,
        heads: config.heads,
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
    }
}

fn check_lm(lm: Option<&BslmCheckpoint<f32>>, vocab: &Vocabulary, config: &TrainConfig, side: &str) -> Result<()> {
    let Some(lm) = lm else {
        return Err(Error::Config(format!("configuration needs a {side} language model")));
    };
    lm.check_vocab(vocab)?;
    let d = lm.dims();
    if d.layers != config.lm_layers || d.d != config.d {
        return Err(Error::Config(format!(
            "{side} language model has {} layers of width {}, configuration expects {} of width {}",
            d.layers, d.d, config.lm_layers, config.d
        )));
    }
    Ok(())
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub lm_nll: f64,
    pub kt: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Forward, backward, clip and Adam update on one batch.
pub fn nmt_train_step<T: Scalar>(
    model: &mut NmtModel<T>,
    opt: &mut OptimizerState<T>,
    batch: &NmtBatch<T>,
    lr: f64,
    config: &TrainConfig,
    dropout: &mut Dropout,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let parts = model.loss(&mut g, batch, dropout, config.label_smoothing)?;
    let objective = g.value(parts.total).item().as_f64();
    let kt = parts.kt.map_or(0.0, |v| g.value(v).item().as_f64());
    let mut grads = g.backward(parts.total)?;
    let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
    opt.adam_step(&mut model.store, &grads, lr)?;
    let src_tokens: usize = batch.src.iter().map(|s| s.len()).sum();
    Ok(StepStats {
        objective,
        lm_nll: parts.lm_nll,
        kt,
        grad_norm,
        tokens: parts.target_tokens + src_tokens,
    })
}

/// Joint training with `L_T = L_M + kt_scale * L_E`. Source-side stacks are
/// extracted once per sentence and cached; target-side stacks are extracted
/// per batch. With a validation set the checkpoint keeps the parameters of
/// the best validation BLEU.
pub fn train_nmt(
    parallel: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    lms: LanguageModels<'_>,
    config: &TrainConfig,
    validation: Option<Validation<'_>>,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<NmtOutcome> {
    config.validate()?;
    if parallel.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let integration = IntegrationConfig::from_config(config);
    let bidirectional = !integration.uni_directional;
    if integration.needs_source_reps() {
        check_lm(lms.source, src_vocab, config, "source")?;
    }
    if integration.needs_target_reps() {
        check_lm(lms.target, tgt_vocab, config, "target")?;
    }
    for (s, t) in &parallel.pairs {
        src_vocab.check_ids(s)?;
        tgt_vocab.check_ids(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NmtModel::<f32>::new(nmt_dims(config, src_vocab, tgt_vocab), integration, &mut rng)?;
    let (data_seed, dropout_seed): (u64, u64) = (rng.gen(), rng.gen());

    let src_cache: Option<Vec<LayerRepresentations<f32>>> = match lms.source {
        Some(lm) if integration.needs_source_reps() => Some(
            parallel
                .pairs
                .iter()
                .map(|(s, _)| lm.extract_directional(s, bidirectional))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let lengths = parallel.pairs.iter().map(|(s, t)| s.len().max(t.len() + 1)).collect();
    let mut stream = BatchStream::new(lengths, config.token_budget, data_seed)?;
    let mut dropout = Dropout::new(config.dropout, ChaCha8Rng::seed_from_u64(dropout_seed));
    let mut opt = OptimizerState::new(AdamConfig::default());
    let mut guard = DivergenceGuard::default();
    let mut best: Option<(f64, NmtModel<f32>)> = None;
    let mut last = None;

    for step in 1..=config.max_steps {
        let start = Instant::now();
        let idx = stream.next_batch()?;
        let tgt_reps: Option<Vec<LayerRepresentations<f32>>> = match lms.target {
            Some(lm) if integration.needs_target_reps() => Some(
                idx.iter()
                    .map(|&i| lm.extract_directional(&parallel.pairs[i].1, bidirectional))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let batch = NmtBatch {
            src: idx.iter().map(|&i| parallel.pairs[i].0.as_slice()).collect(),
            tgt: idx.iter().map(|&i| parallel.pairs[i].1.as_slice()).collect(),
            src_reps: src_cache.as_ref().map(|c| idx.iter().map(|&i| &c[i]).collect()),
            tgt_reps: tgt_reps.as_ref().map(|r| r.iter().collect()),
        };
        let lr = learning_rate(config, step)?;
        let stats = nmt_train_step(&mut model, &mut opt, &batch, lr, config, &mut dropout)?;
        guard.check(step, stats.objective)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let record = StepRecord {
            step,
            lr,
            lm_loss: stats.lm_nll,
            kt_loss: stats.kt,
            total: stats.lm_nll + config.kt_scale * stats.kt,
            tokens_per_sec: stats.tokens as f64 / secs,
        };
        log(&TrainEvent::Step(record.clone()));
        last = Some(record);

        let validate_now = config.valid_every > 0 && (step % config.valid_every == 0 || step == config.max_steps);
        if let (Some(v), true) = (&validation, validate_now) {
            let bleu = validation_bleu(&model, lms.source, v, config.max_len)?;
            let improved = best.as_ref().is_none_or(|(b, _)| bleu > *b);
            if improved {
                best = Some((bleu, model.clone()));
            }
            log(&TrainEvent::Validation {
                step,
                bleu,
                best: improved,
            });
        }
    }

    let best_bleu = best.as_ref().map(|(b, _)| *b);
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    let needs_src = integration.needs_source_reps();
    let needs_tgt = integration.needs_target_reps();
    Ok(NmtOutcome {
        checkpoint: NmtCheckpoint {
            model,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            src_lm_hash: lms.source.filter(|_| needs_src).map(|l| l.vocab_hash()),
            tgt_lm_hash: lms.target.filter(|_| needs_tgt).map(|l| l.vocab_hash()),
            src_lm_path: None,
            tgt_lm_path: None,
            meta: TrainingMeta {
                steps: config.max_steps,
                final_loss: last.as_ref().map_or(f64::NAN, |r| r.total),
            },
        },
        best_bleu,
        final_record: last,
    })
}

/// Corpus BLEU of greedy translations on word-level text.
pub fn validation_bleu(
    model: &NmtModel<f32>,
    src_lm: Option<&BslmCheckpoint<f32>>,
    v: &Validation<'_>,
    max_len: usize,
) -> Result<f64> {
    let tr = Translator::new(model, src_lm.filter(|_| model.integration.fusion.is_on()))?;
    let mut hyps = Vec::with_capacity(v.corpus.len());
    let mut refs = Vec::with_capacity(v.corpus.len());
    for (s, t) in &v.corpus.pairs {
        let h = tr.greedy(s, max_len)?;
        hyps.push(detokenize(&v.tgt_vocab.decode(h.output())));
        refs.push(detokenize(&v.tgt_vocab.decode(t)));
    }
    let _ = v.src_vocab;
    Ok(bleu_lines(&hyps, &refs, false)?.bleu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Integration;

    fn vocab_for(lines: &[&str]) -> Vocabulary {
        Vocabulary::build(lines.iter().copied(), 100).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d: 16,
            d_ff: 32,
            heads: 2,
            lm_layers: 2,
            layers: 2,
            warmup: 50,
            lr_scale: 2.0,
            token_budget: 64,
            lm_steps: 300,
            max_steps: 200,
            dropout: 0.0,
            valid_every: 100,
            max_len: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn guard_trips_after_patience() {
        let mut g = DivergenceGuard::default();
        g.check(1, 1.0).unwrap();
        for s in 2..DIVERGENCE_PATIENCE + 1 {
            g.check(s, 3.0).unwrap();
        }
        assert!(matches!(g.check(DIVERGENCE_PATIENCE + 1, 3.0), Err(Error::Divergence { .. })));
        let mut g = DivergenceGuard::default();
        g.check(1, 1.0).unwrap();
        for s in 2..2 * DIVERGENCE_PATIENCE {
            g.check(s, if s % 100 == 0 { 1.0 } else { 3.0 }).unwrap();
        }
    }

    #[test]
    fn lm_learns_and_is_deterministic() {
        let lines = ["a b c d", "d c b a"];
        let vocab = vocab_for(&lines);
        let corpus = MonoCorpus::from_lines(&lines, &vocab).unwrap();
        let mut cfg = tiny_config();
        cfg.lm_steps = 500;
        let mut first_last: Vec<(f64, f64)> = Vec::new();
        let mut cur = (f64::NAN, f64::NAN);
        let ck = train_slm(&corpus, &vocab, &cfg, &mut |e| match e {
            TrainEvent::Phase(_) => {
                if !cur.0.is_nan() {
                    first_last.push(cur);
                }
                cur = (f64::NAN, f64::NAN);
            }
            TrainEvent::Step(r) => {
                if cur.0.is_nan() {
                    cur.0 = r.lm_loss;
                }
                cur.1 = r.lm_loss;
            }
            _ => {}
        })
        .unwrap();
        first_last.push(cur);
        assert_eq!(first_last.len(), 2);
        for (first, last) in first_last {
            assert!(last < first, "{last} vs {first}");
        }
        let again = train_slm(&corpus, &vocab, &cfg, &mut |_| {}).unwrap();
        let a = ck.to_container().unwrap().to_bytes().unwrap();
        let b = again.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_vocabulary_loss_vanishes() {
        let lines = ["x", "x x", "x x x"];
        let vocab = vocab_for(&lines);
        let corpus = MonoCorpus::from_lines(&lines, &vocab).unwrap();
        let mut cfg = tiny_config();
        cfg.lm_steps = 150;
        cfg.label_smoothing = 0.0;
        let ck = train_slm(&corpus, &vocab, &cfg, &mut |_| {}).unwrap();
        let x = vocab.id("x");
        assert!(ck.forward.lm_loss(&[x, x]).unwrap() < 0.05);
        assert!(ck.backward.lm_loss(&[x, x]).unwrap() < 0.05);
    }

    #[test]
    fn kt_requires_target_language_model() {
        let src = ["a b", "b a"];
        let tgt = ["c d", "d c"];
        let (sv, tv) = (vocab_for(&src), vocab_for(&tgt));
        let corpus = ParallelCorpus::from_lines(&src, &tgt, &sv, &tv).unwrap();
        let mut cfg = tiny_config();
        cfg.kt = Integration::Deep;
        let r = train_nmt(&corpus, &sv, &tv, LanguageModels::default(), &cfg, None, &mut |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn memorizes_one_pair() {
        let src = ["a b c"];
        let tgt = ["x y z w"];
        let (sv, tv) = (vocab_for(&src), vocab_for(&tgt));
        let corpus = ParallelCorpus::from_lines(&src, &tgt, &sv, &tv).unwrap();
        let cfg = tiny_config();
        let out = train_nmt(&corpus, &sv, &tv, LanguageModels::default(), &cfg, None, &mut |_| {}).unwrap();
        let tr = Translator::new(&out.checkpoint.model, None).unwrap();
        let h = tr.beam_search(&corpus.pairs[0].0, 4, 10, 0.6).unwrap();
        assert_eq!(tv.decode(h.output()), "x y z w");
    }
}
