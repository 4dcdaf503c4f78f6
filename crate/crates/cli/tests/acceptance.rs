//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 5 7 8`.

// `ensure!(a < b)` negates the comparison on purpose so NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentrep::autodiff::{Graph, ParamId, ParamStore, Var};
use sentrep::bslm::{BslmCheckpoint, Direction, LayerRepresentations, RepSource, SlmDims, SlmModel, TrainingMeta};
use sentrep::checkpoint::NmtCheckpoint;
use sentrep::config::{Integration, TrainConfig};
use sentrep::data::{detokenize, MonoCorpus, ParallelCorpus, Vocabulary, BOS, EOS, PAD, SPECIALS};
use sentrep::decode::{bleu, bleu_lines, throughput_benchmark, Translator};
use sentrep::layers::{
    build_mask, embed, feed_forward, init_matrix, multi_head_attention, padded_mask, DecoderLayer, Dropout,
    EncoderLayer, FeedForwardParams, MaskKind,
};
use sentrep::nmt::{knowledge_transfer_loss, IntegrationConfig, NmtBatch, NmtDims, NmtModel};
use sentrep::optim::{clip_global_norm, lr_schedule, AdamConfig, OptimizerState};
use sentrep::synthetic::{unigram_perplexity, MarkovGrammar, TranslationTask};
use sentrep::training::{nmt_train_step, train_nmt, train_slm, LanguageModels, Validation};
use sentrep::{finite_diff_check, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn check<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < budget, "{what} took {took:.1?}, budget {budget:?}");
    Ok(())
}

fn vocab_of(words: usize) -> Vocabulary {
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((0..words).map(|i| format!("w{i}")))
        .collect();
    Vocabulary::from_tokens(tokens).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(SPECIALS.len()..vocab)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_lm(rng: &mut ChaCha8Rng, dims: SlmDims) -> BslmCheckpoint<f64> {
    let f = SlmModel::new(Direction::Forward, dims, rng).unwrap();
    let b = SlmModel::new(Direction::Backward, dims, rng).unwrap();
    let meta = TrainingMeta { steps: 0, final_loss: 0.0 };
    BslmCheckpoint::new(f, b, vocab_of(dims.vocab - SPECIALS.len()), meta).unwrap()
}

// ---------------------------------------------------------------- 1

/// `sum(y * probe)` with a random probe, so no gradient entry vanishes by
/// symmetry.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> sentrep::Result<Var> {
    let shape = g.shape(y).to_vec();
    let p = g.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37), &shape));
    let m = g.mul(y, p)?;
    g.sum_all(m)
}

/// Layer weights act as constants so only the probed input carries a
/// gradient.
fn freeze(store: &mut ParamStore<f64>) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.set_trainable(id, false);
    }
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, Var, u64) -> sentrep::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    fn c(rng_seed: u64, shape: &[usize]) -> Tensor<f64> {
        random_tensor(&mut ChaCha8Rng::seed_from_u64(rng_seed), shape)
    }
    vec![
        ("add", vec![2, 3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s + 1, &[4]));
            let y = g.add(x, b)?;
            probe(g, y, s)
        })),
        ("add broadcast operand", vec![4], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[2, 3, 4]));
            let y = g.add(a, x)?;
            probe(g, y, s)
        })),
        ("sub", vec![3, 4], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[3, 4]));
            let y = g.sub(a, x)?;
            probe(g, y, s)
        })),
        ("mul", vec![3, 4], Box::new(|g, x, s| {
            let y = g.mul(x, x)?;
            probe(g, y, s)
        })),
        ("scale", vec![5], Box::new(|g, x, s| {
            let y = g.scale(x, -1.7)?;
            probe(g, y, s)
        })),
        ("relu", vec![4, 4], Box::new(|g, x, s| {
            let y = g.relu(x)?;
            probe(g, y, s)
        })),
        ("sigmoid", vec![4, 4], Box::new(|g, x, s| {
            let y = g.sigmoid(x)?;
            probe(g, y, s)
        })),
        ("matmul left", vec![2, 3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s + 1, &[4, 5]));
            let y = g.matmul(x, b)?;
            probe(g, y, s)
        })),
        ("matmul broadcast right", vec![4, 5], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[2, 3, 4]));
            let y = g.matmul(a, x)?;
            probe(g, y, s)
        })),
        ("matmul batched", vec![2, 4, 3], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[2, 3, 4]));
            let y = g.matmul(a, x)?;
            probe(g, y, s)
        })),
        ("softmax", vec![3, 5], Box::new(|g, x, s| {
            let y = g.softmax(x, None)?;
            probe(g, y, s)
        })),
        ("softmax masked", vec![5, 5], Box::new(|g, x, s| {
            let mask = build_mask::<f64>(5, MaskKind::Forward)?.matrix;
            let y = g.softmax(x, Some(&mask))?;
            probe(g, y, s)
        })),
        ("layer_norm input", vec![3, 6], Box::new(|g, x, s| {
            let gain = g.constant(c(s + 1, &[6]));
            let bias = g.constant(c(s + 2, &[6]));
            let y = g.layer_norm(x, gain, bias)?;
            probe(g, y, s)
        })),
        ("layer_norm gain", vec![6], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[3, 6]));
            let bias = g.constant(c(s + 2, &[6]));
            let y = g.layer_norm(a, x, bias)?;
            probe(g, y, s)
        })),
        ("layer_norm bias", vec![6], Box::new(|g, x, s| {
            let a = g.constant(c(s + 1, &[3, 6]));
            let gain = g.constant(c(s + 2, &[6]));
            let y = g.layer_norm(a, gain, x)?;
            probe(g, y, s)
        })),
        ("reshape", vec![2, 6], Box::new(|g, x, s| {
            let y = g.reshape(x, &[3, 4])?;
            probe(g, y, s)
        })),
        ("permute", vec![2, 3, 4], Box::new(|g, x, s| {
            let y = g.permute(x, &[2, 0, 1])?;
            probe(g, y, s)
        })),
        ("slice", vec![4, 5], Box::new(|g, x, s| {
            let y = g.slice(x, 1, 1, 3)?;
            probe(g, y, s)
        })),
        ("gather", vec![6, 3], Box::new(|g, x, s| {
            let y = g.gather(x, &[1, 4, 1, 0, 5])?;
            probe(g, y, s)
        })),
        ("sum_all", vec![3, 4], Box::new(|g, x, s| {
            let y = g.mul(x, x)?;
            let _ = s;
            g.sum_all(y)
        })),
        ("mean_all", vec![3, 4], Box::new(|g, x, s| {
            let y = g.mul(x, x)?;
            let _ = s;
            g.mean_all(y)
        })),
        ("cross_entropy", vec![4, 6], Box::new(|g, x, _| {
            g.cross_entropy(x, &[1, 5, 0, 3], &[0.25, 0.5, 0.0, 0.25], 0.1)
        })),
        ("multi_head_attention", vec![2, 3, 4], Box::new(|g, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let mut store = ParamStore::new();
            let p = sentrep::layers::AttentionParams::new(&mut store, &mut rng, "a", 4, 2)?;
            freeze(&mut store);
            let mask = padded_mask::<f64>(MaskKind::Forward, &[3, 2], &[3, 2], 3, 3)?;
            let y = multi_head_attention(g, &store, &p, x, x, Some(&mask))?;
            probe(g, y, s)
        })),
        ("feed_forward", vec![3, 4], Box::new(|g, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let mut store = ParamStore::new();
            let p = FeedForwardParams::new(&mut store, &mut rng, "f", 4, 8);
            for id in [p.b1, p.b2] {
                let n = store.get(id).len();
                *store.get_mut(id) = random_tensor(&mut rng, &[n]);
            }
            freeze(&mut store);
            let y = feed_forward(g, &store, &p, x)?;
            probe(g, y, s)
        })),
    ]
}

struct GradFixture {
    model: NmtModel<f64>,
    src: Vec<Vec<usize>>,
    tgt: Vec<Vec<usize>>,
    src_reps: Vec<LayerRepresentations<f64>>,
    tgt_reps: Vec<LayerRepresentations<f64>>,
}

fn grad_fixture(seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (9, 4);
    let lm_dims = SlmDims { layers: 2, d, d_ff: 8, heads: 2, vocab: v };
    let lm = random_lm(&mut rng, lm_dims);
    let dims = NmtDims { layers: 2, lm_layers: 2, d, d_ff: 8, heads: 2, src_vocab: v, tgt_vocab: v };
    let mut it = IntegrationConfig::from_config(&TrainConfig::default());
    it.fusion = Integration::Deep;
    it.kt = Integration::Deep;
    let mut model = NmtModel::<f64>::new(dims, it, &mut rng).unwrap();
    // Move the fusion weights away from their constant start.
    let w = model.fusion.w;
    *model.store.get_mut(w) = random_tensor(&mut rng, &[2, 2]);
    let src: Vec<Vec<usize>> = vec![random_sentence(&mut rng, 3, v), random_sentence(&mut rng, 2, v)];
    let tgt: Vec<Vec<usize>> = vec![random_sentence(&mut rng, 2, v), random_sentence(&mut rng, 3, v)];
    let src_reps = src.iter().map(|s| lm.extract_representation(s).unwrap()).collect();
    let tgt_reps = tgt.iter().map(|s| lm.extract_representation(s).unwrap()).collect();
    GradFixture { model, src, tgt, src_reps, tgt_reps }
}

/// Central-difference step. Smaller steps let rounding noise in the loss
/// dominate gradient entries near 1e-6.
const FD_STEP: f64 = 1e-5;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, shape, f) in op_cases() {
        for seed in 0..100u64 {
            let mut x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
            if name == "relu" {
                // Keep clear of the kink.
                x = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            }
            let err = check(finite_diff_check(|g, x| f(g, x, seed), &x, FD_STEP))?;
            ensure!(err < 1e-4, "{name} seed {seed}: relative error {err:.3e}");
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }
    }

    let mut worst_graph = 0.0f64;
    for seed in 0..100u64 {
        let fx = grad_fixture(seed);
        let mut frozen = fx.model.clone();
        freeze(&mut frozen.store);
        let ids: Vec<ParamId> = frozen.store.ids().collect();
        let id = ids[seed as usize % ids.len()];
        let batch = NmtBatch {
            src: fx.src.iter().map(Vec::as_slice).collect(),
            tgt: fx.tgt.iter().map(Vec::as_slice).collect(),
            src_reps: Some(fx.src_reps.iter().collect()),
            tgt_reps: Some(fx.tgt_reps.iter().collect()),
        };
        let x = frozen.store.get(id).clone();
        let err = check(finite_diff_check(
            |g, x| {
                g.bind(id, x)?;
                Ok(frozen.loss(g, &batch, &mut Dropout::inactive(), 0.1)?.total)
            },
            &x,
            FD_STEP,
        ))?;
        ensure!(
            err < 1e-4,
            "joint loss wrt {} seed {seed}: relative error {err:.3e}",
            frozen.store.name(id)
        );
        worst_graph = worst_graph.max(err);
    }
    within(start, Duration::from_secs(300), "gradient oracle")?;
    Ok(format!(
        "{} ops x 100 seeds, worst {:.1e} ({}); joint loss x 100 seeds, worst {:.1e}; {:.1?}",
        op_cases().len(),
        worst_op.0,
        worst_op.1,
        worst_graph,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let v = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lm = random_lm(&mut rng, SlmDims { layers: 3, d: 8, d_ff: 16, heads: 2, vocab: v });
    let dims = NmtDims { layers: 2, lm_layers: 2, d: 8, d_ff: 16, heads: 2, src_vocab: v, tgt_vocab: v };
    let nmt = NmtModel::<f64>::new(dims, IntegrationConfig::from_config(&TrainConfig::default()), &mut rng).unwrap();
    let src = random_sentence(&mut rng, 5, v);
    let (memory, _) = check(nmt.encode_sentence(&src, None))?;
    let decoder_logits = |y: &[usize]| -> Result<Tensor<f64>, String> {
        let mut g = Graph::new();
        let mem = g.constant(memory.clone());
        let dec_in: Vec<usize> = std::iter::once(BOS).chain(y.iter().copied()).collect();
        let pass = check(nmt.decode(&mut g, mem, &[src.len()], &[&dec_in], &mut Dropout::inactive()))?;
        Ok(g.value(pass.logits).clone())
    };

    let mut checks = 0usize;
    for k in 1..=8 {
        let base = random_sentence(&mut rng, k, v);
        let fwd = check(lm.forward.representations(&base))?;
        let bwd = check(lm.backward.representations(&base))?;
        let dec = decoder_logits(&base)?;
        let d = 8;
        for p in 0..k {
            let mut changed = base.clone();
            changed[p] = if base[p] + 1 < v { base[p] + 1 } else { SPECIALS.len() };
            let f2 = check(lm.forward.representations(&changed))?;
            let b2 = check(lm.backward.representations(&changed))?;
            let dec2 = decoder_logits(&changed)?;
            for m in 0..3 {
                for c in 0..k {
                    let row = |r: &LayerRepresentations<f64>| -> Vec<u64> {
                        let off = (m * k + c) * d;
                        r.stack.data()[off..off + d].iter().map(|x| x.to_bits()).collect()
                    };
                    if c < p {
                        ensure!(row(&fwd) == row(&f2), "forward model: position {c} moved when {p} changed (K={k})");
                    }
                    if c > p {
                        ensure!(row(&bwd) == row(&b2), "backward model: position {c} moved when {p} changed (K={k})");
                    }
                    checks += 2;
                }
            }
            ensure!(fwd.stack != f2.stack && bwd.stack != b2.stack, "perturbation had no effect at K={k}");
            // Decoder step j reads BOS, y_1..y_j; changing y_{p+1} may only
            // affect steps after p.
            let vocab = dec.shape()[2];
            for j in 0..=k {
                let a: Vec<u64> = dec.data()[j * vocab..(j + 1) * vocab].iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = dec2.data()[j * vocab..(j + 1) * vocab].iter().map(|x| x.to_bits()).collect();
                if j <= p {
                    ensure!(a == b, "decoder step {j} moved when target position {p} changed (K={k})");
                }
                checks += 1;
            }
        }
    }
    within(start, Duration::from_secs(60), "causality suite")?;
    Ok(format!("{checks} bit-exact position checks, K=1..8; {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------- 3

/// Encoder-decoder Transformer assembled directly from the layer library,
/// with parameters drawn in the order source embedding, target embedding,
/// encoder layers, decoder layers.
struct PlainTransformer {
    store: ParamStore<f32>,
    src_embedding: ParamId,
    tgt_embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

struct PlainPass {
    logits: Var,
    loss: Var,
}

impl PlainTransformer {
    fn new(dims: NmtDims, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let src_embedding = store.add("src.embedding", init_matrix(rng, dims.src_vocab, dims.d));
        let tgt_embedding = store.add("tgt.embedding", init_matrix(rng, dims.tgt_vocab, dims.d));
        let encoder = (0..dims.layers)
            .map(|n| EncoderLayer::new(&mut store, rng, &format!("encoder{n}"), dims.d, dims.d_ff, dims.heads).unwrap())
            .collect();
        let decoder = (0..dims.layers)
            .map(|n| DecoderLayer::new(&mut store, rng, &format!("decoder{n}"), dims.d, dims.d_ff, dims.heads).unwrap())
            .collect();
        Self { store, src_embedding, tgt_embedding, encoder, decoder }
    }

    fn pad(batch: &[&[usize]], len: usize) -> Vec<usize> {
        batch
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat_n(PAD, len - s.len())))
            .collect()
    }

    fn forward(
        &self,
        g: &mut Graph<f32>,
        src: &[&[usize]],
        tgt: &[&[usize]],
        dropout: &mut Dropout,
        smoothing: f32,
    ) -> sentrep::Result<PlainPass> {
        let b = src.len();
        let src_lens: Vec<usize> = src.iter().map(|s| s.len()).collect();
        let i = *src_lens.iter().max().unwrap();
        let enc_mask = padded_mask(MaskKind::None, &src_lens, &src_lens, i, i)?;
        let table = g.param(&self.store, self.src_embedding);
        let mut x = embed(g, table, &Self::pad(src, i), b, i)?;
        x = dropout.apply(g, x)?;
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x, Some(&enc_mask), dropout)?;
        }

        let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect()).collect();
        let dec_refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let lens: Vec<usize> = dec_in.iter().map(Vec::len).collect();
        let j = *lens.iter().max().unwrap();
        let self_mask = padded_mask(MaskKind::Forward, &lens, &lens, j, j)?;
        let cross_mask = padded_mask(MaskKind::Cross, &lens, &src_lens, j, i)?;
        let table = g.param(&self.store, self.tgt_embedding);
        let mut y = embed(g, table, &Self::pad(&dec_refs, j), b, j)?;
        y = dropout.apply(g, y)?;
        for layer in &self.decoder {
            y = layer.forward(g, &self.store, y, x, Some(&self_mask), Some(&cross_mask), dropout)?;
        }
        let table = g.param(&self.store, self.tgt_embedding);
        let proj = g.permute(table, &[1, 0])?;
        let logits = g.matmul(y, proj)?;

        let total: usize = lens.iter().sum();
        let mut targets = vec![PAD; b * j];
        let mut weights = vec![0.0f32; b * j];
        for (bi, t) in tgt.iter().enumerate() {
            for (p, &tok) in t.iter().chain(std::iter::once(&EOS)).enumerate() {
                targets[bi * j + p] = tok;
                weights[bi * j + p] = 1.0 / total as f32;
            }
        }
        let loss = g.cross_entropy(logits, &targets, &weights, smoothing)?;
        Ok(PlainPass { logits, loss })
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn criterion_3() -> Outcome {
    let v = 16;
    let dims = NmtDims { layers: 2, lm_layers: 2, d: 16, d_ff: 32, heads: 4, src_vocab: v, tgt_vocab: v };
    let mut config = TrainConfig::desk();
    config.d = 16;
    config.warmup = 20;
    config.dropout = 0.1;
    let off = IntegrationConfig::from_config(&config);
    let mut model = check(NmtModel::<f32>::new(dims, off, &mut ChaCha8Rng::seed_from_u64(33)))?;
    let mut plain = PlainTransformer::new(dims, &mut ChaCha8Rng::seed_from_u64(33));

    let mut data_rng = ChaCha8Rng::seed_from_u64(34);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..24)
        .map(|_| {
            let (a, b) = (data_rng.gen_range(2..8), data_rng.gen_range(2..8));
            (random_sentence(&mut data_rng, a, v), random_sentence(&mut data_rng, b, v))
        })
        .collect();
    let batch_at = |step: usize| -> (Vec<&[usize]>, Vec<&[usize]>) {
        let chunk = &pairs[(step * 4) % pairs.len()..(step * 4) % pairs.len() + 4];
        (chunk.iter().map(|p| p.0.as_slice()).collect(), chunk.iter().map(|p| p.1.as_slice()).collect())
    };

    // Forward, loss and gradients on one batch.
    let (src, tgt) = batch_at(0);
    let batch = NmtBatch { src: src.clone(), tgt: tgt.clone(), src_reps: None, tgt_reps: None };
    let mut g1 = Graph::new();
    let parts = check(model.loss(&mut g1, &batch, &mut Dropout::inactive(), 0.1))?;
    let mut g2 = Graph::new();
    let pp = check(plain.forward(&mut g2, &src, &tgt, &mut Dropout::inactive(), 0.1))?;
    let logits_1 = {
        let mut g = Graph::new();
        let enc = check(model.encode(&mut g, &src, None, &mut Dropout::inactive()))?;
        let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect()).collect();
        let refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let dec = check(model.decode(&mut g, enc.out, &enc.lens, &refs, &mut Dropout::inactive()))?;
        g.value(dec.logits).clone()
    };
    ensure!(bits(&logits_1) == bits(g2.value(pp.logits)), "logits differ");
    ensure!(
        g1.value(parts.total).item().to_bits() == g2.value(pp.loss).item().to_bits(),
        "loss differs: {} vs {}",
        g1.value(parts.total).item(),
        g2.value(pp.loss).item()
    );
    let ga = check(g1.backward(parts.total))?;
    let gb = check(g2.backward(pp.loss))?;
    ensure!(ga.len() == gb.len(), "gradient tables differ in size: {} vs {}", ga.len(), gb.len());
    for (id, t) in &gb {
        ensure!(model.store.name(*id) == plain.store.name(*id), "parameter order differs at {id:?}");
        ensure!(ga.get(id).map(bits) == Some(bits(t)), "gradient of {} differs", plain.store.name(*id));
    }

    // 100-step trajectory with dropout active on both sides.
    let mut opt_a = OptimizerState::new(AdamConfig::default());
    let mut opt_b = OptimizerState::new(AdamConfig::default());
    let mut drop_a = Dropout::new(config.dropout, ChaCha8Rng::seed_from_u64(35));
    let mut drop_b = Dropout::new(config.dropout, ChaCha8Rng::seed_from_u64(35));
    for step in 1..=100 {
        let (src, tgt) = batch_at(step);
        let lr = check(lr_schedule(step, config.d, config.warmup))?;
        let batch = NmtBatch { src: src.clone(), tgt: tgt.clone(), src_reps: None, tgt_reps: None };
        let sa = check(nmt_train_step(&mut model, &mut opt_a, &batch, lr, &config, &mut drop_a))?;
        let mut g = Graph::new();
        let pp = check(plain.forward(&mut g, &src, &tgt, &mut drop_b, config.label_smoothing as f32))?;
        let loss_b = g.value(pp.loss).item() as f64;
        let mut grads = check(g.backward(pp.loss))?;
        clip_global_norm(&mut grads, config.clip_norm);
        check(opt_b.adam_step(&mut plain.store, &grads, lr))?;
        ensure!(sa.objective.to_bits() == loss_b.to_bits(), "step {step}: loss {} vs {loss_b}", sa.objective);
        for id in plain.store.ids() {
            ensure!(
                bits(model.store.get(id)) == bits(plain.store.get(id)),
                "step {step}: parameter {} diverged",
                plain.store.name(id)
            );
        }
    }

    // Zero, frozen fusion weights leave the encoder untouched.
    let mut fused_cfg = off;
    fused_cfg.fusion = Integration::Deep;
    let mut fused = check(NmtModel::<f32>::new(dims, fused_cfg, &mut ChaCha8Rng::seed_from_u64(33)))?;
    let base = check(NmtModel::<f32>::new(dims, off, &mut ChaCha8Rng::seed_from_u64(33)))?;
    let w = fused.fusion.w;
    *fused.store.get_mut(w) = Tensor::zeros(&[2, 2]);
    fused.store.set_trainable(w, false);
    let lm = random_lm(&mut ChaCha8Rng::seed_from_u64(36), SlmDims { layers: 2, d: 16, d_ff: 32, heads: 4, vocab: v }).cast::<f32>();
    for (s, _) in &pairs {
        let reps = check(lm.extract_representation(s))?;
        let (a, gates) = check(fused.encode_sentence(s, Some(&reps)))?;
        let (b, _) = check(base.encode_sentence(s, None))?;
        ensure!(gates.len() == 2, "fusion did not run");
        ensure!(bits(&a) == bits(&b), "W = 0 encoder output differs from the baseline");
    }
    Ok("forward, loss, gradients and 100 Adam steps bit-identical; W=0 encoder identical on 24 sentences".into())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let grammar = check(MarkovGrammar::new(20, "w", 3, 10))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = grammar.sentences(200, &mut rng);
    let held = grammar.sentences(100, &mut rng);
    let vocab = check(Vocabulary::build(train.iter().chain(&held).map(String::as_str), 100))?;
    let corpus = check(MonoCorpus::from_lines(&train, &vocab))?;
    let test = check(MonoCorpus::from_lines(&held, &vocab))?;
    let mut config = TrainConfig::desk();
    config.lm_steps = 1500;
    let lm = check(train_slm(&corpus, &vocab, &config, &mut |_| {}))?;

    // Every prediction the models make, sentence end included.
    let with_end = |c: &MonoCorpus| -> Vec<Vec<usize>> {
        c.sentences.iter().map(|s| s.iter().copied().chain([EOS]).collect()).collect()
    };
    let oracle = check(unigram_perplexity(&with_end(&corpus), &with_end(&test), grammar.words.len() + 1))?;
    let tokens: usize = test.sentences.iter().map(|s| s.len() + 1).sum();
    let ppl = |m: &SlmModel<f32>| -> Result<f64, String> {
        let mut nll = 0.0;
        for s in &test.sentences {
            nll += check(m.lm_loss(s))? * (s.len() + 1) as f64;
        }
        Ok((nll / tokens as f64).exp())
    };
    let (pf, pb) = (ppl(&lm.forward)?, ppl(&lm.backward)?);
    ensure!(pf < oracle && pb < oracle, "perplexity forward {pf:.2}, backward {pb:.2}, unigram {oracle:.2}");
    within(start, Duration::from_secs(600), "language-model sanity")?;
    Ok(format!(
        "held-out perplexity forward {pf:.2}, backward {pb:.2} < unigram {oracle:.2} after {} steps; {:.1?}",
        config.lm_steps,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let lm = Tensor::<f64>::from_f64(&[1, 2, 3], &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    let reps = LayerRepresentations { stack: lm.clone(), source: RepSource::Summed };
    let dec = lm.map(|x| x + 1.0);
    let v = check(knowledge_transfer_loss(&dec, &reps, Integration::Deep))?;
    ensure!((v - 3.0).abs() < 1e-9, "expected 3.0, got {v}");
    let zero = check(knowledge_transfer_loss(&lm, &reps, Integration::Deep))?;
    ensure!(zero == 0.0, "identical stacks gave {zero}");
    Ok(format!("L_E = {v} on the N=1, J=2, d=3 case; 0 on identical stacks"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let same = check(bleu(&[w("a b c d e")], &[w("a b c d e")], false))?.bleu;
    ensure!(same == 100.0, "identical: {same}");
    let clip = check(bleu(&[w("the the the the")], &[w("the cat")], false))?;
    ensure!(clip.precisions[0] == 0.25 && clip.bleu == 0.0, "clipping: {clip}");
    let bp = check(bleu(&[w("a b c d")], &[w("a b c d e")], false))?.bleu;
    ensure!((bp - 77.88).abs() <= 0.01, "brevity: {bp}");
    Ok(format!("100.00 / {:.2} (p1 = 0.25) / {bp:.4}", clip.bleu))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let first = check(lr_schedule(1, 512, 4000))?;
    ensure!((first - 1.747e-7).abs() <= 1e-10, "lr(1) = {first:e}");
    let peak = (1..=20000).map(|s| (s, lr_schedule(s, 512, 4000).unwrap())).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(peak.0 == 4000, "peak at step {}", peak.0);
    Ok(format!("lr(1) = {first:.4e}, peak {:.4e} at step {}", peak.1, peak.0))
}

// ---------------------------------------------------------------- 6, 9, 10

struct Run {
    label: &'static str,
    seed: u64,
    bleu: f64,
    checkpoint: NmtCheckpoint<f32>,
}

struct Synthetic {
    test: ParallelCorpus,
    src_lm: BslmCheckpoint<f32>,
    runs: Vec<Run>,
    elapsed: Duration,
}

const SEEDS: [u64; 3] = [1, 2, 3];
const LOW_RESOURCE: usize = 200;

fn synthetic_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.lr_scale = 0.5;
    c.dropout = 0.1;
    c.max_steps = 3000;
    c.lm_steps = 1000;
    c.valid_every = 250;
    c
}

fn corpus_bleu(ck: &NmtCheckpoint<f32>, lm: Option<&BslmCheckpoint<f32>>, test: &ParallelCorpus) -> sentrep::Result<f64> {
    let tr = Translator::new(&ck.model, lm.filter(|_| ck.model.integration.fusion.is_on()))?;
    let src: Vec<Vec<usize>> = test.pairs.iter().map(|p| p.0.clone()).collect();
    let hyps = tr.translate_corpus(&src, 4, 40, 0.6, 1)?;
    let h: Vec<String> = hyps.iter().map(|h| detokenize(&ck.tgt_vocab.decode(h.output()))).collect();
    let r: Vec<String> = test.pairs.iter().map(|p| detokenize(&ck.tgt_vocab.decode(&p.1))).collect();
    Ok(bleu_lines(&h, &r, false)?.bleu)
}

fn synthetic() -> sentrep::Result<Synthetic> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let task = TranslationTask::new(20, 3, 10, &mut rng)?;
    let train = task.pairs(2000, &mut rng);
    let valid = task.pairs(100, &mut rng);
    let test = task.pairs(200, &mut rng);
    let mono_tgt = task.target_sentences(2000, &mut rng);
    let split = |p: &[(String, String)]| -> (Vec<String>, Vec<String>) { p.iter().cloned().unzip() };
    let (s, t) = split(&train);
    let sv = Vocabulary::build(s.iter().map(String::as_str), 100)?;
    let tv = Vocabulary::build(t.iter().map(String::as_str), 100)?;
    let parallel = ParallelCorpus::from_lines(&s, &t, &sv, &tv)?;
    let (vs, vt) = split(&valid);
    let valid = ParallelCorpus::from_lines(&vs, &vt, &sv, &tv)?;
    let (ts, tt) = split(&test);
    let test = ParallelCorpus::from_lines(&ts, &tt, &sv, &tv)?;

    let config = synthetic_config();
    let src_lm = train_slm(&MonoCorpus::from_lines(&s, &sv)?, &sv, &config, &mut |_| {})?;
    let tgt_lm = train_slm(&MonoCorpus::from_lines(&mono_tgt, &tv)?, &tv, &config, &mut |_| {})?;

    let low = parallel.subset(LOW_RESOURCE);
    let mut runs = Vec::new();
    for seed in SEEDS {
        for (label, data, fused) in [
            ("full baseline", &parallel, false),
            ("full fused", &parallel, true),
            ("low baseline", &low, false),
            ("low fused", &low, true),
        ] {
            let mut c = config.clone();
            c.seed = seed;
            let lms = if fused {
                c.fusion = Integration::Deep;
                c.kt = Integration::Shallow;
                LanguageModels { source: Some(&src_lm), target: Some(&tgt_lm) }
            } else {
                LanguageModels::default()
            };
            let v = Validation { corpus: &valid, src_vocab: &sv, tgt_vocab: &tv };
            let out = train_nmt(data, &sv, &tv, lms, &c, Some(v), &mut |_| {})?;
            let bleu = corpus_bleu(&out.checkpoint, Some(&src_lm), &test)?;
            runs.push(Run { label, seed, bleu, checkpoint: out.checkpoint });
        }
    }
    Ok(Synthetic { test, src_lm, runs, elapsed: start.elapsed() })
}

fn mean_bleu(s: &Synthetic, label: &str) -> f64 {
    let v: Vec<f64> = s.runs.iter().filter(|r| r.label == label).map(|r| r.bleu).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_seed(s: &Synthetic, label: &str) -> String {
    s.runs
        .iter()
        .filter(|r| r.label == label)
        .map(|r| format!("{:.2}", r.bleu))
        .collect::<Vec<_>>()
        .join("/")
}

fn criterion_6(s: &Synthetic) -> Outcome {
    let (fb, ff) = (mean_bleu(s, "full baseline"), mean_bleu(s, "full fused"));
    let (lb, lf) = (mean_bleu(s, "low baseline"), mean_bleu(s, "low fused"));
    let summary = format!(
        "mean over seeds {:?}: full baseline {fb:.2} ({}), fused {ff:.2} ({}); {LOW_RESOURCE} pairs baseline {lb:.2} ({}), fused {lf:.2} ({}); {:.1?}",
        SEEDS,
        per_seed(s, "full baseline"),
        per_seed(s, "full fused"),
        per_seed(s, "low baseline"),
        per_seed(s, "low fused"),
        s.elapsed
    );
    ensure!(fb >= 95.0, "baseline below 95: {summary}");
    ensure!(ff >= fb - 0.5, "fused below baseline - 0.5 on the full set: {summary}");
    ensure!(lf >= lb, "fused below baseline on the low-resource subset: {summary}");
    ensure!(s.elapsed < Duration::from_secs(1800), "over 30 minutes: {summary}");
    Ok(summary)
}

fn criterion_9(s: &Synthetic) -> Outcome {
    let base = &s.runs.iter().find(|r| r.label == "full baseline" && r.seed == 1).unwrap().checkpoint;
    let fused = &s.runs.iter().find(|r| r.label == "full fused" && r.seed == 1).unwrap().checkpoint;
    let corpus: Vec<Vec<usize>> = s.test.pairs.iter().map(|p| p.0.clone()).collect();
    let tb = check(Translator::new(&base.model, None))?;
    let tf = check(Translator::new(&fused.model, Some(&s.src_lm)))?;
    let rb = check(throughput_benchmark("baseline", &tb, &corpus, 4, 40, 3))?;
    let rf = check(throughput_benchmark("fused", &tf, &corpus, 4, 40, 3))?;
    let ratio = rf.sentences_per_sec / rb.sentences_per_sec;
    ensure!(ratio >= 0.7, "fused decodes at {ratio:.3} of baseline speed");
    let mut counts = Vec::new();
    for beam in [1, 2, 4, 8] {
        s.src_lm.reset_extraction_count();
        for src in &corpus {
            check(tf.beam_search(src, beam, 40, 0.6))?;
        }
        counts.push(s.src_lm.extraction_count());
        ensure!(
            s.src_lm.extraction_count() == corpus.len(),
            "beam {beam}: {} extractions for {} sentences",
            s.src_lm.extraction_count(),
            corpus.len()
        );
    }
    Ok(format!(
        "baseline {:.1} sent/s, fused {:.1} sent/s (ratio {ratio:.3}); extractions {counts:?} for {} sentences at beam 1/2/4/8",
        rb.sentences_per_sec,
        rf.sentences_per_sec,
        corpus.len()
    ))
}

fn criterion_10(s: &Synthetic) -> Outcome {
    let fused = &s.runs.iter().find(|r| r.label == "full fused" && r.seed == 1).unwrap().checkpoint;
    let dir = check(tempfile::TempDir::new())?;
    let model = dir.path().join("fused.nmt");
    check(fused.save(&model))?;
    let out = dir.path().join("heat.csv");
    let status = check(
        Command::new(env!("CARGO_BIN_EXE_sentrep"))
            .args(["export-heatmap", "--model"])
            .arg(&model)
            .arg("--out")
            .arg(&out)
            .output(),
    )?;
    ensure!(status.status.success(), "export-heatmap failed: {}", String::from_utf8_lossy(&status.stderr));
    let rows = read_heatmap(&out)?;
    let (n, m) = (fused.model.dims.layers, fused.model.dims.lm_layers);
    ensure!(rows.len() == n && rows.iter().all(|r| r.len() == m), "matrix is not {n}x{m}");
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-6, "row {i} sums to {sum}");
    }
    let max = rows.iter().flatten().copied().fold(0.0, f64::max);
    let bar = 1.0 / m as f64 + 0.05;
    ensure!(max > bar, "max entry {max:.4} not above {bar:.4}");
    let shown: Vec<String> = rows
        .iter()
        .map(|r| r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
        .collect();
    Ok(format!("{n}x{m}, rows sum to 1, max {max:.3} > {bar:.3}: [{}]", shown.join(" | ")))
}

fn read_heatmap(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = check(fs::read_to_string(path))?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse::<f64>().map_err(|e| e.to_string())).collect())
        .collect()
}

// ----------------------------------------------------------------

thread_local! {
    static PANIC_AT: std::cell::RefCell<String> = const { std::cell::RefCell::new(String::new()) };
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}{}", PANIC_AT.with(|p| p.borrow().clone())))
        }
    }
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    panic::set_hook(Box::new(|info| {
        if let Some(loc) = info.location() {
            PANIC_AT.with(|p| *p.borrow_mut() = format!(" at {}:{}", loc.file(), loc.line()));
        }
    }));

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let simple: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "gradient oracle", criterion_1),
        (2, "causality suite", criterion_2),
        (3, "baseline equivalence", criterion_3),
        (4, "language-model sanity", criterion_4),
        (5, "knowledge-transfer oracle", criterion_5),
        (7, "BLEU oracle", criterion_7),
        (8, "schedule oracle", criterion_8),
    ];
    for (n, name, f) in simple {
        if selected(n) {
            let r = guarded(f);
            report(n, name, &r);
            results.push((n, name, r));
        }
    }
    if selected(6) || selected(9) || selected(10) {
        let synth = panic::catch_unwind(AssertUnwindSafe(synthetic));
        let heavy: [(usize, &str, fn(&Synthetic) -> Outcome); 3] = [
            (6, "synthetic translation", criterion_6),
            (9, "decoding throughput", criterion_9),
            (10, "heatmap contract", criterion_10),
        ];
        for (n, name, f) in heavy {
            if !selected(n) {
                continue;
            }
            let r = match &synth {
                Ok(Ok(s)) => guarded(|| f(s)),
                Ok(Err(e)) => Err(format!("synthetic training failed: {e}")),
                Err(_) => Err("synthetic training panicked".into()),
            };
            report(n, name, &r);
            results.push((n, name, r));
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(n: usize, name: &str, r: &Outcome) {
    match r {
        Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
        Err(why) => println!("criterion {n:>2} FAIL  {name}: {why}"),
    }
}
