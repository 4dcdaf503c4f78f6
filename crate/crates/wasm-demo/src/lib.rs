//! wasm-bindgen surface for the static page in `www/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use sentrep::decode::bleu_lines;
use sentrep::layers::{build_mask, directional_attention, positional_encoding, MaskKind};
use sentrep::optim::lr_schedule;
use sentrep::{Graph, Tensor};

const WIDTH: usize = 16;

fn mask_kind(name: &str) -> sentrep::Result<MaskKind> {
    match name {
        "forward" => Ok(MaskKind::Forward),
        "backward" => Ok(MaskKind::Backward),
        "none" => Ok(MaskKind::None),
        other => Err(sentrep::Error::Config(format!("unknown mask kind `{other}`"))),
    }
}

/// Learning rate at steps `1..=steps`.
pub fn schedule(d: usize, warmup: usize, steps: usize, scale: f64) -> sentrep::Result<Vec<f64>> {
    (1..=steps).map(|s| lr_schedule(s, d, warmup).map(|lr| lr * scale)).collect()
}

/// Row-major `K x K` attention weights of one head over the words of
/// `sentence`. Word vectors are random per distinct word, seeded by `seed`,
/// plus positional encoding.
pub fn attention(sentence: &str, kind: &str, seed: u64) -> sentrep::Result<Vec<f64>> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.is_empty() {
        return Err(sentrep::Error::Contract("empty sentence".into()));
    }
    let k = words.len();
    let mask = build_mask::<f64>(k, mask_kind(kind)?)?;
    let pe = positional_encoding::<f64>(k, WIDTH)?;
    let mut data = Vec::with_capacity(k * WIDTH);
    for (i, w) in words.iter().enumerate() {
        let word_seed = w.bytes().fold(seed, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(word_seed);
        data.extend((0..WIDTH).map(|j| rng.gen_range(-1.0..1.0) + pe.data()[i * WIDTH + j]));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[k, WIDTH], data)?);
    let (_, weights) = directional_attention(&mut g, x, x, x, Some(&mask.matrix))?;
    Ok(g.value(weights).data().to_vec())
}

/// `0` where attention is allowed, `1` where it is masked.
pub fn mask(k: usize, kind: &str) -> sentrep::Result<Vec<u8>> {
    let m = build_mask::<f64>(k, mask_kind(kind)?)?;
    Ok(m.matrix.data().iter().map(|&v| u8::from(v != 0.0)).collect())
}

/// One hypothesis and one reference per line.
pub fn score(hypotheses: &str, references: &str, smooth: bool) -> sentrep::Result<String> {
    let h: Vec<&str> = hypotheses.lines().collect();
    let r: Vec<&str> = references.lines().collect();
    Ok(bleu_lines(&h, &r, smooth)?.to_string())
}

fn js(e: sentrep::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve(d: usize, warmup: usize, steps: usize, scale: f64) -> Result<Vec<f64>, JsError> {
    schedule(d, warmup, steps, scale).map_err(js)
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_weights(sentence: &str, kind: &str, seed: u64) -> Result<Vec<f64>, JsError> {
    attention(sentence, kind, seed).map_err(js)
}

#[wasm_bindgen(js_name = attentionMask)]
pub fn attention_mask(k: usize, kind: &str) -> Result<Vec<u8>, JsError> {
    mask(k, kind).map_err(js)
}

#[wasm_bindgen(js_name = bleu)]
pub fn bleu_report(hypotheses: &str, references: &str, smooth: bool) -> Result<String, JsError> {
    score(hypotheses, references, smooth).map_err(js)
}
