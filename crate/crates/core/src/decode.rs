//! Greedy and beam-search decoding, corpus BLEU and decoding throughput.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use crate::bslm::BslmCheckpoint;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nmt::NmtModel;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with `EOS` iff `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the closing `EOS`.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Ran out of length budget before producing `EOS`.
    pub fn truncated(&self) -> bool {
        !self.finished
    }

    /// `log_prob / len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
    }

    fn better_than(&self, other: &Self, alpha: f64) -> bool {
        match (self.finished, other.finished) {
            (true, false) => true,
            (false, true) => false,
            _ => self.score(alpha) > other.score(alpha),
        }
    }
}

/// A model plus the source-side language model it was trained with.
pub struct Translator<'a, T> {
    pub model: &'a NmtModel<T>,
    pub src_lm: Option<&'a BslmCheckpoint<T>>,
}

/// Encoder state of one source sentence, computed once and reused for every
/// decoding step.
pub struct EncodedSource<T> {
    pub memory: Tensor<T>,
    pub len: usize,
}

impl<'a, T: Scalar> Translator<'a, T> {
    pub fn new(model: &'a NmtModel<T>, src_lm: Option<&'a BslmCheckpoint<T>>) -> Result<Self> {
        if model.integration.fusion.is_on() && src_lm.is_none() {
            return Err(Error::Config("fused model needs its source language model".into()));
        }
        Ok(Self { model, src_lm })
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncodedSource<T>> {
        if src.is_empty() {
            return Err(Error::Contract("cannot translate an empty sentence".into()));
        }
        let reps = match self.src_lm {
            Some(lm) if self.model.integration.fusion.is_on() => {
                Some(lm.extract_directional(src, !self.model.integration.uni_directional)?)
            }
            _ => None,
        };
        let (memory, _) = self.model.encode_sentence(src, reps.as_ref())?;
        Ok(EncodedSource { memory, len: src.len() })
    }

    fn greedy_from(&self, enc: &EncodedSource<T>, max_len: usize) -> Result<Hypothesis> {
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        for _ in 0..max_len {
            let prefix: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
            let lp = self.model.next_token_log_probs(&enc.memory, enc.len, &[&prefix])?;
            let (best, value) = argmax(lp.data());
            tokens.push(best);
            log_prob += value;
            if best == EOS {
                return Ok(Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                });
            }
        }
        Ok(Hypothesis {
            tokens,
            log_prob,
            finished: false,
        })
    }

    pub fn greedy(&self, src: &[usize], max_len: usize) -> Result<Hypothesis> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let enc = self.encode(src)?;
        self.greedy_from(&enc, max_len)
    }

    /// Beam search with length-normalized final ranking. For `beam > 1` the
    /// greedy hypothesis also competes, so the result never scores below it.
    pub fn beam_search(&self, src: &[usize], beam: usize, max_len: usize, alpha: f64) -> Result<Hypothesis> {
        if beam == 0 || max_len == 0 {
            return Err(Error::Contract("beam and max_len must be at least 1".into()));
        }
        let enc = self.encode(src)?;
        let best = self.beam_from(&enc, beam, max_len, alpha)?;
        if beam == 1 {
            return Ok(best);
        }
        let greedy = self.greedy_from(&enc, max_len)?;
        Ok(if greedy.better_than(&best, alpha) { greedy } else { best })
    }

    fn beam_from(&self, enc: &EncodedSource<T>, beam: usize, max_len: usize, alpha: f64) -> Result<Hypothesis> {
        let v = self.model.dims.tgt_vocab;
        let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..max_len {
            let prefixes: Vec<Vec<usize>> = alive
                .iter()
                .map(|(t, _)| std::iter::once(BOS).chain(t.iter().copied()).collect())
                .collect();
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let lp = self.model.next_token_log_probs(&enc.memory, enc.len, &refs)?;
            let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * v);
            for (b, (_, base)) in alive.iter().enumerate() {
                for (tok, &l) in lp.data()[b * v..(b + 1) * v].iter().enumerate() {
                    cand.push((base + l.as_f64(), b, tok));
                }
            }
            cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut next = Vec::with_capacity(beam);
            for (rank, &(score, b, tok)) in cand.iter().enumerate() {
                if next.len() == beam && rank >= beam {
                    break;
                }
                let mut tokens = alive[b].0.clone();
                tokens.push(tok);
                if tok == EOS {
                    if rank < beam {
                        finished.push(Hypothesis {
                            tokens,
                            log_prob: score,
                            finished: true,
                        });
                    }
                } else if next.len() < beam {
                    next.push((tokens, score));
                }
            }
            alive = next;
            if finished.len() >= beam || alive.is_empty() {
                break;
            }
        }
        let pool = if finished.is_empty() {
            alive
                .into_iter()
                .map(|(tokens, log_prob)| Hypothesis {
                    tokens,
                    log_prob,
                    finished: false,
                })
                .collect()
        } else {
            finished
        };
        let mut best: Option<Hypothesis> = None;
        for h in pool {
            if best.as_ref().is_none_or(|b| h.better_than(b, alpha)) {
                best = Some(h);
            }
        }
        best.ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
    }

    /// Decodes every sentence, spreading the work over `threads` workers.
    /// Results come back in input order.
    pub fn translate_corpus(
        &self,
        sources: &[Vec<usize>],
        beam: usize,
        max_len: usize,
        alpha: f64,
        threads: usize,
    ) -> Result<Vec<Hypothesis>> {
        let threads = threads.max(1).min(sources.len().max(1));
        if threads == 1 {
            return sources.iter().map(|s| self.beam_search(s, beam, max_len, alpha)).collect();
        }
        let chunk = sources.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Hypothesis>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = sources
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.beam_search(s, beam, max_len, alpha)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("decoding worker panicked".into()))))
                .collect()
        });
        let mut out = Vec::with_capacity(sources.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> (usize, f64) {
    let mut best = (0, row[0].as_f64());
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x.as_f64() > best.1 {
            best = (i, x.as_f64());
        }
    }
    best
}

pub fn greedy_decode<T: Scalar>(
    model: &NmtModel<T>,
    src_lm: Option<&BslmCheckpoint<T>>,
    src: &[usize],
    max_len: usize,
) -> Result<Hypothesis> {
    Translator::new(model, src_lm)?.greedy(src, max_len)
}

pub fn beam_search<T: Scalar>(
    model: &NmtModel<T>,
    src_lm: Option<&BslmCheckpoint<T>>,
    src: &[usize],
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    Translator::new(model, src_lm)?.beam_search(src, beam, max_len, alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percent, `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: bool,
}

impl BleuReport {
    pub fn tsv_header() -> &'static str {
        "bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len"
    }

    pub fn tsv(&self) -> String {
        let p = self.precisions.map(|x| format!("{:.4}", 100.0 * x));
        format!(
            "{:.4}\t{}\t{:.6}\t{}\t{}",
            self.bleu,
            p.join("\t"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|x| format!("{:.1}", 100.0 * x));
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )?;
        if self.bleu == 0.0 && !self.smoothed && self.matches.contains(&0) {
            write!(f, " [no matching n-grams for some order; smoothing off]")?;
        }
        Ok(())
    }
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over tokenized sentences, one reference each.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], smoothing: bool) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::dim("bleu", &[hypotheses.len()], &[references.len()]));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if smoothing {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    // Orders longer than every hypothesis have no n-grams to judge and are
    // left out of the mean, so BLEU(h, h) = 100 also for short sentences.
    let judged: Vec<f64> = (0..4).filter(|&n| smoothing || totals[n] > 0).map(|n| precisions[n]).collect();
    let bleu = if judged.is_empty() || judged.contains(&0.0) {
        0.0
    } else {
        let log_mean = judged.iter().map(|p| p.ln()).sum::<f64>() / judged.len() as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothed: smoothing,
    })
}

/// BLEU over whitespace-tokenized lines.
pub fn bleu_lines<S: AsRef<str>>(hypotheses: &[S], references: &[S], smoothing: bool) -> Result<BleuReport> {
    let split = |s: &[S]| -> Vec<Vec<String>> {
        s.iter()
            .map(|l| l.as_ref().split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hypotheses), &split(references), smoothing)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub label: String,
    pub sentences: usize,
    /// Wall time of every timed repetition, seconds.
    pub times: Vec<f64>,
    /// Sentences per second at the median time.
    pub sentences_per_sec: f64,
}

/// Decodes `corpus` once untimed and then `reps` timed times; reports the
/// median.
pub fn throughput_benchmark<T: Scalar>(
    label: &str,
    translator: &Translator<'_, T>,
    corpus: &[Vec<usize>],
    beam: usize,
    max_len: usize,
    reps: usize,
) -> Result<ThroughputReport> {
    if reps == 0 || corpus.is_empty() {
        return Err(Error::Contract("benchmark needs a corpus and at least one repetition".into()));
    }
    for s in corpus {
        translator.beam_search(s, beam, max_len, 0.6)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for s in corpus {
            translator.beam_search(s, beam, max_len, 0.6)?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        sorted[reps / 2]
    } else {
        0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2])
    };
    Ok(ThroughputReport {
        label: label.to_string(),
        sentences: corpus.len(),
        times,
        sentences_per_sec: corpus.len() as f64 / median.max(1e-12),
    })
}
