//! Small generated corpora: a first-order Markov grammar over a closed word
//! set, and a translation task that maps every word through a fixed
//! permutation and reverses the sentence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probability of the first successor; the second gets the rest.
pub const MAIN_BRANCH: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGrammar {
    pub words: Vec<String>,
    successors: Vec<[usize; 2]>,
    pub min_len: usize,
    pub max_len: usize,
}

impl MarkovGrammar {
    /// `size` words named `{prefix}{i}`, sentence lengths in
    /// `min_len..=max_len`.
    pub fn new(size: usize, prefix: &str, min_len: usize, max_len: usize) -> Result<Self> {
        if size < 3 || min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!(
                "grammar needs at least 3 words and 1 <= min_len <= max_len, got {size}, {min_len}..={max_len}"
            )));
        }
        let successors = (0..size)
            .map(|t| [(t * 7 + 3) % size, (t * 11 + 5) % size])
            .map(|[a, b]| if a == b { [a, (b + 1) % size] } else { [a, b] })
            .collect();
        Ok(Self {
            words: (0..size).map(|i| format!("{prefix}{i}")).collect(),
            successors,
            min_len,
            max_len,
        })
    }

    /// `P(next | prev)` of the chain.
    pub fn transition(&self, prev: usize, next: usize) -> f64 {
        let [a, b] = self.successors[prev];
        if next == a {
            MAIN_BRANCH
        } else if next == b {
            1.0 - MAIN_BRANCH
        } else {
            0.0
        }
    }

    /// One sentence as word indices.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut cur = rng.gen_range(0..self.words.len());
        let mut out = vec![cur];
        while out.len() < len {
            let [a, b] = self.successors[cur];
            cur = if rng.gen::<f64>() < MAIN_BRANCH { a } else { b };
            out.push(cur);
        }
        out
    }

    pub fn render(&self, indices: &[usize]) -> String {
        indices.iter().map(|&i| self.words[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn sentences(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.render(&self.sample_indices(rng))).collect()
    }
}

/// Source sentences come from a grammar; the target replaces every word
/// through a fixed permutation and reverses word order.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTask {
    pub source: MarkovGrammar,
    pub target_words: Vec<String>,
    pub permutation: Vec<usize>,
}

impl TranslationTask {
    pub fn new(size: usize, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let source = MarkovGrammar::new(size, "s", min_len, max_len)?;
        let mut permutation: Vec<usize> = (0..size).collect();
        permutation.shuffle(rng);
        Ok(Self {
            source,
            target_words: (0..size).map(|i| format!("t{i}")).collect(),
            permutation,
        })
    }

    pub fn translate_indices(&self, src: &[usize]) -> Vec<usize> {
        src.iter().rev().map(|&i| self.permutation[i]).collect()
    }

    pub fn render_target(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .map(|&i| self.target_words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `(source, target)` lines.
    pub fn pairs(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
        (0..n)
            .map(|_| {
                let s = self.source.sample_indices(rng);
                let t = self.translate_indices(&s);
                (self.source.render(&s), self.render_target(&t))
            })
            .collect()
    }

    /// Monolingual target-side text drawn from the same distribution as the
    /// translation targets.
    pub fn target_sentences(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n)
            .map(|_| {
                let s = self.source.sample_indices(rng);
                self.render_target(&self.translate_indices(&s))
            })
            .collect()
    }
}

/// Perplexity on `test` of an add-one unigram model estimated on `train`
/// over `types` word types.
pub fn unigram_perplexity(train: &[Vec<usize>], test: &[Vec<usize>], types: usize) -> Result<f64> {
    let max_id = train.iter().chain(test).flatten().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_id + 1];
    let mut total = 0usize;
    for &t in train.iter().flatten() {
        counts[t] += 1;
        total += 1;
    }
    let n_test: usize = test.iter().map(Vec::len).sum();
    if n_test == 0 || types == 0 {
        return Err(Error::EmptyCorpus);
    }
    let denom = (total + types) as f64;
    let nll: f64 = test
        .iter()
        .flatten()
        .map(|&t| -(((counts[t] + 1) as f64) / denom).ln())
        .sum();
    Ok((nll / n_test as f64).exp())
}
