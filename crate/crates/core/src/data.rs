//! Subword segmentation, vocabularies, corpora and length-bucketed batching.
//!
//! Text is whitespace-tokenized after collapsing runs of whitespace to single
//! spaces; that normalization is the only lossy step of the
//! tokenize/detokenize round trip.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Marker on non-final subwords.
pub const CONTINUATION: &str = "@@";
const END_OF_WORD: &str = "</w>";

pub fn normalize_whitespace(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token <-> id bijection with the four reserved ids at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary (ties broken by token text) of at most
    /// `max_size` entries including the reserved ones.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < SPECIALS.len() {
            return Err(Error::Config(format!("vocabulary limit {max_size} below 4")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with <pad> <s> </s> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content hash over tokens in id order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&id) => Err(Error::UnknownToken {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Config(format!("vocabulary line {} lacks a TAB", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad id on vocabulary line {}", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::Config(format!(
                    "vocabulary ids must be consecutive; line {} has {id}",
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Ordered byte-pair merges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate merge `{} {}`", m.0, m.1)));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one word. Non-final subwords carry the `@@` marker.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        let n = symbols.len();
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i + 1 == n {
                    s.strip_suffix(END_OF_WORD).unwrap_or(&s).to_string()
                } else {
                    format!("{s}{CONTINUATION}")
                }
            })
            .collect()
    }

    /// Segments a line. Any existing `@@` joins are undone first, so the
    /// operation is idempotent.
    pub fn encode_line(&self, line: &str) -> String {
        detokenize(line)
            .split_whitespace()
            .flat_map(|w| self.apply_word(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "merge line {} must hold two space-separated symbols",
                        n + 1
                    )))
                }
            }
        }
        Self::from_merges(merges)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_merges` merges by repeatedly joining the most frequent
/// adjacent symbol pair; ties go to the lexicographically smallest pair.
pub fn bpe_learn<S: AsRef<str>>(lines: &[S], num_merges: usize) -> Result<MergeTable> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> =
        freq.into_iter().map(|(w, c)| (word_symbols(w), c)).collect();
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let Some(best) = pairs
            .into_iter()
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()))
        else {
            break;
        };
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &best.0, &best.1);
        }
        merges.push(best);
    }
    MergeTable::from_merges(merges)
}

/// Undoes subword segmentation.
pub fn detokenize(line: &str) -> String {
    let joined = line.replace(&format!("{CONTINUATION} "), "");
    let joined = joined.strip_suffix(CONTINUATION).unwrap_or(&joined);
    normalize_whitespace(joined)
}

/// Sentences as token ids, with the source line number of each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonoCorpus {
    pub sentences: Vec<Vec<usize>>,
    pub lines: Vec<usize>,
}

impl MonoCorpus {
    /// Encodes lines, skipping blank ones.
    pub fn from_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary) -> Result<Self> {
        let mut c = Self::default();
        for (i, l) in lines.iter().enumerate() {
            let ids = vocab.encode(l.as_ref());
            if !ids.is_empty() {
                c.sentences.push(ids);
                c.lines.push(i);
            }
        }
        if c.sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
    pub lines: Vec<usize>,
}

impl ParallelCorpus {
    pub fn from_lines<S: AsRef<str>>(
        src: &[S],
        tgt: &[S],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::dim("parallel corpus", &[src.len()], &[tgt.len()]));
        }
        let mut c = Self::default();
        for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
            let (s, t) = (src_vocab.encode(s.as_ref()), tgt_vocab.encode(t.as_ref()));
            if !s.is_empty() && !t.is_empty() {
                c.pairs.push((s, t));
                c.lines.push(i);
            }
        }
        if c.pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, n: usize) -> Self {
        Self {
            pairs: self.pairs[..n.min(self.len())].to_vec(),
            lines: self.lines[..n.min(self.len())].to_vec(),
        }
    }
}

/// Groups sentence indices into batches whose padded size
/// `count * max_len` stays within `token_budget`. Sentences are bucketed by
/// length; batch order is shuffled when an RNG is given.
pub fn batch_by_length(
    lengths: &[usize],
    token_budget: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Vec<usize>>> {
    if let Some((index, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > token_budget) {
        return Err(Error::OversizeSentence {
            index,
            len,
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let max_len = lengths[i].max(1);
        if !current.is_empty() && (current.len() + 1) * max_len > token_budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if let Some(rng) = rng {
        batches.shuffle(rng);
    }
    Ok(batches)
}

/// Fraction of padded slots that are padding.
pub fn padding_overhead(batches: &[Vec<usize>], lengths: &[usize]) -> f64 {
    let (mut real, mut padded) = (0usize, 0usize);
    for b in batches {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        padded += max * b.len();
        real += b.iter().map(|&i| lengths[i]).sum::<usize>();
    }
    if padded == 0 {
        0.0
    } else {
        (padded - real) as f64 / padded as f64
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{}", l.as_ref())?;
    }
    f.flush()?;
    Ok(())
}
