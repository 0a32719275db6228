//! Corpus ingestion (Mikolov PTB layout), a capped vocabulary, contiguous
//! BPTT batching and a seeded synthetic corpus for offline experiments.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::rng_for;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary cap {0} leaves no room beside the reserved tokens")]
    CapTooSmall(usize),
    #[error("stream of {len} tokens is too short for batch size {batch} and bptt length {bptt}")]
    StreamTooShort {
        len: usize,
        batch: usize,
        bptt: usize,
    },
    #[error("batch size and bptt length must be positive")]
    InvalidBatching,
    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bijection between token strings and ids `0..len`. `<unk>` is id 0 and
/// `<eos>` id 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary over whitespace tokens of `text`, ties
    /// broken by first occurrence, truncated to `cap` entries in total.
    pub fn build(text: &str, cap: usize) -> Result<Self, DataError> {
        if cap < 3 {
            return Err(DataError::CapTooSmall(cap));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for tok in text.split_whitespace() {
            if tok == UNK || tok == EOS {
                continue;
            }
            let e = counts.entry(tok).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
        if counts.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap - 2);
        let tokens = [UNK, EOS]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _, _)| t))
            .map(String::from)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_contents(contents: &str) -> Result<Self, DataError> {
        let tokens: Vec<String> = contents.lines().map(String::from).collect();
        if tokens.len() < 2 || tokens[0] != UNK || tokens[1] != EOS {
            return Err(DataError::InvalidVocab(format!(
                "must start with {UNK} and {EOS}"
            )));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(DataError::InvalidVocab("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_file_contents()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_file_contents(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_contents().as_bytes()))
    }
}

/// A flat id sequence for one corpus split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub split: String,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps each line's tokens to ids (unknown → `<unk>`) and appends `<eos>`.
pub fn encode(text: &str, vocab: &Vocab, split: &str) -> TokenStream {
    let mut ids = Vec::new();
    for line in text.lines() {
        ids.extend(
            line.split_whitespace()
                .map(|t| vocab.id(t).unwrap_or(UNK_ID)),
        );
        ids.push(EOS_ID);
    }
    TokenStream {
        ids,
        split: split.to_string(),
    }
}

/// Space-joined tokens; `<eos>` becomes a newline.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    let mut line_start = true;
    for &id in ids {
        if id == EOS_ID {
            out.push('\n');
            line_start = true;
            continue;
        }
        if !line_start {
            out.push(' ');
        }
        out.push_str(vocab.token(id).unwrap_or(UNK));
        line_start = false;
    }
    out
}

/// Fraction of running-text tokens (line ends excluded) that are not in the
/// vocabulary or are a literal `<unk>`.
pub fn oov_rate(text: &str, vocab: &Vocab) -> f64 {
    let (mut total, mut oov) = (0usize, 0usize);
    for tok in text.split_whitespace() {
        total += 1;
        if tok == UNK || vocab.id(tok).is_none() {
            oov += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        oov as f64 / total as f64
    }
}

/// One BPTT window, time-major: `inputs[t][b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpttBlock {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl BpttBlock {
    pub fn seq_len(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    fn batch_major(rows: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let b = rows.first().map_or(0, Vec::len);
        (0..b)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect()
    }

    /// Inputs as one sequence per batch column.
    pub fn input_sequences(&self) -> Vec<Vec<u32>> {
        Self::batch_major(&self.inputs)
    }

    pub fn target_sequences(&self) -> Vec<Vec<u32>> {
        Self::batch_major(&self.targets)
    }
}

/// Iterator over contiguous BPTT windows. The stream is cut into
/// `batch_size` equal columns (tail dropped); block `i` of column `b`
/// continues block `i−1` of the same column, so recurrent state may be
/// carried across consecutive blocks. Only full windows are emitted.
#[derive(Debug, Clone)]
pub struct BpttBatches<'a> {
    columns: Vec<&'a [u32]>,
    bptt: usize,
    next_block: usize,
    num_blocks: usize,
}

impl BpttBatches<'_> {
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }
}

impl Iterator for BpttBatches<'_> {
    type Item = BpttBlock;

    fn next(&mut self) -> Option<BpttBlock> {
        if self.next_block >= self.num_blocks {
            return None;
        }
        let start = self.next_block * self.bptt;
        self.next_block += 1;
        let rows = |offset: usize| {
            (0..self.bptt)
                .map(|t| self.columns.iter().map(|c| c[start + t + offset]).collect())
                .collect()
        };
        Some(BpttBlock {
            inputs: rows(0),
            targets: rows(1),
        })
    }
}

pub fn bptt_batches(
    stream: &[u32],
    batch_size: usize,
    bptt: usize,
) -> Result<BpttBatches<'_>, DataError> {
    if batch_size == 0 || bptt == 0 {
        return Err(DataError::InvalidBatching);
    }
    let col_len = stream.len() / batch_size;
    let num_blocks = col_len.saturating_sub(1) / bptt;
    if stream.len() <= batch_size || num_blocks == 0 {
        return Err(DataError::StreamTooShort {
            len: stream.len(),
            batch: batch_size,
            bptt,
        });
    }
    let columns = (0..batch_size)
        .map(|b| &stream[b * col_len..(b + 1) * col_len])
        .collect();
    Ok(BpttBatches {
        columns,
        bptt,
        next_block: 0,
        num_blocks,
    })
}

/// The three splits of a corpus directory, encoded with a vocabulary built
/// from the training split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

pub fn read_split(dir: &Path, split: &str) -> Result<String, DataError> {
    let path = dir.join(format!("{split}.txt"));
    fs::read_to_string(&path).map_err(io_err(&path))
}

impl Corpus {
    /// Reads `train.txt`, `valid.txt`, `test.txt` from `dir`.
    pub fn load(dir: &Path, vocab_cap: usize) -> Result<Self, DataError> {
        let train = read_split(dir, "train")?;
        let vocab = Vocab::build(&train, vocab_cap)?;
        Self::load_with_vocab(dir, vocab)
    }

    pub fn load_with_vocab(dir: &Path, vocab: Vocab) -> Result<Self, DataError> {
        let texts: Vec<String> = SPLITS
            .iter()
            .map(|s| read_split(dir, s))
            .collect::<Result<_, _>>()?;
        Ok(Self::from_texts(vocab, &texts[0], &texts[1], &texts[2]))
    }

    pub fn from_texts(vocab: Vocab, train: &str, valid: &str, test: &str) -> Self {
        Self {
            train: encode(train, &vocab, "train"),
            valid: encode(valid, &vocab, "valid"),
            test: encode(test, &vocab, "test"),
            vocab,
        }
    }

    pub fn split(&self, name: &str) -> Option<&TokenStream> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Parameters of the synthetic desk corpus: an order-2 Markov chain over
/// `words` word types with a Zipfian marginal, broken into lines.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovCorpusConfig {
    pub words: usize,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    /// Expected words per line.
    pub mean_line_len: f64,
    pub seed: u64,
}

impl Default for MarkovCorpusConfig {
    fn default() -> Self {
        Self {
            words: 498,
            train_tokens: 200_000,
            valid_tokens: 20_000,
            test_tokens: 20_000,
            mean_line_len: 15.0,
            seed: 1,
        }
    }
}

const BIGRAM_CANDIDATES: usize = 6;
const TRIGRAM_CANDIDATES: usize = 2;
const TRIGRAM_WEIGHT: f64 = 0.4;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

struct MarkovChain {
    zipf_cdf: Vec<f64>,
    bigram: Vec<Vec<usize>>,
    salt: u64,
}

impl MarkovChain {
    fn new(cfg: &MarkovCorpusConfig) -> Self {
        let mut acc = 0.0;
        let mut zipf_cdf: Vec<f64> = (0..cfg.words)
            .map(|i| {
                acc += 1.0 / (i as f64 + 1.0);
                acc
            })
            .collect();
        for c in &mut zipf_cdf {
            *c /= acc;
        }
        let mut rng = rng_for(cfg.seed, "markov-table");
        let mut chain = Self {
            zipf_cdf,
            bigram: Vec::new(),
            salt: crate::rng::derive_seed(cfg.seed, "markov-trigram"),
        };
        // Row `words` is the line-start context.
        chain.bigram = (0..=cfg.words)
            .map(|_| {
                (0..BIGRAM_CANDIDATES)
                    .map(|_| chain.zipf(rng.random()))
                    .collect()
            })
            .collect();
        chain
    }

    fn zipf(&self, u: f64) -> usize {
        self.zipf_cdf
            .partition_point(|&c| c < u)
            .min(self.zipf_cdf.len() - 1)
    }

    fn next<R: Rng>(&self, prev2: usize, prev1: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < TRIGRAM_WEIGHT {
            let h = splitmix(
                self.salt ^ (prev2 as u64).wrapping_mul(0x1000_0001) ^ (prev1 as u64) << 32,
            );
            let pick = (rng.random::<u32>() as usize) % TRIGRAM_CANDIDATES;
            let u = (splitmix(h.wrapping_add(pick as u64)) >> 11) as f64 / (1u64 << 53) as f64;
            self.zipf(u)
        } else {
            // Candidate j has weight ∝ 1/(j+1).
            let cands = &self.bigram[prev1];
            let total: f64 = (0..cands.len()).map(|j| 1.0 / (j as f64 + 1.0)).sum();
            let mut u = rng.random::<f64>() * total;
            for (j, &c) in cands.iter().enumerate() {
                u -= 1.0 / (j as f64 + 1.0);
                if u <= 0.0 {
                    return c;
                }
            }
            *cands.last().unwrap()
        }
    }

    fn generate<R: Rng>(&self, tokens: usize, mean_line_len: f64, rng: &mut R) -> String {
        let start = self.bigram.len() - 1;
        let (mut prev2, mut prev1) = (start, start);
        let mut out = String::new();
        let mut line_len = 0usize;
        for _ in 0..tokens {
            let w = self.next(prev2, prev1, rng);
            if line_len > 0 {
                out.push(' ');
            }
            out.push('w');
            out.push_str(&w.to_string());
            line_len += 1;
            (prev2, prev1) = (prev1, w);
            if rng.random::<f64>() < 1.0 / mean_line_len {
                out.push('\n');
                line_len = 0;
                (prev2, prev1) = (start, start);
            }
        }
        if line_len > 0 {
            out.push('\n');
        }
        out
    }
}

/// Generates `(train, valid, test)` texts. Deterministic given the config.
pub fn markov_corpus(cfg: &MarkovCorpusConfig) -> (String, String, String) {
    let chain = MarkovChain::new(cfg);
    let gen = |n: usize, purpose: &str| {
        chain.generate(n, cfg.mean_line_len, &mut rng_for(cfg.seed, purpose))
    };
    (
        gen(cfg.train_tokens, "markov-train"),
        gen(cfg.valid_tokens, "markov-valid"),
        gen(cfg.test_tokens, "markov-test"),
    )
}

/// Writes the synthetic corpus in PTB layout under `dir`.
pub fn write_markov_corpus(dir: &Path, cfg: &MarkovCorpusConfig) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (train, valid, test) = markov_corpus(cfg);
    for (split, text) in SPLITS.iter().zip([train, valid, test]) {
        let path = dir.join(format!("{split}.txt"));
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Add-one-free unigram model fitted on `train` (ids), evaluated as
/// perplexity on next-token predictions of `eval`.
pub fn unigram_perplexity(train: &[u32], eval: &[u32], vocab_size: usize) -> f64 {
    let mut counts = vec![0usize; vocab_size];
    for &t in train {
        counts[t as usize] += 1;
    }
    let total = train.len() as f64;
    let nll: f64 = eval[1..]
        .iter()
        .map(|&t| -((counts[t as usize].max(1)) as f64 / total).ln())
        .sum();
    (nll / (eval.len() - 1) as f64).exp()
}
