//! Prompt–story next-token data: corpus generation and import, windowing,
//! pair-level splitting and the frozen embedding table.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numeric::{seeded_rng, Tensor};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("no examples survive filtering")]
    EmptyDataset,
    #[error("split with val_frac {val_frac} over {pairs} pairs leaves an empty side")]
    EmptySplit { val_frac: f64, pairs: usize },
    #[error("embedding shape mismatch: declared {declared:?}, expected {expected:?}")]
    EmbeddingShape {
        declared: (usize, usize),
        expected: (usize, usize),
    },
    #[error("bad embedding file: {0}")]
    EmbeddingFormat(String),
    #[error("corpus line {line}: {msg}")]
    CorpusFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One prompt–story pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub prompt_tokens: Vec<TokenId>,
    pub story_tokens: Vec<TokenId>,
}

/// A fixed-length context window and the token that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: Vec<TokenId>,
    pub target: TokenId,
    pub source_pair: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset_fraction: f64,
    pub val_frac: f64,
    pub max_prompt_tokens: usize,
    pub max_story_tokens: usize,
    pub context_len: usize,
    pub target_stride: usize,
    pub min_story_tokens: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_fraction: 0.01,
            val_frac: 0.20,
            max_prompt_tokens: 96,
            max_story_tokens: 192,
            context_len: 24,
            target_stride: 2,
            min_story_tokens: 32,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return bad("dataset_fraction must lie in (0, 1]");
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return bad("val_frac must lie in (0, 1)");
        }
        if self.context_len == 0 {
            return bad("context_len must be at least 1");
        }
        if self.target_stride == 0 {
            return bad("target_stride must be at least 1");
        }
        Ok(())
    }
}

/// A tokenized corpus over a closed vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub pairs: Vec<RawPair>,
}

/// Parameters of the seeded synthetic corpus.
///
/// Stories are walks on topic-specific Markov chains. A share of the states
/// has two near-equiprobable successors, so some next tokens are genuinely
/// ambiguous while the rest are mostly predictable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub vocab_size: usize,
    pub n_pairs: usize,
    pub n_topics: usize,
    pub ambiguous_frac: f64,
    pub dominant_prob: f64,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub story_len_min: usize,
    pub story_len_max: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_pairs: 10_000,
            n_topics: 4,
            ambiguous_frac: 0.3,
            dominant_prob: 0.85,
            prompt_len_min: 4,
            prompt_len_max: 40,
            story_len_min: 24,
            story_len_max: 72,
            seed: 7,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        if !(2..=u32::MAX as usize).contains(&self.vocab_size) {
            return bad("vocab_size must be at least 2");
        }
        if self.n_pairs == 0 || self.n_topics == 0 {
            return bad("n_pairs and n_topics must be positive");
        }
        if !(0.0..=1.0).contains(&self.ambiguous_frac) || !(0.0..=1.0).contains(&self.dominant_prob)
        {
            return bad("ambiguous_frac and dominant_prob must lie in [0, 1]");
        }
        if self.prompt_len_min > self.prompt_len_max || self.story_len_min > self.story_len_max {
            return bad("length ranges must satisfy min <= max");
        }
        Ok(())
    }
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates the synthetic prompt–story corpus.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let mut rng = seeded_rng(cfg.seed);
    // transitions[topic][prev] is a distribution over the next token.
    let transitions: Vec<Vec<Vec<f64>>> = (0..cfg.n_topics)
        .map(|_| {
            (0..v)
                .map(|_| {
                    let mut row = vec![0.0; v];
                    let peaked = if rng.random::<f64>() < cfg.ambiguous_frac {
                        let a = rng.random_range(0..v);
                        let mut b = rng.random_range(0..v - 1);
                        if b >= a {
                            b += 1;
                        }
                        let split = 0.5 + rng.random_range(-0.05..0.05);
                        vec![(a, cfg.dominant_prob * split), (b, cfg.dominant_prob * (1.0 - split))]
                    } else {
                        vec![(rng.random_range(0..v), cfg.dominant_prob)]
                    };
                    let floor = (1.0 - cfg.dominant_prob) / v as f64;
                    row.iter_mut().for_each(|p| *p = floor);
                    for (tok, mass) in peaked {
                        row[tok] += mass;
                    }
                    row
                })
                .collect()
        })
        .collect();

    let pairs = (0..cfg.n_pairs)
        .map(|_| {
            let topic = rng.random_range(0..cfg.n_topics);
            let prompt_len = rng.random_range(cfg.prompt_len_min..=cfg.prompt_len_max);
            let story_len = rng.random_range(cfg.story_len_min..=cfg.story_len_max);
            let mut prev = rng.random_range(0..v);
            let mut walk = |n: usize, prev: &mut usize| -> Vec<TokenId> {
                (0..n)
                    .map(|_| {
                        *prev = sample_categorical(&transitions[topic][*prev], &mut rng);
                        *prev as TokenId
                    })
                    .collect()
            };
            let prompt_tokens = walk(prompt_len, &mut prev);
            let story_tokens = walk(story_len, &mut prev);
            RawPair {
                prompt_tokens,
                story_tokens,
            }
        })
        .collect();
    Ok(Corpus {
        vocab_size: v,
        pairs,
    })
}

/// Reads a pre-tokenized corpus.
///
/// The first line holds the vocabulary size; every further non-empty line is
/// one sequence of whitespace-separated token ids. A `|` splits a line into
/// prompt and story; a line without it is a story with an empty prompt.
pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let vocab_size = match lines.next() {
        Some((_, line)) => line?.trim().parse::<usize>().map_err(|e| DataError::CorpusFormat {
            line: 1,
            msg: format!("vocabulary size: {e}"),
        })?,
        None => {
            return Err(DataError::CorpusFormat {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let parse = |s: &str, line: usize| -> Result<Vec<TokenId>, DataError> {
        s.split_whitespace()
            .map(|t| {
                let id: TokenId = t.parse().map_err(|e| DataError::CorpusFormat {
                    line,
                    msg: format!("token `{t}`: {e}"),
                })?;
                if id as usize >= vocab_size {
                    return Err(DataError::CorpusFormat {
                        line,
                        msg: format!("token {id} outside vocabulary of {vocab_size}"),
                    });
                }
                Ok(id)
            })
            .collect()
    };
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (prompt, story) = line.split_once('|').unwrap_or(("", line.as_str()));
        pairs.push(RawPair {
            prompt_tokens: parse(prompt, i + 1)?,
            story_tokens: parse(story, i + 1)?,
        });
    }
    Ok(Corpus { vocab_size, pairs })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", corpus.vocab_size)?;
    let join = |t: &[TokenId]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for pair in &corpus.pairs {
        writeln!(out, "{} | {}", join(&pair.prompt_tokens), join(&pair.story_tokens))?;
    }
    out.flush()?;
    Ok(())
}

/// Keeps `round(fraction · N)` pairs chosen by a seeded shuffle; the kept
/// pairs retain their original relative order.
pub fn subsample(pairs: &[RawPair], fraction: f64, seed: u64) -> Vec<RawPair> {
    let keep = ((fraction * pairs.len() as f64).round() as usize).min(pairs.len());
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pairs[i].clone()).collect()
}

pub fn truncate_pair(pair: &RawPair, cfg: &DataConfig) -> RawPair {
    RawPair {
        prompt_tokens: pair.prompt_tokens[..pair.prompt_tokens.len().min(cfg.max_prompt_tokens)]
            .to_vec(),
        story_tokens: pair.story_tokens[..pair.story_tokens.len().min(cfg.max_story_tokens)]
            .to_vec(),
    }
}

/// Windows every pair into next-token examples.
///
/// Prompt and story are concatenated; targets sit at stream positions
/// `context_len + k · target_stride` and are kept only when they fall inside
/// the story. Stories shorter than `min_story_tokens` after truncation are
/// dropped.
pub fn make_examples(pairs: &[RawPair], cfg: &DataConfig) -> Result<Vec<Example>, DataError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (pair_idx, pair) in pairs.iter().enumerate() {
        let pair = truncate_pair(pair, cfg);
        if pair.story_tokens.len() < cfg.min_story_tokens {
            continue;
        }
        let prompt_len = pair.prompt_tokens.len();
        let stream: Vec<TokenId> = pair
            .prompt_tokens
            .iter()
            .chain(&pair.story_tokens)
            .copied()
            .collect();
        let mut t = cfg.context_len;
        while t < stream.len() {
            if t >= prompt_len {
                out.push(Example {
                    context: stream[t - cfg.context_len..t].to_vec(),
                    target: stream[t],
                    source_pair: pair_idx,
                });
            }
            t += cfg.target_stride;
        }
    }
    if out.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(out)
}

/// Partitions examples by source pair: `round(val_frac · pairs)` pairs go to
/// validation, chosen by a seeded shuffle.
pub fn split(
    examples: &[Example],
    val_frac: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>), DataError> {
    let pairs: Vec<usize> = examples
        .iter()
        .map(|e| e.source_pair)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_val = (val_frac * pairs.len() as f64).round() as usize;
    if n_val == 0 || n_val >= pairs.len() {
        return Err(DataError::EmptySplit {
            val_frac,
            pairs: pairs.len(),
        });
    }
    let mut shuffled = pairs;
    shuffled.shuffle(&mut seeded_rng(seed));
    let val_pairs: BTreeSet<usize> = shuffled[..n_val].iter().copied().collect();
    let (val, train): (Vec<Example>, Vec<Example>) = examples
        .iter()
        .cloned()
        .partition(|e| val_pairs.contains(&e.source_pair));
    Ok((train, val))
}

/// SHA-256 over the canonical byte encoding of an example sequence.
pub fn examples_checksum(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update((e.source_pair as u64).to_le_bytes());
        h.update(e.target.to_le_bytes());
        for t in &e.context {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const EMBEDDING_MAGIC: u32 = u32::from_le_bytes(*b"EVEM");
const EMBEDDING_VERSION: u32 = 1;

/// The frozen token embedding table, shared by the input lookup and the tied
/// output head. There is no mutable access to the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    /// Seeded `N(0, 1)` table.
    pub fn seeded(vocab_size: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            matrix: Tensor::randn(&[vocab_size, embed_dim], 1.0, &mut seeded_rng(seed)),
        }
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self, DataError> {
        if matrix.shape().len() != 2 {
            return Err(DataError::EmbeddingFormat(format!(
                "expected a 2-D matrix, got shape {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn lookup(&self, token: TokenId) -> &[f64] {
        self.matrix.row(token as usize)
    }

    /// Concatenated embeddings of each context: `[batch, len · dim]`.
    pub fn gather(&self, contexts: &[&[TokenId]]) -> Tensor {
        let width = contexts.first().map_or(0, |c| c.len()) * self.embed_dim();
        let mut data = Vec::with_capacity(contexts.len() * width);
        for ctx in contexts {
            for &t in ctx.iter() {
                data.extend_from_slice(self.lookup(t));
            }
        }
        Tensor::matrix(contexts.len(), width, data).expect("uniform context length")
    }

    /// Writes the 16-byte header (magic, version, vocab, dim as LE u32)
    /// followed by row-major LE f64 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), DataError> {
        for word in [
            EMBEDDING_MAGIC,
            EMBEDDING_VERSION,
            self.vocab_size() as u32,
            self.embed_dim() as u32,
        ] {
            w.write_all(&word.to_le_bytes())?;
        }
        for v in self.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a table and checks it against the expected `(vocab, dim)`.
    pub fn read_from(
        mut r: impl Read,
        expected: Option<(usize, usize)>,
    ) -> Result<Self, DataError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| DataError::EmbeddingFormat("truncated header".into()))?;
        let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
        if word(0) != EMBEDDING_MAGIC {
            return Err(DataError::EmbeddingFormat("bad magic".into()));
        }
        if word(1) != EMBEDDING_VERSION {
            return Err(DataError::EmbeddingFormat(format!(
                "unsupported version {}",
                word(1)
            )));
        }
        let declared = (word(2) as usize, word(3) as usize);
        if let Some(expected) = expected {
            if declared != expected {
                return Err(DataError::EmbeddingShape { declared, expected });
            }
        }
        let n = declared.0 * declared.1;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| DataError::EmbeddingFormat("truncated body".into()))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let matrix = Tensor::matrix(declared.0, declared.1, data).expect("sized from header");
        Ok(Self { matrix })
    }

    pub fn load(path: &Path, expected: Option<(usize, usize)>) -> Result<Self, DataError> {
        Self::read_from(BufReader::new(fs::File::open(path)?), expected)
    }
}

/// A fully built dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab_size: usize,
    pub pairs: Vec<RawPair>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Subsample, window and split a corpus.
pub fn build_dataset(corpus: &Corpus, cfg: &DataConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let pairs: Vec<RawPair> = subsample(&corpus.pairs, cfg.dataset_fraction, cfg.seed)
        .iter()
        .map(|p| truncate_pair(p, cfg))
        .collect();
    let examples = make_examples(&pairs, cfg)?;
    let (train, val) = split(&examples, cfg.val_frac, cfg.seed)?;
    Ok(Dataset {
        vocab_size: corpus.vocab_size,
        pairs,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Graph;

    fn pair(prompt: usize, story: usize) -> RawPair {
        RawPair {
            prompt_tokens: (0..prompt as u32).map(|t| t % 7).collect(),
            story_tokens: (0..story as u32).map(|t| t % 11).collect(),
        }
    }

    /// Independent enumeration over every window start.
    fn window_targets(prompt: usize, story: usize, cfg: &DataConfig) -> Vec<usize> {
        let story = story.min(cfg.max_story_tokens);
        let total = prompt + story;
        (0..total)
            .filter_map(|start| {
                let t = start + cfg.context_len;
                (t < total && t >= prompt && (t - cfg.context_len).is_multiple_of(cfg.target_stride))
                    .then_some(t)
            })
            .collect()
    }

    #[test]
    fn short_story_is_dropped() {
        let cfg = DataConfig::default();
        let err = make_examples(&[pair(0, 31)], &cfg).unwrap_err();
        assert!(matches!(err, DataError::EmptyDataset));
        assert!(!make_examples(&[pair(0, 32)], &cfg).unwrap().is_empty());
    }

    #[test]
    fn long_story_is_truncated_before_windowing() {
        let cfg = DataConfig::default();
        let ex = make_examples(&[pair(0, 200)], &cfg).unwrap();
        // last target position must be < 192
        assert_eq!(ex.len(), window_targets(0, 200, &cfg).len());
        assert_eq!(ex.len(), (191 - 24) / 2 + 1);
    }

    #[test]
    fn thirty_two_token_story_gives_four_windows() {
        let cfg = DataConfig::default();
        let p = pair(0, 32);
        let ex = make_examples(std::slice::from_ref(&p), &cfg).unwrap();
        let positions = window_targets(0, 32, &cfg);
        assert_eq!(positions, vec![24, 26, 28, 30]);
        assert_eq!(ex.len(), 4);
        for (e, t) in ex.iter().zip(positions) {
            assert_eq!(e.target, p.story_tokens[t]);
            assert_eq!(e.context.len(), 24);
        }
    }

    #[test]
    fn windows_match_enumeration_with_prompts() {
        let cfg = DataConfig::default();
        for (prompt, story) in [(5, 40), (30, 50), (24, 33), (96, 64)] {
            let ex = make_examples(&[pair(prompt, story)], &cfg).unwrap();
            assert_eq!(ex.len(), window_targets(prompt, story, &cfg).len(), "{prompt}/{story}");
        }
    }

    fn examples_for(n_pairs: usize) -> Vec<Example> {
        let pairs: Vec<RawPair> = (0..n_pairs).map(|_| pair(4, 40)).collect();
        make_examples(&pairs, &DataConfig::default()).unwrap()
    }

    #[test]
    fn split_is_pair_level_and_sized() {
        let ex = examples_for(100);
        let (train, val) = split(&ex, 0.20, 3).unwrap();
        let tp: BTreeSet<_> = train.iter().map(|e| e.source_pair).collect();
        let vp: BTreeSet<_> = val.iter().map(|e| e.source_pair).collect();
        assert_eq!(tp.len(), 80);
        assert_eq!(vp.len(), 20);
        assert!(tp.is_disjoint(&vp));
        assert_eq!(train.len() + val.len(), ex.len());
    }

    #[test]
    fn split_is_deterministic() {
        let ex = examples_for(50);
        assert_eq!(split(&ex, 0.2, 9).unwrap(), split(&ex, 0.2, 9).unwrap());
    }

    #[test]
    fn split_rejects_empty_side() {
        let ex = examples_for(2);
        assert!(matches!(split(&ex, 0.2, 1), Err(DataError::EmptySplit { .. })));
    }

    #[test]
    fn fraction_keeps_rounded_count() {
        let pairs: Vec<RawPair> = (0..10_000).map(|i| pair(1, i % 5)).collect();
        assert_eq!(subsample(&pairs, 0.01, 4).len(), 100);
    }

    #[test]
    fn synthetic_corpus_is_seeded() {
        let cfg = SyntheticCorpusConfig {
            n_pairs: 20,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        let b = generate_corpus(&SyntheticCorpusConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, b);
        assert!(a
            .pairs
            .iter()
            .flat_map(|p| p.story_tokens.iter())
            .all(|&t| (t as usize) < a.vocab_size));
    }

    #[test]
    fn lookup_returns_row() {
        let table = EmbeddingTable::seeded(10, 4, 1);
        assert_eq!(table.lookup(0), &table.matrix().data()[..4]);
        assert_eq!(table.lookup(0).len(), 4);
        assert!(table.is_frozen());
    }

    #[test]
    fn table_never_receives_gradient() {
        let table = EmbeddingTable::seeded(5, 3, 2);
        let mut g = Graph::new();
        let x = g.constant(table.gather(&[&[1, 2]]));
        let w = g.param("w", &Tensor::full(&[6, 3], 0.1));
        let e = g.frozen(table.matrix());
        let h = g.matmul(x, w).unwrap();
        let logits = g.matmul_t(h, e).unwrap();
        let ce = g.softmax_cross_entropy(logits, &[3]).unwrap();
        let grads = g.backward(ce).unwrap();
        assert!(!grads.contains_key("embedding"));
        assert!(grads.contains_key("w"));
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let table = EmbeddingTable::seeded(17, 5, 11);
        let mut buf = Vec::new();
        table.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 17 * 5 * 8);
        let back = EmbeddingTable::read_from(buf.as_slice(), Some((17, 5))).unwrap();
        let bits = |t: &EmbeddingTable| t.matrix().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&table), bits(&back));
    }

    #[test]
    fn embedding_import_reports_both_shapes() {
        let mut buf = Vec::new();
        EmbeddingTable::seeded(4, 3, 0).write_to(&mut buf).unwrap();
        match EmbeddingTable::read_from(buf.as_slice(), Some((4, 8))) {
            Err(DataError::EmbeddingShape { declared, expected }) => {
                assert_eq!(declared, (4, 3));
                assert_eq!(expected, (4, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        let corpus = generate_corpus(&SyntheticCorpusConfig {
            n_pairs: 5,
            ..Default::default()
        })
        .unwrap();
        write_corpus(&corpus, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);

        fs::write(&path, "8\n1 2 3\n4 | 5 6\n").unwrap();
        let c = read_corpus(&path).unwrap();
        assert_eq!(c.pairs[0].prompt_tokens, Vec::<u32>::new());
        assert_eq!(c.pairs[1].story_tokens, vec![5, 6]);
        fs::write(&path, "4\n1 9\n").unwrap();
        assert!(matches!(read_corpus(&path), Err(DataError::CorpusFormat { line: 2, .. })));
    }
}
