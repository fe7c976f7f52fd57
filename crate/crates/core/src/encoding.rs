//! Embedding tables and the context / topic-path encoders.
//!
//! The context encoder reads all sentences of the window as one token
//! sequence and mean-pools the encoder states inside each sentence span, so
//! the result has one row per sentence. Positions are counted backwards from
//! the most recent token, which keeps "the latest turn" at a fixed position
//! whatever the window length.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::Persona;
use crate::error::{Error, Result};
use crate::nn::layers::TransformerEncoder;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    /// Maximum number of tokens the context encoder reads.
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 256,
            dropout: 0.1,
            max_tokens: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.max_tokens == 0 || self.ffn_width == 0 {
            return Err(Error::Invalid("max_tokens and ffn_width must be positive".into()));
        }
        Ok(())
    }
}

/// Learned lookup tables shared by every component.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub word: ParamId,
    pub topic: ParamId,
    pub persona: ParamId,
    pub user: ParamId,
    pub position: ParamId,
}

pub struct TableSizes {
    pub words: usize,
    pub topics: usize,
    pub users: usize,
    pub positions: usize,
}

impl EmbeddingTables {
    pub fn new(
        store: &mut ParamStore,
        sizes: &TableSizes,
        d: usize,
        persona_init: Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if persona_init.cols() != d {
            return Err(Error::Invalid(format!(
                "persona table has width {}, expected {d}",
                persona_init.cols()
            )));
        }
        let std = (1.0 / d as f64).sqrt();
        Ok(Self {
            word: store.add("emb.word", Tensor::randn(sizes.words, d, std, rng))?,
            topic: store.add("emb.topic", Tensor::randn(sizes.topics, d, std, rng))?,
            persona: store.add("emb.persona", persona_init)?,
            user: store.add("emb.user", Tensor::randn(sizes.users, d, 0.02, rng))?,
            position: store.add("emb.position", Tensor::randn(sizes.positions, d, std, rng))?,
        })
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-words vectors: each word maps to a fixed Gaussian vector
/// seeded by its hash, weighted by its smoothed inverse document frequency
/// `ln(1 + N/df)` over the persona list; a persona is the normalized sum.
/// Template words shared by every description thus contribute little.
pub fn init_persona_embeddings(personas: &[Persona], d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Invalid("embedding width must be positive".into()));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for p in personas {
        let mut seen: Vec<&str> = p.tokens.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            *df.entry(w).or_default() += 1;
        }
    }
    let n = personas.len() as f64;
    let mut out = Tensor::zeros(personas.len(), d);
    for (r, p) in personas.iter().enumerate() {
        let row = out.row_mut(r);
        for w in &p.tokens {
            let idf = (1.0 + n / df[w.as_str()] as f64).ln();
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w));
            for x in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += idf * z;
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

/// Reads a precomputed persona matrix: `{"rows":n,"cols":d,"data":[[..],..]}`.
pub fn read_persona_override(path: impl AsRef<Path>, n: usize, d: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: MatrixFile = serde_json::from_str(&text)?;
    if m.rows != n || m.cols != d {
        return Err(Error::Data(format!(
            "persona override is {}x{}, expected {n}x{d}",
            m.rows, m.cols
        )));
    }
    if m.data.len() != n || m.data.iter().any(|r| r.len() != d) {
        return Err(Error::Data(
            "persona override data does not match its shape header".into(),
        ));
    }
    Ok(Tensor::from_rows(&m.data))
}

pub fn write_persona_override(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let m = MatrixFile {
        rows: t.rows(),
        cols: t.cols(),
        data: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
    };
    fs::write(path, serde_json::to_string(&m)?).map_err(|e| Error::io(path, e))
}

/// Output of the context encoder.
pub struct ContextEncoding {
    /// `|C| × d`, one row per sentence.
    pub sentences: Var,
    /// `n_tokens × d` token states.
    pub tokens: Var,
    /// Number of leading sentences dropped to respect the token budget.
    pub dropped: usize,
}

/// Index of the first sentence kept when the newest sentences are packed
/// into `max_tokens`. The newest sentence is always kept (and clipped to its
/// last `max_tokens` tokens if necessary).
pub fn first_kept_sentence(lengths: &[usize], max_tokens: usize) -> usize {
    let mut total = 0;
    for i in (0..lengths.len()).rev() {
        total += lengths[i].max(1);
        if total > max_tokens {
            return (i + 1).min(lengths.len().saturating_sub(1));
        }
    }
    0
}

fn recency_positions(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

/// Token embeddings plus positions; positions count back from the last token.
fn embed_with_positions(g: &mut Graph, tables: &EmbeddingTables, table: ParamId, ids: &[usize]) -> Var {
    let tok = g.embed(table, ids);
    let pos = g.embed(tables.position, &recency_positions(ids.len()));
    let x = g.add(tok, pos);
    g.dropout(x)
}

/// Encodes the concatenated sentences and mean-pools per sentence.
///
/// Empty sentences are represented by a single UNK token so that every
/// sentence owns at least one state.
pub fn encode_context(
    g: &mut Graph,
    tables: &EmbeddingTables,
    encoder: &TransformerEncoder,
    sentences: &[Vec<usize>],
    max_tokens: usize,
) -> ContextEncoding {
    assert!(!sentences.is_empty(), "context needs at least one sentence");
    let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
    let first = first_kept_sentence(&lengths, max_tokens);
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for s in &sentences[first..] {
        let start = ids.len();
        if s.is_empty() {
            ids.push(crate::corpus::UNK);
        } else {
            ids.extend_from_slice(s);
        }
        spans.push((start, ids.len() - start));
    }
    if ids.len() > max_tokens {
        // only the newest sentence is left and it is too long: keep its tail
        let cut = ids.len() - max_tokens;
        ids.drain(..cut);
        spans = vec![(0, ids.len())];
    }
    let x = embed_with_positions(g, tables, tables.word, &ids);
    let tokens = encoder.forward(g, x);
    let sentences = g.segment_mean(tokens, &spans);
    ContextEncoding {
        sentences,
        tokens,
        dropped: first,
    }
}

/// Encodes a token sequence (e.g. a topic name) without pooling.
pub fn encode_tokens(g: &mut Graph, tables: &EmbeddingTables, encoder: &TransformerEncoder, ids: &[usize]) -> Var {
    assert!(!ids.is_empty());
    let x = embed_with_positions(g, tables, tables.word, ids);
    encoder.forward(g, x)
}

/// `|tp| × d` encoding of a topic path, one token per topic.
pub fn encode_topic_path(
    g: &mut Graph,
    tables: &EmbeddingTables,
    encoder: &TransformerEncoder,
    topics: &[usize],
) -> Var {
    assert!(!topics.is_empty(), "topic path must hold at least one topic");
    let x = embed_with_positions(g, tables, tables.topic, topics);
    encoder.forward(g, x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            _ => Err(Error::Invalid(format!("unknown pooling {s}"))),
        }
    }
}

/// Reduces a sequence to one `1 × d` row.
pub fn pool_sequence(g: &mut Graph, repr: Var, mode: Pooling) -> Var {
    let n = g.shape(repr).0;
    assert!(n > 0, "cannot pool an empty sequence");
    match mode {
        Pooling::Mean => g.mean_rows(repr),
        Pooling::Last => g.slice_rows(repr, n - 1, 1),
    }
}
