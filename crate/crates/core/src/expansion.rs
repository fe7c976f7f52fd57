//! Persona-specific global topic expansion.
//!
//! Every persona owns the `k` topics it scores highest under a bilinear
//! affinity `e_p · W · e_t`. For each turn of the topic path, the user's
//! personas are scored against the turn; personas with a non-negative score
//! contribute their (affinity-weighted) topic set to the turn representation,
//! which then passes through a feed-forward network and a re-encoder.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::EmbeddingTables;
use crate::error::{Error, Result};
use crate::nn::layers::{Mlp, TransformerEncoder};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionParams {
    /// Bilinear persona-topic weight `W`.
    pub affinity: ParamId,
    pub turn_mlp: Mlp,
    pub ffn: Mlp,
    pub reencoder: TransformerEncoder,
}

impl ExpansionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        ffn_width: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Tensor::randn(d, d, 0.01, rng);
        for i in 0..d {
            w.set(i, i, w.get(i, i) + 1.0);
        }
        Ok(Self {
            affinity: store.add("expansion.affinity", w)?,
            turn_mlp: Mlp::new(store, "expansion.turn_mlp", 3 * d, 2 * d, d, rng)?,
            ffn: Mlp::new(store, "expansion.ffn", d, ffn_width, d, rng)?,
            reencoder: TransformerEncoder::new(store, "expansion.reencoder", d, heads, ffn_width, n_layers, rng)?,
        })
    }
}

/// `e_p · W · e_t`.
pub fn persona_topic_affinity(e_p: &[f64], e_t: &[f64], w: &Tensor) -> f64 {
    assert_eq!(e_p.len(), w.rows());
    assert_eq!(e_t.len(), w.cols());
    let p = Tensor::row_vector(e_p.to_vec());
    let t = Tensor::row_vector(e_t.to_vec());
    p.matmul(w).matmul(&t.transpose()).scalar()
}

/// Full `|P| × |T|` affinity matrix `E_P W E_Tᵀ`.
pub fn affinity_matrix(personas: &Tensor, w: &Tensor, topics: &Tensor) -> Tensor {
    personas.matmul(w).matmul(&topics.transpose())
}

/// Indices of `scores` sorted by descending value, ties by lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Each persona's top-k topics with their affinity at build time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaTopicSets {
    pub k: usize,
    pub topics: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

impl PersonaTopicSets {
    pub fn from_affinity(affinity: &Tensor, k: usize) -> Result<Self> {
        if k == 0 || k > affinity.cols() {
            return Err(Error::Invalid(format!(
                "k={k} must be in 1..={} (number of topics)",
                affinity.cols()
            )));
        }
        let mut topics = Vec::with_capacity(affinity.rows());
        let mut scores = Vec::with_capacity(affinity.rows());
        for r in 0..affinity.rows() {
            let row = affinity.row(r);
            let top: Vec<usize> = rank_descending(row).into_iter().take(k).collect();
            scores.push(top.iter().map(|&t| row[t]).collect());
            topics.push(top);
        }
        Ok(Self { k, topics, scores })
    }

    /// One CSV line per persona: `epoch,persona,topic ids separated by spaces`.
    pub fn append_csv(&self, path: impl AsRef<Path>, epoch: usize) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str("epoch,persona,topics\n");
        }
        for (p, set) in self.topics.iter().enumerate() {
            let ids: Vec<String> = set.iter().map(|t| t.to_string()).collect();
            text.push_str(&format!("{epoch},{p},{}\n", ids.join(" ")));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Recomputes every persona's top-k topic set from the live parameters.
pub fn build_persona_topic_sets(
    store: &ParamStore,
    tables: &EmbeddingTables,
    w: ParamId,
    k: usize,
) -> Result<PersonaTopicSets> {
    let s = affinity_matrix(store.get(tables.persona), store.get(w), store.get(tables.topic));
    PersonaTopicSets::from_affinity(&s, k)
}

/// `f(h, e) = MLP(h) · eᵀ` for a batch of rows `h` against rows `e`.
pub fn mlp_dot(g: &mut Graph, mlp: &Mlp, input: Var, targets: Var) -> Var {
    let h = mlp.forward(g, input);
    g.matmul_t(h, targets)
}

/// `|tp| × |P_u|` scores `s'_ij = MLP([h_c_i; e_u; h_t_i]) · e_p_jᵀ`.
pub fn turn_persona_relevance(g: &mut Graph, mlp: &Mlp, h_c: Var, e_u: Var, h_t: Var, e_p: Var) -> Var {
    let n = g.shape(h_t).0;
    assert_eq!(g.shape(h_c).0, n, "context and topic path must align");
    let users = g.gather_rows(e_u, &vec![0; n]);
    let x = g.concat_cols(&[h_c, users, h_t]);
    mlp_dot(g, mlp, x, e_p)
}

/// `1` where the score is non-negative (σ(s) ≥ 0.5), else `0`.
pub fn threshold_mask(scores: &Tensor) -> Tensor {
    scores.map(|s| if s >= 0.0 { 1.0 } else { 0.0 })
}

/// Per-persona global topic vector `Σ_{t_k ∈ T_p} s_pk · e_t_k`, one row per
/// persona in `persona_ids`. Set membership is fixed by `sets`; the weights
/// are recomputed from the live embeddings so gradients reach `W`.
pub fn persona_global_vectors(
    g: &mut Graph,
    tables: &EmbeddingTables,
    w: ParamId,
    persona_ids: &[usize],
    sets: &PersonaTopicSets,
) -> Var {
    let e_p = g.embed(tables.persona, persona_ids);
    let w = g.param(w);
    let pw = g.matmul(e_p, w);
    let rows: Vec<Var> = persona_ids
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let e_t = g.embed(tables.topic, &sets.topics[p]);
            let pw_j = g.slice_rows(pw, j, 1);
            let s = g.matmul_t(pw_j, e_t);
            g.matmul(s, e_t)
        })
        .collect();
    g.concat_rows(&rows)
}

/// Input to the FFN: `h_t + (S' ⊙ M') · G`.
pub fn masked_aggregate(g: &mut Graph, h_t: Var, scores: Var, mask: Tensor, global: Var) -> Var {
    let gated = g.mul_const(scores, mask);
    let agg = g.matmul(gated, global);
    g.add(h_t, agg)
}

/// `h'_t = FFN(h_t + Σ_j s'_ij m'_ij G_j)` for every turn.
pub fn aggregate_global_topics(g: &mut Graph, ffn: &Mlp, h_t: Var, scores: Var, mask: Tensor, global: Var) -> Var {
    let x = masked_aggregate(g, h_t, scores, mask, global);
    ffn.forward(g, x)
}

pub fn reencode_topic_path(g: &mut Graph, reencoder: &TransformerEncoder, h: Var) -> Var {
    assert!(g.shape(h).0 >= 1, "topic path must hold at least one turn");
    reencoder.forward(g, h)
}

/// Row-normalized counts of adjacent topic pairs `(t_i, t_{i+1})` within dialogues.
pub fn co_occurrence(corpus: &crate::corpus::Corpus) -> Tensor {
    let n = corpus.topics.len();
    let mut m = Tensor::zeros(n, n);
    for d in &corpus.dialogues {
        for w in d.turns.windows(2) {
            let (a, b) = (w[0].topic, w[1].topic);
            m.set(a, b, m.get(a, b) + 1.0);
        }
    }
    for r in 0..n {
        let s: f64 = m.row(r).iter().sum();
        if s > 0.0 {
            m.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
    }
    m
}

/// The `k` topics ranked highest by `weights`, excluding `own`.
pub fn neighbours(weights: &[f64], own: usize, k: usize) -> Vec<usize> {
    rank_descending(weights)
        .into_iter()
        .filter(|&t| t != own)
        .take(k)
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Topic-to-topic aggregation used by the similarity / co-occurrence
/// variants: turn `i` receives `Σ_k w(t_i, t_k) e_t_k` over its `k`
/// best-weighted other topics. With `weights = None` the weights are the
/// cosine similarities of the current topic embeddings (treated as constants).
pub fn neighbour_aggregate(
    g: &mut Graph,
    tables: &EmbeddingTables,
    path: &[usize],
    k: usize,
    weights: Option<&Tensor>,
) -> Var {
    let table = g.store().get(tables.topic);
    let n_topics = table.rows();
    let k = k.min(n_topics.saturating_sub(1));
    let rows: Vec<Var> = path
        .iter()
        .map(|&t| {
            let w: Vec<f64> = match weights {
                Some(m) => m.row(t).to_vec(),
                None => (0..n_topics).map(|o| cosine(table.row(t), table.row(o))).collect(),
            };
            if k == 0 {
                return g.input(Tensor::zeros(1, table.cols()));
            }
            let nb = neighbours(&w, t, k);
            let coef = g.input(Tensor::row_vector(nb.iter().map(|&o| w[o]).collect()));
            let e = g.embed(tables.topic, &nb);
            g.matmul(coef, e)
        })
        .collect();
    g.concat_rows(&rows)
}
