//! Contrastive persona selector.
//!
//! The user's personas are scored against the pooled dialogue state and split
//! at zero into a positive and a negative set. Each set is collapsed into one
//! vector by a softmax over its scores (negated for the negative set), and the
//! auxiliary loss asks the positive aggregate to predict the gold next topic
//! better than the negative one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expansion::mlp_dot;
use crate::nn::layers::Mlp;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CONTRASTIVE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectorParams {
    pub mlp: Mlp,
    /// Bilinear persona-set-to-topic weight.
    pub w_g: ParamId,
}

impl SelectorParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        let mut w = Tensor::randn(d, d, 0.01, rng);
        for i in 0..d {
            w.set(i, i, w.get(i, i) + 1.0);
        }
        Ok(Self {
            mlp: Mlp::new(store, "selector.mlp", 3 * d, 2 * d, d, rng)?,
            w_g: store.add("selector.w_g", w)?,
        })
    }
}

/// `1 × |P_u|` scores `s''_p = MLP([pool(H_C); e_u; pool(H̃'_tp)]) · e_pᵀ`.
pub fn persona_relevance(g: &mut Graph, mlp: &Mlp, pooled_c: Var, e_u: Var, pooled_tp: Var, e_p: Var) -> Var {
    let x = g.concat_cols(&[pooled_c, e_u, pooled_tp]);
    mlp_dot(g, mlp, x, e_p)
}

/// Positions (into the user's persona list) of the two sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSplit {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    /// The positive set was empty and the top persona was promoted.
    pub fallback: bool,
}

impl PersonaSplit {
    pub fn all(n: usize) -> Self {
        Self {
            positive: (0..n).collect(),
            negative: Vec::new(),
            fallback: false,
        }
    }

    /// No negative set, so the contrastive term is skipped.
    pub fn contrast_skipped(&self) -> bool {
        self.negative.is_empty()
    }
}

/// Threshold split at `s'' ≥ 0`; promotes the best persona if none passes.
pub fn split_persona_sets(scores: &[f64]) -> PersonaSplit {
    assert!(!scores.is_empty(), "user has no personas");
    let (mut positive, mut negative): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| scores[i] >= 0.0);
    let mut fallback = false;
    if positive.is_empty() {
        let best = crate::expansion::rank_descending(scores)[0];
        negative.retain(|&i| i != best);
        positive.push(best);
        fallback = true;
    }
    PersonaSplit {
        positive,
        negative,
        fallback,
    }
}

/// `Σ_{p ∈ set} softmax(±s''_set)_p · e_p` as a `1 × d` row.
pub fn aggregate_set(g: &mut Graph, scores: Var, e_p: Var, members: &[usize], negate: bool) -> Var {
    assert!(!members.is_empty(), "cannot aggregate an empty persona set");
    let s = g.gather_cols(scores, members);
    let s = if negate { g.scale(s, -1.0) } else { s };
    let w = g.softmax(s);
    let e = g.gather_rows(e_p, members);
    g.matmul(w, e)
}

/// `(h_P+, h_P−)`; the negative aggregate is absent when `P⁻` is empty.
pub fn aggregate_persona_sets(g: &mut Graph, scores: Var, e_p: Var, split: &PersonaSplit) -> (Var, Option<Var>) {
    let pos = aggregate_set(g, scores, e_p, &split.positive, false);
    let neg = (!split.negative.is_empty()).then(|| aggregate_set(g, scores, e_p, &split.negative, true));
    (pos, neg)
}

/// `softmax_t(h · W_g · e_tᵀ)` over all topics, `1 × |T|`.
pub fn persona_topic_score(g: &mut Graph, h: Var, w_g: Var, topics: Var) -> Var {
    let hw = g.matmul(h, w_g);
    let logits = g.matmul_t(hw, topics);
    g.softmax(logits)
}

/// `−log(max(g_pos − g_neg, ε))` at the target topic.
pub fn contrastive_loss(g: &mut Graph, probs_pos: Var, probs_neg: Var, target: usize) -> Var {
    let a = g.pick(probs_pos, 0, target);
    let b = g.pick(probs_neg, 0, target);
    g.clamped_neg_log_diff(a, b, CONTRASTIVE_EPS)
}

/// Scalar form of [`contrastive_loss`].
pub fn contrastive_value(g_pos: f64, g_neg: f64) -> f64 {
    -(g_pos - g_neg).max(CONTRASTIVE_EPS).ln()
}

/// Inference-time record of one selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub persona_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub positive: Vec<usize>,
    pub fallback: bool,
}

impl SelectionTrace {
    pub fn new(persona_ids: &[usize], scores: &[f64], split: &PersonaSplit) -> Self {
        Self {
            persona_ids: persona_ids.to_vec(),
            scores: scores.to_vec(),
            positive: split.positive.iter().map(|&i| persona_ids[i]).collect(),
            fallback: split.fallback,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_split() {
        let s = split_persona_sets(&[0.3, -0.2, 0.0]);
        assert_eq!(s.positive, vec![0, 2]);
        assert_eq!(s.negative, vec![1]);
        assert!(!s.fallback);
    }

    #[test]
    fn fallback_promotes_argmax() {
        let s = split_persona_sets(&[-0.5, -0.1, -0.3]);
        assert_eq!(s.positive, vec![1]);
        assert_eq!(s.negative, vec![0, 2]);
        assert!(s.fallback);
    }

    #[test]
    fn all_positive_skips_contrast() {
        let s = split_persona_sets(&[0.5, 0.1]);
        assert!(s.contrast_skipped());
    }

    #[test]
    fn singleton_and_symmetric_aggregates() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let sv = g.input(Tensor::row_vector(vec![0.7, -0.2, -0.2]));
        let ev = g.input(e.clone());
        let split = split_persona_sets(&[0.7, -0.2, -0.2]);
        let (pos, neg) = aggregate_persona_sets(&mut g, sv, ev, &split);
        assert!(g.value(pos).max_abs_diff(&Tensor::row_vector(e.row(0).to_vec())) < 1e-15);
        let neg = neg.unwrap();
        for c in 0..4 {
            let want = 0.5 * e.get(1, c) + 0.5 * e.get(2, c);
            assert!((g.value(neg).get(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn topic_score_sums_to_one_and_is_uniform_for_equal_topics() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store);
        let h = g.input(Tensor::randn(1, 4, 1.0, &mut rng));
        let w = g.input(Tensor::randn(4, 4, 1.0, &mut rng));
        let row = Tensor::randn(1, 4, 1.0, &mut rng);
        let same = g.input(Tensor::from_rows(&vec![row.row(0).to_vec(); 5]));
        let p = persona_topic_score(&mut g, h, w, same);
        for &x in g.value(p).data() {
            assert!((x - 0.2).abs() < 1e-12);
        }
        let topics = g.input(Tensor::randn(5, 4, 1.0, &mut rng));
        let p = persona_topic_score(&mut g, h, w, topics);
        assert!((g.value(p).sum() - 1.0).abs() < 1e-12);
        let argmax = |t: &Tensor| crate::expansion::rank_descending(t.data())[0];
        let first = argmax(g.value(p));
        let h3 = g.scale(h, 3.0);
        let p3 = persona_topic_score(&mut g, h3, w, topics);
        assert_eq!(argmax(g.value(p3)), first);
    }

    #[test]
    fn contrastive_values() {
        assert!((contrastive_value(0.9, 0.4) - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((contrastive_value(0.3, 0.4) - 13.815_510_557_964_274).abs() < 1e-9);
        let h = 1e-6;
        let fd = (contrastive_value(0.9 + h, 0.4) - contrastive_value(0.9 - h, 0.4)) / (2.0 * h);
        assert!((fd + 2.0).abs() < 1e-6);
    }

    #[test]
    fn trace_maps_positions_to_ids() {
        let split = split_persona_sets(&[0.1, -1.0, 2.0]);
        let t = SelectionTrace::new(&[7, 3, 9], &[0.1, -1.0, 2.0], &split);
        assert_eq!(t.positive, vec![7, 9]);
        assert!(t.to_json().contains("\"positive\":[7,9]"));
    }
}
