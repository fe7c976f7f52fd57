//! Next-topic distribution over the full topic vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{mlp_dot, rank_descending};
use crate::nn::graph::softmax_in_place;
use crate::nn::layers::Mlp;
use crate::nn::{Graph, ParamStore, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopicHead {
    pub mlp: Mlp,
}

impl TopicHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "topic_head.mlp", 4 * d, 2 * d, d, rng)?,
        })
    }
}

/// `1 × |T|` logits `MLP([pool(H_C); e_u; pool(H̃'_tp); h_P+]) · e_tᵀ`.
pub fn topic_logits(
    g: &mut Graph,
    head: &TopicHead,
    pooled_c: Var,
    e_u: Var,
    pooled_tp: Var,
    h_pos: Var,
    topics: Var,
) -> Var {
    let x = g.concat_cols(&[pooled_c, e_u, pooled_tp, h_pos]);
    mlp_dot(g, &head.mlp, x, topics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicPrediction {
    pub distribution: Vec<f64>,
    /// Topic ids by descending probability, ties by lower id.
    pub ranking: Vec<usize>,
    pub target: Option<usize>,
}

impl TopicPrediction {
    pub fn from_logits(logits: &[f64], target: Option<usize>) -> Self {
        let mut distribution = logits.to_vec();
        softmax_in_place(&mut distribution);
        let ranking = rank_descending(&distribution);
        Self {
            distribution,
            ranking,
            target,
        }
    }

    /// Zero-based rank of `topic`.
    pub fn rank_of(&self, topic: usize) -> usize {
        self.ranking.iter().position(|&t| t == topic).expect("topic in ranking")
    }
}

/// `−log p(target)`.
pub fn topic_loss(pred: &TopicPrediction, target: usize) -> f64 {
    -pred.distribution[target].ln()
}

pub fn predict_topk(pred: &TopicPrediction, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pred.ranking.len() {
        return Err(Error::Invalid(format!("k={k} must be in 1..={}", pred.ranking.len())));
    }
    Ok(pred.ranking[..k].to_vec())
}
