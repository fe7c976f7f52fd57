//! Dense brute-force re-implementations of the model's scoring equations,
//! written with plain nested loops over `Vec<f64>` so they share no code
//! with the tensor/graph path they check.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topicsel::corpus::Vocab;
use topicsel::encoding::{EmbeddingTables, TableSizes};
use topicsel::expansion::{
    affinity_matrix, aggregate_global_topics, build_persona_topic_sets, persona_global_vectors, persona_topic_affinity,
    threshold_mask, turn_persona_relevance,
};
use topicsel::nn::layers::Mlp;
use topicsel::nn::{Graph, ParamStore, Tensor};
use topicsel::personasel::{aggregate_persona_sets, persona_topic_score, split_persona_sets};
use topicsel::responder::{output_logits, token_distribution, CopySource, Responder};
use topicsel::topichead::{topic_logits, TopicHead, TopicPrediction};

pub type Dense = Vec<Vec<f64>>;

pub const INSTANCES: u64 = 50;
pub const TOLERANCE: f64 = 1e-6;

pub fn dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| (0..cols).map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum()).collect())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `gelu(x W1 + b1) W2 + b2` read straight from the store.
pub fn mlp(store: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let layer = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|c| b.get(0, c) + (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = layer(store.get(m.hidden.weight), store.get(m.hidden.bias), x)
        .into_iter()
        .map(gelu)
        .collect();
    layer(store.get(m.output.weight), store.get(m.output.bias), &h)
}

/// Descending order, ties by lower index, via selection sort.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..row.len()).collect();
    let mut out = Vec::new();
    while out.len() < k {
        let mut best = 0;
        for i in 1..left.len() {
            if row[left[i]] > row[left[best]] {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_dense(a: &Dense, b: &Tensor) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.shape());
    a.iter()
        .enumerate()
        .map(|(r, row)| max_abs(row, b.row(r)))
        .fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17))
}

fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

/// Largest error of `check` over the standard number of random instances.
pub fn worst(check: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(check).fold(0.0, f64::max)
}

/// Bilinear persona-topic affinity.
pub fn eq3(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(1..=6);
    let (np, nt) = (rng.random_range(1..=5), rng.random_range(1..=8));
    let (p, w, t) = (randn(np, d, &mut rng), randn(d, d, &mut rng), randn(nt, d, &mut rng));
    let (pd, wd, td) = (dense(&p), dense(&w), dense(&t));
    let mut oracle = vec![vec![0.0; nt]; np];
    for i in 0..np {
        for j in 0..nt {
            for a in 0..d {
                for b in 0..d {
                    oracle[i][j] += pd[i][a] * wd[a][b] * td[j][b];
                }
            }
        }
    }
    let m = affinity_matrix(&p, &w, &t);
    let mut err = max_abs_dense(&oracle, &m);
    for i in 0..np {
        for j in 0..nt {
            err = err.max((persona_topic_affinity(p.row(i), t.row(j), &w) - oracle[i][j]).abs());
        }
    }
    err
}

/// Turn-persona relevance `MLP([h_c; e_u; h_t]) · e_p`.
pub fn eq5(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(2..=5);
    let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, "f", 3 * d, 2 * d, d, &mut rng).unwrap();
    let (hc, eu, ht, ep) = (
        randn(n, d, &mut rng),
        randn(1, d, &mut rng),
        randn(n, d, &mut rng),
        randn(m, d, &mut rng),
    );
    let mut g = Graph::new(&store);
    let vars = [hc.clone(), eu.clone(), ht.clone(), ep.clone()].map(|t| g.input(t));
    let out = turn_persona_relevance(&mut g, &net, vars[0], vars[1], vars[2], vars[3]);
    let oracle: Dense = (0..n)
        .map(|i| {
            let x: Vec<f64> = [hc.row(i), eu.row(0), ht.row(i)].concat();
            let y = mlp(&store, &net, &x);
            (0..m).map(|j| dot(&y, ep.row(j))).collect()
        })
        .collect();
    max_abs_dense(&oracle, g.value(out))
}

/// Masked aggregation of persona-specific global topics followed by the FFN.
pub fn eq7(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(2..=5);
    let (np, nt) = (rng.random_range(2..=6), rng.random_range(2..=9));
    let k = rng.random_range(1..=nt);
    let n = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let sizes = TableSizes {
        words: 6,
        topics: nt,
        users: 2,
        positions: 4,
    };
    let tables = EmbeddingTables::new(&mut store, &sizes, d, randn(np, d, &mut rng), &mut rng).unwrap();
    let w = store.add("w", randn(d, d, &mut rng)).unwrap();
    let ffn = Mlp::new(&mut store, "ffn", d, 3, d, &mut rng).unwrap();
    let sets = build_persona_topic_sets(&store, &tables, w, k).unwrap();
    let m = rng.random_range(1..=np);
    let personas: Vec<usize> = rand::seq::index::sample(&mut rng, np, m).into_vec();
    let ht = randn(n, d, &mut rng);
    let scores = randn(n, m, &mut rng);

    let mut g = Graph::new(&store);
    let global = persona_global_vectors(&mut g, &tables, w, &personas, &sets);
    let (htv, sv) = (g.input(ht.clone()), g.input(scores.clone()));
    let out = aggregate_global_topics(&mut g, &ffn, htv, sv, threshold_mask(&scores), global);

    let (ep, wd, et) = (
        dense(store.get(tables.persona)),
        dense(store.get(w)),
        dense(store.get(tables.topic)),
    );
    let aff = matmul(&matmul(&ep, &wd), &et.transpose_rows());
    let big_g: Dense = personas
        .iter()
        .map(|&p| {
            let mut v = vec![0.0; d];
            for t in top_k(&aff[p], k) {
                for c in 0..d {
                    v[c] += aff[p][t] * et[t][c];
                }
            }
            v
        })
        .collect();
    let oracle: Dense = (0..n)
        .map(|i| {
            let mut x = ht.row(i).to_vec();
            for j in 0..m {
                let s = scores.get(i, j);
                if s >= 0.0 {
                    for c in 0..d {
                        x[c] += s * big_g[j][c];
                    }
                }
            }
            mlp(&store, &ffn, &x)
        })
        .collect();
    max_abs_dense(&oracle, g.value(out))
}

trait TransposeRows {
    fn transpose_rows(&self) -> Dense;
}

impl TransposeRows for Dense {
    fn transpose_rows(&self) -> Dense {
        let cols = self.first().map_or(0, Vec::len);
        (0..cols).map(|c| self.iter().map(|r| r[c]).collect()).collect()
    }
}

/// Positive/negative persona aggregates.
pub fn eq10(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(1..=5);
    let n = rng.random_range(1..=6);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ep = randn(n, d, &mut rng);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let sv = g.input(Tensor::row_vector(scores.clone()));
    let ev = g.input(ep.clone());
    let split = split_persona_sets(&scores);
    let (pos, neg) = aggregate_persona_sets(&mut g, sv, ev, &split);

    let mut positive: Vec<usize> = (0..n).filter(|&i| scores[i] >= 0.0).collect();
    if positive.is_empty() {
        positive = vec![top_k(&scores, 1)[0]];
    }
    let negative: Vec<usize> = (0..n).filter(|i| !positive.contains(i)).collect();
    let agg = |members: &[usize], sign: f64| -> Vec<f64> {
        let z: f64 = members.iter().map(|&i| (sign * scores[i]).exp()).sum();
        let mut v = vec![0.0; d];
        for &i in members {
            let w = (sign * scores[i]).exp() / z;
            for c in 0..d {
                v[c] += w * ep.get(i, c);
            }
        }
        v
    };
    let mut err = max_abs(&agg(&positive, 1.0), g.value(pos).row(0));
    assert_eq!(split.positive, positive);
    match neg {
        Some(v) => err = err.max(max_abs(&agg(&negative, -1.0), g.value(v).row(0))),
        None => assert!(negative.is_empty()),
    }
    err
}

/// Persona-set-to-topic distribution.
pub fn eq11(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(1..=6);
    let nt = rng.random_range(1..=8);
    let (h, w, t) = (randn(1, d, &mut rng), randn(d, d, &mut rng), randn(nt, d, &mut rng));
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars = [h.clone(), w.clone(), t.clone()].map(|x| g.input(x));
    let out = persona_topic_score(&mut g, vars[0], vars[1], vars[2]);
    let hw: Vec<f64> = (0..d)
        .map(|c| (0..d).map(|r| h.get(0, r) * w.get(r, c)).sum())
        .collect();
    let logits: Vec<f64> = (0..nt).map(|j| dot(&hw, t.row(j))).collect();
    max_abs(&softmax(&logits), g.value(out).row(0))
}

/// Next-topic distribution.
pub fn eq13(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(1..=5);
    let nt = rng.random_range(1..=8);
    let mut store = ParamStore::new();
    let head = TopicHead::new(&mut store, d, &mut rng).unwrap();
    let parts: Vec<Tensor> = (0..4).map(|_| randn(1, d, &mut rng)).collect();
    let topics = randn(nt, d, &mut rng);
    let mut g = Graph::new(&store);
    let pv: Vec<_> = parts.iter().map(|p| g.input(p.clone())).collect();
    let tv = g.input(topics.clone());
    let logits = topic_logits(&mut g, &head, pv[0], pv[1], pv[2], pv[3], tv);
    let pred = TopicPrediction::from_logits(g.value(logits).row(0), None);
    let x: Vec<f64> = parts.iter().flat_map(|p| p.row(0).to_vec()).collect();
    let y = mlp(&store, &head.mlp, &x);
    let oracle = softmax(&(0..nt).map(|j| dot(&y, topics.row(j))).collect::<Vec<_>>());
    max_abs(&oracle, &pred.distribution)
}

/// Generation-plus-copy token distribution over the extended vocabulary.
pub fn eq16(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(2..=5);
    let n_words = rng.random_range(5..=9);
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_parts(words, vec!["t0".into()]);
    let src_len = rng.random_range(1..=6);
    let src_words: Vec<String> = (0..src_len)
        .map(|_| {
            let i = rng.random_range(0..n_words + 3);
            if i < n_words {
                format!("w{i}")
            } else {
                format!("oov{}", i - n_words)
            }
        })
        .collect();
    let source = CopySource::build(&src_words, &vocab);
    let mut store = ParamStore::new();
    let responder = Responder::new(&mut store, d, 1, 4, 1, &mut rng).unwrap();
    let rows = rng.random_range(1..=3);
    let (states, emb, src) = (
        randn(rows, d, &mut rng),
        randn(n_words, d, &mut rng),
        randn(src_len, d, &mut rng),
    );
    let mut g = Graph::new(&store);
    let vars = [states.clone(), emb.clone(), src.clone()].map(|t| g.input(t));
    let logits = output_logits(&mut g, &responder, vars[0], vars[1], Some(vars[2]));
    let mut oov: Vec<&String> = Vec::new();
    for w in &src_words {
        if !w.starts_with('w') && !oov.contains(&w) {
            oov.push(w);
        }
    }
    let ext = |w: &String| -> usize {
        match w.strip_prefix('w') {
            Some(i) => i.parse().unwrap(),
            None => n_words + oov.iter().position(|o| *o == w).unwrap(),
        }
    };
    let mut err: f64 = 0.0;
    for r in 0..rows {
        let gen = mlp(&store, &responder.gen_mlp, states.row(r));
        let cop = mlp(&store, &responder.copy_mlp, states.row(r));
        let gl: Vec<f64> = (0..n_words).map(|w| dot(&gen, emb.row(w))).collect();
        let cl: Vec<f64> = (0..src_len).map(|j| dot(&cop, src.row(j))).collect();
        let z: f64 = gl.iter().chain(&cl).map(|x| x.exp()).sum();
        let mut oracle = vec![0.0; n_words + oov.len()];
        for w in 0..n_words {
            oracle[w] += gl[w].exp() / z;
        }
        for (j, w) in src_words.iter().enumerate() {
            oracle[ext(w)] += cl[j].exp() / z;
        }
        let dist = token_distribution(g.value(logits).row(r), &source, n_words);
        err = err.max(max_abs(&oracle, &dist.probs));
    }
    err
}
