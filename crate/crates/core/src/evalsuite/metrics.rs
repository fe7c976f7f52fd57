//! Corpus-level metrics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of examples whose target appears in the first `k` of its ranking.
pub fn hit_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    assert_eq!(rankings.len(), targets.len());
    if targets.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| r.iter().take(k).any(|x| x == *t))
        .count();
    hits as f64 / targets.len() as f64
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<Vec<&str>> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(|s| s.as_ref()).collect())
        .collect()
}

fn counts(grams: Vec<Vec<&str>>) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for g in grams {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped matches and total hypothesis n-grams of order `n`, summed over the corpus.
pub fn modified_precision_counts<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let hc = counts(ngrams(h, n));
        let rc = counts(ngrams(r, n));
        for (g, c) in &hc {
            matched += (*c).min(rc.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matched, total)
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts and
/// brevity penalty `exp(1 − r/c)` when the hypotheses are shorter.
pub fn bleu_n<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> f64 {
    assert!(n >= 1, "n must be at least 1");
    assert_eq!(hyps.len(), refs.len());
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (m, t) = modified_precision_counts(hyps, refs, order);
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln() / n as f64;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Unique n-grams over total n-grams across the corpus.
pub fn distinct_n<S: AsRef<str>>(hyps: &[Vec<S>], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for g in ngrams(h, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    assert!(tokens > 0, "perplexity over zero tokens");
    (total_nll / tokens as f64).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision / recall / F1 of selected against gold sets;
/// repeated ids count once.
pub fn persona_prf(selected: &[Vec<usize>], gold: &[Option<Vec<usize>>]) -> Result<Prf> {
    assert_eq!(selected.len(), gold.len());
    let (mut tp, mut n_sel, mut n_gold) = (0usize, 0usize, 0usize);
    for (s, g) in selected.iter().zip(gold) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Data("persona metrics need gold persona labels".into()))?;
        let s: HashSet<usize> = s.iter().copied().collect();
        let g: HashSet<usize> = g.iter().copied().collect();
        tp += s.intersection(&g).count();
        n_sel += s.len();
        n_gold += g.len();
    }
    let precision = if n_sel == 0 { 0.0 } else { tp as f64 / n_sel as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn hit_cases() {
        let r = vec![vec![0, 1, 2], vec![2, 0, 1]];
        assert_eq!(hit_at_k(&r, &[0, 2], 1), 1.0);
        assert_eq!(hit_at_k(&r, &[1, 1], 1), 0.0);
        assert_eq!(hit_at_k(&r, &[1, 1], 3), 1.0);
        assert_eq!(hit_at_k(&r, &[2, 1], 2), 0.0);
    }

    #[test]
    fn bleu_cases() {
        let a = vec![toks("the cat sat")];
        assert_eq!(bleu_n(&a, &a, 1), 1.0);
        assert_eq!(bleu_n(&a, &a, 2), 1.0);
        assert_eq!(bleu_n(&[toks("dog")], &[toks("cat")], 1), 0.0);
        // clipped: "the the cat" vs "the cat" -> 2/3, no brevity penalty
        let b1 = bleu_n(&[toks("the the cat")], &[toks("the cat")], 1);
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        // short hypothesis: "the cat" vs "the the cat" -> p1 = 1, BP = exp(1 - 3/2)
        let b2 = bleu_n(&[toks("the cat")], &[toks("the the cat")], 1);
        assert!((b2 - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(bleu_n(&[Vec::<String>::new()], &[toks("x")], 1), 0.0);
    }

    #[test]
    fn distinct_cases() {
        assert!((distinct_n(&[toks("a a a")], 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[toks("a b c")], 1), 1.0);
        assert_eq!(distinct_n(&[toks("a b a b")], 2), 2.0 / 3.0);
    }

    #[test]
    fn prf_cases() {
        let g = vec![Some(vec![1, 2])];
        let p = persona_prf(&[vec![1, 2]], &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = persona_prf(&[vec![3]], &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(persona_prf(&[vec![1]], &[None]).is_err());
    }

    #[test]
    fn ppl_of_uniform() {
        assert!((perplexity(10.0 * 50f64.ln(), 10) - 50.0).abs() < 1e-9);
        assert_eq!(perplexity(0.0, 3), 1.0);
    }
}
