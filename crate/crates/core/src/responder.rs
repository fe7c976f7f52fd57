//! Transformer decoder with a copy mechanism.
//!
//! Generation logits (one per vocabulary word) and copy logits (one per
//! source token) share a single softmax. Copy probability is then merged by
//! surface word, so a word can be reached through generation, copying, or
//! both. Source words missing from the vocabulary receive extended ids
//! `|W|, |W|+1, ...` and can only be produced by copying.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, BOS, EOS, UNK};
use crate::encoding::EmbeddingTables;
use crate::error::{Error, Result};
use crate::expansion::mlp_dot;
use crate::nn::graph::softmax_in_place;
use crate::nn::layers::{DecoderLayer, Mlp};
use crate::nn::{Graph, ParamStore, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Responder {
    pub layers: Vec<DecoderLayer>,
    pub gen_mlp: Mlp,
    pub copy_mlp: Mlp,
}

impl Responder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        ffn_width: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), d, heads, ffn_width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            gen_mlp: Mlp::new(store, "decoder.gen_mlp", d, 2 * d, d, rng)?,
            copy_mlp: Mlp::new(store, "decoder.copy_mlp", d, 2 * d, d, rng)?,
        })
    }
}

/// Source tokens the decoder may copy, as extended ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopySource {
    pub ext_ids: Vec<usize>,
    /// Out-of-vocabulary surface words; `oov[i]` has extended id `|W| + i`.
    pub oov: Vec<String>,
}

impl CopySource {
    pub fn build<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Self {
        let mut src = CopySource::default();
        for w in words {
            let id = src.ext_of(w.as_ref(), vocab).unwrap_or_else(|| {
                src.oov.push(w.as_ref().to_string());
                vocab.num_words() + src.oov.len() - 1
            });
            src.ext_ids.push(id);
        }
        src
    }

    pub fn len(&self) -> usize {
        self.ext_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ext_ids.is_empty()
    }

    /// Extended id of `w`, if it is in the vocabulary or the source.
    pub fn ext_of(&self, w: &str, vocab: &Vocab) -> Option<usize> {
        vocab
            .word_id(w)
            .or_else(|| self.oov.iter().position(|o| o == w).map(|i| vocab.num_words() + i))
    }

    pub fn surface<'a>(&'a self, ext: usize, vocab: &'a Vocab) -> &'a str {
        if ext < vocab.num_words() {
            vocab.word(ext)
        } else {
            &self.oov[ext - vocab.num_words()]
        }
    }

    /// Appends `other`'s tokens, remapping its out-of-vocabulary ids.
    pub fn extend(&mut self, words: &[String], vocab: &Vocab) {
        for w in words {
            let id = self.ext_of(w, vocab).unwrap_or_else(|| {
                self.oov.push(w.clone());
                vocab.num_words() + self.oov.len() - 1
            });
            self.ext_ids.push(id);
        }
    }
}

/// Decoder states for every prefix position, plus per-layer cross-attention weights.
pub fn decode_states(
    g: &mut Graph,
    responder: &Responder,
    tables: &EmbeddingTables,
    prefix: &[usize],
    memory: Var,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let max = g.store().get(tables.position).rows();
    if prefix.is_empty() || prefix.len() > max {
        return Err(Error::Invalid(format!(
            "decoder prefix length {} not in 1..={max}",
            prefix.len()
        )));
    }
    assert!(g.shape(memory).0 >= 2, "decoder memory needs at least two slots");
    let tok = g.embed(tables.word, prefix);
    let positions: Vec<usize> = (0..prefix.len()).collect();
    let pos = g.embed(tables.position, &positions);
    let x = g.add(tok, pos);
    let mut x = g.dropout(x);
    let mut weights = Vec::with_capacity(responder.layers.len());
    for layer in &responder.layers {
        let (y, w) = layer.forward(g, x, memory);
        x = y;
        weights.push(w);
    }
    Ok((x, weights))
}

/// Hidden state at the last prefix position.
pub fn decode_step(
    g: &mut Graph,
    responder: &Responder,
    tables: &EmbeddingTables,
    prefix: &[usize],
    memory: Var,
) -> Result<Var> {
    let (states, _) = decode_states(g, responder, tables, prefix, memory)?;
    Ok(g.slice_rows(states, prefix.len() - 1, 1))
}

/// `[MLP_g(h) · E_Wᵀ ; MLP_c(h) · S_srcᵀ]`, one row per decoder position.
pub fn output_logits(g: &mut Graph, responder: &Responder, states: Var, words: Var, source_states: Option<Var>) -> Var {
    let gen = mlp_dot(g, &responder.gen_mlp, states, words);
    match source_states {
        Some(src) => {
            let copy = mlp_dot(g, &responder.copy_mlp, states, src);
            g.concat_cols(&[gen, copy])
        }
        None => gen,
    }
}

/// Probability over the extended vocabulary for one decoder position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    /// Length `|W| + |oov|`.
    pub probs: Vec<f64>,
    /// Copy share of each extended id.
    pub copy: Vec<f64>,
    pub generation_mass: f64,
    pub copy_mass: f64,
}

pub fn token_distribution(logits: &[f64], source: &CopySource, n_words: usize) -> TokenDistribution {
    assert_eq!(logits.len(), n_words + source.len(), "logit width mismatch");
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let n_ext = n_words + source.oov.len();
    let mut probs = vec![0.0; n_ext];
    let mut copy = vec![0.0; n_ext];
    probs[..n_words].copy_from_slice(&p[..n_words]);
    for (i, &ext) in source.ext_ids.iter().enumerate() {
        probs[ext] += p[n_words + i];
        copy[ext] += p[n_words + i];
    }
    let generation_mass = p[..n_words].iter().sum();
    let copy_mass = p[n_words..].iter().sum();
    TokenDistribution {
        probs,
        copy,
        generation_mass,
        copy_mass,
    }
}

/// Logit columns that produce extended id `target`.
pub fn target_columns(target: usize, source: &CopySource, n_words: usize) -> Vec<usize> {
    let mut cols = Vec::new();
    if target < n_words {
        cols.push(target);
    }
    cols.extend(
        source
            .ext_ids
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == target)
            .map(|(i, _)| n_words + i),
    );
    cols
}

/// Teacher-forcing inputs and targets for one response.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseTargets {
    /// `BOS w_1 .. w_n` as word-table ids.
    pub inputs: Vec<usize>,
    /// Logit columns for `w_1 .. w_n EOS`.
    pub columns: Vec<Vec<usize>>,
    /// Target words found in neither the vocabulary nor the source.
    pub unknown: usize,
}

pub fn response_targets(words: &[String], vocab: &Vocab, source: &CopySource) -> ResponseTargets {
    let n_words = vocab.num_words();
    let mut inputs = vec![BOS];
    let mut columns = Vec::with_capacity(words.len() + 1);
    let mut unknown = 0;
    for w in words {
        let ext = source.ext_of(w, vocab).unwrap_or_else(|| {
            unknown += 1;
            UNK
        });
        columns.push(target_columns(ext, source, n_words));
        inputs.push(if ext < n_words { ext } else { UNK });
    }
    columns.push(vec![EOS]);
    ResponseTargets {
        inputs,
        columns,
        unknown,
    }
}

/// Mean negative log-likelihood of the target columns.
pub fn generation_loss(g: &mut Graph, logits: Var, targets: &ResponseTargets) -> Var {
    g.set_nll(logits, targets.columns.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedResponse {
    pub tokens: Vec<String>,
    /// Mean copy share of the chosen tokens.
    pub copy_fraction: f64,
}

/// Greedy decoding until EOS or `max_len` tokens. EOS is not allowed as the
/// first token, so responses are never empty.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    g: &mut Graph,
    responder: &Responder,
    tables: &EmbeddingTables,
    memory: Var,
    source_states: Option<Var>,
    source: &CopySource,
    vocab: &Vocab,
    max_len: usize,
) -> Result<DecodedResponse> {
    let n_words = vocab.num_words();
    let words = g.param(tables.word);
    let mut prefix = vec![BOS];
    let mut tokens = Vec::new();
    let mut copy_share = 0.0;
    while tokens.len() < max_len {
        let h = decode_step(g, responder, tables, &prefix, memory)?;
        let logits = output_logits(g, responder, h, words, source_states);
        let dist = token_distribution(g.value(logits).data(), source, n_words);
        let mut best = None;
        for (id, &p) in dist.probs.iter().enumerate() {
            let banned = id == crate::corpus::PAD || id == BOS || (id == EOS && tokens.is_empty());
            if !banned && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((id, p));
            }
        }
        let (id, p) = best.expect("non-empty vocabulary");
        if id == EOS {
            break;
        }
        copy_share += if p > 0.0 { dist.copy[id] / p } else { 0.0 };
        tokens.push(source.surface(id, vocab).to_string());
        prefix.push(if id < n_words { id } else { UNK });
    }
    let copy_fraction = if tokens.is_empty() {
        0.0
    } else {
        copy_share / tokens.len() as f64
    };
    Ok(DecodedResponse { tokens, copy_fraction })
}
