//! Evaluation: topic ranking, response quality, persona selection, ablations and sweeps.

pub mod ablation;
pub mod metrics;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mix, random_split, Model, Prepared};
use metrics::{bleu_n, distinct_n, hit_at_k, perplexity, persona_prf, Prf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub target_topic: usize,
    pub predicted_topic: usize,
    pub top5: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_personas: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_personas: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copy_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub examples: usize,
    pub hit1: f64,
    pub hit3: f64,
    pub hit5: f64,
    pub ppl: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub distinct1: Option<f64>,
    pub distinct2: Option<f64>,
    /// Selector against gold personas.
    pub persona: Option<Prf>,
    /// Uniformly random selection of the same cardinality as the random-selection variant.
    pub persona_random: Option<Prf>,
    /// Largest deviation of a topic distribution's mass from 1.
    pub topic_mass_error: f64,
    pub records: Vec<ExampleRecord>,
}

impl MetricReport {
    pub fn check(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.hit1)
            && self.hit1 <= self.hit3
            && self.hit3 <= self.hit5
            && self.hit5 <= 1.0
            && self.ppl.is_none_or(|p| p >= 1.0)
            && [self.bleu1, self.bleu2, self.distinct1, self.distinct2]
                .iter()
                .all(|m| m.is_none_or(|x| (0.0..=1.0).contains(&x)));
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "metric report out of range: {}",
                self.summary()
            )))
        }
    }

    pub fn summary(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "hit@1={:.4} hit@3={:.4} hit@5={:.4} ppl={} bleu1={} bleu2={} dist1={} dist2={} persona_f1={}",
            self.hit1,
            self.hit3,
            self.hit5,
            opt(self.ppl),
            opt(self.bleu1),
            opt(self.bleu2),
            opt(self.distinct1),
            opt(self.distinct2),
            opt(self.persona.map(|p| p.f1)),
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One JSON line per decoded response.
    pub fn write_generations(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            example_id: &'a str,
            predicted_topic: usize,
            response_tokens: &'a [String],
            copy_fraction: f64,
        }
        let mut text = String::new();
        for r in &self.records {
            if let Some(tokens) = &r.response_tokens {
                let line = Line {
                    example_id: &r.example_id,
                    predicted_topic: r.predicted_topic,
                    response_tokens: tokens,
                    copy_fraction: r.copy_fraction.unwrap_or(0.0),
                };
                text.push_str(&serde_json::to_string(&line)?);
                text.push('\n');
            }
        }
        let path = path.as_ref();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Decode at most this many responses (all when `None`).
    pub decode_limit: Option<usize>,
    pub perplexity: bool,
    pub keep_records: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            decode_limit: None,
            perplexity: true,
            keep_records: true,
        }
    }
}

/// Scores `model` on prepared examples.
pub fn evaluate(model: &Model, examples: &[Prepared], opts: &EvalOptions) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut rankings = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut selected = Vec::new();
    let mut random_selected = Vec::new();
    let mut gold = Vec::new();
    let mut records = Vec::new();
    let mut mass_err: f64 = 0.0;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let mut decoded = 0usize;
    let persona_path = model.config.variant != crate::model::Variant::WoPersona;
    for (i, ex) in examples.iter().enumerate() {
        let seed = mix(opts.seed, i as u64);
        let decode = ex.response.is_some() && opts.decode_limit.is_none_or(|l| decoded < l);
        let p = model.predict(ex, seed, decode)?;
        mass_err = mass_err.max((p.topic.distribution.iter().sum::<f64>() - 1.0).abs());
        if let (Some(r), Some(reference)) = (&p.response, &ex.response) {
            decoded += 1;
            hyps.push(r.tokens.clone());
            refs.push(reference.clone());
        }
        if opts.perplexity {
            if let Some((n, t)) = model.response_nll(ex) {
                nll += n;
                tokens += t;
            }
        }
        let personas = &model.user_personas[ex.user];
        if let Some(sel) = &p.selection {
            selected.push(sel.positive.clone());
            let rs = random_split(personas.len(), model.config.random_personas, mix(seed, 0x5e1));
            random_selected.push(rs.positive.iter().map(|&j| personas[j]).collect::<Vec<_>>());
            gold.push(ex.gold_personas.clone());
        }
        if opts.keep_records {
            records.push(ExampleRecord {
                example_id: ex.id(),
                target_topic: ex.target_topic,
                predicted_topic: p.topic.ranking[0],
                top5: p.topic.ranking.iter().take(5).copied().collect(),
                positive_personas: p.selection.as_ref().map(|s| s.positive.clone()),
                gold_personas: ex.gold_personas.clone(),
                response_tokens: p.response.as_ref().map(|r| r.tokens.clone()),
                copy_fraction: p.response.as_ref().map(|r| r.copy_fraction),
            });
        }
        rankings.push(p.topic.ranking);
        targets.push(ex.target_topic);
    }
    let have_gold = persona_path && !gold.is_empty() && gold.iter().all(Option::is_some);
    let gen = !hyps.is_empty();
    let report = MetricReport {
        variant: model.config.variant.name().to_string(),
        examples: examples.len(),
        hit1: hit_at_k(&rankings, &targets, 1),
        hit3: hit_at_k(&rankings, &targets, 3),
        hit5: hit_at_k(&rankings, &targets, 5),
        ppl: (tokens > 0).then(|| perplexity(nll, tokens)),
        bleu1: gen.then(|| bleu_n(&hyps, &refs, 1)),
        bleu2: gen.then(|| bleu_n(&hyps, &refs, 2)),
        distinct1: gen.then(|| distinct_n(&hyps, 1)),
        distinct2: gen.then(|| distinct_n(&hyps, 2)),
        persona: if have_gold {
            Some(persona_prf(&selected, &gold)?)
        } else {
            None
        },
        persona_random: if have_gold {
            Some(persona_prf(&random_selected, &gold)?)
        } else {
            None
        },
        topic_mass_error: mass_err,
        records,
    };
    report.check()?;
    Ok(report)
}
