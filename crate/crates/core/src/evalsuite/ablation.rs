//! Ablation runs and hyperparameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::corpus::Splits;
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, EvalOptions, MetricReport};
use crate::model::Variant;
use crate::training::{prepare_split, train, TrainConfig, TrainOptions};

/// One variant plus config overrides applied on top of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub variant: Variant,
    pub overrides: KeyValues,
}

impl AblationSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            overrides: KeyValues::new(),
        }
    }

    /// The effective training config of this variant.
    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        cfg.apply(&self.overrides)?;
        cfg.model.variant = self.variant;
        if self.variant == Variant::WoAuxiliaryTask {
            cfg.weights.contrastive = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains the variant on `splits.train` (early stopping on `splits.valid`)
/// and scores it on `splits.test`.
pub fn run_ablation(
    spec: &AblationSpec,
    splits: &Splits,
    base: &TrainConfig,
    eval: &EvalOptions,
) -> Result<MetricReport> {
    let cfg = spec.config(base)?;
    log::info!("ablation {} (seed {})", spec.variant, cfg.seed);
    let outcome = train(splits, &cfg, &TrainOptions::default())?;
    let model = &outcome.state.model;
    let test = prepare_split(model, &splits.test, cfg.history);
    let mut report = evaluate(
        model,
        &test,
        &EvalOptions {
            seed: cfg.seed,
            ..eval.clone()
        },
    )?;
    report.variant = spec.variant.name().to_string();
    report.check()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    History,
    K,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::History => "history",
            SweepParam::K => "k",
        }
    }

    /// The grid used when none is given.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepParam::History => vec![1, 4, 7, 10],
            SweepParam::K => vec![5, 10, 15, 20],
        }
    }
}

/// A parameter and the values to try, written `history=1,4,7,10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub param: SweepParam,
    pub values: Vec<usize>,
}

impl FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = match s.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (s.trim(), None),
        };
        let param = match name {
            "history" | "h" | "H" => SweepParam::History,
            "k" => SweepParam::K,
            _ => {
                return Err(Error::Invalid(format!(
                    "unknown sweep parameter {name:?} (history or k)"
                )))
            }
        };
        let values = match values {
            None => param.default_values(),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| Error::Invalid(format!("bad grid value {x:?}")))
                })
                .collect::<Result<_>>()?,
        };
        if values.is_empty() {
            return Err(Error::Invalid("empty grid".into()));
        }
        Ok(Grid { param, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: usize,
    pub report: MetricReport,
}

/// The config of one grid cell.
pub fn cell_config(base: &TrainConfig, param: SweepParam, value: usize) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::History => cfg.history = value,
        SweepParam::K => cfg.model.k = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One independent trained run per grid value, in grid order.
pub fn sweep(grid: &Grid, splits: &Splits, base: &TrainConfig, eval: &EvalOptions) -> Result<Vec<SweepRow>> {
    let spec = AblationSpec::new(base.model.variant);
    grid.values
        .iter()
        .map(|&value| {
            let cfg = cell_config(base, grid.param, value)?;
            log::info!("sweep {}={value}", grid.param.name());
            let report = run_ablation(&spec, splits, &cfg, eval)?;
            Ok(SweepRow {
                param: grid.param,
                value,
                report,
            })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.6}"))
}

fn metric_cells(r: &MetricReport) -> String {
    let (p, rc, f) = match r.persona {
        Some(prf) => (Some(prf.precision), Some(prf.recall), Some(prf.f1)),
        None => (None, None, None),
    };
    format!(
        "{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}",
        r.hit1,
        r.hit3,
        r.hit5,
        opt(r.ppl),
        opt(r.bleu1),
        opt(r.bleu2),
        opt(r.distinct1),
        opt(r.distinct2),
        opt(p),
        opt(rc),
        opt(f)
    )
}

const METRIC_HEADER: &str = "hit1,hit3,hit5,ppl,bleu1,bleu2,distinct1,distinct2,persona_p,persona_r,persona_f1";

/// One row per variant.
pub fn ablation_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("variant,{METRIC_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{},{}", r.variant, metric_cells(r));
    }
    out
}

/// One row per grid cell.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("param,value,{METRIC_HEADER}\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{}", row.param.name(), row.value, metric_cells(&row.report));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g: Grid = "history=1,4".parse().unwrap();
        assert_eq!(
            g,
            Grid {
                param: SweepParam::History,
                values: vec![1, 4]
            }
        );
        let g: Grid = "k".parse().unwrap();
        assert_eq!(g.values, vec![5, 10, 15, 20]);
        assert!("depth=1".parse::<Grid>().is_err());
        assert!("k=0".parse::<Grid>().is_err());
        assert!("k=a".parse::<Grid>().is_err());
    }

    #[test]
    fn variant_configs() {
        let base = TrainConfig::default();
        let cfg = AblationSpec::new(Variant::WoAuxiliaryTask).config(&base).unwrap();
        assert_eq!(cfg.weights.contrastive, 0.0);
        assert_eq!(cfg.model.variant, Variant::WoAuxiliaryTask);
        let mut spec = AblationSpec::new(Variant::Full);
        spec.overrides.set("lr", "0.01");
        let cfg = spec.config(&base).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.weights.contrastive, 1.0);
        assert_eq!(cell_config(&base, SweepParam::K, 15).unwrap().model.k, 15);
        assert_eq!(cell_config(&base, SweepParam::History, 1).unwrap().history, 1);
    }
}
