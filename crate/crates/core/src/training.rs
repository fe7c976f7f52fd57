//! Joint optimization, early stopping and gradient checking.

use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValues};
use crate::corpus::{window_examples, Splits, Vocab};
use crate::encoding::read_persona_override;
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, EvalOptions, MetricReport};
use crate::model::{mix, Model, ModelConfig, Prepared};
use crate::nn::graph::softmax_in_place;
use crate::nn::optim::Adam;
use crate::nn::{Grads, Graph, ParamStore};
use crate::responder::token_distribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contrastive: f64,
    pub topic: f64,
    pub response: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            topic: 1.0,
            response: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub history: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub train_frac: f64,
    pub valid_frac: f64,
    /// Validation decodes at most this many responses per epoch (0 = all).
    pub val_decode_limit: usize,
    /// Refresh persona topic sets after every update instead of every epoch.
    pub refresh_per_step: bool,
    pub persona_vectors: Option<String>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 80,
            l2: 1e-6,
            max_epochs: 100,
            patience: 10,
            history: 7,
            weights: LossWeights::default(),
            seed: 0,
            train_frac: 0.8,
            valid_frac: 0.1,
            val_decode_limit: 0,
            refresh_per_step: false,
            persona_vectors: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let (model_kv, rest) = kv.partition(&ModelConfig::KEYS);
        self.model.apply(&model_kv)?;
        for (k, v) in rest.iter() {
            match k {
                "lr" => self.lr = config::parse(k, v)?,
                "batch" => self.batch = config::parse(k, v)?,
                "l2" => self.l2 = config::parse(k, v)?,
                "max_epochs" => self.max_epochs = config::parse(k, v)?,
                "patience" => self.patience = config::parse(k, v)?,
                "history" => self.history = config::parse(k, v)?,
                "lambda_c" => self.weights.contrastive = config::parse(k, v)?,
                "lambda_t" => self.weights.topic = config::parse(k, v)?,
                "lambda_r" => self.weights.response = config::parse(k, v)?,
                "seed" => self.seed = config::parse(k, v)?,
                "train_frac" => self.train_frac = config::parse(k, v)?,
                "valid_frac" => self.valid_frac = config::parse(k, v)?,
                "val_decode_limit" => self.val_decode_limit = config::parse(k, v)?,
                "refresh" => {
                    self.refresh_per_step = match v {
                        "epoch" => false,
                        "step" => true,
                        _ => return Err(Error::Invalid(format!("refresh must be epoch or step, got {v}"))),
                    }
                }
                "persona_vectors" => self.persona_vectors = Some(v.to_string()),
                _ => return Err(Error::Invalid(format!("unknown config key {k}"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let w = self.weights;
        if !(self.lr > 0.0 && self.batch > 0 && self.l2 >= 0.0 && self.max_epochs > 0 && self.history > 0) {
            return Err(Error::Invalid(
                "lr, batch, max_epochs and history must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if [w.contrastive, w.topic, w.response]
            .iter()
            .any(|x| *x < 0.0 || !x.is_finite())
        {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Loss values of one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub contrastive: f64,
    pub topic: f64,
    pub response: f64,
    /// `l2 · ‖θ‖²`.
    pub regularizer: f64,
}

/// Builds the weighted loss node of one example and reports its parts. The
/// returned total excludes the regularizer, which the optimizer applies as
/// decoupled decay; `LossParts::total` includes it.
pub fn joint_loss_node(
    model: &Model,
    g: &mut Graph,
    ex: &Prepared,
    weights: LossWeights,
    selection_seed: u64,
) -> (crate::nn::Var, crate::model::Losses, LossParts) {
    let l = model.losses(g, ex, selection_seed);
    let mut total = g.scale(l.topic, weights.topic);
    let mut parts = LossParts {
        topic: g.scalar(l.topic),
        ..LossParts::default()
    };
    if let Some(a) = l.aux {
        parts.contrastive = g.scalar(a);
        let t = g.scale(a, weights.contrastive);
        total = g.add(total, t);
    }
    if let Some(r) = l.response {
        parts.response = g.scalar(r);
        let t = g.scale(r, weights.response);
        total = g.add(total, t);
    }
    parts.total = g.scalar(total);
    (total, l, parts)
}

/// `(total, L_c, L_T, L_R)` for one example in evaluation mode, with `l2 · ‖θ‖²` in the total.
pub fn joint_loss(model: &Model, ex: &Prepared, weights: LossWeights, l2: f64) -> LossParts {
    let mut g = Graph::new(&model.store);
    let (_, _, mut parts) = joint_loss_node(model, &mut g, ex, weights, 0);
    parts.regularizer = l2 * model.store.sq_norm();
    parts.total += parts.regularizer;
    parts
}

fn param_norm_report(store: &ParamStore) -> String {
    let mut worst: Vec<(f64, &str)> = store.iter().map(|(_, n, t)| (t.sq_norm().sqrt(), n)).collect();
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<String> = worst.iter().take(3).map(|(v, n)| format!("{n}={v:.3e}")).collect();
    format!(
        "parameter norm {:.3e}; largest {}",
        store.sq_norm().sqrt(),
        top.join(", ")
    )
}

// ----- gradient check -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradGroup {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub groups: Vec<GradGroup>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with a small absolute floor: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn objective(model: &Model, examples: &[Prepared], weights: LossWeights, l2: f64) -> f64 {
    let mut sum = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut g = Graph::new(&model.store);
        let (t, _, _) = joint_loss_node(model, &mut g, ex, weights, i as u64);
        sum += g.scalar(t);
    }
    sum / examples.len() as f64 + l2 * model.store.sq_norm()
}

/// Compares analytic gradients of the mean joint loss (plus `l2 · ‖θ‖²`)
/// against central differences with step `h`, for up to `max_entries` entries
/// of every parameter tensor (all entries when `None`). Dropout is off.
pub fn grad_check(
    model: &mut Model,
    examples: &[Prepared],
    weights: LossWeights,
    l2: f64,
    h: f64,
    max_entries: Option<usize>,
) -> GradReport {
    assert!(!examples.is_empty());
    let mut grads = Grads::new(&model.store);
    for (i, ex) in examples.iter().enumerate() {
        let mut g = Graph::new(&model.store);
        let (t, _, _) = joint_loss_node(model, &mut g, ex, weights, i as u64);
        g.backward_scaled(t, 1.0 / examples.len() as f64, &mut grads);
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.store.get(id).len();
        let stride = max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in (0..n).step_by(stride) {
            let orig = model.store.get(id).data()[k];
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]) + 2.0 * l2 * orig;
            model.store.get_mut(id).data_mut()[k] = orig + h;
            let up = objective(model, examples, weights, l2);
            model.store.get_mut(id).data_mut()[k] = orig - h;
            let down = objective(model, examples, weights, l2);
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        groups.push(GradGroup {
            name: model.store.name(id).to_string(),
            checked,
            max_rel_error: worst,
        });
    }
    GradReport { groups }
}

// ----- training loop --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub topic: f64,
    pub response: f64,
    pub val_hit1: f64,
    pub val_hit3: f64,
    pub val_hit5: f64,
    pub val_bleu1: f64,
    /// Largest deviation from 1 of any topic or token distribution seen this epoch.
    pub max_mass_error: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Per-epoch CSV log.
    pub log_csv: Option<PathBuf>,
    /// Per-epoch dump of the persona topic sets.
    pub topic_sets_csv: Option<PathBuf>,
    /// Recompute every topic and token distribution to track its mass.
    pub check_distributions: bool,
    /// Evaluate on the training examples instead of a validation split.
    pub validate_on_train: bool,
}

/// Optimizer state kept alongside the parameters in checkpoints.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochStats>,
    pub valid: Vec<Prepared>,
}

fn csv_line(s: &EpochStats) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        s.epoch, s.loss, s.contrastive, s.topic, s.response, s.val_hit1, s.val_hit3, s.val_hit5, s.val_bleu1
    )
}

/// Prepared examples of every dialogue in `corpus`.
pub fn prepare_split(model: &Model, corpus: &crate::corpus::Corpus, history: usize) -> Vec<Prepared> {
    window_examples(corpus, history)
        .iter()
        .map(|e| model.prepare(e))
        .collect()
}

pub fn build_model(splits: &Splits, cfg: &TrainConfig) -> Result<Model> {
    let vocab = Vocab::build(&splits.train);
    let persona_init = match &cfg.persona_vectors {
        Some(p) => Some(read_persona_override(p, splits.train.personas.len(), cfg.model.d)?),
        None => None,
    };
    Model::new(cfg.model.clone(), &splits.train, vocab, persona_init, cfg.seed)
}

/// Trains on `splits.train`, selecting the best epoch on `splits.valid`.
pub fn train(splits: &Splits, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_model(splits, cfg)?;
    let train_ex = prepare_split(&model, &splits.train, cfg.history);
    let valid_ex = if opts.validate_on_train {
        train_ex.clone()
    } else {
        prepare_split(&model, &splits.valid, cfg.history)
    };
    if train_ex.is_empty() || valid_ex.is_empty() {
        return Err(Error::Data(
            "training and validation splits must contain examples".into(),
        ));
    }
    train_prepared(model, &train_ex, valid_ex, cfg, opts)
}

/// Training loop over already prepared examples.
pub fn train_prepared(
    mut model: Model,
    train_ex: &[Prepared],
    valid_ex: Vec<Prepared>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut log = match &opts.log_csv {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
            f.write_all(b"epoch,loss,l_c,l_t,l_r,val_hit1,val_hit3,val_hit5,val_bleu1\n")
                .map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    if let Some(p) = &opts.topic_sets_csv {
        if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.l2);
    let mut grads = Grads::new(&model.store);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut history = Vec::new();
    let mut best_hit3 = f64::NEG_INFINITY;
    let mut best_bleu1 = f64::NEG_INFINITY;
    let mut best: Option<(
        ParamStore,
        Adam,
        crate::expansion::PersonaTopicSets,
        usize,
        MetricReport,
    )> = None;
    let mut since_improvement = 0usize;
    let eval_opts = EvalOptions {
        seed: cfg.seed,
        decode_limit: (cfg.val_decode_limit > 0).then_some(cfg.val_decode_limit),
        perplexity: false,
        keep_records: false,
    };
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut sums = LossParts::default();
        let mut n_aux = 0usize;
        let mut n_resp = 0usize;
        let mut mass_err: f64 = 0.0;
        for batch in order.chunks(cfg.batch) {
            grads.clear();
            for &i in batch {
                let ex = &train_ex[i];
                let dropout_rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, step), i as u64));
                let mut g = Graph::with_dropout(&model.store, model.config.dropout, dropout_rng);
                let sel_seed = mix(mix(cfg.seed ^ 0xa11ce, epoch as u64), i as u64);
                let (total, losses, parts) = joint_loss_node(&model, &mut g, ex, cfg.weights, sel_seed);
                if !parts.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch} ({}); {}",
                        ex.id(),
                        param_norm_report(&model.store)
                    )));
                }
                if parts.total > 1e6 {
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch}: loss {:.3e}",
                        parts.total
                    )));
                }
                if opts.check_distributions {
                    let mut p = g.value(losses.encoded.topic_logits).data().to_vec();
                    softmax_in_place(&mut p);
                    mass_err = mass_err.max((p.iter().sum::<f64>() - 1.0).abs());
                    if let Some(logits) = losses.response_logits {
                        let src = &model.response_inputs_source(ex, ex.target_topic);
                        let t = g.value(logits);
                        for r in 0..t.rows() {
                            let d = token_distribution(t.row(r), src, model.vocab.num_words());
                            mass_err = mass_err.max((d.probs.iter().sum::<f64>() - 1.0).abs());
                        }
                    }
                }
                g.backward_scaled(total, 1.0 / batch.len() as f64, &mut grads);
                sums.total += parts.total;
                sums.topic += parts.topic;
                if losses.aux.is_some() {
                    sums.contrastive += parts.contrastive;
                    n_aux += 1;
                }
                if losses.response.is_some() {
                    sums.response += parts.response;
                    n_resp += 1;
                }
            }
            adam.update(&mut model.store, &grads);
            step += 1;
            if cfg.refresh_per_step {
                model.refresh_topic_sets()?;
            }
        }
        if !model.store.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after epoch {epoch}; {}",
                param_norm_report(&model.store)
            )));
        }
        model.refresh_topic_sets()?;
        if let Some(p) = &opts.topic_sets_csv {
            model.topic_sets.append_csv(p, epoch)?;
        }
        let report = evaluate(&model, &valid_ex, &eval_opts)?;
        let bleu1 = report.bleu1.unwrap_or(0.0);
        let improved = report.hit3 > best_hit3 || bleu1 > best_bleu1;
        best_hit3 = best_hit3.max(report.hit3);
        best_bleu1 = best_bleu1.max(bleu1);
        let n = train_ex.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.total / n + cfg.l2 * model.store.sq_norm(),
            contrastive: if n_aux > 0 {
                sums.contrastive / n_aux as f64
            } else {
                0.0
            },
            topic: sums.topic / n,
            response: if n_resp > 0 { sums.response / n_resp as f64 } else { 0.0 },
            val_hit1: report.hit1,
            val_hit3: report.hit3,
            val_hit5: report.hit5,
            val_bleu1: bleu1,
            max_mass_error: mass_err,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (c {:.4} t {:.4} r {:.4}) val hit@1 {:.4} hit@3 {:.4} bleu1 {:.4}",
            stats.loss,
            stats.contrastive,
            stats.topic,
            stats.response,
            stats.val_hit1,
            stats.val_hit3,
            stats.val_bleu1
        );
        if let Some((f, p)) = &mut log {
            f.write_all(csv_line(&stats).as_bytes())
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
        history.push(stats);
        if improved {
            since_improvement = 0;
            best = Some((
                model.store.clone(),
                adam.clone(),
                model.topic_sets.clone(),
                epoch,
                report,
            ));
        } else {
            since_improvement += 1;
        }
        if since_improvement >= cfg.patience {
            break;
        }
    }
    let (store, optimizer, sets, epoch, report) = best.expect("first epoch always improves");
    model.store = store;
    model.topic_sets = sets;
    Ok(TrainOutcome {
        state: ModelState {
            model,
            optimizer,
            epoch,
            best: Some(report),
        },
        history,
        valid: valid_ex,
    })
}
