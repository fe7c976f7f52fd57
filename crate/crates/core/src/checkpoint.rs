//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` manifest length,
//! the JSON manifest, then every parameter tensor as little-endian `f64` in
//! manifest order, followed by the Adam first and second moments in the same
//! order when the manifest says they are present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::evalsuite::MetricReport;
use crate::expansion::PersonaTopicSets;
use crate::model::Model;
use crate::nn::optim::Adam;
use crate::nn::Tensor;
use crate::training::{ModelState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TSELCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub user_personas: Vec<Vec<usize>>,
    pub n_personas: usize,
    pub topic_sets: PersonaTopicSets,
    pub co_occurrence: Option<Tensor>,
    pub params: Vec<ParamEntry>,
    pub epoch: usize,
    /// Best validation metrics, without per-example records.
    pub metrics: Option<MetricReport>,
    pub optimizer: Option<OptimizerManifest>,
}

/// A trained model together with the config it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub state: ModelState,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.state.model;
        let params: Vec<ParamEntry> = model
            .store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        let opt = &self.state.optimizer;
        let manifest = Manifest {
            train: TrainConfig {
                model: model.config.clone(),
                ..self.train.clone()
            },
            vocab: model.vocab.clone(),
            user_personas: model.user_personas.clone(),
            n_personas: model.store.get(model.tables.persona).rows(),
            topic_sets: model.topic_sets.clone(),
            co_occurrence: model.co_occurrence.clone(),
            params,
            epoch: self.state.epoch,
            metrics: self.state.best.clone().map(|mut r| {
                r.records.clear();
                r
            }),
            optimizer: Some(OptimizerManifest {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                l2: opt.l2,
                step: opt.step,
            }),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 24 * model.store.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in model.store.iter() {
            push_tensor(&mut out, t);
        }
        for t in opt.first.iter().chain(&opt.second) {
            push_tensor(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Data("manifest length overflows".into()))?;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
        let Manifest {
            train,
            vocab,
            user_personas,
            n_personas,
            topic_sets,
            co_occurrence,
            params,
            epoch,
            metrics,
            optimizer,
        } = manifest;
        let vocab = vocab.reindex();
        let persona_init = Tensor::zeros(n_personas, train.model.d);
        let mut model = Model::assemble(
            train.model.clone(),
            vocab,
            user_personas,
            persona_init,
            co_occurrence,
            0,
        )?;
        if model.store.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, the configured model {}",
                params.len(),
                model.store.len()
            )));
        }
        let mut values = Vec::with_capacity(params.len());
        for p in &params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {}", p.name)))?;
            if model.store.get(id).shape() != (p.rows, p.cols) {
                return Err(Error::Data(format!(
                    "parameter {} is {}x{} in the checkpoint, {:?} in the model",
                    p.name,
                    p.rows,
                    p.cols,
                    model.store.get(id).shape()
                )));
            }
            values.push((id, r.tensor(p.rows, p.cols)?));
        }
        let mut adam = Adam::new(&model.store, train.lr, train.l2);
        if let Some(o) = optimizer {
            for moments in [&mut adam.first, &mut adam.second] {
                for (id, _) in &values {
                    let shape = model.store.get(*id).shape();
                    moments[id.index()] = r.tensor(shape.0, shape.1)?;
                }
            }
            adam.lr = o.lr;
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.eps = o.eps;
            adam.l2 = o.l2;
            adam.step = o.step;
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        for (id, t) in values {
            *model.store.get_mut(id) = t;
        }
        if topic_sets.topics.len() != n_personas || topic_sets.k != model.config.k {
            return Err(Error::Data("persona topic sets do not match the model".into()));
        }
        model.topic_sets = topic_sets;
        Ok(Checkpoint {
            train,
            state: ModelState {
                model,
                optimizer: adam,
                epoch,
                best: metrics,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
