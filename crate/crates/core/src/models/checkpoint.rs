//! Checkpoints: tensors in an RVPT archive, everything else in a JSON
//! sidecar next to it (`<path>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::models::train::{LossRecord, NonFiniteEvent, TrainConfig, Trainer};
use crate::models::{ArchitectureSpec, ConvLayer, RecurrentModel};
use crate::normalization::{NormState, NormalizerConfig};
use crate::spectral::PowerIterationState;
use crate::tensor::{Kernel, Padding, Tensor};

const FORMAT: &str = "rvstab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub config: TrainConfig,
    pub adam: AdamConfig,
    pub history: Vec<LossRecord>,
    pub events: Vec<NonFiniteEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub spec: ArchitectureSpec,
    pub norm: NormalizerConfig,
    pub norm_n: usize,
    pub normalize_output: bool,
    pub pad: Padding,
    pub layers: Vec<String>,
    pub frozen: bool,
    /// Per-layer power-iteration counters `(iterations, sigma)`.
    #[serde(default)]
    pub power: Vec<Option<(usize, f64)>>,
    pub train: Option<TrainMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RecurrentModel,
    pub train: Option<(TrainMeta, AdamState)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_model(model: RecurrentModel) -> Self {
        Self { model, train: None }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model: t.model.clone(),
            train: Some((
                TrainMeta {
                    step: t.step,
                    config: t.cfg.clone(),
                    adam: t.adam_cfg.clone(),
                    history: t.history.clone(),
                    events: t.events.clone(),
                },
                t.adam.clone(),
            )),
        }
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn into_trainer(self, steps: u64) -> Result<Trainer> {
        let Some((meta, adam)) = self.train else {
            return Err(Error::config(
                "checkpoint carries no training state to resume",
            ));
        };
        let mut cfg = meta.config;
        cfg.steps = steps;
        let mut t = Trainer::new(self.model, cfg)?;
        t.adam_cfg = meta.adam;
        t.adam = adam;
        t.step = meta.step;
        t.history = meta.history;
        t.events = meta.events;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let mut ar = Archive::new();
        for (i, l) in m.layers.iter().enumerate() {
            ar.push(format!("{}.weight", l.name), l.kernel.to_tensor());
            ar.push(
                format!("{}.bias", l.name),
                Tensor::new(vec![l.bias.len()], l.bias.clone())?,
            );
            match &m.norm_states[i] {
                Some(NormState::Layer(s)) => ar.push(format!("{}.u", l.name), s.u.clone()),
                Some(NormState::Reshaped(u)) => ar.push(
                    format!("{}.u", l.name),
                    Tensor::new(vec![u.len()], u.clone())?,
                ),
                None => {}
            }
            if let Some(fr) = &m.frozen {
                ar.push(format!("{}.effective", l.name), fr[i].to_tensor());
            }
        }
        if let Some((_, adam)) = &self.train {
            for (i, (a, b)) in adam.first.iter().zip(&adam.second).enumerate() {
                ar.push(
                    format!("adam.first.{i}"),
                    Tensor::new(vec![a.len()], a.clone())?,
                );
                ar.push(
                    format!("adam.second.{i}"),
                    Tensor::new(vec![b.len()], b.clone())?,
                );
            }
            ar.push("adam.step", Tensor::new(vec![2], split_u64(adam.step))?);
        }
        let meta = CheckpointMeta {
            format: FORMAT.into(),
            spec: m.spec.clone(),
            norm: m.norm.clone(),
            norm_n: m.norm_n,
            normalize_output: m.normalize_output,
            pad: m.pad,
            layers: m.layers.iter().map(|l| l.name.clone()).collect(),
            frozen: m.frozen.is_some(),
            power: m
                .norm_states
                .iter()
                .map(|s| match s {
                    Some(NormState::Layer(p)) => Some((p.iterations, p.sigma)),
                    _ => None,
                })
                .collect(),
            train: self.train.as_ref().map(|(t, _)| t.clone()),
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        ar.save(path)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::Data {
                path: side.clone(),
                msg: format!("cannot read checkpoint metadata: {e}"),
            })?)?;
        if meta.format != FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format `{}`",
                meta.format
            )));
        }
        meta.spec.validate()?;
        let ar = Archive::load(path)?;
        let shapes = meta.spec.layers();
        if shapes.len() != meta.layers.len() {
            return Err(mismatch(path, "layer count differs from the architecture"));
        }
        let mut layers = Vec::new();
        let mut states = Vec::new();
        let mut frozen = Vec::new();
        for (li, shape) in shapes.iter().enumerate() {
            let w = ar.require(&format!("{}.weight", shape.name))?;
            if w.shape() != [shape.k, shape.k, shape.m_in, shape.m_out] {
                return Err(mismatch(
                    path,
                    &format!(
                        "layer {} has shape {:?}, architecture wants {:?}",
                        shape.name,
                        w.shape(),
                        [shape.k, shape.k, shape.m_in, shape.m_out]
                    ),
                ));
            }
            let bias = ar.require(&format!("{}.bias", shape.name))?.data().to_vec();
            if bias.len() != shape.m_out {
                return Err(mismatch(
                    path,
                    &format!("bias of {} has wrong length", shape.name),
                ));
            }
            layers.push(ConvLayer {
                name: shape.name.clone(),
                kernel: Kernel::from_tensor(w)?,
                bias,
            });
            states.push(match ar.get(&format!("{}.u", shape.name)) {
                Some(u) if u.rank() == 3 => {
                    let mut st = PowerIterationState::from_u(u.clone())?;
                    if let Some(Some((it, sigma))) = meta.power.get(li) {
                        st.iterations = *it;
                        st.sigma = *sigma;
                    }
                    Some(NormState::Layer(st))
                }
                Some(u) => Some(NormState::Reshaped(u.data().to_vec())),
                None => None,
            });
            if meta.frozen {
                frozen.push(Kernel::from_tensor(
                    ar.require(&format!("{}.effective", shape.name))?,
                )?);
            }
        }
        let model = RecurrentModel {
            spec: meta.spec,
            layers,
            pad: meta.pad,
            norm: meta.norm,
            norm_n: meta.norm_n,
            normalize_output: meta.normalize_output,
            norm_states: states,
            frozen: meta.frozen.then_some(frozen),
        };
        let train = match meta.train {
            Some(t) => {
                let n = model.layers.len() * 2;
                let mut adam = AdamState::new(&[]);
                for i in 0..n {
                    adam.first
                        .push(ar.require(&format!("adam.first.{i}"))?.data().to_vec());
                    adam.second
                        .push(ar.require(&format!("adam.second.{i}"))?.data().to_vec());
                }
                adam.step = join_u64(ar.require("adam.step")?.data());
                Some((t, adam))
            }
            None => None,
        };
        Ok(Self { model, train })
    }
}

fn mismatch(path: &Path, msg: &str) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: format!("checkpoint/architecture mismatch: {msg}"),
    }
}

// u64 carried bit-exactly in two f32 payload slots
fn split_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn join_u64(d: &[f32]) -> u64 {
    d[0].to_bits() as u64 | ((d[1].to_bits() as u64) << 32)
}
