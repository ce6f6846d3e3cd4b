//! SGD with momentum and Adam, both with L2 weight decay added to the
//! gradient.

use std::collections::BTreeMap;

use super::config::{OptimizerKind, StepConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{NamedTensor, OPTIMIZER_PREFIX};
use crate::model::Param;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    steps: u64,
    /// Momentum buffer (SGD) or first moment (Adam), per parameter.
    first: BTreeMap<String, Vec<f32>>,
    /// Second moment (Adam only).
    second: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: &StepConfig) -> Self {
        Optimizer {
            kind: config.optimizer,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<(String, &mut Param)>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, p) in params {
            let n = p.len();
            let first = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, g), b) in p.value.iter_mut().zip(&p.grad).zip(first.iter_mut()) {
                        let g = *g as f64 + self.weight_decay * *w as f64;
                        let buf = if t == 1 { g } else { self.momentum * *b as f64 + g };
                        *b = buf as f32;
                        *w = (*w as f64 - lr * buf) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let second = self.second.entry(name).or_insert_with(|| vec![0.0; n]);
                    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                    for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(first.iter_mut()).zip(second.iter_mut()) {
                        let g = *g as f64 + self.weight_decay * *w as f64;
                        let m1 = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                        let v1 = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                        *m = m1 as f32;
                        *v = v1 as f32;
                        *w = (*w as f64 - lr * (m1 / c1) / ((v1 / c2).sqrt() + EPS)) as f32;
                    }
                }
            }
        }
    }

    /// State as checkpoint tensors under the optimizer prefix.
    pub fn state_tensors(&self) -> BTreeMap<String, NamedTensor> {
        let mut out = BTreeMap::new();
        for (slot, map) in [("m", &self.first), ("v", &self.second)] {
            for (name, values) in map {
                out.insert(
                    format!("{OPTIMIZER_PREFIX}{slot}/{name}"),
                    NamedTensor {
                        shape: vec![values.len()],
                        values: values.clone(),
                    },
                );
            }
        }
        out
    }

    pub fn restore(&mut self, tensors: &BTreeMap<String, NamedTensor>, steps: u64) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (key, t) in tensors {
            let Some(rest) = key.strip_prefix(OPTIMIZER_PREFIX) else { continue };
            let (slot, name) = rest
                .split_once('/')
                .ok_or_else(|| Error::CorruptState(format!("optimizer entry `{key}`")))?;
            let map = match slot {
                "m" => &mut self.first,
                "v" => &mut self.second,
                _ => return Err(Error::CorruptState(format!("optimizer entry `{key}`"))),
            };
            map.insert(name.to_string(), t.values.clone());
        }
        self.steps = steps;
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Param)], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|&g| (g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, p) in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
