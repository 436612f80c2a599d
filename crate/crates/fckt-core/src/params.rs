//! Named parameter storage and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Slot {
    name: String,
    value: Tensor,
}

/// All trainable parameters of a model, addressed by stable [`ParamId`]s in
/// registration order. Registration order is part of a checkpoint's identity:
/// rebuilding the same architecture yields the same ids.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.slots.iter().any(|s| s.name == name),
            "duplicate parameter name {name}"
        );
        self.slots.push(Slot {
            name: name.to_string(),
            value,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.slots[id.0].value.shape(),
            value.shape(),
            "parameter shape change"
        );
        self.slots[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.all_finite())
    }
}

/// Dense per-parameter gradient accumulator; contributions are summed in the
/// order they are offered, which keeps batch reductions deterministic.
#[derive(Debug)]
pub struct GradAccum {
    by_param: Vec<Option<Tensor>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum {
            by_param: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.by_param[id.0] {
            Some(existing) => existing.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn extend(&mut self, contributions: &[(ParamId, Tensor)]) {
        for (id, g) in contributions {
            self.add(*id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(Tensor::all_finite)
    }

    /// Name of the first parameter with a non-finite gradient, if any.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.by_param
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite()))
            .map(|(i, _)| store.name(ParamId(i)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// What one optimizer step did, for diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Parameter names matching these prefixes are not updated.
    frozen_prefixes: Vec<String>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            cfg,
            t: 0,
            m,
            v,
            frozen_prefixes: Vec::new(),
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) -> Result<StepReport> {
        if !grads.all_finite() {
            let name = grads.first_non_finite(store).unwrap_or("?").to_string();
            return Err(Error::NonFinite {
                component: format!("gradient of {name}"),
                step: self.t as usize,
            });
        }
        let norm = grads.global_norm();
        let scale = match self.cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for id in store.ids() {
            let name = store.name(id);
            if self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            let i = id.index();
            let mut value = store.value(id).clone();
            {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                for k in 0..value.len() {
                    let g = grads.get(id).map_or(0.0, |t| t.data()[k]) * scale;
                    let mk = self.cfg.beta1 * m.data()[k] + (1.0 - self.cfg.beta1) * g;
                    let vk = self.cfg.beta2 * v.data()[k] + (1.0 - self.cfg.beta2) * g * g;
                    m.data_mut()[k] = mk;
                    v.data_mut()[k] = vk;
                    let m_hat = mk / bc1;
                    let v_hat = vk / bc2;
                    value.data_mut()[k] -=
                        self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
                }
            }
            store.set_value(id, value);
        }
        Ok(StepReport {
            grad_norm: norm,
            clipped: scale != 1.0,
        })
    }
}

/// Deterministic derived seed for independent random streams. Mixes the base
/// seed with a stream label and indices via splitmix64 so that stream order
/// never depends on scheduling.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = base;
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Map from parameter names to values, used by checkpoints and weight files.
pub fn to_named_map(store: &ParamStore) -> HashMap<String, Tensor> {
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).clone()))
        .collect()
}
