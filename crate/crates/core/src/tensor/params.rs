use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a leaf inside [`Parameters`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable leaves with per-leaf AdamW moments and a shared step counter.
#[derive(Clone, Debug, Default)]
pub struct Parameters {
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    step: u64,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::op(
                "parameters",
                format!("duplicate parameter `{name}`"),
            ));
        }
        let id = ParamId(self.values.len());
        let n = value.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        self.first_moment.push(vec![0.0; n]);
        self.second_moment.push(vec![0.0; n]);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.values[id.0].len() {
            return Err(Error::shape(
                "set_grad",
                self.values[id.0].shape(),
                &[grad.len()],
            ));
        }
        self.grads[id.0] = Some(grad);
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops all gradients; `adamw_step` fails until new ones are accumulated.
    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds gradients collected from a session. Leaves the session never
    /// touched receive zeros so every leaf has a defined gradient afterwards.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (slot, value) in self.grads.iter_mut().zip(&self.values) {
            slot.get_or_insert_with(|| vec![0.0; value.len()]);
        }
        for (id, g) in grads {
            let slot = self.grads[id.0].as_mut().expect("filled above");
            for (s, v) in slot.iter_mut().zip(g.data()) {
                *s += v;
            }
        }
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(&self) -> f32 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm measured before clipping.
    pub fn clip_gradients(&mut self, max_norm: f32) -> f32 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            // guard against rounding pushing the result just above the bound
            let after = self.grad_norm();
            if after > max_norm {
                let fix = max_norm / after;
                for g in self.grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v *= fix);
                }
            }
        }
        norm
    }

    /// One decoupled-weight-decay Adam update. Gradients are left in place.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some(i) = self.grads.iter().position(Option::is_none) {
            return Err(Error::MissingGrad(self.names[i].clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = opt.betas;
        let bc1 = 1.0 - f64::from(b1).powi(t);
        let bc2 = 1.0 - f64::from(b2).powi(t);
        let lr = f64::from(opt.lr);
        let decay = (1.0 - lr * f64::from(opt.weight_decay)) as f32;
        for i in 0..self.values.len() {
            let g = self.grads[i].as_ref().expect("checked above");
            let w = self.values[i].data_mut();
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = f64::from(m[k]) / bc1;
                let v_hat = f64::from(v[k]) / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + f64::from(opt.eps));
                w[k] = (w[k] * decay) - update as f32;
            }
        }
        Ok(())
    }

    /// Opens a forward/backward session that binds leaves lazily.
    pub fn session(&self) -> Session<'_> {
        Session {
            graph: Graph::new(),
            params: self,
            bound: vec![None; self.values.len()],
            track: true,
        }
    }

    /// Session whose leaves are untracked constants (inference).
    pub fn inference(&self) -> Session<'_> {
        Session {
            track: false,
            ..self.session()
        }
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// A computation record bound to a parameter set.
///
/// Parameters are copied into the graph on first use only, so a session
/// also records which leaves a forward pass actually touched.
pub struct Session<'p> {
    pub graph: Graph<f32>,
    params: &'p Parameters,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Session<'p> {
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.values[id.0].clone();
        let v = if self.track {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every bound leaf that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| Some((ParamId(i), self.graph.grad((*v)?)?)))
            .collect()
    }
}
