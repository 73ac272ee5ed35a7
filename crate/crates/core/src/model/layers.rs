use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, Parameters, Session, Tensor, Var};

pub(crate) struct Init<'a> {
    pub params: &'a mut Parameters,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Result<ParamId> {
        self.params
            .insert(name, Tensor::full(shape.to_vec(), value))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Ok(Self {
            w: init.uniform(format!("{name}.w"), &[fan_in, fan_out], bound)?,
            b: init.constant(format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b, 1e-5)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Rearranges `[B,H,W,C]` into `[B,H/p,W/p,p·p·C]` (non-overlapping p×p blocks).
pub(crate) fn space_to_depth(s: &mut Session, x: Var, p: usize) -> Result<Var> {
    let shape = s.graph.shape(x).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let x = s.graph.reshape(x, &[b, h / p, p, w / p, p, c])?;
    let x = s.graph.permute(x, &[0, 1, 3, 2, 4, 5])?;
    s.graph.reshape(x, &[b, h / p, w / p, p * p * c])
}

/// `[B,H,W,C]` → `[B·(H/w)·(W/w), w·w, C]`
pub(crate) fn window_partition(s: &mut Session, x: Var, win: usize) -> Result<Var> {
    let shape = s.graph.shape(x).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let x = s.graph.reshape(x, &[b, h / win, win, w / win, win, c])?;
    let x = s.graph.permute(x, &[0, 1, 3, 2, 4, 5])?;
    s.graph
        .reshape(x, &[b * (h / win) * (w / win), win * win, c])
}

pub(crate) fn window_reverse(
    s: &mut Session,
    x: Var,
    win: usize,
    dims: (usize, usize, usize, usize),
) -> Result<Var> {
    let (b, h, w, c) = dims;
    let x = s.graph.reshape(x, &[b, h / win, w / win, win, win, c])?;
    let x = s.graph.permute(x, &[0, 1, 3, 2, 4, 5])?;
    s.graph.reshape(x, &[b, h, w, c])
}
