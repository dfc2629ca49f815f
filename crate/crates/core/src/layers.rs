//! Parameterized building blocks shared by the projection, the domain miner
//! and the fusion stack.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{BnMode, BnRunning, Graph, ParamId, ParamStore, Tensor, Var, PRELU_INIT};
use crate::error::Result;

/// Affine map `x·W + b`. Weights and bias start from `U(−1/√in, 1/√in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(rng, fan_in * fan_out, bound);
        let w = store.add(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        let b = if bias {
            let b = uniform(rng, fan_out, bound);
            Some(store.add(format!("{prefix}.b"), Tensor::vector(b))?)
        } else {
            None
        };
        Ok(Dense {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.dense(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

/// `dense → batch_norm → prelu`.
#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub dense: Dense,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BnRunning,
    pub slope: ParamId,
}

impl FfnBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dense = Dense::new(store, prefix, fan_in, fan_out, true, rng)?;
        let gamma = store.add(format!("{prefix}.bn.gamma"), Tensor::full(&[fan_out], 1.0))?;
        let beta = store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[fan_out]))?;
        let mean = store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[fan_out]))?;
        let var = store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[fan_out], 1.0))?;
        let count = store.add_buffer(format!("{prefix}.bn.updates"), Tensor::scalar(0.0))?;
        let slope = store.add(format!("{prefix}.prelu"), Tensor::full(&[fan_out], PRELU_INIT))?;
        Ok(FfnBlock {
            dense,
            gamma,
            beta,
            running: BnRunning { mean, var, count },
            slope,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.dense.forward(g, x)?;
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let h = g.batch_norm(h, gamma, beta, Some(self.running), mode)?;
        let slope = g.param(self.slope);
        g.prelu(h, slope)
    }

    pub fn fan_out(&self) -> usize {
        self.dense.fan_out
    }
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

pub(crate) fn normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Writes a freshly computed set of running statistics back into the store.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        *store.value_mut(id) = value;
    }
}
