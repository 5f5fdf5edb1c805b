//! Parameter initialization and the small dense building blocks shared by
//! the encoder, fusion and decoder.

use dbswin_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Xoshiro256StarStar,
    prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Xoshiro256StarStar) -> Self {
        ParamInit {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamInit<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamInit {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        let full = self.full_name(name);
        Ok(self.store.add(full, value, decay)?)
    }

    /// Uniform in `±1/√fan_in`, laid out `[fan_in, fan_out]`.
    pub fn fan_in_uniform(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-bound..bound))?;
        self.add(name, t, true)
    }

    /// Normal with standard deviation `std`, resampled outside `±2·std`.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })?;
        self.add(name, t, false)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape)?, false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, 1.0)?, false)
    }
}

/// `y = x·W (+ b)` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = init.scope(name);
        let weight = s.fan_in_uniform("weight", in_dim, out_dim)?;
        let bias = if bias { Some(s.zeros("bias", &[out_dim])?) } else { None };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(ps, b);
                Ok(tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(LayerNorm {
            gamma: s.ones("gamma", &[dim])?,
            beta: s.zeros("beta", &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}
