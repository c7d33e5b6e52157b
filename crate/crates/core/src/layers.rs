//! Parameterised building blocks shared by the policy networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, ParamId, ParamStore, SpikeForward, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Everything a forward pass needs besides its input.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub train: bool,
    pub spike: SpikeForward,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            spike: SpikeForward::Binary,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded generator.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
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

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.store.add(&self.full_name(name), value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(&self.full_name(name), Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add_buffer(&self.full_name(name), Tensor::full(shape, value))
    }

    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Conv> {
        let mut scope = self.scope(name);
        let bound = 1.0 / ((ci * k * k) as f64).sqrt();
        let weight = scope.uniform("weight", &[co, ci, k, k], bound)?;
        let bias = scope.constant("bias", &[co], 0.0)?;
        Ok(Conv {
            weight,
            bias: Some(bias),
            stride,
            pad: k / 2,
        })
    }

    pub fn conv_no_bias(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Conv> {
        let mut scope = self.scope(name);
        let bound = 1.0 / ((ci * k * k) as f64).sqrt();
        let weight = scope.uniform("weight", &[co, ci, k, k], bound)?;
        Ok(Conv {
            weight,
            bias: None,
            stride,
            pad: k / 2,
        })
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        let mut scope = self.scope(name);
        Ok(BatchNorm {
            gamma: scope.constant("gamma", &[c], 1.0)?,
            beta: scope.constant("beta", &[c], 0.0)?,
            running_mean: scope.buffer("running_mean", &[c], 0.0)?,
            running_var: scope.buffer("running_var", &[c], 1.0)?,
        })
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let mut scope = self.scope(name);
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            weight: scope.uniform("weight", &[outputs, inputs], bound)?,
            bias: scope.constant("bias", &[outputs], 0.0)?,
        })
    }
}

/// 2D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        let y = cx.tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = cx.param(b)?;
                cx.tape.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    /// Training mode normalises by batch statistics and folds them into the
    /// running estimates with momentum 0.1; eval mode uses the running
    /// estimates.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma)?;
        let beta = cx.param(self.beta)?;
        if cx.train {
            let (n, _, h, w) = cx.tape.value(x).dims4()?;
            let count = (n * h * w) as f64;
            let (y, stats) = cx.tape.batchnorm2d(x, gamma, beta, BnMode::Train)?;
            let (mean, var) = stats.expect("train mode returns statistics");
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (r, m) in cx.store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in cx.store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
            Ok(y)
        } else {
            let mean = cx.store.value(self.running_mean).data().to_vec();
            let var = cx.store.value(self.running_var).data().to_vec();
            let (y, _) = cx.tape.batchnorm2d(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var })?;
            Ok(y)
        }
    }
}

/// Affine map over the last axis of an `[N, F]` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let (n, f) = (shape[0], shape[1..].iter().product::<usize>());
        let x3 = cx.tape.reshape(x, &[1, n, f])?;
        let w = cx.param(self.weight)?;
        let y = cx.tape.matmul(x3, w, true)?;
        let outputs = cx.tape.shape(y)[2];
        let y = cx.tape.reshape(y, &[n, outputs])?;
        let b = cx.param(self.bias)?;
        cx.tape.add_channel_bias(y, b)
    }
}
