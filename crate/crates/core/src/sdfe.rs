//! Spiking dense feature extraction: a dense block, a covariance-style
//! spatial attention mask, adaptive leaky integrate-and-fire neurons with a
//! learned decay constant, and their sum `Q_A`.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Builder, Conv, Ctx};
use crate::tensor::Tensor;

/// Floor added to the softplus output of the decay head.
pub const TAU_FLOOR: f64 = 0.1;
/// Unit integration interval.
pub const DT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    pub threshold: f64,
    pub v_reset: f64,
    pub steps: usize,
    /// Steepness of the sigmoid surrogate.
    pub surrogate_alpha: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            v_reset: 0.0,
            steps: 4,
            surrogate_alpha: 4.0,
        }
    }
}

/// Outcome of one neuron update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeStep {
    pub spike: f64,
    pub memory: f64,
    pub potential: f64,
}

/// One leaky integrate-and-fire update:
/// `V = H_prev + X`, `S = Θ(V - u_th)` (with `Θ(0) = 1`),
/// `H = V e^{-Δt/τ} (1 - S) + V_reset S`.
pub fn spike_neuron_step(h_prev: f64, drive: f64, tau: f64, threshold: f64, v_reset: f64) -> Result<SpikeStep> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("membrane time constant must be positive, got {tau}")));
    }
    let potential = h_prev + drive;
    let spike = if potential - threshold >= 0.0 { 1.0 } else { 0.0 };
    let memory = potential * (-DT / tau).exp() * (1.0 - spike) + v_reset * spike;
    Ok(SpikeStep {
        spike,
        memory,
        potential,
    })
}

/// Centering matrix `(1/n)(I - (1/n) 1)` of size `c' x c'` for `n` pixels.
pub fn centering_matrix(n: usize, channels: usize) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut m = vec![-inv * inv; channels * channels];
    for i in 0..channels {
        m[i * channels + i] += inv;
    }
    m
}

/// `X = B Ī Bᵀ` for `B` given as `n x c'` rows.
pub fn spatial_mask(b: &[f64], n: usize, channels: usize) -> Result<Vec<f64>> {
    if b.len() != n * channels {
        return Err(Error::dim("spatial_mask", format!("{} values cannot form {n}x{channels}", b.len())));
    }
    let centre = centering_matrix(n, channels);
    let mut bc = vec![0.0; n * channels];
    for i in 0..n {
        for k in 0..channels {
            for j in 0..channels {
                bc[i * channels + j] += b[i * channels + k] * centre[k * channels + j];
            }
        }
    }
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            x[i * n + j] = (0..channels).map(|k| bc[i * channels + k] * b[j * channels + k]).sum();
        }
    }
    Ok(x)
}

/// `softmax(X) · D` with the softmax taken per row; `D` is `n x c'`.
pub fn attend(mask: &[f64], d: &[f64], n: usize, channels: usize) -> Result<Vec<f64>> {
    if mask.len() != n * n || d.len() != n * channels {
        return Err(Error::dim("attend", "mask must be n x n and D must be n x c'"));
    }
    let weights = crate::autograd::kernels::softmax_rows(mask, n);
    let mut out = vec![0.0; n * channels];
    for i in 0..n {
        for j in 0..n {
            let a = weights[i * n + j];
            for k in 0..channels {
                out[i * channels + k] += a * d[j * channels + k];
            }
        }
    }
    Ok(out)
}

/// Two 3x3 conv + batchnorm + SReLU layers, each growing the map by `c`
/// channels, then a 1x1 projection to exactly `4c` channels.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub convs: [Conv; 2],
    pub norms: [BatchNorm; 2],
    pub project: Conv,
}

impl DenseBlock {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            convs: [b.conv_no_bias("conv0", c, c, 3, 1)?, b.conv_no_bias("conv1", 2 * c, c, 3, 1)?],
            norms: [b.batchnorm("bn0", c)?, b.batchnorm("bn1", c)?],
            project: b.conv("project", 3 * c, 4 * c, 1, 1)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut features = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let h = conv.forward(cx, features)?;
            let h = norm.forward(cx, h)?;
            let h = cx.tape.srelu(h)?;
            features = cx.tape.concat_channels(&[features, h])?;
        }
        self.project.forward(cx, features)
    }
}

#[derive(Clone, Debug)]
pub struct Sdfe {
    pub dense: DenseBlock,
    pub mask_proj: Conv,
    pub value_proj: Conv,
    pub attend_out: Conv,
    pub drive: Conv,
    pub tau_in: Conv,
    pub tau_out: Conv,
    pub spike: SpikeConfig,
    pub reduced: usize,
    pub mask_cap: usize,
}

/// Intermediate maps of one SDFE pass, exposed for inspection.
pub struct SdfeOutput {
    pub q: Var,
    pub attention: Var,
    pub spiking: Var,
    pub tau: Var,
}

impl Sdfe {
    pub fn new(b: &mut Builder, c: usize, reduction: usize, spike: SpikeConfig, mask_cap: usize) -> Result<Self> {
        if reduction == 0 || c % reduction != 0 {
            return Err(Error::Config(format!("reduction {reduction} must divide channel count {c}")));
        }
        if spike.steps == 0 {
            return Err(Error::Config("spike horizon must be at least one step".into()));
        }
        let reduced = c / reduction;
        Ok(Self {
            dense: DenseBlock::new(&mut b.scope("dense"), c)?,
            mask_proj: b.conv("mask_proj", 4 * c, reduced, 1, 1)?,
            value_proj: b.conv("value_proj", 4 * c, reduced, 1, 1)?,
            attend_out: b.conv("attend_out", reduced, c, 1, 1)?,
            drive: b.conv("drive", 4 * c, c, 1, 1)?,
            tau_in: b.conv("tau_in", 4 * c, reduced, 1, 1)?,
            tau_out: b.conv("tau_out", reduced, reduced, 1, 1)?,
            spike,
            reduced,
            mask_cap,
        })
    }

    /// `τ = softplus(mean(C1x1(R(C1x1(F_k))))) + 0.1`, one value per sample.
    pub fn adaptive_tau(&self, cx: &mut Ctx, dense: Var) -> Result<Var> {
        let h = self.tau_in.forward(cx, dense)?;
        let h = self.tau_out.forward(cx, h)?;
        let m = cx.tape.mean_per_sample(h)?;
        let s = cx.tape.softplus(m)?;
        cx.tape.affine(s, 1.0, TAU_FLOOR)
    }

    /// Spatial attention branch `C1x1(softmax(B Ī Bᵀ) D)`.
    fn attention(&self, cx: &mut Ctx, dense: Var) -> Result<Var> {
        let (_, _, h, w) = cx.tape.value(dense).dims4()?;
        let b_map = self.mask_proj.forward(cx, dense)?;
        let d_map = self.value_proj.forward(cx, dense)?;
        let mut factor = 1;
        while (h / factor) * (w / factor) > self.mask_cap {
            factor *= 2;
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!("cannot pool a {h}x{w} map under the mask cap {}", self.mask_cap)));
        }
        let (b_map, d_map) = if factor > 1 {
            (cx.tape.avgpool2d(b_map, factor)?, cx.tape.avgpool2d(d_map, factor)?)
        } else {
            (b_map, d_map)
        };
        let (hh, ww) = (h / factor, w / factor);
        let n = hh * ww;
        let b_tok = cx.tape.to_tokens(b_map)?;
        let d_tok = cx.tape.to_tokens(d_map)?;
        let centre = Tensor::new(vec![self.reduced, self.reduced], centering_matrix(n, self.reduced))?;
        let centre = cx.tape.leaf(centre)?;
        let bc = cx.tape.matmul(b_tok, centre, false)?;
        let mask = cx.tape.matmul(bc, b_tok, true)?;
        let weights = cx.tape.softmax(mask)?;
        let u = cx.tape.matmul(weights, d_tok, false)?;
        let u = cx.tape.from_tokens(u, hh, ww)?;
        let u = if factor > 1 { cx.tape.upsample_bilinear(u, factor)? } else { u };
        self.attend_out.forward(cx, u)
    }

    /// Runs the neurons for `steps` iterations on a constant drive and
    /// returns the step-mean of `S_t ⊙ V_t`.
    fn spiking(&self, cx: &mut Ctx, dense: Var, tau: Var) -> Result<Var> {
        let drive = self.drive.forward(cx, dense)?;
        let inv_tau = cx.tape.recip(tau)?;
        let neg = cx.tape.affine(inv_tau, -DT, 0.0)?;
        let decay = cx.tape.exp(neg)?;
        let shape = cx.tape.shape(drive).to_vec();
        let mut memory = cx.tape.leaf(Tensor::zeros(&shape))?;
        let mut total: Option<Var> = None;
        let cfg = self.spike;
        for _ in 0..cfg.steps {
            let potential = cx.tape.add(memory, drive)?;
            let s = cx.tape.heaviside(potential, cfg.threshold, cfg.surrogate_alpha, cx.spike)?;
            let emitted = cx.tape.mul(s, potential)?;
            total = Some(match total {
                Some(t) => cx.tape.add(t, emitted)?,
                None => emitted,
            });
            let keep = cx.tape.affine(s, -1.0, 1.0)?;
            let leaked = cx.tape.mul_per_sample(potential, decay)?;
            let leaked = cx.tape.mul(leaked, keep)?;
            let reset = cx.tape.affine(s, cfg.v_reset, 0.0)?;
            memory = cx.tape.add(leaked, reset)?;
        }
        let total = total.expect("at least one step");
        cx.tape.affine(total, 1.0 / cfg.steps as f64, 0.0)
    }

    pub fn forward_detailed(&self, cx: &mut Ctx, f0: Var) -> Result<SdfeOutput> {
        let dense = self.dense.forward(cx, f0)?;
        let attention = self.attention(cx, dense)?;
        let tau = self.adaptive_tau(cx, dense)?;
        let spiking = self.spiking(cx, dense, tau)?;
        let q = cx.tape.add(attention, spiking)?;
        Ok(SdfeOutput {
            q,
            attention,
            spiking,
            tau,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f0: Var) -> Result<Var> {
        Ok(self.forward_detailed(cx, f0)?.q)
    }
}
