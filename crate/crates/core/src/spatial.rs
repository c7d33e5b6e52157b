//! Recurrent spatial mixing: content-adaptive decay, 2D rotary position
//! encoding, the weighted key-value scan over image patches, output gating
//! and the channel mixing block.

use serde::{Deserialize, Serialize};

use crate::autograd::kernels;
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, Ctx};
use crate::autograd::{ParamId, Var};
use crate::tensor::Tensor;

/// Smallest admissible denominator magnitude in the scan.
pub const WKV_EPS: f64 = 1e-6;
/// Offset added after softplus when stabilising keys.
pub const KEY_FLOOR: f64 = 1e-3;
pub const ROPE_BASE: f64 = 10000.0;

/// Which decay the scan applies at each patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WkvMode {
    /// Per-patch decay pooled from the decay map.
    #[default]
    Adaptive,
    /// One decay vector per image: the spatial mean of the decay map.
    Static,
}

/// Ordered patch tokens feeding the scan. `u` is the position bonus
/// (already mapped into `(0, 1)`).
#[derive(Clone, Debug)]
pub struct PatchSequence {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub decays: Vec<Vec<f64>>,
    pub u: Vec<f64>,
}

impl PatchSequence {
    pub fn channels(&self) -> usize {
        self.u.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.u.len();
        if self.keys.is_empty() {
            return Err(Error::Input("wkv over an empty sequence".into()));
        }
        let rows_ok = |rows: &[Vec<f64>]| rows.len() == self.keys.len() && rows.iter().all(|r| r.len() == c);
        if !rows_ok(&self.keys) || !rows_ok(&self.values) || !rows_ok(&self.decays) {
            return Err(Error::dim("wkv_scan", "keys, values and decays must be equal-length rows of width |u|"));
        }
        Ok(())
    }
}

/// Runs the recurrence
/// `n_i = n_{i-1} ⊙ e^{-W_i} + k_i ⊙ v_i`, `d_i = d_{i-1} ⊙ e^{-W_i} + k_i`
/// (with `n_0 = k_0 ⊙ v_0`, `d_0 = k_0`) and emits
/// `WKV_i = (n_i + e^u ⊙ k_i ⊙ v_i) / (d_i + e^u ⊙ k_i)`.
pub fn wkv_scan(seq: &PatchSequence, mode: WkvMode) -> Result<Vec<Vec<f64>>> {
    seq.validate()?;
    let c = seq.channels();
    let len = seq.keys.len();
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    let keys = flat(&seq.keys);
    let values = flat(&seq.values);
    let (decay, decay_len) = match mode {
        WkvMode::Adaptive => (flat(&seq.decays), len),
        WkvMode::Static => {
            let mut mean = vec![0.0; c];
            for row in &seq.decays {
                for (m, w) in mean.iter_mut().zip(row) {
                    *m += w / len as f64;
                }
            }
            (mean, 1)
        }
    };
    let bonus: Vec<f64> = seq.u.iter().map(|u| u.exp()).collect();
    let trace = kernels::wkv_forward(1, len, c, &keys, &values, &decay, decay_len, &bonus, WKV_EPS)
        .map_err(|(_, i, ch, d)| {
            Error::numeric("wkv_scan", format!("denominator {d:e} below {WKV_EPS:e} at patch {i} (channel {ch})"))
        })?;
    Ok(trace.out.chunks(c).map(|r| r.to_vec()).collect())
}

/// Rotation frequency of channel pair `j` out of `channels`.
pub fn rope_frequency(j: usize, channels: usize) -> f64 {
    1.0 / ROPE_BASE.powf(2.0 * j as f64 / channels as f64)
}

/// Cosine and sine tables `[position][pair]` for the given coordinates;
/// each angle is `θ_j · x_h + θ_j · x_w`.
pub fn rope_tables(coords: &[(f64, f64)], channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if channels % 2 != 0 {
        return Err(Error::Config(format!("rotary encoding needs an even channel count, got {channels}")));
    }
    let half = channels / 2;
    let mut cos = Vec::with_capacity(coords.len() * half);
    let mut sin = Vec::with_capacity(coords.len() * half);
    for &(xh, xw) in coords {
        for j in 0..half {
            let theta = rope_frequency(j, channels);
            let angle = theta * xh + theta * xw;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    Ok((cos, sin))
}

/// Rotates each channel pair `(2j, 2j+1)` of every key by its position's angle.
pub fn rope_encode(keys: &[Vec<f64>], coords: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    if keys.len() != coords.len() {
        return Err(Error::dim("rope_encode", format!("{} keys vs {} coordinates", keys.len(), coords.len())));
    }
    let Some(c) = keys.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    let (cos, sin) = rope_tables(coords, c)?;
    let half = c / 2;
    keys.iter()
        .enumerate()
        .map(|(p, k)| {
            if k.len() != c {
                return Err(Error::dim("rope_encode", "ragged keys"));
            }
            let mut out = k.clone();
            for j in 0..half {
                let (ct, st) = (cos[p * half + j], sin[p * half + j]);
                out[2 * j] = ct * k[2 * j] - st * k[2 * j + 1];
                out[2 * j + 1] = st * k[2 * j] + ct * k[2 * j + 1];
            }
            Ok(out)
        })
        .collect()
}

/// Pixel coordinates of an `h x w` map in raster order.
pub fn grid_coords(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h * w).map(|p| ((p % w) as f64, (p / w) as f64)).collect()
}

/// `σ(C1x1(SReLU(C3x3(F))))`.
#[derive(Clone, Debug)]
pub struct AdaptiveDecay {
    pub local: Conv,
    pub recalibrate: Conv,
}

impl AdaptiveDecay {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            local: b.conv("local", c, c, 3, 1)?,
            recalibrate: b.conv("recalibrate", c, c, 1, 1)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let h = self.local.forward(cx, f)?;
        let h = cx.tape.srelu(h)?;
        let h = self.recalibrate.forward(cx, h)?;
        cx.tape.sigmoid(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialMixingOptions {
    pub patch: usize,
    pub mode: WkvMode,
    /// Feed raw keys to the scan instead of `softplus(k) + 1e-3`.
    pub raw_keys: bool,
}

#[derive(Clone, Debug)]
pub struct SpatialMixing {
    pub decay: AdaptiveDecay,
    pub key: Conv,
    pub value: Conv,
    pub gate: Conv,
    /// Free parameter; the bonus is `u = σ(u_raw)`.
    pub u_raw: ParamId,
    pub options: SpatialMixingOptions,
}

impl SpatialMixing {
    pub fn new(b: &mut Builder, c: usize, options: SpatialMixingOptions) -> Result<Self> {
        if c % 2 != 0 {
            return Err(Error::Config(format!("rotary encoding needs an even channel count, got {c}")));
        }
        Ok(Self {
            decay: AdaptiveDecay::new(&mut b.scope("decay"), c)?,
            key: b.conv("key", c, c, 1, 1)?,
            value: b.conv("value", c, c, 1, 1)?,
            gate: b.conv("gate", c, c, 1, 1)?,
            u_raw: b.constant("u_raw", &[c], 0.0)?,
            options,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let (_, c, h, w) = cx.tape.value(f).dims4()?;
        let p = self.options.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("patch size {p} does not tile a {h}x{w} map")));
        }
        let decay = self.decay.forward(cx, f)?;
        let keys = self.key.forward(cx, f)?;
        let values = self.value.forward(cx, f)?;
        let (cos, sin) = rope_tables(&grid_coords(h, w), c)?;
        let keys = cx.tape.rope(keys, cos, sin)?;

        let keys = cx.tape.avgpool2d(keys, p)?;
        let values = cx.tape.avgpool2d(values, p)?;
        let mut k_tok = cx.tape.to_tokens(keys)?;
        if !self.options.raw_keys {
            k_tok = cx.tape.softplus(k_tok)?;
            k_tok = cx.tape.affine(k_tok, 1.0, KEY_FLOOR)?;
        }
        let v_tok = cx.tape.to_tokens(values)?;
        let w_tok = match self.options.mode {
            WkvMode::Adaptive => {
                let pooled = cx.tape.avgpool2d(decay, p)?;
                cx.tape.to_tokens(pooled)?
            }
            WkvMode::Static => {
                let mean = cx.tape.mean_pixels(decay)?;
                let n = cx.tape.shape(mean)[0];
                cx.tape.reshape(mean, &[n, 1, c])?
            }
        };
        let u_raw = cx.param(self.u_raw)?;
        let u = cx.tape.sigmoid(u_raw)?;
        let bonus = cx.tape.exp(u)?;
        let mixed = cx.tape.wkv(k_tok, v_tok, w_tok, bonus, WKV_EPS)?;
        let mixed = cx.tape.from_tokens(mixed, h / p, w / p)?;
        let mixed = cx.tape.upsample_nearest(mixed, p)?;

        let gate = self.gate.forward(cx, f)?;
        let gate = cx.tape.sigmoid(gate)?;
        cx.tape.mul(gate, mixed)
    }
}

/// `σ(C1x1(F)) ⊙ SReLU(C3x3(F))`.
#[derive(Clone, Debug)]
pub struct ChannelMixing {
    pub gate: Conv,
    pub local: Conv,
}

impl ChannelMixing {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(Self {
            gate: b.conv("gate", c, c, 1, 1)?,
            local: b.conv("local", c, c, 3, 1)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let g = self.gate.forward(cx, f)?;
        let g = cx.tape.sigmoid(g)?;
        let l = self.local.forward(cx, f)?;
        let l = cx.tape.srelu(l)?;
        cx.tape.mul(g, l)
    }
}

/// Decay map of a single feature map as a plain tensor (inference helper).
pub fn decay_field(cx: &mut Ctx, adm: &AdaptiveDecay, f: &Tensor) -> Result<Tensor> {
    let x = cx.tape.leaf(f.clone())?;
    let out = adm.forward(cx, x)?;
    Ok(cx.tape.value(out).clone())
}
