//! The recurrent adaptive spiking network: stem, three stages of paired
//! recurrent/spiking blocks merged by guided attention, multi-scale fusion
//! and the action head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{ModelKind, Policy};
use crate::autograd::{ParamId, ParamStore, SpikeForward, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Builder, Conv, Ctx, Linear};
use crate::sdfe::{Sdfe, SpikeConfig};
use crate::spatial::{ChannelMixing, SpatialMixing, SpatialMixingOptions, WkvMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasNetConfig {
    pub height: usize,
    pub width: usize,
    /// Base channel count `C`; stages run at `C`, `2C`, `4C`.
    pub channels: usize,
    pub reduction: usize,
    /// Patch edge at stage 1; halved at each later stage (minimum 1) so
    /// every stage scans the same patch grid.
    pub patch: usize,
    pub spike: SpikeConfig,
    pub action_dim: usize,
    pub head_channels: usize,
    pub wkv_mode: WkvMode,
    pub raw_keys: bool,
    pub mask_cap: usize,
    pub seed: u64,
}

impl Default for RasNetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 32,
            reduction: 4,
            patch: 4,
            spike: SpikeConfig::default(),
            action_dim: 6,
            head_channels: 16,
            wkv_mode: WkvMode::Adaptive,
            raw_keys: false,
            mask_cap: 1024,
            seed: 0,
        }
    }
}

impl RasNetConfig {
    /// The small configuration used for full-model gradient checks.
    pub fn small() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 8,
            head_channels: 4,
            ..Self::default()
        }
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        [self.channels, 2 * self.channels, 4 * self.channels]
    }

    /// Spatial extent of the map processed inside stage `i`.
    pub fn stage_hw(&self, i: usize) -> (usize, usize) {
        (self.height / (4 << i), self.width / (4 << i))
    }

    pub fn stage_patch(&self, i: usize) -> usize {
        (self.patch >> i).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!("base channels {} must be even", self.channels)));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide base channels {}",
                self.reduction, self.channels
            )));
        }
        for i in 0..3 {
            let (h, w) = self.stage_hw(i);
            let p = self.stage_patch(i);
            if h % p != 0 || w % p != 0 {
                return Err(Error::Config(format!("patch {p} does not tile the {h}x{w} map of stage {}", i + 1)));
            }
        }
        if self.action_dim == 0 || self.head_channels == 0 || self.spike.steps == 0 || self.mask_cap == 0 {
            return Err(Error::Config("action_dim, head_channels, spike steps and mask_cap must be positive".into()));
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / √d_k + B) V` with queries from the spiking branch and
/// keys/values from the recurrent branch.
#[derive(Clone, Debug)]
pub struct GuidedAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub bias_table: ParamId,
    pub grid: (usize, usize),
}

impl GuidedAttention {
    pub fn new(b: &mut Builder, c: usize, grid: (usize, usize)) -> Result<Self> {
        let (h, w) = grid;
        Ok(Self {
            query: b.conv("query", c, c, 1, 1)?,
            key: b.conv("key", c, c, 1, 1)?,
            value: b.conv("value", c, c, 1, 1)?,
            bias_table: b.constant("relative_bias", &[(2 * h - 1) * (2 * w - 1)], 0.0)?,
            grid,
        })
    }

    pub fn attention_weights(&self, cx: &mut Ctx, q_src: Var, kv_src: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = cx.tape.value(q_src).dims4()?;
        let (_, _, kh, kw) = cx.tape.value(kv_src).dims4()?;
        if (h, w) != (kh, kw) || (h, w) != self.grid {
            return Err(Error::dim(
                "guided_attention",
                format!("query grid {h}x{w}, key grid {kh}x{kw}, bias grid {:?}", self.grid),
            ));
        }
        let q = self.query.forward(cx, q_src)?;
        let k = self.key.forward(cx, kv_src)?;
        let v = self.value.forward(cx, kv_src)?;
        let q = cx.tape.to_tokens(q)?;
        let k = cx.tape.to_tokens(k)?;
        let v = cx.tape.to_tokens(v)?;
        let logits = cx.tape.matmul(q, k, true)?;
        let logits = cx.tape.affine(logits, 1.0 / (c as f64).sqrt(), 0.0)?;
        let table = cx.param(self.bias_table)?;
        let bias = cx.tape.relative_bias(table, h, w)?;
        let logits = cx.tape.add_leading(logits, bias)?;
        let weights = cx.tape.softmax(logits)?;
        Ok((weights, v))
    }

    pub fn forward(&self, cx: &mut Ctx, q_src: Var, kv_src: Var) -> Result<Var> {
        let (h, w) = self.grid;
        let (weights, v) = self.attention_weights(cx, q_src, kv_src)?;
        let g = cx.tape.matmul(weights, v, false)?;
        cx.tape.from_tokens(g, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub spatial: SpatialMixing,
    pub channel: ChannelMixing,
    pub sdfe: Sdfe,
    pub attention: GuidedAttention,
}

impl Block {
    fn new(b: &mut Builder, c: usize, grid: (usize, usize), cfg: &RasNetConfig, patch: usize) -> Result<Self> {
        let options = SpatialMixingOptions {
            patch,
            mode: cfg.wkv_mode,
            raw_keys: cfg.raw_keys,
        };
        Ok(Self {
            spatial: SpatialMixing::new(&mut b.scope("spatial"), c, options)?,
            channel: ChannelMixing::new(&mut b.scope("channel"), c)?,
            sdfe: Sdfe::new(&mut b.scope("sdfe"), c, cfg.reduction, cfg.spike, cfg.mask_cap)?,
            attention: GuidedAttention::new(&mut b.scope("attention"), c, grid)?,
        })
    }

    /// `x + G(Q_A(x), F_C(F_S(x)))`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let fs = self.spatial.forward(cx, x)?;
        let fc = self.channel.forward(cx, fs)?;
        let qa = self.sdfe.forward(cx, x)?;
        let g = self.attention.forward(cx, qa, fc)?;
        cx.tape.add(x, g)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: [Block; 2],
    pub down: Conv,
}

impl Stage {
    /// Returns the block output at stage resolution and its stride-2 downsample.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(cx, h)?;
        }
        let down = self.down.forward(cx, h)?;
        Ok((h, down))
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl Stem {
    /// `maxpool(SReLU(BN(C3x3/2(O))))`, reducing resolution by four.
    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<Var> {
        let (_, _, h, w) = cx.tape.value(image).dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("stem input {h}x{w} must be divisible by 4")));
        }
        let x = self.conv.forward(cx, image)?;
        let x = self.norm.forward(cx, x)?;
        let x = cx.tape.srelu(x)?;
        cx.tape.maxpool2d(x, 2, 2)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj1: Conv,
    pub proj2: Conv,
    pub alpha: [ParamId; 3],
}

impl Fusion {
    /// `α₁·P(F1) + α₂·P(Up×2(F2)) + α₃·Up×4(F3)`.
    pub fn forward(&self, cx: &mut Ctx, f1: Var, f2: Var, f3: Var) -> Result<Var> {
        let a = self.proj1.forward(cx, f1)?;
        let up2 = cx.tape.upsample_bilinear(f2, 2)?;
        let b = self.proj2.forward(cx, up2)?;
        let c = cx.tape.upsample_bilinear(f3, 4)?;
        if cx.tape.shape(a) != cx.tape.shape(b) || cx.tape.shape(a) != cx.tape.shape(c) {
            return Err(Error::dim(
                "fuse_multiscale",
                format!("{:?}, {:?}, {:?}", cx.tape.shape(a), cx.tape.shape(b), cx.tape.shape(c)),
            ));
        }
        let mut terms = Vec::with_capacity(3);
        for (term, &alpha) in [a, b, c].into_iter().zip(&self.alpha) {
            let alpha = cx.param(alpha)?;
            terms.push(cx.tape.scale_by(term, alpha)?);
        }
        let sum = cx.tape.add(terms[0], terms[1])?;
        cx.tape.add(sum, terms[2])
    }
}

#[derive(Clone, Debug)]
pub struct ActionHead {
    pub conv: Conv,
    pub linear: Linear,
}

impl ActionHead {
    /// `Linear(flatten(C3x3(F_f)))`.
    pub fn forward(&self, cx: &mut Ctx, fused: Var) -> Result<Var> {
        let h = self.conv.forward(cx, fused)?;
        let n = cx.tape.shape(h)[0];
        let flat: usize = cx.tape.shape(h)[1..].iter().product();
        let h = cx.tape.reshape(h, &[n, flat])?;
        self.linear.forward(cx, h)
    }
}

/// Layer layout of the network; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RasNetLayers {
    pub stem: Stem,
    pub stages: [Stage; 3],
    pub fusion: Fusion,
    pub head: ActionHead,
}

/// Intermediate maps of one forward pass.
pub struct RasNetTrace {
    pub f0: Var,
    pub stage_outputs: [Var; 3],
    pub features: [Var; 3],
    pub fused: Var,
    pub action: Var,
}

impl RasNetLayers {
    pub fn build(cfg: &RasNetConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder::new(store, &mut rng);
        let [c1, c2, c3] = cfg.stage_channels();
        let stem = {
            let mut s = b.scope("stem");
            Stem {
                conv: s.conv_no_bias("conv", 3, c1, 3, 2)?,
                norm: s.batchnorm("bn", c1)?,
            }
        };
        let outs = [c2, c3, c3];
        let ins = [c1, c2, c3];
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let mut s = b.scope(&format!("stage{}", i + 1));
            let grid = cfg.stage_hw(i);
            let patch = cfg.stage_patch(i);
            let blocks = [
                Block::new(&mut s.scope("block0"), ins[i], grid, cfg, patch)?,
                Block::new(&mut s.scope("block1"), ins[i], grid, cfg, patch)?,
            ];
            let down = s.conv("down", ins[i], outs[i], 3, 2)?;
            stages.push(Stage { blocks, down });
        }
        let stages: [Stage; 3] = stages.try_into().expect("three stages");
        let fusion = {
            let mut s = b.scope("fusion");
            Fusion {
                proj1: s.conv("proj1", outs[0], outs[2], 1, 1)?,
                proj2: s.conv("proj2", outs[1], outs[2], 1, 1)?,
                alpha: [
                    s.constant("alpha1", &[1], 1.0)?,
                    s.constant("alpha2", &[1], 1.0)?,
                    s.constant("alpha3", &[1], 1.0)?,
                ],
            }
        };
        let (fh, fw) = (cfg.height / 8, cfg.width / 8);
        let head = {
            let mut s = b.scope("head");
            ActionHead {
                conv: s.conv("conv", outs[2], cfg.head_channels, 3, 1)?,
                linear: s.linear("linear", cfg.head_channels * fh * fw, cfg.action_dim)?,
            }
        };
        Ok(Self {
            stem,
            stages,
            fusion,
            head,
        })
    }

    pub fn forward_trace(&self, cx: &mut Ctx, image: Var) -> Result<RasNetTrace> {
        let f0 = self.stem.forward(cx, image)?;
        let mut x = f0;
        let mut outs = Vec::with_capacity(3);
        let mut feats = Vec::with_capacity(3);
        for stage in &self.stages {
            let (o, d) = stage.forward(cx, x)?;
            outs.push(o);
            feats.push(d);
            x = d;
        }
        let fused = self.fusion.forward(cx, feats[0], feats[1], feats[2])?;
        let action = self.head.forward(cx, fused)?;
        Ok(RasNetTrace {
            f0,
            stage_outputs: [outs[0], outs[1], outs[2]],
            features: [feats[0], feats[1], feats[2]],
            fused,
            action,
        })
    }
}

/// Configuration, layer layout and parameters of one network.
#[derive(Clone, Debug)]
pub struct RasNet {
    pub config: RasNetConfig,
    pub layers: RasNetLayers,
    pub store: ParamStore,
}

impl RasNet {
    pub fn new(config: RasNetConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = RasNetLayers::build(&config, &mut store)?;
        Ok(Self {
            config,
            layers,
            store,
        })
    }

    pub fn forward_trace(&mut self, tape: &mut Tape, image: Var, train: bool, spike: SpikeForward) -> Result<RasNetTrace> {
        let mut cx = Ctx {
            tape,
            store: &mut self.store,
            train,
            spike,
        };
        self.layers.forward_trace(&mut cx, image)
    }
}

impl Policy for RasNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Rasnet
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    fn forward(&mut self, tape: &mut Tape, images: Var, train: bool, spike: SpikeForward) -> Result<Var> {
        Ok(self.forward_trace(tape, images, train, spike)?.action)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }
}
