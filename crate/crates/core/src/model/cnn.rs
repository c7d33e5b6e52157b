//! Plain convolutional regressor used as the data-efficiency comparator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{ModelKind, Policy};
use super::rasnet::RasNetConfig;
use super::RasNet;
use crate::autograd::{ParamStore, SpikeForward, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Builder, Conv, Ctx, Linear};

/// Allowed relative distance between the baseline's and the reference
/// network's parameter counts.
pub const BUDGET_TOLERANCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the first block; later blocks use 2x, 4x, 8x.
    pub base_width: usize,
    pub action_dim: usize,
    pub seed: u64,
    /// Trainable parameter count the baseline must match.
    pub param_budget: Option<usize>,
}

impl CnnConfig {
    pub fn param_count(&self) -> usize {
        let w = self.base_width;
        let widths = [3, w, 2 * w, 4 * w, 8 * w];
        let mut total = 0;
        for pair in widths.windows(2) {
            // conv weight + bias, batchnorm gamma + beta
            total += pair[0] * pair[1] * 9 + 3 * pair[1];
        }
        let flat = 8 * w * (self.height / 16) * (self.width / 16);
        total + flat * self.action_dim + self.action_dim
    }

    /// Picks the base width whose parameter count is closest to the given
    /// RASNet configuration's.
    pub fn matched_to(reference: &RasNetConfig) -> Result<Self> {
        let budget = RasNet::new(reference.clone())?.param_count();
        let mut cfg = Self {
            height: reference.height,
            width: reference.width,
            base_width: 1,
            action_dim: reference.action_dim,
            seed: reference.seed,
            param_budget: Some(budget),
        };
        let mut best = (usize::MAX, 1);
        for w in 1..=4096 {
            cfg.base_width = w;
            let count = cfg.param_count();
            let gap = count.abs_diff(budget);
            if gap < best.0 {
                best = (gap, w);
            }
            if count > budget {
                break;
            }
        }
        cfg.base_width = best.1;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "baseline input {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.base_width == 0 || self.action_dim == 0 {
            return Err(Error::Config("base_width and action_dim must be positive".into()));
        }
        if let Some(budget) = self.param_budget {
            let count = self.param_count();
            let rel = (count as f64 - budget as f64).abs() / budget as f64;
            if rel > BUDGET_TOLERANCE {
                return Err(Error::Config(format!(
                    "baseline has {count} parameters, outside ±10% of the budget {budget}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CnnBaseline {
    pub config: CnnConfig,
    convs: Vec<Conv>,
    norms: Vec<BatchNorm>,
    head: Linear,
    store: ParamStore,
}

impl CnnBaseline {
    pub fn new(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let w = config.base_width;
        let widths = [3, w, 2 * w, 4 * w, 8 * w];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let mut s = b.scope(&format!("block{}", i + 1));
            convs.push(s.conv("conv", pair[0], pair[1], 3, 2)?);
            norms.push(s.batchnorm("bn", pair[1])?);
        }
        let flat = 8 * w * (config.height / 16) * (config.width / 16);
        let head = b.scope("head").linear("linear", flat, config.action_dim)?;
        debug_assert_eq!(store.trainable_count(), config.param_count());
        Ok(Self {
            config,
            convs,
            norms,
            head,
            store,
        })
    }
}

impl Policy for CnnBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
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
        let mut cx = Ctx {
            tape,
            store: &mut self.store,
            train,
            spike,
        };
        let mut x = images;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(&mut cx, x)?;
            x = norm.forward(&mut cx, x)?;
            x = cx.tape.srelu(x)?;
        }
        let n = cx.tape.shape(x)[0];
        let flat: usize = cx.tape.shape(x)[1..].iter().product();
        let x = cx.tape.reshape(x, &[n, flat])?;
        self.head.forward(&mut cx, x)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }
}
