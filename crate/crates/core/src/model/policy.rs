use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, SpikeForward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rasnet,
    Cnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Rasnet => "rasnet",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rasnet" => Ok(ModelKind::Rasnet),
            "cnn" | "cnn_baseline" => Ok(ModelKind::Cnn),
            other => Err(Error::Config(format!("unknown model {other:?} (expected rasnet or cnn)"))),
        }
    }
}

/// An image-to-action regressor trained by the shared loop.
pub trait Policy {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn input_hw(&self) -> (usize, usize);
    fn action_dim(&self) -> usize;
    /// Maps `[N, 3, H, W]` images to `[N, d]` actions.
    fn forward(&mut self, tape: &mut Tape, images: Var, train: bool, spike: SpikeForward) -> Result<Var>;
    fn config_json(&self) -> serde_json::Value;

    fn param_count(&self) -> usize {
        self.store().trainable_count()
    }
}

/// Eval-mode forward pass on a batch of images.
pub fn predict(policy: &mut dyn Policy, images: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4()?;
    if c != 3 || (h, w) != policy.input_hw() {
        return Err(Error::dim(
            "predict",
            format!("expected [N, 3, {:?}], got {:?}", policy.input_hw(), images.shape()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone())?;
    let y = policy.forward(&mut tape, x, false, SpikeForward::Binary)?;
    Ok(tape.value(y).clone())
}
