use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::model::{predict, stack_batch, Policy, Sample};

pub const DEFAULT_EPS: f64 = 0.05;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub predicted: Vec<f64>,
    pub max_abs_error: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    /// Mean absolute joint error over every episode and joint, radians.
    pub mean_joint_error: f64,
    pub eps: f64,
    pub refined: bool,
    pub episodes: Vec<Episode>,
    pub config_digest: String,
}

/// Scores predictions against ground truth: an episode succeeds iff every
/// joint is within `eps`.
pub fn score(predictions: &[Vec<f64>], truth: &[Vec<f64>], eps: f64) -> Result<(f64, f64, Vec<Episode>)> {
    if truth.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("success threshold must be positive, got {eps}")));
    }
    if predictions.len() != truth.len() {
        return Err(Error::dim("score", format!("{} predictions for {} episodes", predictions.len(), truth.len())));
    }
    let mut episodes = Vec::with_capacity(truth.len());
    let (mut err_sum, mut err_count, mut hits) = (0.0, 0usize, 0usize);
    for (index, (p, t)) in predictions.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::dim("score", format!("episode {index}: {} vs {} joints", p.len(), t.len())));
        }
        let errs: Vec<f64> = p.iter().zip(t).map(|(a, b)| (a - b).abs()).collect();
        let max_abs_error = errs.iter().cloned().fold(0.0, f64::max);
        err_sum += errs.iter().sum::<f64>();
        err_count += errs.len();
        let success = max_abs_error <= eps;
        hits += success as usize;
        episodes.push(Episode {
            index,
            predicted: p.clone(),
            max_abs_error,
            success,
        });
    }
    Ok((hits as f64 / truth.len() as f64, err_sum / err_count.max(1) as f64, episodes))
}

pub fn predict_all(policy: &mut dyn Policy, samples: &[Sample], gmm: Option<&GmmModel>) -> Result<Vec<Vec<f64>>> {
    let d = policy.action_dim();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = stack_batch(&refs)?;
        let y = predict(policy, &images)?;
        for row in y.data().chunks(d) {
            out.push(match gmm {
                Some(g) => g.refine_action(row)?,
                None => row.to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn evaluate(policy: &mut dyn Policy, samples: &[Sample], eps: f64, gmm: Option<&GmmModel>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let predictions = predict_all(policy, samples, gmm)?;
    let truth: Vec<Vec<f64>> = samples.iter().map(|s| s.action.clone()).collect();
    let (success_rate, mean_joint_error, episodes) = score(&predictions, &truth, eps)?;
    let mut h = Sha256::new();
    h.update(policy.kind().as_str());
    h.update(policy.config_json().to_string());
    h.update(eps.to_le_bytes());
    if let Some(g) = gmm {
        h.update(g.to_json()?);
    }
    let config_digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(EvalReport {
        success_rate,
        mean_joint_error,
        eps,
        refined: gmm.is_some(),
        episodes,
        config_digest,
    })
}
