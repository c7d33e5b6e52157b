//! Instruction to executed actions: plan skills, run each skill's policy on
//! the observation, refine with the skill's mixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::io::read_json;
use crate::lgss::{plan, ActionPlan, ContextSet, Interpreter, SceneObservation, Skill};
use crate::model::{checkpoint, predict, Policy};
use crate::tensor::Tensor;

pub const REGISTRY_VERSION: u32 = 1;

/// `skills.json`: checkpoint (and optional mixture) per skill. Relative
/// paths resolve against the registry file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillRegistry {
    pub version: u32,
    pub skills: BTreeMap<Skill, PathBuf>,
    #[serde(default)]
    pub gmm: BTreeMap<Skill, PathBuf>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl SkillRegistry {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reg: Self = read_json(path)?;
        if reg.version != REGISTRY_VERSION {
            return Err(Error::Input(format!("unsupported skill registry version {}", reg.version)));
        }
        reg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(reg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn checkpoint_for(&self, skill: Skill) -> Result<PathBuf> {
        self.skills
            .get(&skill)
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::SkillModelMissing(skill.name().into()))
    }

    pub fn gmm_for(&self, skill: Skill) -> Option<PathBuf> {
        self.gmm.get(&skill).map(|p| self.resolve(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub skill: Skill,
    pub target: String,
    pub a_in: Vec<f64>,
    pub a_star: Vec<f64>,
    /// Distance to the chosen component, when a mixture was applied.
    pub min_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub instruction: String,
    pub plan: ActionPlan,
    pub steps: Vec<TraceStep>,
}

pub struct PipelineInputs<'a> {
    pub instruction: &'a str,
    pub scene: &'a SceneObservation,
    /// Observation fed to every skill policy, `[3, H, W]`.
    pub observation: &'a Tensor,
    pub context: &'a ContextSet,
    pub interpreter: &'a dyn Interpreter,
    pub use_gmm: bool,
}

/// Loads the scene's image as the policy observation.
pub fn load_observation(scene: &SceneObservation, scene_path: &Path) -> Result<Tensor> {
    if scene.image.is_empty() {
        return Err(Error::Input("scene has no image to observe".into()));
    }
    let mut path = PathBuf::from(&scene.image);
    if path.is_relative() {
        if let Some(dir) = scene_path.parent() {
            path = dir.join(path);
        }
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(RgbImage::decode(&bytes)?.to_tensor())
}

pub fn run_inference_pipeline(inputs: &PipelineInputs, registry: &SkillRegistry) -> Result<ExecutionTrace> {
    let plan = plan(inputs.instruction, inputs.scene, inputs.context, inputs.interpreter)?;
    // Fail before any inference when a planned skill has no model.
    for step in &plan.steps {
        registry.checkpoint_for(step.skill)?;
    }
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(inputs.observation.shape());
    let batch = inputs.observation.clone().reshape(&batch_shape)?;
    let mut cache: BTreeMap<Skill, (Box<dyn Policy>, Option<GmmModel>)> = BTreeMap::new();
    let mut steps = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        if !cache.contains_key(&step.skill) {
            let policy = checkpoint::load(&registry.checkpoint_for(step.skill)?)?;
            let gmm = match registry.gmm_for(step.skill).filter(|_| inputs.use_gmm) {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    Some(GmmModel::from_json(&text)?)
                }
                None => None,
            };
            cache.insert(step.skill, (policy, gmm));
        }
        let (policy, gmm) = cache.get_mut(&step.skill).expect("inserted above");
        let a_in = predict(policy.as_mut(), &batch)?.into_data();
        let (a_star, min_distance) = match gmm {
            Some(g) => {
                let a_star = g.refine_action(&a_in)?;
                let sub: Vec<f64> = g.omega.iter().map(|&i| a_in[i]).collect();
                (a_star, Some(g.nearest(&sub)?.1))
            }
            None => (a_in.clone(), None),
        };
        steps.push(TraceStep {
            skill: step.skill,
            target: step.target.clone(),
            a_in,
            a_star,
            min_distance,
        });
    }
    Ok(ExecutionTrace {
        instruction: inputs.instruction.to_string(),
        plan,
        steps,
    })
}
