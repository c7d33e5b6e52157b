use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{select_skill_for, ActionPlan, PlanStep, SceneObservation, Skill};
use crate::error::{Error, Result};

/// Bundled exemplar set.
pub const DEFAULT_CONTEXT: &str = include_str!("default_context.json");

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "me", "my", "i", "to", "of", "for", "some", "please", "and", "it", "can", "you", "could", "would", "with",
];
const HANDOVER_VERBS: &[&str] = &["give", "want", "pass"];
/// Minimum token overlap for an exemplar to act as a template.
const TEMPLATE_MATCH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStep {
    pub skill: Skill,
    /// Label (or label fragment) of the object the step acts on.
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub instruction: String,
    pub objects: Vec<String>,
    pub plan: Vec<ExemplarStep>,
}

impl Exemplar {
    fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() || self.plan.is_empty() {
            return Err(Error::Input("exemplar needs an instruction and a non-empty plan".into()));
        }
        for step in &self.plan {
            if !self.objects.iter().any(|o| o.eq_ignore_ascii_case(&step.object)) {
                return Err(Error::Input(format!(
                    "exemplar {:?} acts on {:?}, which is not among its objects",
                    self.instruction, step.object
                )));
            }
        }
        Ok(())
    }

    /// Multi-object or pouring plans are expanded as templates; single
    /// grasps go through the rule table instead.
    fn is_long_horizon(&self) -> bool {
        let objects: BTreeSet<String> = self.plan.iter().map(|s| s.object.to_lowercase()).collect();
        objects.len() > 1 || self.plan.iter().any(|s| s.skill == Skill::PourWater)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextSet {
    pub exemplars: Vec<Exemplar>,
}

impl ContextSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let ctx: Self = serde_json::from_str(text)?;
        for e in &ctx.exemplars {
            e.validate()?;
        }
        Ok(ctx)
    }

    pub fn bundled() -> Self {
        Self::from_json(DEFAULT_CONTEXT).expect("bundled context is valid")
    }

    /// Best exemplar by token Jaccard similarity; earlier exemplars win ties.
    pub fn best_match(&self, instruction: &str) -> Option<(&Exemplar, f64)> {
        let query = tokens(instruction);
        let mut best: Option<(&Exemplar, f64)> = None;
        for e in &self.exemplars {
            let t = tokens(&e.instruction);
            let inter = query.intersection(&t).count() as f64;
            let union = query.union(&t).count() as f64;
            let sim = if union > 0.0 { inter / union } else { 0.0 };
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((e, sim));
            }
        }
        best
    }
}

/// Lower-cased alphanumeric words minus filler words.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Resolves which scene object an instruction refers to.
pub trait Interpreter {
    fn locate(&self, instruction: &str, scene: &SceneObservation) -> Result<usize>;
}

/// Label matching: an object whose label appears in the instruction, the
/// longest label winning and scene order breaking ties.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleEngine;

impl Interpreter for RuleEngine {
    fn locate(&self, instruction: &str, scene: &SceneObservation) -> Result<usize> {
        find_object(&instruction.to_lowercase(), scene).ok_or_else(|| Error::TargetNotFound(instruction.to_string()))
    }
}

fn find_object(text_lower: &str, scene: &SceneObservation) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        let label = o.label.to_lowercase();
        if !label.is_empty() && text_lower.contains(&label) && best.is_none_or(|(_, len)| label.len() > len) {
            best = Some((i, label.len()));
        }
    }
    best.map(|(i, _)| i)
}

/// Scene object for an exemplar object name: exact label first, then a
/// label containing the name.
fn find_by_role(role: &str, scene: &SceneObservation) -> Option<usize> {
    let role = role.to_lowercase();
    scene
        .objects
        .iter()
        .position(|o| o.label.to_lowercase() == role)
        .or_else(|| scene.objects.iter().position(|o| o.label.to_lowercase().contains(&role)))
}

fn response_text(steps: &[PlanStep]) -> String {
    let parts: Vec<String> = steps.iter().map(|s| format!("{} the {}", s.skill, s.target)).collect();
    parts.join(", then ")
}

/// Builds the skill sequence for an instruction.
pub fn plan(instruction: &str, scene: &SceneObservation, context: &ContextSet, interpreter: &dyn Interpreter) -> Result<ActionPlan> {
    if instruction.trim().is_empty() {
        return Err(Error::Input("instruction is empty".into()));
    }
    scene.validate()?;
    let mut steps = Vec::new();
    let template = context
        .best_match(instruction)
        .filter(|(e, sim)| *sim >= TEMPLATE_MATCH && e.is_long_horizon());
    if let Some((exemplar, _)) = template {
        for step in &exemplar.plan {
            let idx = find_by_role(&step.object, scene).ok_or_else(|| Error::TargetNotFound(step.object.clone()))?;
            let object = &scene.objects[idx];
            let skill = if step.skill.is_grasp() { select_skill_for(object)? } else { step.skill };
            steps.push(PlanStep {
                skill,
                target: object.label.clone(),
                bbox: object.bbox,
            });
        }
    } else {
        let idx = interpreter.locate(instruction, scene)?;
        let object = scene
            .objects
            .get(idx)
            .ok_or_else(|| Error::TargetNotFound(instruction.to_string()))?;
        let skill = select_skill_for(object)?;
        steps.push(PlanStep {
            skill,
            target: object.label.clone(),
            bbox: object.bbox,
        });
        let words = tokens(instruction);
        if HANDOVER_VERBS.iter().any(|v| words.contains(*v)) {
            steps.push(PlanStep {
                skill: Skill::Delivery,
                target: object.label.clone(),
                bbox: object.bbox,
            });
        }
    }
    Ok(ActionPlan {
        response: response_text(&steps),
        steps,
    })
}
