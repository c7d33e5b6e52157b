//! Skill selection from an instruction and scene geometry.

mod planner;
mod remote;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use planner::{plan, tokens, ContextSet, Exemplar, ExemplarStep, Interpreter, RuleEngine, DEFAULT_CONTEXT};
pub use remote::{build_prompt, RemoteInterpreter, RemoteOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    SideGrasp,
    LiftUp,
    TopPinch,
    PourWater,
    Delivery,
}

impl Skill {
    pub const ALL: [Skill; 5] = [Skill::SideGrasp, Skill::LiftUp, Skill::TopPinch, Skill::PourWater, Skill::Delivery];

    pub fn name(self) -> &'static str {
        match self {
            Skill::SideGrasp => "SideGrasp",
            Skill::LiftUp => "LiftUp",
            Skill::TopPinch => "TopPinch",
            Skill::PourWater => "PourWater",
            Skill::Delivery => "Delivery",
        }
    }

    pub fn is_grasp(self) -> bool {
        matches!(self, Skill::SideGrasp | Skill::LiftUp | Skill::TopPinch)
    }
}

impl std::fmt::Display for Skill {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeCategory {
    Cylindrical,
    Crushed,
    ThinFlat,
    Box,
    Irregular,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; 5] = [
        ShapeCategory::Cylindrical,
        ShapeCategory::Crushed,
        ShapeCategory::ThinFlat,
        ShapeCategory::Box,
        ShapeCategory::Irregular,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    pub category: ShapeCategory,
    #[serde(default = "unit")]
    pub aspect: f64,
    #[serde(default)]
    pub area_frac: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = BBox {
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            x2: self.x2.min(other.x2),
            y2: self.y2.min(other.y2),
        }
        .area();
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn validate(&self, width: f64, height: f64) -> std::result::Result<(), String> {
        let ok = 0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= width && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= height;
        if ok {
            Ok(())
        } else {
            Err(format!("box {:?} violates 0 <= x1 < x2 <= {width}, 0 <= y1 < y2 <= {height}", <[f64; 4]>::from(*self)))
        }
    }

    pub fn render(&self) -> String {
        format!("[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub bbox: BBox,
    pub shape: ShapeDescriptor,
    pub lateral_clearance: bool,
    pub top_clearance: bool,
}

fn default_width() -> usize {
    640
}

fn default_height() -> usize {
    480
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    #[serde(default)]
    pub image: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneObservation {
    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            o.bbox
                .validate(self.width as f64, self.height as f64)
                .map_err(|e| Error::Input(format!("object {:?}: {e}", o.label)))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub skill: Skill,
    pub target: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub steps: Vec<PlanStep>,
    pub response: String,
}

impl ActionPlan {
    pub fn skills(&self) -> Vec<Skill> {
        self.steps.iter().map(|s| s.skill).collect()
    }
}

/// Shape category decides first, clearance second. A target with neither
/// lateral nor top clearance has no collision-free skill.
pub fn select_skill(shape: ShapeCategory, lateral_clearance: bool, top_clearance: bool) -> Option<Skill> {
    use ShapeCategory::*;
    if !lateral_clearance && !top_clearance {
        return None;
    }
    Some(match shape {
        Cylindrical if lateral_clearance => Skill::SideGrasp,
        Cylindrical => Skill::LiftUp,
        Crushed | ThinFlat | Irregular => Skill::TopPinch,
        Box if top_clearance => Skill::LiftUp,
        Box => Skill::SideGrasp,
    })
}

pub fn select_skill_for(object: &SceneObject) -> Result<Skill> {
    select_skill(object.shape.category, object.lateral_clearance, object.top_clearance)
        .ok_or_else(|| Error::NoFeasibleSkill(object.label.clone()))
}

/// `acc = acc_s × acc_t`.
pub fn compute_accuracy(acc_s: f64, acc_t: f64) -> Result<f64> {
    for (name, v) in [("acc_s", acc_s), ("acc_t", acc_t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok(acc_s * acc_t)
}

/// First bracketed group of exactly four numbers, checked against the
/// image bounds.
pub fn parse_bbox(text: &str, width: f64, height: f64) -> Result<BBox> {
    let err = |reason: String| Error::Parse {
        reason,
        text: text.to_string(),
    };
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let inner = &after[..close];
        let nums: Vec<Option<f64>> = inner.split(',').map(|p| p.trim().parse::<f64>().ok()).collect();
        if nums.len() == 4 && nums.iter().all(|n| n.is_some_and(f64::is_finite)) {
            let v: Vec<f64> = nums.into_iter().flatten().collect();
            let b = BBox::from([v[0], v[1], v[2], v[3]]);
            b.validate(width, height).map_err(err)?;
            return Ok(b);
        }
        rest = &after[close + 1..];
    }
    Err(err("no bracketed [x1, y1, x2, y2] tuple found".into()))
}
