//! HTTP client for an external vision-language interpreter.

use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::planner::{ContextSet, Interpreter};
use super::{parse_bbox, SceneObservation, Skill};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteOptions {
    pub timeout_secs: f64,
    pub retries: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout_secs: 10.0,
            retries: 2,
        }
    }
}

#[derive(Serialize)]
struct QueryBody<'a> {
    prompt: &'a str,
    image_b64: &'a str,
}

#[derive(Deserialize)]
struct QueryReply {
    text: String,
}

/// Asks the endpoint for the target's bounding box and maps it to the
/// best-overlapping scene object. Requests to one client are serialised.
pub struct RemoteInterpreter {
    endpoint: String,
    options: RemoteOptions,
    agent: ureq::Agent,
    context: ContextSet,
    lock: Mutex<()>,
}

pub fn build_prompt(instruction: &str, scene: &SceneObservation, context: &ContextSet) -> String {
    let mut p = String::new();
    p.push_str("You control a robot arm with the skills: ");
    p.push_str(&Skill::ALL.map(|s| s.name()).join(", "));
    p.push_str(".\nLocate the object the user refers to and reply with its bounding box as [x1, y1, x2, y2] in pixels.\n");
    for e in &context.exemplars {
        let plan: Vec<String> = e.plan.iter().map(|s| format!("{}({})", s.skill, s.object)).collect();
        p.push_str(&format!("Example: \"{}\" with {:?} -> {}\n", e.instruction, e.objects, plan.join(" > ")));
    }
    let labels: Vec<&str> = scene.objects.iter().map(|o| o.label.as_str()).collect();
    p.push_str(&format!("Image size: {}x{}. Visible objects: {:?}.\n", scene.width, scene.height, labels));
    p.push_str(&format!("Instruction: \"{instruction}\""));
    p
}

impl RemoteInterpreter {
    pub fn new(endpoint: &str, options: RemoteOptions, context: ContextSet) -> Result<Self> {
        if !(options.timeout_secs > 0.0) {
            return Err(Error::Config("remote timeout must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(options.timeout_secs))
            .build();
        Ok(Self {
            endpoint: endpoint.to_string(),
            options,
            agent,
            context,
            lock: Mutex::new(()),
        })
    }

    fn attempt(&self, prompt: &str, image_b64: &str) -> std::result::Result<String, String> {
        let response = self
            .agent
            .post(&self.endpoint)
            .send_json(QueryBody { prompt, image_b64 })
            .map_err(|e| e.to_string())?;
        let reply: QueryReply = response.into_json().map_err(|e| format!("malformed reply: {e}"))?;
        Ok(reply.text)
    }

    /// Sends one query, retrying failed attempts.
    pub fn query(&self, prompt: &str, image: &[u8]) -> Result<String> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let encoded = base64::engine::general_purpose::STANDARD.encode(image);
        let mut last = String::new();
        for _ in 0..=self.options.retries {
            match self.attempt(prompt, &encoded) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(Error::InterpreterUnavailable(format!("{}: {last}", self.endpoint)))
    }
}

impl Interpreter for RemoteInterpreter {
    fn locate(&self, instruction: &str, scene: &SceneObservation) -> Result<usize> {
        let image = if scene.image.is_empty() {
            Vec::new()
        } else {
            std::fs::read(&scene.image).unwrap_or_default()
        };
        let text = self.query(&build_prompt(instruction, scene, &self.context), &image)?;
        let bbox = parse_bbox(&text, scene.width as f64, scene.height as f64)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in scene.objects.iter().enumerate() {
            let iou = o.bbox.iou(&bbox);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        best.map(|(i, _)| i).ok_or_else(|| Error::TargetNotFound(instruction.to_string()))
    }
}
