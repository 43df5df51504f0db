//! Story planning through an external language-model endpoint.
//!
//! The endpoint receives the storyline, rendered instructions and the JSON
//! schema of the expected answer, and replies with a plan-shaped document.
//! Appearance bookkeeping in the reply is never trusted: the cast is checked
//! against name occurrences and `new`/`old` are recomputed locally.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{detect_characters, validate_plan, CharacterSpec, StoryPlan};

pub const URL_ENV: &str = "ISOSTORY_LLM_URL";
pub const TOKEN_ENV: &str = "ISOSTORY_LLM_TOKEN";

/// Default instructions; `{storyline}` is replaced by the user's storyline.
pub const DEFAULT_TEMPLATE: &str = "Refine the storyline below into a short illustrated story. \
Split it into scenes. For every recurring character write one appearance prompt, \
and write every scene prompt so that it mentions each character in it by exact name. \
Answer with a single JSON document matching the response schema.\n\nStoryline: {storyline}";

#[derive(Debug, Clone, Serialize)]
pub struct PlanRequest {
    pub storyline: String,
    pub instructions: String,
    pub response_schema: serde_json::Value,
}

/// Anything that can answer a [`PlanRequest`] with raw response text.
pub trait LlmEndpoint {
    fn complete(&self, request: &PlanRequest) -> Result<String>;
}

/// Blocking HTTP client: one `POST` of the request as JSON per call.
pub struct HttpEndpoint {
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            token,
            client,
        })
    }

    /// Reads the endpoint URL (unless given) and token from the environment.
    pub fn from_env(url: Option<String>, timeout: Duration) -> Result<Self> {
        let url = match url {
            Some(u) => u,
            None => std::env::var(URL_ENV)
                .map_err(|_| Error::Config(format!("no endpoint configured and {URL_ENV} unset")))?,
        };
        Self::new(url, std::env::var(TOKEN_ENV).ok(), timeout)
    }
}

impl LlmEndpoint for HttpEndpoint {
    fn complete(&self, request: &PlanRequest) -> Result<String> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Endpoint(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Error::Endpoint(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Endpoint(format!("status {status}: {body}")));
        }
        Ok(body)
    }
}

#[derive(Debug, Deserialize)]
struct ResponseCharacter {
    #[serde(default)]
    id: Option<usize>,
    name: String,
    prompt: String,
}

#[derive(Debug, Deserialize)]
struct ResponseScene {
    prompt: String,
    #[serde(default)]
    present: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
struct ResponsePlan {
    characters: Vec<ResponseCharacter>,
    scenes: Vec<ResponseScene>,
}

pub fn response_schema() -> serde_json::Value {
    serde_json::json!({
        "type": "object",
        "required": ["characters", "scenes"],
        "properties": {
            "characters": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["id", "name", "prompt"],
                    "properties": {
                        "id": {"type": "integer", "minimum": 0},
                        "name": {"type": "string"},
                        "prompt": {"type": "string"}
                    }
                }
            },
            "scenes": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["prompt", "present"],
                    "properties": {
                        "prompt": {"type": "string"},
                        "present": {"type": "array", "items": {"type": "integer"}},
                        "new": {"type": "array", "items": {"type": "integer"}},
                        "old": {"type": "array", "items": {"type": "integer"}}
                    }
                }
            }
        }
    })
}

/// The outermost `{ ... }` of a reply, tolerating surrounding prose or fences.
fn json_payload(text: &str) -> Result<&str> {
    let start = text.find('{');
    let end = text.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => Ok(&text[s..=e]),
        _ => Err(Error::Response("no JSON object in response".into())),
    }
}

/// Parses an endpoint reply into a validated plan.
pub fn plan_from_response(text: &str) -> Result<StoryPlan> {
    let parsed: ResponsePlan =
        serde_json::from_str(json_payload(text)?).map_err(|e| Error::Response(format!("schema violation: {e}")))?;
    if parsed.scenes.is_empty() {
        return Err(Error::Response("no scenes".into()));
    }

    let mut remap = BTreeMap::new();
    let mut characters = Vec::with_capacity(parsed.characters.len());
    for (pos, c) in parsed.characters.into_iter().enumerate() {
        let name = c.name.split_whitespace().collect::<Vec<_>>().join(" ");
        if name.is_empty() || c.prompt.trim().is_empty() {
            return Err(Error::Response(format!("character {pos} has an empty name or prompt")));
        }
        if characters.iter().any(|x: &CharacterSpec| x.name == name) {
            return Err(Error::Response(format!("duplicate character name `{name}`")));
        }
        if remap.insert(c.id.unwrap_or(pos), pos).is_some() {
            return Err(Error::Response(format!(
                "duplicate character id {}",
                c.id.unwrap_or(pos)
            )));
        }
        characters.push(CharacterSpec {
            id: pos,
            name,
            prompt: c.prompt.trim().to_string(),
        });
    }

    let mut scenes = Vec::with_capacity(parsed.scenes.len());
    for (index, s) in parsed.scenes.into_iter().enumerate() {
        let prompt = s.prompt.trim().to_string();
        if prompt.is_empty() {
            return Err(Error::Response(format!("scene {index} has an empty prompt")));
        }
        let detected = detect_characters(&prompt, &characters);
        let present: BTreeSet<usize> = match s.present {
            None => detected,
            Some(claimed) => {
                let mut ids = BTreeSet::new();
                for raw in claimed {
                    let id = *remap
                        .get(&raw)
                        .ok_or_else(|| Error::Response(format!("scene {index} lists unknown character {raw}")))?;
                    if !detected.contains(&id) {
                        return Err(Error::Plan(format!(
                            "scene {index} lists `{}` but the prompt never names it",
                            characters[id].name
                        )));
                    }
                    ids.insert(id);
                }
                ids
            }
        };
        scenes.push((prompt, present));
    }

    let plan = StoryPlan::assemble(characters, scenes)?;
    let diagnostics = validate_plan(&plan);
    if let Some(d) = diagnostics.first() {
        return Err(Error::Plan(d.to_string()));
    }
    Ok(plan)
}

/// Asks the endpoint to decompose `storyline` and validates the answer.
pub fn plan_with_llm(storyline: &str, endpoint: &dyn LlmEndpoint, template: &str) -> Result<StoryPlan> {
    let storyline = storyline.trim();
    if storyline.is_empty() {
        return Err(Error::Invalid("empty storyline".into()));
    }
    let request = PlanRequest {
        storyline: storyline.to_string(),
        instructions: template.replace("{storyline}", storyline),
        response_schema: response_schema(),
    };
    let reply = endpoint.complete(&request)?;
    plan_from_response(&reply)
}
