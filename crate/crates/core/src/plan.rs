//! Story plans: characters, scenes and per-scene appearance bookkeeping.
//!
//! A script is line oriented:
//!
//! ```text
//! # comments and blank lines are ignored
//! character Mira: a girl with red hair and a blue cloak
//! character Owl: a large grey owl with amber eyes
//! scene: Mira walks into the forest
//! scene [Mira, Owl]: Mira meets Owl under the oak
//! ```
//!
//! Characters must be declared before the first scene. A scene's cast is
//! either detected by exact whitespace-token occurrence of each declared name
//! in the prompt, or listed explicitly in brackets. The `new`/`old` split is
//! always derived from first occurrence in scene order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whitespace tokenization shared by the planner and the text encoder.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Half-open token range `[start, end)` inside a tokenized prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First occurrence of `needle` as a contiguous token run in `haystack`.
pub fn find_span(haystack: &[&str], needle: &[&str]) -> Option<TokenSpan> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|start| TokenSpan {
            start,
            end: start + needle.len(),
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub id: usize,
    pub name: String,
    /// Appearance description, used as the character's own prompt.
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub index: usize,
    pub prompt: String,
    pub present: BTreeSet<usize>,
    pub new: BTreeSet<usize>,
    pub old: BTreeSet<usize>,
    pub name_spans: BTreeMap<usize, TokenSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPlan {
    pub characters: Vec<CharacterSpec>,
    pub scenes: Vec<SceneSpec>,
}

impl StoryPlan {
    /// Builds a plan from declared characters and per-scene casts, deriving
    /// `new`, `old` and name spans.
    pub fn assemble(characters: Vec<CharacterSpec>, scenes: Vec<(String, BTreeSet<usize>)>) -> Result<StoryPlan> {
        if scenes.is_empty() {
            return Err(Error::EmptyScenes);
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(scenes.len());
        for (index, (prompt, present)) in scenes.into_iter().enumerate() {
            let tokens = tokenize(&prompt);
            let mut name_spans = BTreeMap::new();
            for &id in &present {
                let ch = characters
                    .get(id)
                    .ok_or_else(|| Error::Plan(format!("scene {index} references unknown character id {id}")))?;
                let span = find_span(&tokens, &tokenize(&ch.name)).ok_or_else(|| {
                    Error::Plan(format!(
                        "scene {index}: name `{}` does not occur in the prompt",
                        ch.name
                    ))
                })?;
                name_spans.insert(id, span);
            }
            let new: BTreeSet<usize> = present.difference(&seen).copied().collect();
            let old: BTreeSet<usize> = present.intersection(&seen).copied().collect();
            seen.extend(present.iter().copied());
            out.push(SceneSpec {
                index,
                prompt,
                present,
                new,
                old,
                name_spans,
            });
        }
        Ok(StoryPlan {
            characters,
            scenes: out,
        })
    }

    pub fn character(&self, id: usize) -> Option<&CharacterSpec> {
        self.characters.iter().find(|c| c.id == id)
    }

    pub fn character_by_name(&self, name: &str) -> Option<&CharacterSpec> {
        self.characters.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<StoryPlan> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ids of characters detected in `prompt`, in id order.
pub fn detect_characters(prompt: &str, characters: &[CharacterSpec]) -> BTreeSet<usize> {
    let tokens = tokenize(prompt);
    characters
        .iter()
        .filter(|c| find_span(&tokens, &tokenize(&c.name)).is_some())
        .map(|c| c.id)
        .collect()
}

fn column_of(line: &str, byte_offset: usize) -> usize {
    line[..byte_offset].chars().count() + 1
}

fn leading_ws(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Parses the line-oriented story script.
pub fn parse_script(text: &str) -> Result<StoryPlan> {
    let mut characters: Vec<CharacterSpec> = Vec::new();
    let mut scenes: Vec<(String, BTreeSet<usize>)> = Vec::new();

    for (line_idx, raw) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let indent = leading_ws(raw);
        let err = |offset: usize, message: &str| Error::Script {
            line: line_no,
            column: column_of(raw, offset),
            message: message.to_string(),
        };

        if let Some(rest) = body.strip_prefix("character") {
            if !rest.starts_with(char::is_whitespace) {
                return Err(err(indent, "expected `character <Name>: <prompt>`"));
            }
            if !scenes.is_empty() {
                return Err(err(indent, "characters must be declared before the first scene"));
            }
            let colon = rest
                .find(':')
                .ok_or_else(|| err(raw.len(), "missing `:` after character name"))?;
            let name = rest[..colon].trim();
            let prompt = rest[colon + 1..].trim();
            let colon_offset = indent + "character".len() + colon;
            if name.is_empty() {
                return Err(err(colon_offset, "empty character name"));
            }
            if prompt.is_empty() {
                return Err(err(colon_offset + 1, "empty character prompt"));
            }
            let name = tokenize(name).join(" ");
            if characters.iter().any(|c| c.name == name) {
                return Err(Error::DuplicateCharacter { name, line: line_no });
            }
            characters.push(CharacterSpec {
                id: characters.len(),
                name,
                prompt: prompt.to_string(),
            });
        } else if let Some(rest) = body.strip_prefix("scene") {
            let after_kw = indent + "scene".len();
            let trimmed = rest.trim_start();
            let mut offset = after_kw + (rest.len() - trimmed.len());
            let mut cast: Option<BTreeSet<usize>> = None;
            let mut rest = trimmed;
            if let Some(inner) = rest.strip_prefix('[') {
                let close = inner.find(']').ok_or_else(|| err(offset, "unterminated cast list"))?;
                let mut ids = BTreeSet::new();
                let mut item_offset = offset + 1;
                for item in inner[..close].split(',') {
                    let name = tokenize(item).join(" ");
                    let col_off = item_offset + leading_ws(item);
                    item_offset += item.len() + 1;
                    if name.is_empty() {
                        return Err(err(col_off, "empty name in cast list"));
                    }
                    let ch = characters
                        .iter()
                        .find(|c| c.name == name)
                        .ok_or_else(|| Error::UnknownCharacter {
                            name: name.clone(),
                            line: line_no,
                            column: column_of(raw, col_off),
                        })?;
                    ids.insert(ch.id);
                }
                cast = Some(ids);
                let after = &inner[close + 1..];
                let t = after.trim_start();
                offset += 1 + close + 1 + (after.len() - t.len());
                rest = t;
            }
            let Some(prompt) = rest.strip_prefix(':') else {
                return Err(err(offset, "expected `:` after `scene`"));
            };
            let prompt = prompt.trim();
            if prompt.is_empty() {
                return Err(err(offset + 1, "empty scene prompt"));
            }
            let present = match cast {
                Some(ids) => {
                    let tokens = tokenize(prompt);
                    for &id in &ids {
                        if find_span(&tokens, &tokenize(&characters[id].name)).is_none() {
                            return Err(err(
                                offset + 1,
                                &format!(
                                    "cast member `{}` does not occur in the scene prompt",
                                    characters[id].name
                                ),
                            ));
                        }
                    }
                    ids
                }
                None => detect_characters(prompt, &characters),
            };
            scenes.push((prompt.to_string(), present));
        } else {
            return Err(err(indent, "expected `character` or `scene`"));
        }
    }

    StoryPlan::assemble(characters, scenes)
}

/// One violated plan invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub scene: Option<usize>,
    pub character: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.scene, self.character) {
            (Some(s), Some(c)) => write!(f, "scene {s}, character {c}: {}", self.message),
            (Some(s), None) => write!(f, "scene {s}: {}", self.message),
            (None, Some(c)) => write!(f, "character {c}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

/// Checks every plan invariant; an empty result means the plan is valid.
pub fn validate_plan(plan: &StoryPlan) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |scene, character, message: String| {
        out.push(Diagnostic {
            scene,
            character,
            message,
        })
    };

    let mut ids = BTreeSet::new();
    for c in &plan.characters {
        if !ids.insert(c.id) {
            push(None, Some(c.id), "duplicate character id".into());
        }
    }
    if !ids.iter().copied().eq(0..ids.len()) {
        push(
            None,
            None,
            format!("character ids {ids:?} are not dense 0..{}", ids.len()),
        );
    }
    let mut names = HashSet::new();
    for c in &plan.characters {
        if c.name.trim().is_empty() {
            push(None, Some(c.id), "empty name".into());
        } else if !names.insert(c.name.as_str()) {
            push(None, Some(c.id), format!("duplicate name `{}`", c.name));
        }
        if c.prompt.trim().is_empty() {
            push(None, Some(c.id), "empty prompt".into());
        }
    }
    if plan.scenes.is_empty() {
        push(None, None, "plan has no scenes".into());
    }

    let mut seen: BTreeSet<usize> = BTreeSet::new();
    for (pos, s) in plan.scenes.iter().enumerate() {
        let sc = Some(pos);
        if s.index != pos {
            push(sc, None, format!("scene index {} at position {pos}", s.index));
        }
        if s.prompt.trim().is_empty() {
            push(sc, None, "empty prompt".into());
        }
        let tokens = tokenize(&s.prompt);
        let mentioned: BTreeSet<usize> = s.present.iter().chain(&s.new).chain(&s.old).copied().collect();
        for &id in &mentioned {
            let Some(ch) = plan.character(id) else {
                push(sc, Some(id), "unknown character id".into());
                continue;
            };
            let (in_new, in_old, present) = (s.new.contains(&id), s.old.contains(&id), s.present.contains(&id));
            let first = !seen.contains(&id);
            if in_new && in_old {
                push(sc, Some(id), "listed as both new and old".into());
            } else if !present {
                push(sc, Some(id), "listed as new/old but not present".into());
            } else if !in_new && !in_old {
                push(sc, Some(id), "present but neither new nor old".into());
            } else if in_new && !first {
                push(sc, Some(id), "marked new but appeared in an earlier scene".into());
            } else if in_old && first {
                push(sc, Some(id), "marked old at its first appearance".into());
            }
            if present {
                match s.name_spans.get(&id) {
                    None => push(sc, Some(id), "missing name span".into()),
                    Some(span) => {
                        let want = tokenize(&ch.name);
                        let ok =
                            span.end <= tokens.len() && !span.is_empty() && tokens[span.start..span.end] == want[..];
                        if !ok {
                            push(sc, Some(id), format!("name span {span:?} does not spell `{}`", ch.name));
                        }
                    }
                }
            }
        }
        for id in s.name_spans.keys() {
            if !s.present.contains(id) {
                push(sc, Some(*id), "name span for a character not present".into());
            }
        }
        seen.extend(s.present.iter().copied());
    }
    out
}
