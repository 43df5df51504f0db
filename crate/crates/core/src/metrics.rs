//! Masked-feature consistency of recurring characters and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::pipeline::{Pipeline, PipelineConfig, SceneResult};
use crate::plan::StoryPlan;
use crate::tensor::Matrix;

fn usable(mask: Option<&CharacterMask>) -> Option<&CharacterMask> {
    mask.filter(|m| !m.degenerate && m.popcount() > 0)
}

/// Mean of the latent rows selected by `mask`, in f64.
pub fn pooled_features(latent: &Matrix, mask: &CharacterMask) -> Result<Vec<f64>> {
    if mask.bits.len() != latent.rows() {
        return Err(Error::shape(
            "pooled_features",
            format!("mask of {} cells for {} rows", mask.bits.len(), latent.rows()),
        ));
    }
    let positions = mask.positions();
    if mask.degenerate || positions.is_empty() {
        return Err(Error::DegenerateReference {
            character: mask.character,
        });
    }
    let mut acc = vec![0.0f64; latent.cols()];
    for &r in &positions {
        for (a, &v) in acc.iter_mut().zip(latent.row(r)) {
            *a += v as f64;
        }
    }
    let n = positions.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("zero-norm pooled feature vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the character's mean-pooled masked latent rows.
pub fn masked_feature_similarity(a: &SceneResult, b: &SceneResult, character: usize) -> Result<f64> {
    let pooled = |r: &SceneResult| -> Result<Vec<f64>> {
        let mask = usable(r.masks.get(&character))
            .ok_or_else(|| Error::Invalid(format!("character {character} has no usable mask in scene {}", r.scene)))?;
        pooled_features(&r.latent, mask)
    };
    cosine(&pooled(a)?, &pooled(b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub first: usize,
    pub later: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterConsistency {
    pub character: usize,
    pub name: String,
    pub pairs: Vec<PairSimilarity>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub label: String,
    pub seed: u64,
    pub lambda: f32,
    pub baseline: bool,
    pub characters: Vec<CharacterConsistency>,
    /// Mean of the per-character means; `None` when no character qualifies.
    pub overall: Option<f64>,
    pub notes: Vec<String>,
}

impl ConsistencyReport {
    /// Aligned-column table: one line per scene pair, then per-character and overall means.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} seed={} lambda={}{}",
            self.label,
            self.seed,
            self.lambda,
            if self.baseline { " (baseline)" } else { "" }
        );
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>10}",
            "character", "first", "later", "similarity"
        );
        for c in &self.characters {
            for p in &c.pairs {
                let _ = writeln!(
                    out,
                    "{:<16} {:>6} {:>6} {:>10.6}",
                    c.name, p.first, p.later, p.similarity
                );
            }
            let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>10.6}", c.name, "", "mean", c.mean);
        }
        match self.overall {
            Some(v) => {
                let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>10.6}", "overall", "", "", v);
            }
            None => {
                let _ = writeln!(out, "{:<16} {:>6} {:>6} {:>10}", "overall", "", "", "n/a");
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Similarity of each character's first usable scene against every later usable scene.
pub fn consistency_report(
    results: &[SceneResult],
    plan: &StoryPlan,
    config: &PipelineConfig,
) -> Result<ConsistencyReport> {
    let mut characters = Vec::new();
    let mut notes = Vec::new();
    for ch in &plan.characters {
        let scenes: Vec<&SceneResult> = results
            .iter()
            .filter(|r| plan.scenes.get(r.scene).is_some_and(|s| s.present.contains(&ch.id)))
            .collect();
        let valid: Vec<&SceneResult> = scenes
            .iter()
            .copied()
            .filter(|r| usable(r.masks.get(&ch.id)).is_some())
            .collect();
        if valid.len() < 2 {
            notes.push(format!(
                "{} skipped: {} scene(s) with a usable mask out of {}",
                ch.name,
                valid.len(),
                scenes.len()
            ));
            continue;
        }
        let first = valid[0];
        let pairs = valid[1..]
            .iter()
            .map(|r| {
                Ok(PairSimilarity {
                    first: first.scene,
                    later: r.scene,
                    similarity: masked_feature_similarity(first, r, ch.id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = pairs.iter().map(|p| p.similarity).sum::<f64>() / pairs.len() as f64;
        characters.push(CharacterConsistency {
            character: ch.id,
            name: ch.name.clone(),
            pairs,
            mean,
        });
    }
    let overall =
        (!characters.is_empty()).then(|| characters.iter().map(|c| c.mean).sum::<f64>() / characters.len() as f64);
    Ok(ConsistencyReport {
        label: switch_label(config),
        seed: config.seed,
        lambda: config.lambda,
        baseline: config.is_baseline(),
        characters,
        overall,
        notes,
    })
}

fn switch_label(config: &PipelineConfig) -> String {
    let flag = |b: bool| if b { "on" } else { "off" };
    format!(
        "IC={} IS={} Re={}",
        flag(config.iso_cross),
        flag(config.iso_self),
        flag(config.reweight)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchRow {
    pub iso_cross: bool,
    pub iso_self: bool,
    pub reweight: bool,
}

impl SwitchRow {
    pub const fn new(iso_cross: bool, iso_self: bool, reweight: bool) -> Self {
        Self {
            iso_cross,
            iso_self,
            reweight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reweight && !self.iso_self {
            return Err(Error::Config("reweight requires isolated self-attention".into()));
        }
        Ok(())
    }

    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            iso_cross: self.iso_cross,
            iso_self: self.iso_self,
            reweight: self.reweight,
            ..base.clone()
        }
    }
}

/// The five valid rows, all-off first.
pub const DEFAULT_GRID: [SwitchRow; 5] = [
    SwitchRow::new(false, false, false),
    SwitchRow::new(true, false, false),
    SwitchRow::new(false, true, false),
    SwitchRow::new(false, true, true),
    SwitchRow::new(true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: SwitchRow,
    pub report: ConsistencyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<4} {:<4} {:<4} {:>10}  per-character",
            "IC", "IS", "Re", "overall"
        );
        for row in &self.rows {
            let mark = |b: bool| if b { "x" } else { "-" };
            let overall = row.report.overall.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            let chars: Vec<String> = row
                .report
                .characters
                .iter()
                .map(|c| format!("{}={:.6}", c.name, c.mean))
                .collect();
            let _ = writeln!(
                out,
                "{:<4} {:<4} {:<4} {:>10}  {}",
                mark(row.switches.iso_cross),
                mark(row.switches.iso_self),
                mark(row.switches.reweight),
                overall,
                chars.join(" ")
            );
        }
        out
    }
}

/// Runs the story once per grid row with otherwise identical configuration.
pub fn ablation_run(plan: &StoryPlan, base: &PipelineConfig, grid: &[SwitchRow]) -> Result<AblationTable> {
    for row in grid {
        row.validate()?;
    }
    let rows = grid
        .iter()
        .map(|row| {
            let config = row.apply(base);
            let results = Pipeline::new(config.clone())?.run_story(plan)?.0;
            Ok(AblationRow {
                switches: *row,
                report: consistency_report(&results, plan, &config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

/// Per-character means by character id, for quick comparisons.
pub fn means_by_character(report: &ConsistencyReport) -> BTreeMap<usize, f64> {
    report.characters.iter().map(|c| (c.character, c.mean)).collect()
}
