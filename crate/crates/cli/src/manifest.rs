//! Self-describing summary written at the root of every run directory.

use std::collections::BTreeMap;

use isostory::bank::ConcatLayout;
use isostory::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub popcount: usize,
    pub cv: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub step: usize,
    pub block: usize,
    /// Path stem of the dumped matrices, relative to the run directory.
    pub file: String,
    pub layout: ConcatLayout,
    /// Characters whose isolation masks were written next to the weights.
    pub masks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene: usize,
    pub directory: String,
    pub present: Vec<usize>,
    pub new: Vec<usize>,
    pub old: Vec<usize>,
    pub masks: BTreeMap<usize, MaskSummary>,
    pub isolated_steps: usize,
    pub stored: Vec<(usize, usize, usize)>,
    pub diagnostics: Vec<String>,
    pub traces: Vec<TraceFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub character: usize,
    pub block: usize,
    pub n: usize,
    pub source_scene: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub baseline: bool,
    pub characters: Vec<(usize, String)>,
    pub scenes: Vec<SceneSummary>,
    pub bank: Vec<BankSummary>,
}

impl Manifest {
    pub fn scene(&self, index: usize) -> Option<&SceneSummary> {
        self.scenes.iter().find(|s| s.scene == index)
    }
}
