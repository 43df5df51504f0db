//! TOML run configuration.

use std::path::PathBuf;

use isostory::block::DEFAULT_LAMBDA;
use isostory::pipeline::{BlockKind, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub d_txt: usize,
    #[serde(alias = "T")]
    pub steps: usize,
    pub seed: u64,
    pub stack: Vec<BlockKind>,
    pub lambda: f32,
    pub mask_warmup_steps: usize,
    pub iso_self: bool,
    pub iso_cross: bool,
    pub reweight: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            h: p.h,
            w: p.w,
            d: p.d,
            d_txt: p.d_txt,
            steps: p.steps,
            seed: p.seed,
            stack: p.stack,
            lambda: DEFAULT_LAMBDA,
            mask_warmup_steps: p.mask_warmup_steps,
            iso_self: p.iso_self,
            iso_cross: p.iso_cross,
            reweight: p.reweight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    #[default]
    Script,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub mode: PlannerMode,
    /// Overrides the URL environment variable when set.
    pub endpoint: Option<String>,
    /// Instruction template file; must contain `{storyline}`.
    pub template: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            mode: PlannerMode::Script,
            endpoint: None,
            template: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub dump_attn: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("run"),
            dump_attn: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub pipeline: PipelineSection,
    pub planner: PlannerSection,
    pub output: OutputSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&crate::read_text(p)?),
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let p = &self.pipeline;
        let config = PipelineConfig {
            h: p.h,
            w: p.w,
            d: p.d,
            d_txt: p.d_txt,
            steps: p.steps,
            seed: p.seed,
            stack: p.stack.clone(),
            lambda: p.lambda,
            mask_warmup_steps: p.mask_warmup_steps,
            iso_self: p.iso_self,
            iso_cross: p.iso_cross,
            reweight: p.reweight,
            trace_attention: self.output.dump_attn,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}
