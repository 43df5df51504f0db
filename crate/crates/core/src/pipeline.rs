//! Seeded toy denoising loop over a story's scenes.
//!
//! Each scene starts from its own noise, runs the block stack `steps` times and
//! contracts the latent toward the stack output. Cross-attention maps of the
//! characters are averaged over steps; once the warm-up is over the masks
//! derived from them switch on isolation in the extended blocks. At the last
//! step every new character's token rows are written to the reference bank.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::{ConcatLayout, ReferenceBank};
use crate::block::{self, BlockParams, ExtendedBlockConfig, FeedForward, IsolationInputs, LayerNorm, DEFAULT_LAMBDA};
use crate::cross_attn::CrossAttnWeights;
use crate::error::{Error, Result};
use crate::mask::{resolve_overlaps, AttnMapAccumulator, CharacterMask};
use crate::plan::StoryPlan;
use crate::self_attn::{normalize_cross_map, ReweightVector, SelfAttnWeights};
use crate::tensor::Matrix;
use crate::text::{encode_prompt, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Plain,
    Extended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub d_txt: usize,
    pub steps: usize,
    pub seed: u64,
    pub stack: Vec<BlockKind>,
    pub lambda: f32,
    pub mask_warmup_steps: usize,
    pub iso_self: bool,
    pub iso_cross: bool,
    pub reweight: bool,
    /// Keep every isolated self-attention weight matrix in the results.
    pub trace_attention: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            h: 16,
            w: 16,
            d: 32,
            d_txt: 32,
            steps: 10,
            seed: 0,
            stack: vec![
                BlockKind::Plain,
                BlockKind::Plain,
                BlockKind::Extended,
                BlockKind::Extended,
            ],
            lambda: DEFAULT_LAMBDA,
            mask_warmup_steps: 2,
            iso_self: true,
            iso_cross: true,
            reweight: true,
            trace_attention: false,
        }
    }
}

impl PipelineConfig {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 || self.d_txt == 0 {
            return Err(Error::Config("h, w, d and d_txt must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.stack.is_empty() {
            return Err(Error::Config("block stack is empty".into()));
        }
        if (self.iso_self || self.iso_cross) && !self.stack.contains(&BlockKind::Extended) {
            return Err(Error::Config(
                "isolation is enabled but the stack has no extended block".into(),
            ));
        }
        self.block_config(BlockKind::Extended).validate()
    }

    pub fn block_config(&self, kind: BlockKind) -> ExtendedBlockConfig {
        ExtendedBlockConfig {
            lambda: self.lambda,
            extended_enabled: kind == BlockKind::Extended,
            iso_self_enabled: self.iso_self,
            iso_cross_enabled: self.iso_cross,
            reweight_enabled: self.reweight,
        }
    }

    /// True when no block can ever differ from a plain Transformer block.
    pub fn is_baseline(&self) -> bool {
        self.block_config(BlockKind::Extended).is_inert() || !self.stack.contains(&BlockKind::Extended)
    }

    pub fn extended_blocks(&self) -> Vec<usize> {
        self.stack
            .iter()
            .enumerate()
            .filter_map(|(i, k)| (*k == BlockKind::Extended).then_some(i))
            .collect()
    }
}

const WEIGHT_STREAM: u64 = 0xb10c;
const LATENT_STREAM: u64 = 0x1a7e;

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Matrix {
    let values = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * scale) as f32
        })
        .collect();
    Matrix::new(rows, cols, values).expect("positive shape")
}

/// Seeded Gaussian weights of block `index`, scaled by `1/√fan_in`.
pub fn block_params(config: &PipelineConfig, index: usize) -> BlockParams {
    let mut rng = stream_rng(config.seed, &[WEIGHT_STREAM, index as u64]);
    let (d, t) = (config.d, config.d_txt);
    let hidden = 2 * d;
    let sd = 1.0 / (d as f64).sqrt();
    let st = 1.0 / (t as f64).sqrt();
    let sh = 1.0 / (hidden as f64).sqrt();
    BlockParams {
        key: index,
        self_attn: SelfAttnWeights {
            wq: gaussian(d, d, sd, &mut rng),
            wk: gaussian(d, d, sd, &mut rng),
            wv: gaussian(d, d, sd, &mut rng),
        },
        cross_attn: CrossAttnWeights {
            wq: gaussian(d, d, sd, &mut rng),
            wk: gaussian(t, d, st, &mut rng),
            wv: gaussian(t, d, st, &mut rng),
        },
        ffn: FeedForward {
            w_in: gaussian(d, hidden, sd, &mut rng),
            w_out: gaussian(hidden, d, sh, &mut rng),
        },
        norm_self: LayerNorm::identity(d),
        norm_cross: LayerNorm::identity(d),
        norm_ffn: LayerNorm::identity(d),
    }
}

/// Standard-normal starting latent of one scene.
pub fn init_latent(config: &PipelineConfig, scene: usize) -> Matrix {
    let mut rng = stream_rng(config.seed, &[LATENT_STREAM, scene as u64]);
    gaussian(config.tokens(), config.d, 1.0, &mut rng)
}

/// Isolated self-attention weights of one extended block at one step.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub step: usize,
    pub block: usize,
    pub layout: ConcatLayout,
    pub masks: Vec<CharacterMask>,
    pub softmax_weights: Matrix,
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReference {
    pub character: usize,
    pub block: usize,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct SceneResult {
    pub scene: usize,
    pub latent: Matrix,
    /// Final resolved masks of every present character.
    pub masks: BTreeMap<usize, CharacterMask>,
    /// Accumulated cross-attention map of every present character.
    pub maps: BTreeMap<usize, Vec<f32>>,
    pub stored: Vec<StoredReference>,
    /// Number of steps that ran with isolation active.
    pub isolated_steps: usize,
    pub diagnostics: Vec<String>,
    pub traces: Vec<AttentionTrace>,
}

pub struct Pipeline {
    config: PipelineConfig,
    blocks: Vec<BlockParams>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.stack.len()).map(|i| block_params(&config, i)).collect();
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn encode(&self, text: &str) -> Result<Matrix> {
        encode_prompt(text, self.config.seed, self.config.d_txt)
    }

    fn map_source_blocks(&self) -> Vec<usize> {
        let ext = self.config.extended_blocks();
        if ext.is_empty() {
            (0..self.blocks.len()).collect()
        } else {
            ext
        }
    }

    fn resolved_masks(&self, accs: &BTreeMap<usize, AttnMapAccumulator>) -> Result<BTreeMap<usize, CharacterMask>> {
        let (h, w) = (self.config.h, self.config.w);
        let raw: Vec<CharacterMask> = accs
            .values()
            .map(|a| CharacterMask::from_map(a.character, h, w, &a.mean()))
            .collect::<Result<_>>()?;
        Ok(resolve_overlaps(&raw)?.into_iter().map(|m| (m.character, m)).collect())
    }

    /// Generates one scene, reading old characters' references from `bank`
    /// and storing the new characters' references into it.
    pub fn denoise_scene(&self, plan: &StoryPlan, scene_index: usize, bank: &mut ReferenceBank) -> Result<SceneResult> {
        let cfg = &self.config;
        let scene = plan
            .scenes
            .get(scene_index)
            .ok_or_else(|| Error::Invalid(format!("plan has no scene {scene_index}")))?;
        let n_tokens = cfg.tokens();
        let extended = cfg.extended_blocks();
        let mut diagnostics = Vec::new();

        let mut old_ids = Vec::new();
        for &id in &scene.old {
            if bank.is_skipped(id) {
                diagnostics.push(format!(
                    "character {id} has no references (empty mask at its first scene)"
                ));
                continue;
            }
            for &b in &extended {
                if bank.get(id, b).is_none() {
                    return Err(Error::MissingReference {
                        character: id,
                        block: b,
                    });
                }
            }
            old_ids.push(id);
        }

        let scene_prompt = self.encode(&scene.prompt)?;
        let character_prompts: Vec<(usize, Matrix)> = old_ids
            .iter()
            .map(|&id| {
                let ch = plan
                    .character(id)
                    .ok_or_else(|| Error::Plan(format!("scene {scene_index} references unknown character {id}")))?;
                Ok((id, self.encode(&ch.prompt)?))
            })
            .collect::<Result<_>>()?;

        let mut accs: BTreeMap<usize, AttnMapAccumulator> = scene
            .present
            .iter()
            .map(|&id| (id, AttnMapAccumulator::new(id, cfg.h, cfg.w)))
            .collect();
        let map_blocks: BTreeSet<usize> = self.map_source_blocks().into_iter().collect();

        let mut latent = init_latent(cfg, scene_index);
        let mut masks: Option<BTreeMap<usize, CharacterMask>> = None;
        let mut final_inputs: BTreeMap<usize, Matrix> = BTreeMap::new();
        let mut traces = Vec::new();
        let mut isolated_steps = 0;
        let mut warned_degenerate = false;
        let inv_t = 1.0 / cfg.steps as f64;

        for step in 1..=cfg.steps {
            // Masks from the previous step drive this step's isolation.
            let mut iso_state: Option<(Vec<CharacterMask>, Vec<ReweightVector>)> = None;
            if step > cfg.mask_warmup_steps && !old_ids.is_empty() {
                if let Some(current) = &masks {
                    let old_masks: Vec<CharacterMask> = old_ids.iter().map(|id| current[id].clone()).collect();
                    if old_masks.iter().all(|m| m.degenerate || m.popcount() == 0) {
                        if !warned_degenerate {
                            diagnostics.push(format!(
                                "step {step}: every old character's mask is empty; isolation skipped"
                            ));
                            warned_degenerate = true;
                        }
                    } else {
                        let rws = old_ids
                            .iter()
                            .map(|&id| normalize_cross_map(id, &accs[&id].mean()))
                            .collect::<Result<Vec<_>>>()?;
                        iso_state = Some((old_masks, rws));
                    }
                }
            }

            let mut x = latent.clone();
            let mut step_maps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (b, (params, kind)) in self.blocks.iter().zip(&cfg.stack).enumerate() {
                let bcfg = cfg.block_config(*kind);
                if step == cfg.steps && *kind == BlockKind::Extended {
                    final_inputs.insert(b, x.clone());
                }
                let isolation = match (&iso_state, *kind) {
                    (Some((old_masks, rws)), BlockKind::Extended) => {
                        let (entries, layout) = bank.fetch(&old_ids, b, n_tokens)?;
                        Some(IsolationInputs {
                            masks: old_masks,
                            reweights: rws,
                            references: entries.iter().map(|e| &e.tokens).collect(),
                            layout,
                            character_prompts: &character_prompts,
                        })
                    }
                    _ => None,
                };
                let out = if isolation.is_none() || bcfg.is_inert() {
                    let (f_ori, maps) = block::run_original_branch(&x, &scene_prompt, params, &scene.name_spans)?;
                    block::BlockOutputs {
                        merged: f_ori.clone(),
                        f_iso: None,
                        f_ori,
                        maps,
                        self_trace: None,
                    }
                } else {
                    block::forward(&x, &scene_prompt, params, &scene.name_spans, isolation.as_ref(), &bcfg)?
                };
                if map_blocks.contains(&b) {
                    for (id, m) in &out.maps {
                        let slot = step_maps.entry(*id).or_insert_with(|| vec![0.0; n_tokens]);
                        for (s, &v) in slot.iter_mut().zip(m) {
                            *s += v as f64;
                        }
                    }
                }
                if cfg.trace_attention {
                    if let (Some(t), Some(iso)) = (&out.self_trace, &isolation) {
                        traces.push(AttentionTrace {
                            step,
                            block: b,
                            layout: t.layout.clone(),
                            masks: iso.masks.to_vec(),
                            softmax_weights: t.softmax_weights.clone(),
                            weights: t.weights.clone(),
                        });
                    }
                }
                x = out.merged;
            }
            if iso_state.is_some() {
                isolated_steps += 1;
            }

            // latent ← latent − (1/T)(latent − F)
            let values = latent
                .values()
                .iter()
                .zip(x.values())
                .map(|(&l, &f)| (l as f64 - inv_t * (l as f64 - f as f64)) as f32)
                .collect();
            latent = Matrix::new(n_tokens, cfg.d, values)?;

            let denom = map_blocks.len() as f64;
            for (id, sum) in step_maps {
                let mean: Vec<f32> = sum.iter().map(|s| (s / denom) as f32).collect();
                accs.get_mut(&id).expect("present character").accumulate(&mean)?;
            }
            if step >= cfg.mask_warmup_steps || step == cfg.steps {
                masks = Some(self.resolved_masks(&accs)?);
            }
        }

        let masks = masks.unwrap_or_default();
        let mut stored = Vec::new();
        for &id in &scene.new {
            let mask = &masks[&id];
            for &b in &extended {
                match bank.store_new(id, b, &final_inputs[&b], mask, scene_index) {
                    Ok(e) => stored.push(StoredReference {
                        character: id,
                        block: b,
                        n: e.n,
                    }),
                    Err(Error::DegenerateReference { .. }) => {
                        diagnostics.push(format!("character {id}: empty mask, no reference stored"));
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        Ok(SceneResult {
            scene: scene_index,
            latent,
            maps: accs.iter().map(|(&id, a)| (id, a.mean())).collect(),
            masks,
            stored,
            isolated_steps,
            diagnostics,
            traces,
        })
    }

    /// Runs every scene in order, threading the reference bank through.
    pub fn run_story(&self, plan: &StoryPlan) -> Result<(Vec<SceneResult>, ReferenceBank)> {
        let mut bank = ReferenceBank::new();
        let results = (0..plan.scenes.len())
            .map(|i| self.denoise_scene(plan, i, &mut bank))
            .collect::<Result<Vec<_>>>()?;
        Ok((results, bank))
    }

    /// Final latent of a scene run through plain blocks only, with the same weights.
    pub fn plain_scene_latent(&self, plan: &StoryPlan, scene_index: usize) -> Result<Matrix> {
        let cfg = &self.config;
        let scene = plan
            .scenes
            .get(scene_index)
            .ok_or_else(|| Error::Invalid(format!("plan has no scene {scene_index}")))?;
        let prompt = self.encode(&scene.prompt)?;
        let none = BTreeMap::new();
        let inv_t = 1.0 / cfg.steps as f64;
        let mut latent = init_latent(cfg, scene_index);
        for _ in 0..cfg.steps {
            let mut x = latent.clone();
            for params in &self.blocks {
                x = block::run_original_branch(&x, &prompt, params, &none)?.0;
            }
            let values = latent
                .values()
                .iter()
                .zip(x.values())
                .map(|(&l, &f)| (l as f64 - inv_t * (l as f64 - f as f64)) as f32)
                .collect();
            latent = Matrix::new(cfg.tokens(), cfg.d, values)?;
        }
        Ok(latent)
    }
}

pub fn run_story(plan: &StoryPlan, config: &PipelineConfig) -> Result<Vec<SceneResult>> {
    Ok(Pipeline::new(config.clone())?.run_story(plan)?.0)
}
