//! Two-branch Transformer block.
//!
//! The original branch is a plain pre-norm block (self-attention,
//! cross-attention over the scene prompt, feed-forward). The extended branch
//! reuses the same weights with isolated self- and cross-attention, and the
//! two outputs are merged as `F = λ·F_iso + (1 − λ)·F_ori`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::ConcatLayout;
use crate::cross_attn::{character_map_extract, cross_attention, regional_blend, CrossAttnWeights};
use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::plan::TokenSpan;
use crate::self_attn::{
    isolated_self_attention, vanilla_self_attention, IsoSelfOutput, ReweightVector, SelfAttnWeights,
};
use crate::tensor::{matmul, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f32 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let d = x.cols();
        if self.gamma.len() != d || self.beta.len() != d {
            return Err(Error::shape(
                "LayerNorm",
                format!("{} parameters for width {d}", self.gamma.len()),
            ));
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = ((row[j] as f64 - mean) * inv * self.gamma[j] as f64 + self.beta[j] as f64) as f32;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    /// `d × hidden`
    pub w_in: Matrix,
    /// `hidden × d`
    pub w_out: Matrix,
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

impl FeedForward {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let h = matmul(x, &self.w_in)?.map(gelu);
        matmul(&h, &self.w_out)
    }
}

/// Weights of one block; both branches share them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub key: usize,
    pub self_attn: SelfAttnWeights,
    pub cross_attn: CrossAttnWeights,
    pub ffn: FeedForward,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
}

/// Merge weight and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedBlockConfig {
    pub lambda: f32,
    pub extended_enabled: bool,
    pub iso_self_enabled: bool,
    pub iso_cross_enabled: bool,
    pub reweight_enabled: bool,
}

impl Default for ExtendedBlockConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            extended_enabled: true,
            iso_self_enabled: true,
            iso_cross_enabled: true,
            reweight_enabled: true,
        }
    }
}

impl ExtendedBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        if self.reweight_enabled && !self.iso_self_enabled {
            return Err(Error::Config("reweight requires isolated self-attention".into()));
        }
        Ok(())
    }

    /// True when the extended branch can never differ from the original one.
    pub fn is_inert(&self) -> bool {
        !self.extended_enabled || self.lambda == 0.0 || !(self.iso_self_enabled || self.iso_cross_enabled)
    }
}

/// Per-scene state the extended branch needs for the old characters.
pub struct IsolationInputs<'a> {
    /// Resolved masks of the old characters (degenerate ones included).
    pub masks: &'a [CharacterMask],
    pub reweights: &'a [ReweightVector],
    /// Stored rows of each layout span, in layout order.
    pub references: Vec<&'a Matrix>,
    pub layout: ConcatLayout,
    /// Embedded appearance prompt of each old character.
    pub character_prompts: &'a [(usize, Matrix)],
}

#[derive(Debug, Clone)]
pub struct BlockOutputs {
    pub f_ori: Matrix,
    pub f_iso: Option<Matrix>,
    pub merged: Matrix,
    /// Character cross-attention maps of the original branch.
    pub maps: BTreeMap<usize, Vec<f32>>,
    pub self_trace: Option<IsoSelfOutput>,
}

/// Plain block forward; also extracts each named character's attention map.
pub fn run_original_branch(
    x: &Matrix,
    scene_prompt: &Matrix,
    params: &BlockParams,
    name_spans: &BTreeMap<usize, TokenSpan>,
) -> Result<(Matrix, BTreeMap<usize, Vec<f32>>)> {
    let sa = vanilla_self_attention(&params.norm_self.forward(x)?, &params.self_attn)?;
    let h1 = x.add(&sa)?;
    let (ca, weights) = cross_attention(&params.norm_cross.forward(&h1)?, scene_prompt, &params.cross_attn)?;
    let h2 = h1.add(&ca)?;
    let out = h2.add(&params.ffn.forward(&params.norm_ffn.forward(&h2)?)?)?;
    let mut maps = BTreeMap::new();
    for (&id, &span) in name_spans {
        maps.insert(id, character_map_extract(&weights, span)?);
    }
    Ok((out, maps))
}

/// Block forward with isolated self-attention and regional cross-attention.
/// Without isolation inputs (or with both switches off) this is the plain block.
pub fn run_extended_branch(
    x: &Matrix,
    scene_prompt: &Matrix,
    params: &BlockParams,
    isolation: Option<&IsolationInputs<'_>>,
    config: &ExtendedBlockConfig,
) -> Result<(Matrix, Option<IsoSelfOutput>)> {
    let n1 = params.norm_self.forward(x)?;
    let mut trace = None;
    let sa = match isolation {
        Some(iso) if config.iso_self_enabled => {
            let normed: Vec<Matrix> = iso
                .references
                .iter()
                .map(|r| params.norm_self.forward(r))
                .collect::<Result<_>>()?;
            let refs: Vec<&Matrix> = normed.iter().collect();
            let rws = config.reweight_enabled.then_some(iso.reweights);
            let out = isolated_self_attention(&n1, &params.self_attn, &refs, &iso.layout, iso.masks, rws)?;
            let features = out.output.clone();
            trace = Some(out);
            features
        }
        _ => vanilla_self_attention(&n1, &params.self_attn)?,
    };
    let h1 = x.add(&sa)?;

    let n2 = params.norm_cross.forward(&h1)?;
    let (global, _) = cross_attention(&n2, scene_prompt, &params.cross_attn)?;
    let ca = match isolation {
        Some(iso) if config.iso_cross_enabled => {
            let mut features = Vec::new();
            for (id, prompt) in iso.character_prompts {
                let usable = iso
                    .masks
                    .iter()
                    .any(|m| m.character == *id && !m.degenerate && m.popcount() > 0);
                if usable {
                    features.push((*id, cross_attention(&n2, prompt, &params.cross_attn)?.0));
                }
            }
            let refs: Vec<(usize, &Matrix)> = features.iter().map(|(id, f)| (*id, f)).collect();
            regional_blend(&global, &refs, iso.masks)?
        }
        _ => global,
    };
    let h2 = h1.add(&ca)?;
    let out = h2.add(&params.ffn.forward(&params.norm_ffn.forward(&h2)?)?)?;
    Ok((out, trace))
}

/// `F = λ·F_iso + (1 − λ)·F_ori`, element-wise.
///
/// Cells where both inputs agree are passed through, so merging identical
/// features is exact for every λ.
pub fn merge(f_ori: &Matrix, f_iso: &Matrix, lambda: f32) -> Result<Matrix> {
    if f_ori.shape() != f_iso.shape() {
        return Err(Error::shape(
            "merge",
            format!("{:?} vs {:?}", f_ori.shape(), f_iso.shape()),
        ));
    }
    if lambda == 0.0 {
        return Ok(f_ori.clone());
    }
    if lambda == 1.0 {
        return Ok(f_iso.clone());
    }
    let l = lambda as f64;
    let values = f_ori
        .values()
        .iter()
        .zip(f_iso.values())
        .map(|(&o, &i)| {
            if o == i {
                o
            } else {
                (i as f64 * l + o as f64 * (1.0 - l)) as f32
            }
        })
        .collect();
    Matrix::new(f_ori.rows(), f_ori.cols(), values)
}

/// Full block: original branch, optional extended branch, merge.
pub fn forward(
    x: &Matrix,
    scene_prompt: &Matrix,
    params: &BlockParams,
    name_spans: &BTreeMap<usize, TokenSpan>,
    isolation: Option<&IsolationInputs<'_>>,
    config: &ExtendedBlockConfig,
) -> Result<BlockOutputs> {
    let (f_ori, maps) = run_original_branch(x, scene_prompt, params, name_spans)?;
    if isolation.is_none() || config.is_inert() {
        return Ok(BlockOutputs {
            merged: f_ori.clone(),
            f_ori,
            f_iso: None,
            maps,
            self_trace: None,
        });
    }
    let (f_iso, self_trace) = run_extended_branch(x, scene_prompt, params, isolation, config)?;
    let merged = merge(&f_ori, &f_iso, config.lambda)?;
    Ok(BlockOutputs {
        f_ori,
        f_iso: Some(f_iso),
        merged,
        maps,
        self_trace,
    })
}
