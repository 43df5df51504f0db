//! Self-attention extended with reference tokens of reappearing characters.
//!
//! Keys and values are projected from the image tokens concatenated with each
//! old character's stored rows. An additive mask lets only a character's own
//! region see its reference columns, and inside that region the attention paid
//! to image tokens is re-weighted by the character's normalized
//! cross-attention map so that more mass lands on the references.

use serde::{Deserialize, Serialize};

use crate::bank::ConcatLayout;
use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::tensor::{matmul, scaled_dot_attention, Matrix};

/// Additive logit mask of shape `image tokens × key length` with entries 0 or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationMask(pub Matrix);

fn mask_for(masks: &[CharacterMask], character: usize) -> Option<&CharacterMask> {
    masks.iter().find(|m| m.character == character)
}

/// Opens each reference span only to rows inside that character's mask.
pub fn build_isolation_mask(layout: &ConcatLayout, masks: &[CharacterMask]) -> Result<IsolationMask> {
    let n = layout.image_token_count;
    for m in masks {
        if layout.span_of(m.character).is_none() {
            return Err(Error::Invalid(format!(
                "mask for character {} has no reference span in the layout",
                m.character
            )));
        }
        if m.bits.len() != n {
            return Err(Error::shape(
                "build_isolation_mask",
                format!("mask of {} cells for {n} image tokens", m.bits.len()),
            ));
        }
    }
    let cols = layout.key_len();
    let mut out = Matrix::zeros(n, cols);
    for span in &layout.spans {
        let mask = mask_for(masks, span.character)
            .ok_or_else(|| Error::Invalid(format!("no mask for referenced character {}", span.character)))?;
        for r in 0..n {
            if mask.degenerate || !mask.bits[r] {
                out.row_mut(r)[span.start..span.start + span.len].fill(f32::NEG_INFINITY);
            }
        }
    }
    Ok(IsolationMask(out))
}

/// Per-image-token factors in `[0, 1]` derived from a cross-attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightVector {
    pub character: usize,
    pub values: Vec<f32>,
}

pub fn median(values: &[f32]) -> f64 {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// `clip((x − median(x)) / max(x), 0, 1)`; all zeros when `max(x) = 0`.
pub fn normalize_cross_map(character: usize, map: &[f32]) -> Result<ReweightVector> {
    if map.is_empty() {
        return Err(Error::Invalid("empty map".into()));
    }
    if let Some(bad) = map.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid(format!("map cell {bad} is {}", map[bad])));
    }
    let max = map.iter().copied().fold(0.0f32, f32::max) as f64;
    if max == 0.0 {
        return Ok(ReweightVector {
            character,
            values: vec![0.0; map.len()],
        });
    }
    let med = median(map);
    let values = map
        .iter()
        .map(|&x| ((x as f64 - med) / max).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(ReweightVector { character, values })
}

/// A row whose re-weighted mass vanished and was left as it was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightDiagnostic {
    pub character: usize,
    pub row: usize,
}

/// Scales the image-token weights of rows inside `mask` by `rw`, then restores
/// each such row's original mass. Other rows are untouched.
pub fn reweight(
    weights: &Matrix,
    mask: &CharacterMask,
    rw: &ReweightVector,
    layout: &ConcatLayout,
) -> Result<(Matrix, Vec<ReweightDiagnostic>)> {
    let n = layout.image_token_count;
    if weights.rows() != n || weights.cols() != layout.key_len() {
        return Err(Error::shape(
            "reweight",
            format!("weights {:?} for layout {}x{}", weights.shape(), n, layout.key_len()),
        ));
    }
    if mask.bits.len() != n || rw.values.len() != n {
        return Err(Error::shape(
            "reweight",
            format!("mask {} / factors {} for {n} tokens", mask.bits.len(), rw.values.len()),
        ));
    }
    let mut out = weights.clone();
    let mut diagnostics = Vec::new();
    if mask.degenerate {
        return Ok((out, diagnostics));
    }
    let mut scaled = vec![0.0f64; weights.cols()];
    for r in mask.positions() {
        let row = weights.row(r);
        let before: f64 = row.iter().map(|&w| w as f64).sum();
        for (j, (s, &w)) in scaled.iter_mut().zip(row).enumerate() {
            *s = if j < n {
                w as f64 * rw.values[j] as f64
            } else {
                w as f64
            };
        }
        let after: f64 = scaled.iter().sum();
        if after <= 0.0 {
            diagnostics.push(ReweightDiagnostic {
                character: mask.character,
                row: r,
            });
            continue;
        }
        let gain = before / after;
        for (o, &s) in out.row_mut(r).iter_mut().zip(&scaled) {
            *o = (s * gain) as f32;
        }
    }
    Ok((out, diagnostics))
}

/// Projection weights of one self-attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Everything produced by one isolated self-attention call.
#[derive(Debug, Clone)]
pub struct IsoSelfOutput {
    pub output: Matrix,
    pub layout: ConcatLayout,
    /// Post-softmax weights before re-weighting.
    pub softmax_weights: Matrix,
    /// Weights actually applied to the values.
    pub weights: Matrix,
    pub diagnostics: Vec<ReweightDiagnostic>,
}

/// Plain self-attention over `image` (rows already normalized).
pub fn vanilla_self_attention(image: &Matrix, weights: &SelfAttnWeights) -> Result<Matrix> {
    let q = matmul(image, &weights.wq)?;
    let k = matmul(image, &weights.wk)?;
    let v = matmul(image, &weights.wv)?;
    Ok(scaled_dot_attention(&q, &k, &v, None)?.output)
}

/// Self-attention with reference tokens, isolation masking and re-weighting.
///
/// `references[i]` holds the (normalized) rows of `layout.spans[i]`. Masks and
/// factors are looked up by character id; `reweights = None` disables
/// re-weighting.
pub fn isolated_self_attention(
    image: &Matrix,
    weights: &SelfAttnWeights,
    references: &[&Matrix],
    layout: &ConcatLayout,
    masks: &[CharacterMask],
    reweights: Option<&[ReweightVector]>,
) -> Result<IsoSelfOutput> {
    if references.len() != layout.spans.len() {
        return Err(Error::shape(
            "isolated_self_attention",
            format!("{} reference blocks for {} spans", references.len(), layout.spans.len()),
        ));
    }
    if layout.image_token_count != image.rows() {
        return Err(Error::shape(
            "isolated_self_attention",
            format!(
                "layout for {} tokens, image has {}",
                layout.image_token_count,
                image.rows()
            ),
        ));
    }
    for (r, span) in references.iter().zip(&layout.spans) {
        if r.rows() != span.len {
            return Err(Error::shape(
                "isolated_self_attention",
                format!(
                    "character {} has {} rows, span says {}",
                    span.character,
                    r.rows(),
                    span.len
                ),
            ));
        }
    }

    let q = matmul(image, &weights.wq)?;
    let keys_in = image.vstack(references.iter().copied())?;
    let k = matmul(&keys_in, &weights.wk)?;
    let v = matmul(&keys_in, &weights.wv)?;

    if layout.spans.is_empty() {
        let att = scaled_dot_attention(&q, &k, &v, None)?;
        return Ok(IsoSelfOutput {
            output: att.output,
            layout: layout.clone(),
            softmax_weights: att.weights.clone(),
            weights: att.weights,
            diagnostics: Vec::new(),
        });
    }

    let isolation = build_isolation_mask(layout, masks)?;
    let att = scaled_dot_attention(&q, &k, &v, Some(&isolation.0))?;
    let mut applied = att.weights.clone();
    let mut diagnostics = Vec::new();
    if let Some(rws) = reweights {
        for span in &layout.spans {
            let mask = mask_for(masks, span.character).expect("checked by build_isolation_mask");
            if mask.degenerate {
                continue;
            }
            let rw = rws
                .iter()
                .find(|r| r.character == span.character)
                .ok_or_else(|| Error::Invalid(format!("no reweight factors for character {}", span.character)))?;
            let (next, diag) = reweight(&applied, mask, rw, layout)?;
            applied = next;
            diagnostics.extend(diag);
        }
    }
    let output = matmul(&applied, &v)?;
    Ok(IsoSelfOutput {
        output,
        layout: layout.clone(),
        softmax_weights: att.weights,
        weights: applied,
        diagnostics,
    })
}
