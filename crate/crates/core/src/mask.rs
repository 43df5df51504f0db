//! Character masks from accumulated cross-attention maps.
//!
//! Maps are averaged over denoising steps, binarized with Otsu's method on a
//! 256-bin histogram, and overlapping claims are settled in favour of the map
//! with the lowest coefficient of variation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

/// Running mean of one character's cross-attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnMapAccumulator {
    pub character: usize,
    pub h: usize,
    pub w: usize,
    running_mean: Vec<f64>,
    steps_seen: usize,
}

impl AttnMapAccumulator {
    pub fn new(character: usize, h: usize, w: usize) -> Self {
        Self {
            character,
            h,
            w,
            running_mean: vec![0.0; h * w],
            steps_seen: 0,
        }
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    pub fn mean(&self) -> Vec<f32> {
        self.running_mean.iter().map(|&v| v as f32).collect()
    }

    /// Folds one step's map into the running mean.
    pub fn accumulate(&mut self, map: &[f32]) -> Result<()> {
        if map.len() != self.h * self.w {
            return Err(Error::shape(
                "accumulate",
                format!("map of {} cells for a {}x{} grid", map.len(), self.h, self.w),
            ));
        }
        if let Some(bad) = map.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid(format!(
                "attention map cell {bad} is {} (must be finite and non-negative)",
                map[bad]
            )));
        }
        let n = self.steps_seen as f64;
        for (m, &x) in self.running_mean.iter_mut().zip(map) {
            *m = (*m * n + x as f64) / (n + 1.0);
        }
        self.steps_seen += 1;
        Ok(())
    }
}

/// Outcome of Otsu thresholding on a map.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Boundary index `k` in `1..256`; bins `k..` are foreground.
    pub threshold_bin: Option<usize>,
    /// Map value at the chosen boundary.
    pub threshold: Option<f64>,
    pub bits: Vec<bool>,
    pub degenerate: bool,
}

/// Histogram bin of `v`, with right-closed bins over `[min, max]`.
///
/// A value exactly on a boundary falls into the lower bin, so "bin ≥ k" is
/// the same statement as "value > boundary k".
pub fn bin_index(v: f32, min: f32, max: f32) -> usize {
    let x = (v as f64 - min as f64) / (max as f64 - min as f64);
    let b = (x * OTSU_BINS as f64).ceil() as i64 - 1;
    b.clamp(0, OTSU_BINS as i64 - 1) as usize
}

fn check_map(map: &[f32]) -> Result<()> {
    if map.is_empty() {
        return Err(Error::Invalid("empty map".into()));
    }
    if let Some(bad) = map.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid(format!("map cell {bad} is {}", map[bad])));
    }
    Ok(())
}

/// Between-class variance of a split as an exact fraction.
///
/// With `N` values, `n0/s0` the count and bin-index sum of the background and
/// `n1/s1` of the foreground, `σ² · N² = (s0·n1 − s1·n0)² / (n0·n1)`. The common
/// `N²` is dropped; comparing fractions by cross-multiplication in `u128` makes
/// ties exact.
fn between_class(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    if n0 == 0 || n1 == 0 {
        return (0, 1);
    }
    let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
    (diff * diff, n0 as u128 * n1 as u128)
}

fn greater(a: (u128, u128), b: (u128, u128)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

/// Otsu binarization over 256 linear bins spanning the map's range.
///
/// The smallest boundary wins ties. A constant map is degenerate and yields an
/// empty mask.
pub fn otsu_binarize(map: &[f32]) -> Result<OtsuResult> {
    check_map(map)?;
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == min {
        return Ok(OtsuResult {
            threshold_bin: None,
            threshold: None,
            bits: vec![false; map.len()],
            degenerate: true,
        });
    }

    let bins: Vec<usize> = map.iter().map(|&v| bin_index(v, min, max)).collect();
    let mut hist = [0u64; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let total_n = map.len() as u64;
    let total_s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best_k = 1;
    let mut best = (0u128, 1u128);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let score = between_class(n0, s0, total_n - n0, total_s - s0);
        if greater(score, best) {
            best = score;
            best_k = k;
        }
    }

    let step = (max as f64 - min as f64) / OTSU_BINS as f64;
    Ok(OtsuResult {
        threshold_bin: Some(best_k),
        threshold: Some(min as f64 + best_k as f64 * step),
        bits: bins.iter().map(|&b| b >= best_k).collect(),
        degenerate: false,
    })
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(map: &[f32]) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::Invalid("empty map".into()));
    }
    let n = map.len() as f64;
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / n;
    if mean.is_nan() || mean <= 0.0 {
        return Err(Error::Invalid(format!(
            "coefficient of variation needs a positive mean, got {mean}"
        )));
    }
    let var = map.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Binary spatial mask of one character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterMask {
    pub character: usize,
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
    pub cv: f64,
    pub degenerate: bool,
}

impl CharacterMask {
    /// Otsu mask of `map` together with the map's coefficient of variation.
    pub fn from_map(character: usize, h: usize, w: usize, map: &[f32]) -> Result<Self> {
        if map.len() != h * w {
            return Err(Error::shape(
                "CharacterMask::from_map",
                format!("{} cells for {h}x{w}", map.len()),
            ));
        }
        let otsu = otsu_binarize(map)?;
        let cv = if otsu.degenerate {
            0.0
        } else {
            coefficient_of_variation(map)?
        };
        Ok(Self {
            character,
            h,
            w,
            bits: otsu.bits,
            cv,
            degenerate: otsu.degenerate,
        })
    }

    pub fn empty(character: usize, h: usize, w: usize) -> Self {
        Self {
            character,
            h,
            w,
            bits: vec![false; h * w],
            cv: 0.0,
            degenerate: true,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Positions with bit 1, in row-major order.
    pub fn positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Gives every contested cell to the lowest-cv claimant (lower id on ties).
pub fn resolve_overlaps(masks: &[CharacterMask]) -> Result<Vec<CharacterMask>> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.h, first.w);
    if let Some(bad) = masks.iter().find(|m| m.h != h || m.w != w || m.bits.len() != h * w) {
        return Err(Error::shape(
            "resolve_overlaps",
            format!(
                "mask of character {} is {}x{}, expected {h}x{w}",
                bad.character, bad.h, bad.w
            ),
        ));
    }
    let mut out = masks.to_vec();
    for cell in 0..h * w {
        let winner = masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.bits[cell])
            .min_by(|(_, a), (_, b)| a.cv.total_cmp(&b.cv).then(a.character.cmp(&b.character)))
            .map(|(i, _)| i);
        if let Some(win) = winner {
            for (i, m) in out.iter_mut().enumerate() {
                if i != win {
                    m.bits[cell] = false;
                }
            }
        }
    }
    Ok(out)
}
