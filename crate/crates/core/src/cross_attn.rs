//! Cross-attention with per-character prompts blended by region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::plan::TokenSpan;
use crate::tensor::{matmul, scaled_dot_attention, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnWeights {
    /// `d × d`, applied to image tokens.
    pub wq: Matrix,
    /// `d_txt × d`, applied to prompt tokens.
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Queries from `image`, keys and values from the prompt embedding.
/// Returns the output features and the `(h·w) × L` attention weights.
pub fn cross_attention(image: &Matrix, prompt: &Matrix, weights: &CrossAttnWeights) -> Result<(Matrix, Matrix)> {
    let q = matmul(image, &weights.wq)?;
    let k = matmul(prompt, &weights.wk)?;
    let v = matmul(prompt, &weights.wv)?;
    let att = scaled_dot_attention(&q, &k, &v, None)?;
    Ok((att.output, att.weights))
}

/// Rows inside a character's mask come from that character's features, all
/// other rows from the global features.
pub fn regional_blend(global: &Matrix, per_character: &[(usize, &Matrix)], masks: &[CharacterMask]) -> Result<Matrix> {
    let n = global.rows();
    for (c, f) in per_character {
        if f.shape() != global.shape() {
            return Err(Error::shape(
                "regional_blend",
                format!(
                    "features of character {c} are {:?}, global {:?}",
                    f.shape(),
                    global.shape()
                ),
            ));
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (idx, (c, _)) in per_character.iter().enumerate() {
        let Some(mask) = masks.iter().find(|m| m.character == *c) else {
            return Err(Error::Invalid(format!("no mask for character {c}")));
        };
        if mask.bits.len() != n {
            return Err(Error::shape(
                "regional_blend",
                format!("mask of {} cells for {n} rows", mask.bits.len()),
            ));
        }
        for r in mask.positions() {
            if let Some(prev) = owner[r] {
                return Err(Error::Invalid(format!(
                    "masks of characters {} and {c} overlap at row {r}",
                    per_character[prev].0
                )));
            }
            owner[r] = Some(idx);
        }
    }
    let mut out = global.clone();
    for (r, o) in owner.iter().enumerate() {
        if let Some(idx) = o {
            out.row_mut(r).copy_from_slice(per_character[*idx].1.row(r));
        }
    }
    Ok(out)
}

/// Mean attention weight over the span's token columns, per spatial position.
pub fn character_map_extract(weights: &Matrix, span: TokenSpan) -> Result<Vec<f32>> {
    if span.is_empty() {
        return Err(Error::Invalid("empty token span".into()));
    }
    if span.end > weights.cols() {
        return Err(Error::shape(
            "character_map_extract",
            format!("span {}..{} for {} tokens", span.start, span.end, weights.cols()),
        ));
    }
    let len = span.len() as f64;
    Ok((0..weights.rows())
        .map(|r| {
            let s: f64 = weights.row(r)[span.start..span.end].iter().map(|&w| w as f64).sum();
            (s / len) as f32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cmask(character: usize, bits: &[u8]) -> CharacterMask {
        CharacterMask {
            character,
            h: 1,
            w: bits.len(),
            bits: bits.iter().map(|&b| b == 1).collect(),
            cv: 0.1,
            degenerate: false,
        }
    }

    fn weights(d: usize, d_txt: usize, rng: &mut ChaCha8Rng) -> CrossAttnWeights {
        CrossAttnWeights {
            wq: random(d, d, rng),
            wk: random(d_txt, d, rng),
            wv: random(d_txt, d, rng),
        }
    }

    #[test]
    fn single_prompt_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = random(4, 3, &mut rng);
        let prompt = random(1, 5, &mut rng);
        let w = weights(3, 5, &mut rng);
        let (out, att) = cross_attention(&image, &prompt, &w).unwrap();
        assert!(att.values().iter().all(|&x| x == 1.0));
        let v = matmul(&prompt, &w.wv).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn identical_prompt_tokens_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = random(3, 4, &mut rng);
        let tok = random(1, 4, &mut rng);
        let prompt = tok.vstack([&tok]).unwrap();
        let (_, att) = cross_attention(&image, &prompt, &weights(4, 4, &mut rng)).unwrap();
        assert!(att.values().iter().all(|&x| x == 0.5));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_f64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = random(5, 4, &mut rng);
        let prompt = random(3, 6, &mut rng);
        let w = weights(4, 6, &mut rng);
        let (out, _) = cross_attention(&image, &prompt, &w).unwrap();
        let mm = |a: &Matrix, b: &Matrix| -> Vec<Vec<f64>> {
            (0..a.rows())
                .map(|i| {
                    (0..b.cols())
                        .map(|j| (0..a.cols()).map(|k| a.get(i, k) as f64 * b.get(k, j) as f64).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (mm(&image, &w.wq), mm(&prompt, &w.wk), mm(&prompt, &w.wv));
        for i in 0..5 {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| e[j] / z * v[j][c]).sum();
                assert!((out.get(i, c) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blend_partitions_rows() {
        let g = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let a = g.map(|x| x + 10.0);
        let b = g.map(|x| x + 20.0);
        let out = regional_blend(&g, &[(0, &a)], &[cmask(0, &[0, 1, 1, 0])]).unwrap();
        assert_eq!(out.values(), &[0.0, 11.0, 12.0, 3.0]);

        let out = regional_blend(&g, &[], &[]).unwrap();
        assert_eq!(out, g);

        let masks = [cmask(0, &[1, 0, 0, 0]), cmask(1, &[0, 0, 0, 1])];
        let out = regional_blend(&g, &[(0, &a), (1, &b)], &masks).unwrap();
        assert_eq!(out.values(), &[10.0, 1.0, 2.0, 23.0]);

        let again = regional_blend(&out, &[(0, &a), (1, &b)], &masks).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn blend_rejects_overlap() {
        let g = Matrix::zeros(2, 1);
        let masks = [cmask(0, &[1, 1]), cmask(1, &[0, 1])];
        assert!(regional_blend(&g, &[(0, &g), (1, &g)], &masks).is_err());
    }

    #[test]
    fn map_extraction() {
        let w = Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        assert_eq!(
            character_map_extract(&w, TokenSpan { start: 1, end: 2 }).unwrap(),
            vec![0.3, 0.1]
        );
        let all = character_map_extract(&w, TokenSpan { start: 0, end: 3 }).unwrap();
        assert!(all.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-7));
        let two = character_map_extract(&w, TokenSpan { start: 0, end: 2 }).unwrap();
        assert!((two[0] - 0.25).abs() < 1e-6 && (two[1] - 0.35).abs() < 1e-6);
        assert!(character_map_extract(&w, TokenSpan { start: 1, end: 1 }).is_err());
        assert!(character_map_extract(&w, TokenSpan { start: 2, end: 4 }).is_err());
    }
}
