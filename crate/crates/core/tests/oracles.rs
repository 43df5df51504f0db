#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use isostory::bank::ConcatLayout;
use isostory::mask::CharacterMask;
use isostory::metrics::{consistency_report, cosine, masked_feature_similarity, pooled_features};
use isostory::pipeline::{PipelineConfig, SceneResult};
use isostory::plan::parse_script;
use isostory::self_attn::{build_isolation_mask, isolated_self_attention, normalize_cross_map, SelfAttnWeights};
use isostory::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn to_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn disjoint_masks(rng: &mut ChaCha8Rng, n: usize, ids: &[usize]) -> Vec<CharacterMask> {
    let owner: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=ids.len())).collect();
    ids.iter()
        .enumerate()
        .map(|(i, &id)| CharacterMask {
            character: id,
            h: 4,
            w: n / 4,
            bits: owner.iter().map(|&o| o == i + 1).collect(),
            cv: 0.2,
            degenerate: false,
        })
        .collect()
}

#[test]
fn isolation_mask_matches_cell_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let masks = disjoint_masks(&mut rng, 16, &[2, 5]);
        let layout = ConcatLayout::from_lengths(16, &[(2, rng.gen_range(1..5)), (5, rng.gen_range(1..5))]);
        let m = build_isolation_mask(&layout, &masks).unwrap().0;
        for r in 0..16 {
            for c in 0..layout.key_len() {
                let want = match layout.spans.iter().find(|s| c >= s.start && c < s.start + s.len) {
                    None => 0.0,
                    Some(s) => {
                        let mask = masks.iter().find(|k| k.character == s.character).unwrap();
                        if mask.bits[r] {
                            0.0
                        } else {
                            f32::NEG_INFINITY
                        }
                    }
                };
                assert_eq!(m.get(r, c), want);
            }
        }
    }
}

/// Concatenate, project, mask, softmax, re-weight and apply, all in f64.
#[test]
fn isolated_self_attention_matches_f64_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (n, d) = (16, 6);
    for _ in 0..20 {
        let image = random(n, d, &mut rng);
        let w = SelfAttnWeights {
            wq: random(d, d, &mut rng),
            wk: random(d, d, &mut rng),
            wv: random(d, d, &mut rng),
        };
        let ids = [1, 4];
        let refs: Vec<Matrix> = ids.iter().map(|_| random(rng.gen_range(1..6), d, &mut rng)).collect();
        let layout = ConcatLayout::from_lengths(n, &[(1, refs[0].rows()), (4, refs[1].rows())]);
        let masks = disjoint_masks(&mut rng, n, &ids);
        let rws: Vec<_> = ids
            .iter()
            .map(|&id| normalize_cross_map(id, &(0..n).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f32>>()).unwrap())
            .collect();
        let got = isolated_self_attention(&image, &w, &[&refs[0], &refs[1]], &layout, &masks, Some(&rws)).unwrap();

        let mut keys = to_f64(&image);
        for r in &refs {
            keys.extend(to_f64(r));
        }
        let q = mm(&to_f64(&image), &to_f64(&w.wq));
        let k = mm(&keys, &to_f64(&w.wk));
        let v = mm(&keys, &to_f64(&w.wv));
        let scale = 1.0 / (d as f64).sqrt();
        for r in 0..n {
            let mut row: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(c, kc)| {
                    let span = layout.spans.iter().find(|s| c >= s.start && c < s.start + s.len);
                    let open = span.is_none_or(|s| masks.iter().any(|m| m.character == s.character && m.bits[r]));
                    if open {
                        q[r].iter().zip(kc).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            row.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
            if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.bits[r]) {
                let before: f64 = row.iter().sum();
                for (j, x) in row.iter_mut().enumerate().take(n) {
                    *x *= rws[i].values[j] as f64;
                }
                let after: f64 = row.iter().sum();
                assert_eq!(m.character, ids[i]);
                row.iter_mut().for_each(|x| *x *= before / after);
            }
            for c in 0..d {
                let want: f64 = row.iter().zip(&v).map(|(a, vr)| a * vr[c]).sum();
                assert!((got.output.get(r, c) as f64 - want).abs() < 1e-5, "row {r} col {c}");
            }
        }
    }
}

fn scene(index: usize, latent: Matrix, bits: Vec<bool>) -> SceneResult {
    let w = bits.len();
    SceneResult {
        scene: index,
        latent,
        masks: BTreeMap::from([(
            0,
            CharacterMask {
                character: 0,
                h: 1,
                w,
                bits,
                cv: 0.3,
                degenerate: false,
            },
        )]),
        maps: BTreeMap::new(),
        stored: Vec::new(),
        isolated_steps: 0,
        diagnostics: Vec::new(),
        traces: Vec::new(),
    }
}

fn pool_oracle(m: &Matrix, bits: &[bool]) -> Vec<f64> {
    let rows: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    (0..m.cols())
        .map(|c| rows.iter().map(|&r| m.get(r, c) as f64).sum::<f64>() / rows.len() as f64)
        .collect()
}

proptest! {
    #[test]
    fn similarity_matches_cosine_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..20);
        let d = rng.gen_range(1..8);
        let mut bits_a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let mut bits_b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        bits_a[0] = true;
        bits_b[n - 1] = true;
        let (la, lb) = (random(n, d, &mut rng), random(n, d, &mut rng));
        let (pa, pb) = (pool_oracle(&la, &bits_a), pool_oracle(&lb, &bits_b));
        let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = dot / (norm(&pa) * norm(&pb));
        let a = scene(0, la.clone(), bits_a.clone());
        let b = scene(1, lb.clone(), bits_b.clone());
        let got = masked_feature_similarity(&a, &b, 0).unwrap();
        prop_assert!((got - want).abs() < 1e-6);
        prop_assert!((got - masked_feature_similarity(&b, &a, 0).unwrap()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&got));

        let s = rng.gen_range(0.01..100.0f64);
        let scaled_a: Vec<f64> = pa.iter().map(|x| x * s).collect();
        let scaled_b: Vec<f64> = pb.iter().map(|x| x * s).collect();
        prop_assert!((cosine(&scaled_a, &scaled_b).unwrap() - got).abs() < 1e-6);
        let mask = &a.masks[&0];
        prop_assert_eq!(pooled_features(&la, mask).unwrap().len(), d);
    }
}

#[test]
fn report_pairs_and_mean() {
    let plan = parse_script(
        "character Ana: a woman\ncharacter Bo: a boy\n\
         scene: Ana waits\nscene: Ana and Bo walk\nscene: Ana sleeps\n",
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let results: Vec<SceneResult> = (0..3)
        .map(|i| {
            scene(
                i,
                random(8, 4, &mut rng),
                (0..8).map(|j| j % 2 == i % 2 || j == 0).collect(),
            )
        })
        .collect();
    let report = consistency_report(&results, &plan, &PipelineConfig::default()).unwrap();
    assert_eq!(report.characters.len(), 1);
    let ana = &report.characters[0];
    let pairs: Vec<(usize, usize)> = ana.pairs.iter().map(|p| (p.first, p.later)).collect();
    assert_eq!(pairs, vec![(0, 1), (0, 2)]);
    let mean = ana.pairs.iter().map(|p| p.similarity).sum::<f64>() / 2.0;
    assert!((ana.mean - mean).abs() < 1e-9);
    assert!((report.overall.unwrap() - mean).abs() < 1e-9);
    assert_eq!(report.notes.len(), 1);
    assert!(report.notes[0].starts_with("Bo skipped"));
    assert!(!report.baseline);
    assert!(report.to_text().contains("overall"));
}
