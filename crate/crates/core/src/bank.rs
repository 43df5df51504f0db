//! Write-once store of each character's token rows from its first scene.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::CharacterMask;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub character: usize,
    /// Index of the block whose input rows were captured.
    pub block: usize,
    /// `n × d` rows of the block input at mask-1 positions, row-major order.
    pub tokens: Matrix,
    pub n: usize,
    pub source_scene: usize,
}

/// Column range of one character's reference tokens in the concatenated keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpan {
    pub character: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcatLayout {
    pub image_token_count: usize,
    pub spans: Vec<LayoutSpan>,
}

impl ConcatLayout {
    pub fn image_only(image_token_count: usize) -> Self {
        Self {
            image_token_count,
            spans: Vec::new(),
        }
    }

    /// Contiguous layout starting right after the image tokens.
    pub fn from_lengths(image_token_count: usize, lengths: &[(usize, usize)]) -> Self {
        let mut start = image_token_count;
        let spans = lengths
            .iter()
            .map(|&(character, len)| {
                let s = LayoutSpan { character, start, len };
                start += len;
                s
            })
            .collect();
        Self {
            image_token_count,
            spans,
        }
    }

    pub fn key_len(&self) -> usize {
        self.image_token_count + self.spans.iter().map(|s| s.len).sum::<usize>()
    }

    pub fn span_of(&self, character: usize) -> Option<&LayoutSpan> {
        self.spans.iter().find(|s| s.character == character)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceBank {
    entries: BTreeMap<(usize, usize), ReferenceEntry>,
    /// Characters whose debut mask was empty, with the scene it happened in.
    skipped: BTreeMap<usize, usize>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    entries: Vec<ReferenceEntry>,
    skipped: Vec<(usize, usize)>,
}

impl ReferenceBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReferenceEntry> {
        self.entries.values()
    }

    pub fn get(&self, character: usize, block: usize) -> Option<&ReferenceEntry> {
        self.entries.get(&(character, block))
    }

    /// True when the character's debut produced no usable mask.
    pub fn is_skipped(&self, character: usize) -> bool {
        self.skipped.contains_key(&character)
    }

    pub fn characters(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|&(c, _)| c).collect()
    }

    /// Stores the rows of `input` selected by `mask` for a character's first scene.
    pub fn store_new(
        &mut self,
        character: usize,
        block: usize,
        input: &Matrix,
        mask: &CharacterMask,
        scene: usize,
    ) -> Result<&ReferenceEntry> {
        if self.entries.contains_key(&(character, block)) {
            return Err(Error::DuplicateReference { character, block });
        }
        if mask.bits.len() != input.rows() {
            return Err(Error::shape(
                "store_new",
                format!("mask of {} cells for {} rows", mask.bits.len(), input.rows()),
            ));
        }
        let positions = mask.positions();
        if mask.degenerate || positions.is_empty() {
            self.skipped.entry(character).or_insert(scene);
            return Err(Error::DegenerateReference { character });
        }
        let tokens = input.select_rows(&positions)?;
        let entry = ReferenceEntry {
            character,
            block,
            n: positions.len(),
            tokens,
            source_scene: scene,
        };
        Ok(self.entries.entry((character, block)).or_insert(entry))
    }

    /// Entries for `ids` at `block`, in ascending id order, with their layout.
    pub fn fetch(
        &self,
        ids: &[usize],
        block: usize,
        image_token_count: usize,
    ) -> Result<(Vec<&ReferenceEntry>, ConcatLayout)> {
        let ordered: BTreeSet<usize> = ids.iter().copied().collect();
        let mut entries = Vec::with_capacity(ordered.len());
        for id in ordered {
            let e = self
                .entries
                .get(&(id, block))
                .ok_or(Error::MissingReference { character: id, block })?;
            entries.push(e);
        }
        let lengths: Vec<(usize, usize)> = entries.iter().map(|e| (e.character, e.n)).collect();
        Ok((entries, ConcatLayout::from_lengths(image_token_count, &lengths)))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BankFile {
            entries: self.entries.values().cloned().collect(),
            skipped: self.skipped.iter().map(|(&c, &s)| (c, s)).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)?;
        let mut bank = ReferenceBank::new();
        for e in file.entries {
            if e.n != e.tokens.rows() || e.n == 0 {
                return Err(Error::Format(format!(
                    "entry ({}, {}) declares n = {} with {} rows",
                    e.character,
                    e.block,
                    e.n,
                    e.tokens.rows()
                )));
            }
            if bank.entries.insert((e.character, e.block), e).is_some() {
                return Err(Error::Format("duplicate bank entry".into()));
            }
        }
        bank.skipped = file.skipped.into_iter().collect();
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8]) -> CharacterMask {
        CharacterMask {
            character: 0,
            h: 1,
            w: bits.len(),
            bits: bits.iter().map(|&b| b == 1).collect(),
            cv: 0.3,
            degenerate: false,
        }
    }

    fn input(rows: usize, d: usize) -> Matrix {
        Matrix::new(rows, d, (0..rows * d).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn store_selects_masked_rows() {
        let mut bank = ReferenceBank::new();
        let i = input(4, 2);
        let e = bank.store_new(0, 2, &i, &mask(&[1, 0, 0, 1]), 0).unwrap();
        assert_eq!(e.n, 2);
        assert_eq!(e.tokens.values(), &[0.0, 1.0, 6.0, 7.0]);

        let e = bank.store_new(1, 2, &i, &mask(&[1, 1, 1, 1]), 0).unwrap();
        assert_eq!(e.tokens, i);
    }

    #[test]
    fn store_matches_row_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let i = Matrix::new(16, 3, (0..48).map(|_| rng.gen()).collect()).unwrap();
            let bits: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2)).collect();
            if bits.iter().all(|&b| b == 0) {
                continue;
            }
            let mut bank = ReferenceBank::new();
            let e = bank.store_new(trial, 0, &i, &mask(&bits), 0).unwrap();
            let want: Vec<f32> = (0..16)
                .filter(|&r| bits[r] == 1)
                .flat_map(|r| i.row(r).to_vec())
                .collect();
            assert_eq!(e.tokens.values(), &want[..]);
            assert_eq!(e.n, bits.iter().filter(|&&b| b == 1).count());
        }
    }

    #[test]
    fn store_is_write_once_and_skips_degenerate() {
        let mut bank = ReferenceBank::new();
        let i = input(2, 1);
        bank.store_new(0, 0, &i, &mask(&[1, 0]), 0).unwrap();
        let before = bank.clone();
        assert!(matches!(
            bank.store_new(0, 0, &i, &mask(&[1, 1]), 1),
            Err(Error::DuplicateReference { .. })
        ));
        assert_eq!(bank, before);

        let mut degenerate = mask(&[0, 0]);
        degenerate.degenerate = true;
        assert!(matches!(
            bank.store_new(5, 0, &i, &degenerate, 0),
            Err(Error::DegenerateReference { character: 5 })
        ));
        assert!(bank.get(5, 0).is_none());
        assert!(bank.is_skipped(5));
    }

    #[test]
    fn fetch_layout_offsets() {
        let mut bank = ReferenceBank::new();
        let i = input(16, 2);
        let mut b3 = vec![0u8; 16];
        b3[..3].fill(1);
        let mut b5 = vec![0u8; 16];
        b5[..5].fill(1);
        bank.store_new(4, 1, &i, &mask(&b5), 0).unwrap();
        bank.store_new(2, 1, &i, &mask(&b3), 0).unwrap();
        let (entries, layout) = bank.fetch(&[4, 2], 1, 16).unwrap();
        assert_eq!(entries.iter().map(|e| e.character).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(
            layout.spans[0],
            LayoutSpan {
                character: 2,
                start: 16,
                len: 3
            }
        );
        assert_eq!(
            layout.spans[1],
            LayoutSpan {
                character: 4,
                start: 19,
                len: 5
            }
        );
        assert_eq!(layout.key_len(), 24);

        let (entries, layout) = bank.fetch(&[], 1, 16).unwrap();
        assert!(entries.is_empty());
        assert_eq!(layout.key_len(), 16);

        assert!(matches!(
            bank.fetch(&[7], 1, 16),
            Err(Error::MissingReference { character: 7, block: 1 })
        ));
    }

    #[test]
    fn layout_is_prefix_sum() {
        let lens = [(0, 7), (1, 1), (2, 12)];
        let layout = ConcatLayout::from_lengths(64, &lens);
        let mut acc = 64;
        for (span, &(c, n)) in layout.spans.iter().zip(&lens) {
            assert_eq!((span.character, span.start, span.len), (c, acc, n));
            acc += n;
        }
        assert_eq!(layout.key_len(), acc);
    }

    #[test]
    fn dump_and_restore() {
        let mut bank = ReferenceBank::new();
        bank.store_new(0, 3, &input(4, 2), &mask(&[0, 1, 1, 0]), 2).unwrap();
        let mut degenerate = mask(&[0, 0, 0, 0]);
        degenerate.degenerate = true;
        let _ = bank.store_new(1, 3, &input(4, 2), &degenerate, 2);
        let restored = ReferenceBank::from_json(&bank.to_json().unwrap()).unwrap();
        assert_eq!(restored, bank);
    }
}
