//! Benchmark and label transforms: background swap, texture swap, part
//! bounding boxes, object segmentation, and label-fraction dropping.

use std::sync::Arc;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth;
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, tags};

/// Replaces background pixels of `s` with the donor's image values.
/// Foreground pixels, the label, and the mask are untouched.
pub fn background_swap(s: &Sample, donor: &Sample) -> Result<Sample> {
    if donor.y == s.y {
        return Err(Error::usage("background_swap: donor must be another class"));
    }
    if s.x.shape() != donor.x.shape() {
        return Err(Error::usage("background_swap: donor extent mismatch"));
    }
    let (h, w) = s.spatial();
    let hw = h * w;
    let mut data = s.x.data().to_vec();
    for p in 0..hw {
        if s.mask[p] == 0 {
            for ch in 0..3 {
                data[ch * hw + p] = donor.x.data()[ch * hw + p];
            }
        }
    }
    Ok(Sample {
        x: crate::diffcore::Tensor::new(s.x.shape().to_vec(), data)?,
        ..s.clone()
    })
}

/// Re-fills every part interior with a texture drawn from another class's
/// palette. Silhouettes, the mask, and the label stay fixed, so a
/// shape-driven classifier is unaffected while a texture-driven one breaks.
pub fn texture_swap(s: &Sample, classes: usize, texture_seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let donor_class = {
        let mut c = rng.gen_range(0..classes);
        if classes > 1 {
            while c == s.y {
                c = rng.gen_range(0..classes);
            }
        }
        c
    };
    let palette = synth::class_palette(donor_class, classes);
    let inst = synth::TextureInstance::draw(&mut rng);
    let (h, w) = s.spatial();
    let hw = h * w;
    let mut data = s.x.data().to_vec();
    for r in 0..h {
        for c in 0..w {
            let part = s.mask[r * w + c];
            if part == 0 {
                continue;
            }
            let rgb = synth::foreground_color(&palette, &inst, part, s.parts, r, c);
            for ch in 0..3 {
                data[ch * hw + r * w + c] = rgb[ch];
            }
        }
    }
    Ok(Sample {
        x: crate::diffcore::Tensor::new(s.x.shape().to_vec(), data)?,
        ..s.clone()
    })
}

/// Label-transform modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Fill each part's tight axis-aligned rectangle; overlaps go to the
    /// highest part index; background is the complement.
    PartBbox,
    /// Merge all part channels into one object channel (parts become 1).
    ObjectSeg,
    /// Keep only the given fraction of train-set segmentation labels.
    DropFraction(f64),
}

fn part_bbox_mask(mask: &[u8], parts: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for part in 1..=parts as u8 {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..h {
            for c in 0..w {
                if mask[r * w + c] == part {
                    bounds = Some(match bounds {
                        None => (r, r, c, c),
                        Some((rlo, rhi, clo, chi)) => {
                            (rlo.min(r), rhi.max(r), clo.min(c), chi.max(c))
                        }
                    });
                }
            }
        }
        if let Some((rlo, rhi, clo, chi)) = bounds {
            for r in rlo..=rhi {
                for c in clo..=chi {
                    out[r * w + c] = part; // ascending loop: highest part wins
                }
            }
        }
    }
    out
}

/// Applies a label transform to every split (labels only; images are
/// untouched). `DropFraction` affects only the train split.
pub fn transform_labels(dataset: &Dataset, mode: LabelMode, seed: u64) -> Result<Dataset> {
    let mut out = dataset.clone();
    match mode {
        LabelMode::PartBbox => {
            for split in [&mut out.train, &mut out.val, &mut out.test] {
                for s in split.iter_mut() {
                    let (h, w) = s.spatial();
                    s.mask = Arc::new(part_bbox_mask(&s.mask, s.parts, h, w));
                }
            }
        }
        LabelMode::ObjectSeg => {
            out.parts = 1;
            for split in [&mut out.train, &mut out.val, &mut out.test] {
                for s in split.iter_mut() {
                    s.mask = Arc::new(s.mask.iter().map(|&m| u8::from(m > 0)).collect());
                    s.parts = 1;
                }
            }
        }
        LabelMode::DropFraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::usage(format!("drop fraction {f} outside [0,1]")));
            }
            let n = out.train.len();
            let n_drop = ((1.0 - f) * n as f64).round() as usize;
            let mut indices: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tags::LABEL_DROP, 0));
            indices.shuffle(&mut rng);
            for &i in indices.iter().take(n_drop) {
                out.train[i].has_seg_label = false;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetSpec, MaskOracleClassifier};

    fn tiny() -> Dataset {
        generate_dataset(&DatasetSpec {
            n_train: 32,
            n_val: 8,
            n_test: 16,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn background_swap_keeps_foreground_and_label() {
        let ds = tiny();
        let s = &ds.test[0];
        let donor = ds.test.iter().find(|d| d.y != s.y).unwrap();
        let swapped = background_swap(s, donor).unwrap();
        assert_eq!(swapped.y, s.y);
        assert_eq!(swapped.mask, s.mask);
        let (h, w) = s.spatial();
        let hw = h * w;
        for p in 0..hw {
            for ch in 0..3 {
                let want = if s.mask[p] != 0 {
                    s.x.data()[ch * hw + p]
                } else {
                    donor.x.data()[ch * hw + p]
                };
                assert_eq!(swapped.x.data()[ch * hw + p], want);
            }
        }
    }

    #[test]
    fn background_swap_with_own_background_is_identity() {
        let ds = tiny();
        let s = &ds.test[0];
        // A donor carrying s's own pixels but a different label.
        let donor = Sample {
            y: (s.y + 1) % ds.spec.classes,
            ..s.clone()
        };
        let swapped = background_swap(s, &donor).unwrap();
        assert_eq!(swapped.x.data(), s.x.data());
    }

    #[test]
    fn background_swap_rejects_same_class() {
        let ds = tiny();
        let s = &ds.test[0];
        let donor = ds.test.iter().find(|d| d.y == s.y && !std::ptr::eq(*d, s));
        assert!(background_swap(s, donor.unwrap()).is_err());
    }

    #[test]
    fn texture_swap_preserves_mask_label_and_oracle_accuracy() {
        let ds = tiny();
        let oracle = MaskOracleClassifier::fit(&ds.train, ds.spec.classes);
        for (i, s) in ds.test.iter().enumerate() {
            let swapped = texture_swap(s, ds.spec.classes, 1000 + i as u64).unwrap();
            assert_eq!(swapped.mask, s.mask);
            assert_eq!(swapped.y, s.y);
            assert_eq!(oracle.predict(&swapped), oracle.predict(s));
            // Background pixels untouched.
            let (h, w) = s.spatial();
            let hw = h * w;
            for p in 0..hw {
                if s.mask[p] == 0 {
                    for ch in 0..3 {
                        assert_eq!(swapped.x.data()[ch * hw + p], s.x.data()[ch * hw + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn part_bbox_covers_original_pixels() {
        let ds = tiny();
        let boxed = transform_labels(&ds, LabelMode::PartBbox, 0).unwrap();
        for (orig, b) in ds.test.iter().zip(&boxed.test) {
            let (h, w) = orig.spatial();
            for part in 1..=orig.parts as u8 {
                for r in 0..h {
                    for c in 0..w {
                        if orig.mask[r * w + c] == part {
                            // Inside its part's rectangle: the boxed mask here
                            // is `part` or a higher-index overlapping part.
                            assert!(
                                b.mask[r * w + c] >= part,
                                "pixel ({r},{c}) left rectangle of part {part}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn object_seg_is_union_of_parts() {
        let ds = tiny();
        let merged = transform_labels(&ds, LabelMode::ObjectSeg, 0).unwrap();
        assert_eq!(merged.parts, 1);
        for (orig, m) in ds.train.iter().zip(&merged.train) {
            assert_eq!(m.parts, 1);
            for (a, b) in orig.mask.iter().zip(m.mask.iter()) {
                assert_eq!(*b, u8::from(*a > 0));
            }
        }
    }

    #[test]
    fn drop_fraction_one_keeps_everything() {
        let ds = tiny();
        let kept = transform_labels(&ds, LabelMode::DropFraction(1.0), 3).unwrap();
        assert!(kept.train.iter().all(|s| s.has_seg_label));
    }

    #[test]
    fn drop_fraction_half_drops_half_of_train_only() {
        let ds = tiny();
        let dropped = transform_labels(&ds, LabelMode::DropFraction(0.5), 3).unwrap();
        let kept = dropped.train.iter().filter(|s| s.has_seg_label).count();
        assert_eq!(kept, ds.train.len() / 2);
        assert!(dropped.val.iter().all(|s| s.has_seg_label));
        // Deterministic in the seed.
        let again = transform_labels(&ds, LabelMode::DropFraction(0.5), 3).unwrap();
        for (a, b) in dropped.train.iter().zip(&again.train) {
            assert_eq!(a.has_seg_label, b.has_seg_label);
        }
    }
}
