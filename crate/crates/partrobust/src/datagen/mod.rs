//! Procedural part-annotated classification data plus the benchmark
//! transforms (corruptions, background swap, texture swap) and label
//! transforms (part bounding boxes, object segmentation, label dropping).
//!
//! Classification genuinely requires part layout: classes share one part
//! vocabulary and differ only in how parts are arranged, while textures and
//! background tints are class-correlated *spurious* cues. A nearest-centroid
//! classifier over ground-truth bounding-box features separates the classes
//! almost perfectly, which is the oracle the tests pin.

mod corrupt;
mod export;
mod synth;
mod transform;

pub use corrupt::{corrupt, severity_parameter, CorruptionKind, CORRUPTION_KINDS};
pub use export::{export_dataset, load_dataset, Manifest};
pub use transform::{background_swap, texture_swap, transform_labels, LabelMode};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, tags};

/// How sample backgrounds are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Solid,
    Textured,
}

/// Shape of the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub background: BackgroundMode,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            parts: 6,
            height: 32,
            width: 32,
            n_train: 4096,
            n_val: 512,
            n_test: 1024,
            seed: 0,
            background: BackgroundMode::Textured,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("DatasetSpec: need at least 2 classes"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("DatasetSpec: extents below 8 render nothing useful"));
        }
        Ok(())
    }
}

/// One sample: image in [0,1], class label, and a per-pixel part index
/// (0 = background, 1..=parts = part channels of the one-hot mask).
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
    pub mask: Arc<Vec<u8>>,
    pub parts: usize,
    /// Cleared by the label-fraction transform; training then skips the
    /// segmentation term for this sample.
    pub has_seg_label: bool,
}

impl Sample {
    pub fn spatial(&self) -> (usize, usize) {
        (self.x.shape()[1], self.x.shape()[2])
    }

    /// Expands the stored part indices into the (K+1, H, W) one-hot mask.
    pub fn one_hot_mask(&self) -> Tensor {
        let (h, w) = self.spatial();
        let mut data = vec![0.0; (self.parts + 1) * h * w];
        for (p, &idx) in self.mask.iter().enumerate() {
            data[idx as usize * h * w + p] = 1.0;
        }
        Tensor::new(vec![self.parts + 1, h, w], data).expect("one-hot shape")
    }
}

/// Generated splits. `parts` tracks the mask arity, which label transforms
/// may change (object segmentation collapses it to 1).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub parts: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::usage(format!("unknown split {other}"))),
        }
    }
}

fn render_sample(spec: &DatasetSpec, class: usize, sample_seed: u64) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let shapes = synth::instantiate_parts(class, spec.classes, spec.parts, h, w, &mut rng)?;
    let palette = synth::class_palette(class, spec.classes);
    let tex = synth::TextureInstance::draw(&mut rng);
    let background = synth::BackgroundInstance::draw(
        class,
        spec.classes,
        spec.background == BackgroundMode::Solid,
        h,
        w,
        &mut rng,
    );

    let mask = synth::rasterize(&shapes, h, w);
    let mut img = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let part = mask[r * w + c];
            let rgb = if part == 0 {
                background.color(r, c, h, w)
            } else {
                synth::foreground_color(&palette, &tex, part, spec.parts, r, c)
            };
            for ch in 0..3 {
                img[ch * h * w + r * w + c] = rgb[ch];
            }
        }
    }
    Ok(Sample {
        x: Tensor::new(vec![3, h, w], img)?,
        y: class,
        mask: Arc::new(mask),
        parts: spec.parts,
        has_seg_label: true,
    })
}

fn generate_split(spec: &DatasetSpec, tag: u64, count: usize) -> Result<Vec<Sample>> {
    // Class i mod C keeps every split balanced within one sample; the
    // per-sample seed stream makes generation order-independent.
    (0..count)
        .into_par_iter()
        .map(|i| {
            let class = i % spec.classes;
            render_sample(spec, class, derive_seed(spec.seed, tag, i as u64))
        })
        .collect()
}

/// Generates the train/val/test splits. Deterministic in `spec` (including
/// `spec.seed`); splits use disjoint derived-seed streams.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        parts: spec.parts,
        train: generate_split(spec, tags::TRAIN_SAMPLE, spec.n_train)?,
        val: generate_split(spec, tags::VAL_SAMPLE, spec.n_val)?,
        test: generate_split(spec, tags::TEST_SAMPLE, spec.n_test)?,
    })
}

/// Ground-truth soft-bounding-box features of the true mask: per part,
/// (area fraction, normalized centroid, normalized spread). Used by the
/// mask-oracle classifier and the benchmark sanity checks.
pub fn ground_truth_bbox_features(sample: &Sample) -> Vec<f64> {
    let (h, w) = sample.spatial();
    let mut features = Vec::with_capacity(5 * sample.parts);
    for part in 1..=sample.parts as u8 {
        let mut count = 0.0;
        let (mut sum_r, mut sum_c) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if sample.mask[r * w + c] == part {
                    count += 1.0;
                    sum_r += (r + 1) as f64;
                    sum_c += (c + 1) as f64;
                }
            }
        }
        if count == 0.0 {
            features.extend_from_slice(&[0.0; 5]);
            continue;
        }
        let (cr, cc) = (sum_r / count, sum_c / count);
        let (mut vr, mut vc) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if sample.mask[r * w + c] == part {
                    vr += ((r + 1) as f64 - cr).powi(2);
                    vc += ((c + 1) as f64 - cc).powi(2);
                }
            }
        }
        let norm_c = |v: f64, extent: usize| 2.0 * (v - 1.0) / (extent as f64 - 1.0) - 1.0;
        let norm_s = |v: f64, extent: usize| 2.0 * (v / count).sqrt() / (extent as f64 - 1.0);
        features.push(count / (h * w) as f64);
        features.push(norm_c(cr, h));
        features.push(norm_c(cc, w));
        features.push(norm_s(vr, h));
        features.push(norm_s(vc, w));
    }
    features
}

/// Nearest-centroid classifier over ground-truth bounding-box features:
/// fits per-class feature means on one set, predicts by closest mean.
pub struct MaskOracleClassifier {
    centroids: Vec<Vec<f64>>,
}

impl MaskOracleClassifier {
    pub fn fit(samples: &[Sample], classes: usize) -> Self {
        let dim = samples
            .first()
            .map(|s| 5 * s.parts)
            .unwrap_or(0);
        let mut centroids = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for s in samples {
            let f = ground_truth_bbox_features(s);
            for (acc, v) in centroids[s.y].iter_mut().zip(&f) {
                *acc += v;
            }
            counts[s.y] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            if n > 0 {
                for v in c.iter_mut() {
                    *v /= n as f64;
                }
            }
        }
        MaskOracleClassifier { centroids }
    }

    pub fn predict(&self, sample: &Sample) -> usize {
        let f = ground_truth_bbox_features(sample);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (class, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        best
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples.iter().filter(|s| self.predict(s) == s.y).count();
        correct as f64 / samples.len() as f64
    }
}
