//! Common-corruption transforms with five severity levels each.
//!
//! Severity parameter tables are desk-scale constants for 32x32 images,
//! frozen here for reproducibility. Severity 0 is the identity and is
//! reserved for testing.
//!
//! | kind            | parameter        | severities 1..5            |
//! |-----------------|------------------|----------------------------|
//! | gaussian_noise  | sigma            | .04 .06 .08 .10 .12        |
//! | shot_noise      | photons/unit     | 60 35 20 10 5              |
//! | blur            | gaussian sigma   | .40 .60 .80 1.00 1.30      |
//! | brightness      | additive delta   | .06 .12 .18 .24 .30        |
//! | contrast        | scale about mean | .80 .65 .50 .38 .28        |
//! | pixelate        | block size       | 2 3 4 6 8                  |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    Blur,
    Brightness,
    Contrast,
    Pixelate,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 6] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::Blur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Pixelate,
];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        CORRUPTION_KINDS
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::usage(format!("unknown corruption kind {name}")))
    }
}

/// The frozen severity table value for (kind, severity).
pub fn severity_parameter(kind: CorruptionKind, severity: usize) -> Result<f64> {
    if severity > 5 {
        return Err(Error::usage(format!("severity {severity} out of range 0..=5")));
    }
    if severity == 0 {
        return Ok(0.0);
    }
    let table: [f64; 5] = match kind {
        CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.10, 0.12],
        CorruptionKind::ShotNoise => [60.0, 35.0, 20.0, 10.0, 5.0],
        CorruptionKind::Blur => [0.40, 0.60, 0.80, 1.00, 1.30],
        CorruptionKind::Brightness => [0.06, 0.12, 0.18, 0.24, 0.30],
        CorruptionKind::Contrast => [0.80, 0.65, 0.50, 0.38, 0.28],
        CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
    };
    Ok(table[severity - 1])
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Knuth's method; fine for the small rates in the table.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let limit = (-lambda).exp();
    let mut product: f64 = rng.gen();
    let mut k = 0.0;
    while product > limit {
        product *= rng.gen::<f64>();
        k += 1.0;
    }
    k
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let cc = (c as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let rr = (r as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Applies `kind` at the given severity. Deterministic in `seed`; output is
/// clipped to [0,1]. Severity 0 returns the input unchanged.
pub fn corrupt(x: &Tensor, kind: CorruptionKind, severity: usize, seed: u64) -> Result<Tensor> {
    if x.shape().len() != 3 || x.shape()[0] != 3 {
        return Err(Error::usage("corrupt: expected a (3,H,W) image"));
    }
    let param = severity_parameter(kind, severity)?;
    if severity == 0 {
        return Ok(x.clone());
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = x.data().to_vec();
    match kind {
        CorruptionKind::GaussianNoise => {
            for v in data.iter_mut() {
                *v += param * standard_normal(&mut rng);
            }
        }
        CorruptionKind::ShotNoise => {
            for v in data.iter_mut() {
                *v = poisson(&mut rng, *v * param) / param;
            }
        }
        CorruptionKind::Blur => {
            let kernel = gaussian_kernel(param);
            for ch in 0..3 {
                let out = blur_plane(&data[ch * hw..(ch + 1) * hw], h, w, &kernel);
                data[ch * hw..(ch + 1) * hw].copy_from_slice(&out);
            }
        }
        CorruptionKind::Brightness => {
            for v in data.iter_mut() {
                *v += param;
            }
        }
        CorruptionKind::Contrast => {
            let mean = data.iter().sum::<f64>() / data.len() as f64;
            for v in data.iter_mut() {
                *v = (*v - mean) * param + mean;
            }
        }
        CorruptionKind::Pixelate => {
            let block = param as usize;
            for ch in 0..3 {
                let plane = &mut data[ch * hw..(ch + 1) * hw];
                for br in (0..h).step_by(block) {
                    for bc in (0..w).step_by(block) {
                        let (rhi, chi) = ((br + block).min(h), (bc + block).min(w));
                        let n = ((rhi - br) * (chi - bc)) as f64;
                        let mut acc = 0.0;
                        for r in br..rhi {
                            for c in bc..chi {
                                acc += plane[r * w + c];
                            }
                        }
                        let mean = acc / n;
                        for r in br..rhi {
                            for c in bc..chi {
                                plane[r * w + c] = mean;
                            }
                        }
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severity_zero_is_identity() {
        let x = Tensor::full(vec![3, 8, 8], 0.3);
        for kind in CORRUPTION_KINDS {
            let y = corrupt(&x, kind, 0, 7).unwrap();
            assert_eq!(x.data(), y.data(), "{kind:?}");
        }
    }

    #[test]
    fn gaussian_severity_five_matches_table_std() {
        let x = Tensor::full(vec![3, 32, 32], 0.5);
        let y = corrupt(&x, CorruptionKind::GaussianNoise, 5, 123).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.numel() as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.numel() as f64;
        let std = var.sqrt();
        let want = severity_parameter(CorruptionKind::GaussianNoise, 5).unwrap();
        assert!(
            (std - want).abs() / want < 0.10,
            "std {std} vs table {want}"
        );
    }

    #[test]
    fn brightness_is_uniform_shift_before_clip() {
        let x = Tensor::full(vec![3, 4, 4], 0.4);
        let y = corrupt(&x, CorruptionKind::Brightness, 2, 1).unwrap();
        let delta = severity_parameter(CorruptionKind::Brightness, 2).unwrap();
        for &v in y.data() {
            assert!((v - (0.4 + delta)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_in_seed_and_clipped() {
        let x = Tensor::full(vec![3, 8, 8], 0.9);
        for kind in CORRUPTION_KINDS {
            let a = corrupt(&x, kind, 4, 99).unwrap();
            let b = corrupt(&x, kind, 4, 99).unwrap();
            assert_eq!(a.data(), b.data());
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn unknown_kind_name_rejected() {
        assert!(CorruptionKind::parse("fog").is_err());
        assert!(CorruptionKind::parse("blur").is_ok());
    }
}
