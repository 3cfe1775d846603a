//! Differentiable mask-to-feature operators: foreground gating, soft
//! bounding-box geometry, downsampled mask features, and the parameter-free
//! pixel aggregation.
//!
//! Index conventions: part channels are 1..=K with channel 0 the background.
//! Geometry works in 1-based index space (rows 1..=H, columns 1..=W); the
//! bounding-box normalization maps centroids affinely onto [-1, 1] and
//! spreads onto [0, 1], absorbing the offset.

use std::sync::Arc;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Predicted mask logits: channel 0 = background, channels 1..=K = parts.
#[derive(Debug, Clone, Copy)]
pub struct SegLogits {
    pub logits: Var,
    pub parts: usize,
}

impl SegLogits {
    /// Wraps a (K+1, H, W) logit tensor already on the graph.
    pub fn new(graph: &Graph, logits: Var, parts: usize) -> Result<Self> {
        let shape = graph.value(logits).shape();
        if parts == 0 {
            return Err(Error::config("SegLogits: need at least one part"));
        }
        if shape.len() != 3 || shape[0] != parts + 1 {
            return Err(Error::config(format!(
                "SegLogits: expected ({}, H, W), got {:?}",
                parts + 1,
                shape
            )));
        }
        Ok(SegLogits { logits, parts })
    }

    pub fn spatial(&self, graph: &Graph) -> (usize, usize) {
        let s = graph.value(self.logits).shape();
        (s[1], s[2])
    }
}

/// Head-specific feature payloads. The variant must match the head that
/// consumes it.
#[derive(Debug, Clone, Copy)]
pub enum PartFeatures {
    /// (Kc, pool, pool) pooled softmax masks.
    Downsampled(Var),
    /// The 5K soft bounding-box vector.
    Bbox(Var),
    /// C class logits, already final.
    Pixel(Var),
    /// The segmenter bottleneck tensor.
    TwoHeaded(Var),
}

/// Per-part soft geometry in 1-based index space.
#[derive(Debug, Clone)]
pub struct PartGeometry {
    /// One entry per part: (row centroid, row spread, col centroid, col spread).
    pub per_part: Vec<(Var, Var, Var, Var)>,
}

/// `F(h,w) = sigmoid(sum_k logits_k - logits_0)`: soft foreground mass.
pub fn foreground_mask(g: &mut Graph, seg: SegLogits) -> Result<Var> {
    let part_sum = {
        let parts = g.slice_channels(seg.logits, 1, seg.parts + 1)?;
        g.sum_channel_axis(parts)?
    };
    let bg = g.slice_channel(seg.logits, 0)?;
    let diff = g.sub(part_sum, bg)?;
    g.sigmoid(diff)
}

/// Per-part confidence scores: foreground-weighted means of the raw part
/// logit masks. Returns a length-K vector.
pub fn part_scores(g: &mut Graph, seg: SegLogits, fg: Var) -> Result<Var> {
    let denom = g.sum(fg)?;
    let mut scores = Vec::with_capacity(seg.parts);
    for i in 0..seg.parts {
        let plane = g.slice_channel(seg.logits, i + 1)?;
        let weighted = g.mul(plane, fg)?;
        let num = g.sum(weighted)?;
        scores.push(g.div_scalar(num, denom)?);
    }
    g.stack_scalars(&scores)
}

fn index_weights(extent: usize, squared: bool) -> Arc<Tensor> {
    let data = (1..=extent)
        .map(|i| {
            let v = i as f64;
            if squared {
                v * v
            } else {
                v
            }
        })
        .collect();
    Arc::new(Tensor::from_vec(data))
}

/// Centroid and spread of one marginal mass vector, in 1-based index space.
/// Computes `sigma = sqrt(E[i^2] - 2 c E[i] + c^2 sum(p))`, the expanded form
/// of `sum_i p(i) (i - c)^2`.
fn marginal_moments(g: &mut Graph, mass: Var, total: Var, extent: usize) -> Result<(Var, Var)> {
    let p = g.div_scalar(mass, total)?;
    let idx = index_weights(extent, false);
    let idx_sq = index_weights(extent, true);
    let c = g.dot_const(p, idx)?;
    let m2 = g.dot_const(p, idx_sq)?;
    let s0 = g.sum(p)?;
    let c_sq = g.mul(c, c)?;
    let c_sq_s0 = g.mul(c_sq, s0)?;
    let twice_c_sq = g.scale(c_sq, 2.0)?;
    let partial = g.add(m2, c_sq_s0)?;
    let variance = g.sub(partial, twice_c_sq)?;
    let sigma = g.sqrt(variance)?;
    Ok((c, sigma))
}

/// Soft geometry of every part from the softmax mask with the background
/// channel removed (not renormalized).
pub fn part_geometry(g: &mut Graph, seg: SegLogits) -> Result<PartGeometry> {
    let (h, w) = seg.spatial(g);
    let sm = g.softmax_channels(seg.logits)?;
    let parts_sm = g.slice_channels(sm, 1, seg.parts + 1)?;
    let mut per_part = Vec::with_capacity(seg.parts);
    for i in 0..seg.parts {
        let plane = g.slice_channel(parts_sm, i)?;
        let total = g.sum(plane)?;
        let row_mass = g.sum_rows(plane)?;
        let (c1, s1) = marginal_moments(g, row_mass, total, h)?;
        let col_mass = g.sum_cols(plane)?;
        let (c2, s2) = marginal_moments(g, col_mass, total, w)?;
        per_part.push((c1, s1, c2, s2));
    }
    Ok(PartGeometry { per_part })
}

/// The dense 5K bounding-box feature vector
/// `v_i = [s_i, c1_i, c2_i, sigma1_i, sigma2_i]`, with centroids mapped onto
/// [-1, 1] and spreads onto [0, 1]; scores pass through unnormalized.
pub fn bbox_features(g: &mut Graph, seg: SegLogits) -> Result<Var> {
    let (h, w) = seg.spatial(g);
    if h < 2 || w < 2 {
        return Err(Error::config(
            "bbox_features: normalization undefined for 1-pixel extents",
        ));
    }
    let fg = foreground_mask(g, seg)?;
    let scores = part_scores(g, seg, fg)?;
    let geom = part_geometry(g, seg)?;

    let norm_c = |g: &mut Graph, c: Var, extent: usize| -> Result<Var> {
        let shifted = g.add_const(c, -1.0)?;
        let scaled = g.scale(shifted, 2.0 / (extent as f64 - 1.0))?;
        g.add_const(scaled, -1.0)
    };
    let norm_s = |g: &mut Graph, s: Var, extent: usize| -> Result<Var> {
        g.scale(s, 2.0 / (extent as f64 - 1.0))
    };

    let mut components = Vec::with_capacity(5 * seg.parts);
    for (i, &(c1, s1, c2, s2)) in geom.per_part.iter().enumerate() {
        let score = g.index_element(scores, i)?;
        components.push(score);
        components.push(norm_c(g, c1, h)?);
        components.push(norm_c(g, c2, w)?);
        components.push(norm_s(g, s1, h)?);
        components.push(norm_s(g, s2, w)?);
    }
    g.stack_scalars(&components)
}

/// Pixel-wise softmax, optional background drop, then adaptive average
/// pooling to `pool x pool`.
pub fn downsample_features(
    g: &mut Graph,
    seg: SegLogits,
    pool: usize,
    include_background: bool,
) -> Result<Var> {
    let (h, w) = seg.spatial(g);
    if pool == 0 || pool > h.min(w) {
        return Err(Error::config(format!(
            "downsample_features: pool {pool} invalid for {h}x{w} masks"
        )));
    }
    let sm = g.softmax_channels(seg.logits)?;
    let masked = if include_background {
        sm
    } else {
        g.slice_channels(sm, 1, seg.parts + 1)?
    };
    g.adaptive_avg_pool(masked, pool, pool)
}

/// Parameter-free class logits: per pixel, sums the raw part logits mapped
/// to each class, then averages over pixels. `part_to_class[i]` is the class
/// of part `i+1`; the background channel stays unmapped.
pub fn pixel_logits(
    g: &mut Graph,
    seg: SegLogits,
    part_to_class: &[usize],
    classes: usize,
) -> Result<Var> {
    if part_to_class.len() != seg.parts {
        return Err(Error::config(format!(
            "pixel_logits: map covers {} parts, segmenter has {}",
            part_to_class.len(),
            seg.parts
        )));
    }
    if let Some(&bad) = part_to_class.iter().find(|&&c| c >= classes) {
        return Err(Error::config(format!(
            "pixel_logits: part mapped to class {bad}, only {classes} classes"
        )));
    }
    let mut class_logits = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut acc: Option<Var> = None;
        for (i, &c) in part_to_class.iter().enumerate() {
            if c != class {
                continue;
            }
            let plane = g.slice_channel(seg.logits, i + 1)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, plane)?,
                None => plane,
            });
        }
        let logit = match acc {
            Some(summed) => g.mean(summed)?,
            None => g.leaf(Tensor::scalar(0.0), false),
        };
        class_logits.push(logit);
    }
    g.stack_scalars(&class_logits)
}
