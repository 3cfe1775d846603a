//! The segmenter network, the four classifier heads, the composed model
//! `f = f_cls . f_seg`, and the parameter-matched baseline CNN.
//!
//! The segmenter is a small encoder-decoder: three stride-1 convs with 2x
//! average-pool downsampling between them (x4 total), a bottleneck conv,
//! then nearest-neighbor upsampling back to full resolution. Head hidden
//! widths scale with `width_base` so every part model stays within 10% of
//! the baseline's parameter count at matched width.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::partfeat::{self, PartFeatures, SegLogits};

/// Which second-stage classifier sits on top of the segmenter. `Baseline`
/// is the parameter-matched non-part CNN used for comparisons: the same
/// encoder with global pooling and a two-layer classifier, no decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Downsampled,
    Bbox,
    Pixel,
    TwoHeaded,
    Baseline,
}

impl HeadKind {
    pub fn is_part_model(self) -> bool {
        self != HeadKind::Baseline
    }
}

/// Architecture and shape configuration for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: usize,
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub head: HeadKind,
    /// Downsampled head only: pooled mask extent.
    pub pool: usize,
    /// Downsampled head only: keep the background channel.
    pub include_background: bool,
    /// Downsampled head only: channel-concatenate the pooled raw image.
    pub concat_input: bool,
    /// Segmenter width knob; encoder channels are (w, 2w, 4w).
    pub width_base: usize,
    /// Pixel head only: class of each part (defaults to `i % classes`).
    pub part_to_class: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 8,
            parts: 6,
            height: 32,
            width: 32,
            head: HeadKind::Downsampled,
            pool: 4,
            include_background: true,
            concat_input: false,
            width_base: 16,
            part_to_class: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("ModelConfig: need at least 2 classes"));
        }
        if self.parts == 0 {
            return Err(Error::config("ModelConfig: need at least 1 part"));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::config(
                "ModelConfig: encoder pools twice, extents must be divisible by 4",
            ));
        }
        if self.width_base == 0 {
            return Err(Error::config("ModelConfig: width_base must be positive"));
        }
        if self.head == HeadKind::Downsampled {
            if self.pool == 0 || self.pool > self.height.min(self.width) {
                return Err(Error::config(format!(
                    "ModelConfig: pool {} invalid for {}x{}",
                    self.pool, self.height, self.width
                )));
            }
        } else if self.concat_input {
            return Err(Error::config(
                "ModelConfig: concat_input is a downsampled-head knob",
            ));
        }
        if let Some(map) = &self.part_to_class {
            if self.head != HeadKind::Pixel {
                return Err(Error::config(
                    "ModelConfig: part_to_class is a pixel-head knob",
                ));
            }
            if map.len() != self.parts {
                return Err(Error::config(format!(
                    "ModelConfig: part_to_class covers {} parts, model has {}",
                    map.len(),
                    self.parts
                )));
            }
            if map.iter().any(|&c| c >= self.classes) {
                return Err(Error::config("ModelConfig: part mapped to missing class"));
            }
        }
        Ok(())
    }

    pub fn part_to_class_or_default(&self) -> Vec<usize> {
        self.part_to_class
            .clone()
            .unwrap_or_else(|| (0..self.parts).map(|i| i % self.classes).collect())
    }

    fn bbox_hidden(&self) -> usize {
        4 * self.width_base
    }
    fn down_hidden(&self) -> usize {
        2 * self.width_base
    }
    fn two_headed_hidden(&self) -> usize {
        3 * self.width_base
    }
    fn baseline_hidden(&self) -> usize {
        12 * self.width_base
    }
    fn down_conv_in(&self) -> usize {
        let masks = if self.include_background {
            self.parts + 1
        } else {
            self.parts
        };
        if self.concat_input {
            masks + 3
        } else {
            masks
        }
    }
}

#[derive(Debug, Clone)]
enum LayerShape {
    Conv { cin: usize, cout: usize, k: usize },
    LinearFc { fin: usize, fout: usize },
}

/// Named parameter layout for a config; init and forward share this list so
/// names and shapes cannot drift apart.
fn layer_specs(cfg: &ModelConfig) -> Vec<(String, LayerShape)> {
    let w = cfg.width_base;
    let kplus1 = cfg.parts + 1;
    let mut specs = vec![
        ("seg.enc1".into(), LayerShape::Conv { cin: 3, cout: w, k: 3 }),
        ("seg.enc2".into(), LayerShape::Conv { cin: w, cout: 2 * w, k: 3 }),
        ("seg.enc3".into(), LayerShape::Conv { cin: 2 * w, cout: 4 * w, k: 3 }),
        ("seg.bottleneck".into(), LayerShape::Conv { cin: 4 * w, cout: 4 * w, k: 3 }),
    ];
    match cfg.head {
        HeadKind::Baseline => {
            specs.push((
                "head.fc1".into(),
                LayerShape::LinearFc { fin: 4 * w, fout: cfg.baseline_hidden() },
            ));
            specs.push((
                "head.fc2".into(),
                LayerShape::LinearFc { fin: cfg.baseline_hidden(), fout: cfg.classes },
            ));
            return specs;
        }
        _ => {
            specs.push(("seg.dec1".into(), LayerShape::Conv { cin: 4 * w, cout: w, k: 3 }));
            specs.push(("seg.dec2".into(), LayerShape::Conv { cin: w, cout: kplus1, k: 3 }));
        }
    }
    match cfg.head {
        HeadKind::Downsampled => {
            specs.push((
                "head.conv".into(),
                LayerShape::Conv { cin: cfg.down_conv_in(), cout: w, k: 3 },
            ));
            specs.push((
                "head.fc1".into(),
                LayerShape::LinearFc {
                    fin: w * cfg.pool * cfg.pool,
                    fout: cfg.down_hidden(),
                },
            ));
            specs.push((
                "head.fc2".into(),
                LayerShape::LinearFc { fin: cfg.down_hidden(), fout: cfg.classes },
            ));
        }
        HeadKind::Bbox => {
            let h = cfg.bbox_hidden();
            specs.push((
                "head.fc1".into(),
                LayerShape::LinearFc { fin: 5 * cfg.parts, fout: h },
            ));
            specs.push(("head.fc2".into(), LayerShape::LinearFc { fin: h, fout: h }));
            specs.push((
                "head.fc3".into(),
                LayerShape::LinearFc { fin: h, fout: cfg.classes },
            ));
        }
        HeadKind::TwoHeaded => {
            let h = cfg.two_headed_hidden();
            specs.push((
                "head.fc1".into(),
                LayerShape::LinearFc { fin: 4 * w, fout: h },
            ));
            specs.push((
                "head.fc2".into(),
                LayerShape::LinearFc { fin: h, fout: cfg.classes },
            ));
        }
        HeadKind::Pixel | HeadKind::Baseline => {}
    }
    specs
}

/// Named parameter tensors plus their SGD velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    velocities: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<(String, Tensor)>, velocities: Vec<Tensor>) -> Self {
        ModelParams { entries, velocities }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters belonging to the second-stage classifier.
    pub fn classifier_param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Applies one SGD update to every parameter; `grads` must be aligned
    /// with `entries()` order.
    pub fn sgd_step(
        &mut self,
        grads: &[Tensor],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::usage(format!(
                "sgd_step: {} grads for {} params",
                grads.len(),
                self.entries.len()
            )));
        }
        for ((entry, vel), grad) in self
            .entries
            .iter_mut()
            .zip(self.velocities.iter_mut())
            .zip(grads)
        {
            crate::diffcore::sgd_step(&mut entry.1, vel, grad, lr, momentum, weight_decay)?;
        }
        Ok(())
    }

    /// Binds every parameter onto `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for one forward pass's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Assembles a binding from already-created leaves (used by gradient
    /// checks that perturb parameters directly).
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        BoundParams { vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::usage(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Standard normal via Box-Muller on a seeded stream.
struct NormalSource<R: rand::Rng> {
    rng: R,
}

impl<R: rand::Rng> NormalSource<R> {
    fn next(&mut self) -> f64 {
        let u1: f64 = loop {
            let v = self.rng.gen::<f64>();
            if v > 0.0 {
                break v;
            }
        };
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// He-style fan-in-scaled initialization: weights ~ N(0, sqrt(2/fan_in)),
/// biases zero. Deterministic given `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    use rand::SeedableRng;
    let mut source = NormalSource {
        rng: rand_chacha::ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut entries = Vec::new();
    for (name, shape) in layer_specs(config) {
        let (weight_shape, fan_in, bias_len) = match shape {
            LayerShape::Conv { cin, cout, k } => (vec![cout, cin, k, k], cin * k * k, cout),
            LayerShape::LinearFc { fin, fout } => (vec![fout, fin], fin, fout),
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| std * source.next()).collect();
        entries.push((format!("{name}.weight"), Tensor::new(weight_shape, data)?));
        entries.push((format!("{name}.bias"), Tensor::zeros(vec![bias_len])));
    }
    let velocities = entries
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    Ok(ModelParams { entries, velocities })
}

fn conv_layer(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    name: &str,
    relu: bool,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.conv2d(x, w, b, 1, 1)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

fn linear_layer(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    name: &str,
    relu: bool,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.linear(x, w, b)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

/// Shared encoder: three conv+pool stages and the bottleneck conv.
fn encoder_forward(g: &mut Graph, x: Var, p: &BoundParams, cfg: &ModelConfig) -> Result<Var> {
    let (h, w) = (cfg.height, cfg.width);
    let e1 = conv_layer(g, x, p, "seg.enc1", true)?;
    let d1 = g.adaptive_avg_pool(e1, h / 2, w / 2)?;
    let e2 = conv_layer(g, d1, p, "seg.enc2", true)?;
    let d2 = g.adaptive_avg_pool(e2, h / 4, w / 4)?;
    let e3 = conv_layer(g, d2, p, "seg.enc3", true)?;
    conv_layer(g, e3, p, "seg.bottleneck", true)
}

/// Runs the segmenter, returning mask logits and the bottleneck activations
/// (the latter feeds the two-headed variant).
pub fn segmenter_forward(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<(SegLogits, Var)> {
    let shape = g.value(x).shape();
    if shape != [3, cfg.height, cfg.width] {
        return Err(Error::config(format!(
            "segmenter_forward: input {:?}, config wants (3, {}, {})",
            shape, cfg.height, cfg.width
        )));
    }
    let bottleneck = encoder_forward(g, x, p, cfg)?;
    let u1 = g.upsample2x(bottleneck)?;
    let dec1 = conv_layer(g, u1, p, "seg.dec1", true)?;
    let u2 = g.upsample2x(dec1)?;
    let logits = conv_layer(g, u2, p, "seg.dec2", false)?;
    Ok((SegLogits::new(g, logits, cfg.parts)?, bottleneck))
}

/// Runs the configured head on prepared features. The feature variant must
/// match `cfg.head`.
pub fn head_forward(
    g: &mut Graph,
    features: PartFeatures,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    match (cfg.head, features) {
        (HeadKind::Downsampled, PartFeatures::Downsampled(f)) => {
            let c = {
                let w = p.get("head.conv.weight")?;
                let b = p.get("head.conv.bias")?;
                let y = g.conv2d(f, w, b, 1, 1)?;
                g.relu(y)?
            };
            let h1 = linear_layer(g, c, p, "head.fc1", true)?;
            linear_layer(g, h1, p, "head.fc2", false)
        }
        (HeadKind::Bbox, PartFeatures::Bbox(v)) => {
            let h1 = linear_layer(g, v, p, "head.fc1", true)?;
            let h2 = linear_layer(g, h1, p, "head.fc2", true)?;
            linear_layer(g, h2, p, "head.fc3", false)
        }
        (HeadKind::Pixel, PartFeatures::Pixel(logits)) => Ok(logits),
        (HeadKind::TwoHeaded, PartFeatures::TwoHeaded(bottleneck)) => {
            let pooled = g.mean_channels(bottleneck)?;
            let h1 = linear_layer(g, pooled, p, "head.fc1", true)?;
            linear_layer(g, h1, p, "head.fc2", false)
        }
        (head, _) => Err(Error::usage(format!(
            "head_forward: features do not match configured head {head:?}"
        ))),
    }
}

/// Output of a full forward pass. `seg` is `None` for the baseline.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub class_logits: Var,
    pub seg: Option<SegLogits>,
    pub bottleneck: Option<Var>,
}

/// Whole-model forward: segmenter, configured features, head. Inputs are
/// expected in [0, 1] (a small tolerance admits finite-difference probes).
pub fn model_forward(
    g: &mut Graph,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<ModelOutput> {
    {
        let xs = g.value(x);
        if xs.data().iter().any(|&v| !(-1e-3..=1.0 + 1e-3).contains(&v)) {
            return Err(Error::data("model_forward: input outside [0,1]"));
        }
    }
    if cfg.head == HeadKind::Baseline {
        let bottleneck = encoder_forward(g, x, p, cfg)?;
        let pooled = g.mean_channels(bottleneck)?;
        let h1 = linear_layer(g, pooled, p, "head.fc1", true)?;
        let class_logits = linear_layer(g, h1, p, "head.fc2", false)?;
        return Ok(ModelOutput {
            class_logits,
            seg: None,
            bottleneck: Some(bottleneck),
        });
    }

    let (seg, bottleneck) = segmenter_forward(g, x, p, cfg)?;
    let features = match cfg.head {
        HeadKind::Downsampled => {
            let mut f = partfeat::downsample_features(g, seg, cfg.pool, cfg.include_background)?;
            if cfg.concat_input {
                let pooled_x = g.adaptive_avg_pool(x, cfg.pool, cfg.pool)?;
                f = g.concat_channels(f, pooled_x)?;
            }
            PartFeatures::Downsampled(f)
        }
        HeadKind::Bbox => PartFeatures::Bbox(partfeat::bbox_features(g, seg)?),
        HeadKind::Pixel => {
            let map = cfg.part_to_class_or_default();
            PartFeatures::Pixel(partfeat::pixel_logits(g, seg, &map, cfg.classes)?)
        }
        HeadKind::TwoHeaded => PartFeatures::TwoHeaded(bottleneck),
        HeadKind::Baseline => unreachable!(),
    };
    let class_logits = head_forward(g, features, p, cfg)?;
    Ok(ModelOutput {
        class_logits,
        seg: Some(seg),
        bottleneck: Some(bottleneck),
    })
}

/// Predicted label: argmax with lowest-index tie-break.
pub fn predict(class_logits: &Tensor) -> usize {
    class_logits.argmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            classes: 3,
            parts: 2,
            height: 8,
            width: 8,
            head,
            pool: 2,
            width_base: 4,
            ..ModelConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.gen_range(0.1..0.9)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config(HeadKind::Bbox);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let c = init_params(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixel_head_has_zero_classifier_params() {
        let cfg = tiny_config(HeadKind::Pixel);
        let p = init_params(&cfg).unwrap();
        assert_eq!(p.classifier_param_count(), 0);
        assert!(p.param_count() > 0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for head in [
            HeadKind::Downsampled,
            HeadKind::Bbox,
            HeadKind::Pixel,
            HeadKind::TwoHeaded,
            HeadKind::Baseline,
        ] {
            let cfg = tiny_config(head);
            let params = init_params(&cfg).unwrap();
            let x = random_image(&mut rng, 8, 8);

            let run = |g: &mut Graph| -> (Vec<f64>, Option<Vec<f64>>) {
                let xv = g.leaf(x.clone(), false);
                let bound = params.bind(g, false);
                let out = model_forward(g, xv, &bound, &cfg).unwrap();
                (
                    g.value(out.class_logits).data().to_vec(),
                    out.seg.map(|s| g.value(s.logits).data().to_vec()),
                )
            };
            let (la, sa) = run(&mut Graph::new());
            let (lb, sb) = run(&mut Graph::new());
            assert_eq!(la.len(), cfg.classes);
            assert_eq!(la, lb, "{head:?} forward not deterministic");
            assert_eq!(sa, sb);
            if head == HeadKind::Baseline {
                assert!(sa.is_none());
            } else {
                assert_eq!(sa.unwrap().len(), (cfg.parts + 1) * 64);
            }
        }
    }

    #[test]
    fn pixel_head_passes_through_pixel_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = tiny_config(HeadKind::Pixel);
        let params = init_params(&cfg).unwrap();
        let x = random_image(&mut rng, 8, 8);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let bound = params.bind(&mut g, false);
        let out = model_forward(&mut g, xv, &bound, &cfg).unwrap();
        let seg = out.seg.unwrap();
        let map = cfg.part_to_class_or_default();
        let direct = partfeat::pixel_logits(&mut g, seg, &map, cfg.classes).unwrap();
        assert_eq!(g.value(out.class_logits).data(), g.value(direct).data());
    }

    #[test]
    fn bbox_zero_head_weights_give_zero_logits() {
        let cfg = tiny_config(HeadKind::Bbox);
        let mut params = init_params(&cfg).unwrap();
        let zeroed: Vec<(String, Tensor)> = params
            .entries()
            .iter()
            .map(|(n, t)| {
                if n.starts_with("head.") {
                    (n.clone(), Tensor::zeros(t.shape().to_vec()))
                } else {
                    (n.clone(), t.clone())
                }
            })
            .collect();
        let vel = zeroed
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        params = ModelParams::from_entries(zeroed, vel);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_image(&mut rng, 8, 8);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let bound = params.bind(&mut g, false);
        let out = model_forward(&mut g, xv, &bound, &cfg).unwrap();
        for &v in g.value(out.class_logits).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn two_headed_ignores_decoder_parameters() {
        let cfg = tiny_config(HeadKind::TwoHeaded);
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = random_image(&mut rng, 8, 8);

        let logits_with = |params: &ModelParams| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let bound = params.bind(&mut g, false);
            let out = model_forward(&mut g, xv, &bound, &cfg).unwrap();
            g.value(out.class_logits).data().to_vec()
        };
        let base = logits_with(&params);

        let perturbed: Vec<(String, Tensor)> = params
            .entries()
            .iter()
            .map(|(n, t)| {
                if n.starts_with("seg.dec") {
                    let mut t2 = t.clone();
                    for v in t2.data_mut() {
                        *v += 0.731;
                    }
                    (n.clone(), t2)
                } else {
                    (n.clone(), t.clone())
                }
            })
            .collect();
        let vel = perturbed
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let perturbed = ModelParams::from_entries(perturbed, vel);
        assert_eq!(base, logits_with(&perturbed));
    }

    #[test]
    fn classifier_never_reads_raw_image_unless_concat() {
        // Gradient of a class logit w.r.t. x must flow only through the
        // segmenter; zeroing all segmenter params makes seg logits constant,
        // so the class logits become independent of x.
        let cfg = tiny_config(HeadKind::Downsampled);
        let params = init_params(&cfg).unwrap();
        let zeroed: Vec<(String, Tensor)> = params
            .entries()
            .iter()
            .map(|(n, t)| {
                if n.starts_with("seg.") {
                    (n.clone(), Tensor::zeros(t.shape().to_vec()))
                } else {
                    (n.clone(), t.clone())
                }
            })
            .collect();
        let vel = zeroed
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let frozen = ModelParams::from_entries(zeroed, vel);

        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let xa = random_image(&mut rng, 8, 8);
        let xb = random_image(&mut rng, 8, 8);
        let logits_for = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let bound = frozen.bind(&mut g, false);
            let out = model_forward(&mut g, xv, &bound, &cfg).unwrap();
            g.value(out.class_logits).data().to_vec()
        };
        assert_eq!(logits_for(&xa), logits_for(&xb));

        // With concat_input the head sees the pooled image directly.
        let mut cfg2 = cfg.clone();
        cfg2.concat_input = true;
        let frozen2 = {
            let params = init_params(&cfg2).unwrap();
            let zeroed: Vec<(String, Tensor)> = params
                .entries()
                .iter()
                .map(|(n, t)| {
                    if n.starts_with("seg.") {
                        (n.clone(), Tensor::zeros(t.shape().to_vec()))
                    } else {
                        (n.clone(), t.clone())
                    }
                })
                .collect();
            let vel = zeroed
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect();
            ModelParams::from_entries(zeroed, vel)
        };
        let logits_for2 = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let bound = frozen2.bind(&mut g, false);
            let out = model_forward(&mut g, xv, &bound, &cfg2).unwrap();
            g.value(out.class_logits).data().to_vec()
        };
        assert_ne!(logits_for2(&xa), logits_for2(&xb));
    }

    #[test]
    fn parameter_parity_within_ten_percent() {
        for width in [8, 16] {
            let baseline = {
                let cfg = ModelConfig {
                    head: HeadKind::Baseline,
                    width_base: width,
                    ..ModelConfig::default()
                };
                init_params(&cfg).unwrap().param_count() as f64
            };
            for head in [
                HeadKind::Downsampled,
                HeadKind::Bbox,
                HeadKind::Pixel,
                HeadKind::TwoHeaded,
            ] {
                let cfg = ModelConfig {
                    head,
                    width_base: width,
                    ..ModelConfig::default()
                };
                let count = init_params(&cfg).unwrap().param_count() as f64;
                let ratio = count / baseline;
                assert!(
                    (0.9..=1.1).contains(&ratio),
                    "width {width} {head:?}: ratio {ratio:.3} ({count} vs {baseline})"
                );
            }
        }
    }

    #[test]
    fn bbox_head_is_64_wide_at_default_width() {
        let cfg = ModelConfig {
            head: HeadKind::Bbox,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg).unwrap();
        assert_eq!(p.get("head.fc1.weight").unwrap().shape(), &[64, 30]);
        assert_eq!(p.get("head.fc2.weight").unwrap().shape(), &[64, 64]);
    }

    #[test]
    fn segmenter_gradient_wrt_input_passes_fd() {
        let cfg = tiny_config(HeadKind::Bbox);
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = random_image(&mut rng, 8, 8);
        let report = check_gradients(&[x], FD_STEP, |g, vs| {
            let bound = params.bind(g, false);
            let (seg, _) = segmenter_forward(g, vs[0], &bound, &cfg)?;
            g.mean(seg.logits)
        })
        .unwrap();
        assert!(report.passes(1e-6), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn end_to_end_loss_gradient_wrt_input_passes_fd() {
        for head in [HeadKind::Downsampled, HeadKind::Bbox, HeadKind::Baseline] {
            let cfg = tiny_config(head);
            let params = init_params(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(46);
            let x = random_image(&mut rng, 8, 8);
            let report = check_gradients(&[x], FD_STEP, |g, vs| {
                let bound = params.bind(g, false);
                let out = model_forward(g, vs[0], &bound, &cfg)?;
                g.cross_entropy(out.class_logits, 1)
            })
            .unwrap();
            assert!(
                report.passes(1e-5),
                "{head:?} rel err {}",
                report.max_rel_err
            );
        }
    }
}
