//! Procedural rendering: class grammars over a shared part vocabulary,
//! per-class texture palettes, and class-correlated backgrounds.
//!
//! Classes are layout codes. Bit 0 picks the body orientation, bit 1 the
//! head end, bit 2 the appendage set (side limbs vs tail+crest), bit 3
//! flips the appendage side. Textures and background tints correlate with
//! the class on purpose: they are learnable spurious cues that the
//! texture-swap and background-swap benchmarks later break.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Part ids within the mask (0 is background).
pub const PART_BODY: u8 = 1;
pub const PART_HEAD: u8 = 2;
pub const PART_LIMB_A: u8 = 3;
pub const PART_LIMB_B: u8 = 4;
pub const PART_TAIL: u8 = 5;
pub const PART_CREST: u8 = 6;

/// A rotated ellipse in pixel coordinates (bars and discs are ellipses).
#[derive(Debug, Clone)]
pub struct PartShape {
    pub part: u8,
    cx: f64,
    cy: f64,
    /// Semi-axis along the shape's own major direction.
    a: f64,
    b: f64,
    angle: f64,
}

impl PartShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Layout bits for a class code.
#[derive(Debug, Clone, Copy)]
struct LayoutBits {
    vertical: bool,
    head_negative: bool,
    tail_crest: bool,
    flip_side: bool,
}

fn layout_bits(class: usize) -> LayoutBits {
    LayoutBits {
        vertical: class & 1 != 0,
        head_negative: class & 2 != 0,
        tail_crest: class & 4 != 0,
        flip_side: class & 8 != 0,
    }
}

/// Highest part id the grammar of `class` references given `classes` total.
fn max_part_needed(class: usize, classes: usize) -> u8 {
    if classes <= 4 {
        return PART_HEAD;
    }
    if layout_bits(class).tail_crest {
        PART_CREST
    } else {
        PART_LIMB_B
    }
}

/// Instantiates the part shapes of one sample, already jittered. Render
/// order is z-order: later shapes draw over earlier ones.
pub fn instantiate_parts(
    class: usize,
    classes: usize,
    parts: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PartShape>> {
    for c in 0..classes {
        let needed = max_part_needed(c, classes);
        if needed as usize > parts {
            return Err(Error::config(format!(
                "class {c} grammar needs part {needed}, spec has only {parts} parts"
            )));
        }
    }
    if classes > 16 {
        return Err(Error::config("the layout grammar encodes at most 16 classes"));
    }
    let bits = layout_bits(class);
    let unit = height.min(width) as f64 / 2.0;
    let scale = rng.gen_range(0.75..1.25) * 0.88 * unit;
    let theta_base = if bits.vertical {
        std::f64::consts::FRAC_PI_2
    } else {
        0.0
    };
    let theta = theta_base + rng.gen_range(-1.0..1.0) * 20f64.to_radians();
    let cy = height as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let cx = width as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let head_dir = if bits.head_negative { -1.0 } else { 1.0 };
    let side = if bits.flip_side { 1.0 } else { -1.0 };
    let (sin, cos) = theta.sin_cos();
    // (u, v) in the object frame -> pixel offsets.
    let place = |u: f64, v: f64| (cy + scale * (sin * u + cos * v), cx + scale * (cos * u - sin * v));

    let jit = |rng: &mut ChaCha8Rng| rng.gen_range(-0.03..0.03);

    let mut shapes = Vec::new();
    let (by, bx) = place(jit(rng), jit(rng));
    shapes.push(PartShape {
        part: PART_BODY,
        cy: by,
        cx: bx,
        a: scale * 0.56,
        b: scale * 0.23,
        angle: theta,
    });

    if !bits.tail_crest && parts >= PART_LIMB_B as usize && classes > 4 {
        for (slot, part) in [(-0.24, PART_LIMB_A), (0.26, PART_LIMB_B)] {
            let (y, x) = place(slot + jit(rng), side * (0.30 + jit(rng).abs()));
            shapes.push(PartShape {
                part,
                cy: y,
                cx: x,
                a: scale * 0.075,
                b: scale * (0.21 + 0.04 * jit(rng)),
                angle: theta,
            });
        }
    }
    if bits.tail_crest && parts >= PART_CREST as usize {
        let (ty, tx) = place(-head_dir * (0.72 + jit(rng)), jit(rng));
        shapes.push(PartShape {
            part: PART_TAIL,
            cy: ty,
            cx: tx,
            a: scale * (0.26 + 0.05 * jit(rng)),
            b: scale * 0.065,
            angle: theta,
        });
        let (ky, kx) = place(jit(rng), side * (0.32 + jit(rng).abs()));
        shapes.push(PartShape {
            part: PART_CREST,
            cy: ky,
            cx: kx,
            a: scale * 0.13,
            b: scale * 0.11,
            angle: theta,
        });
    }
    // Head last so it draws over the body.
    let (hy, hx) = place(head_dir * (0.60 + jit(rng)), jit(rng));
    shapes.push(PartShape {
        part: PART_HEAD,
        cy: hy,
        cx: hx,
        a: scale * 0.18,
        b: scale * 0.16,
        angle: theta,
    });
    Ok(shapes)
}

/// Rasterizes shapes into a mask of part indices (0 = background).
pub fn rasterize(shapes: &[PartShape], height: usize, width: usize) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            for s in shapes {
                if s.contains(y, x) {
                    mask[r * width + c] = s.part;
                }
            }
        }
    }
    mask
}

// ── Colors and textures ─────────────────────────────────────────────────

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern {
    Stripes,
    Dots,
    Checker,
    Speckle,
}

/// Per-class texture palette: pattern family plus class-specific hues and
/// period. This is the texture cue the shape-bias benchmark swaps out.
#[derive(Debug, Clone)]
pub struct TexturePalette {
    pattern: Pattern,
    hue_a: f64,
    hue_b: f64,
    period: f64,
    angle: f64,
}

pub fn class_palette(class: usize, classes: usize) -> TexturePalette {
    let hue = class as f64 / classes.max(1) as f64;
    TexturePalette {
        pattern: match class % 4 {
            0 => Pattern::Stripes,
            1 => Pattern::Dots,
            2 => Pattern::Checker,
            _ => Pattern::Speckle,
        },
        hue_a: hue,
        hue_b: hue + 0.14,
        period: 2.6 + (class / 4) as f64 * 1.3,
        angle: 0.5 + class as f64 * 0.35,
    }
}

/// Per-instance texture state: phase offsets and hue jitter.
#[derive(Debug, Clone)]
pub struct TextureInstance {
    phase_y: f64,
    phase_x: f64,
    hue_shift: f64,
    noise_seed: u64,
}

impl TextureInstance {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        TextureInstance {
            phase_y: rng.gen_range(0.0..8.0),
            phase_x: rng.gen_range(0.0..8.0),
            hue_shift: rng.gen_range(-0.04..0.04),
            noise_seed: rng.gen(),
        }
    }
}

fn hash2(seed: u64, r: usize, c: usize) -> f64 {
    let mut z = seed ^ (r as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (c as u64).wrapping_mul(0xc2b2ae3d27d4eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    (z ^ (z >> 31)) as f64 / u64::MAX as f64
}

/// Texture color at a pixel.
pub fn texture_color(
    palette: &TexturePalette,
    inst: &TextureInstance,
    r: usize,
    c: usize,
) -> [f64; 3] {
    let y = r as f64 + inst.phase_y;
    let x = c as f64 + inst.phase_x;
    let on = match palette.pattern {
        Pattern::Stripes => {
            let (sin, cos) = palette.angle.sin_cos();
            ((cos * x + sin * y) / palette.period).rem_euclid(2.0) < 1.0
        }
        Pattern::Dots => {
            let p = palette.period * 1.6;
            let dy = (y / p).fract() - 0.5;
            let dx = (x / p).fract() - 0.5;
            (dy * dy + dx * dx).sqrt() < 0.3
        }
        Pattern::Checker => {
            ((y / palette.period).floor() + (x / palette.period).floor()) as i64 % 2 == 0
        }
        Pattern::Speckle => hash2(inst.noise_seed, r, c) < 0.5,
    };
    let hue = if on { palette.hue_a } else { palette.hue_b } + inst.hue_shift;
    let value = if on { 0.85 } else { 0.55 };
    hsv_to_rgb(hue, 0.75, value)
}

/// Fixed tint per part id, blended over the texture so the segmenter has a
/// part-identity cue independent of the class texture.
pub fn part_tint(part: u8, parts: usize) -> [f64; 3] {
    let hue = (part as f64 - 0.5) / (parts as f64 + 1.0);
    hsv_to_rgb(hue + 0.03, 0.55, 0.95)
}

/// Foreground pixel color: class texture blended with the part tint.
pub fn foreground_color(
    palette: &TexturePalette,
    inst: &TextureInstance,
    part: u8,
    parts: usize,
    r: usize,
    c: usize,
) -> [f64; 3] {
    let tex = texture_color(palette, inst, r, c);
    let tint = part_tint(part, parts);
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (0.55 * tex[i] + 0.45 * tint[i]).clamp(0.0, 1.0);
    }
    out
}

/// Background state for one sample: class-correlated tint, optional clutter
/// blobs (rendered as background in the mask, so they are pure distractors).
#[derive(Debug, Clone)]
pub struct BackgroundInstance {
    pub solid: bool,
    hue: f64,
    gradient_angle: f64,
    noise_seed: u64,
    clutter: Vec<PartShape>,
    clutter_hues: Vec<f64>,
}

impl BackgroundInstance {
    pub fn draw(
        class: usize,
        classes: usize,
        solid: bool,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Background hue sits on the opposite side of the wheel from the
        // class hue but still identifies the class.
        let hue = (class as f64 + classes as f64 / 2.0) / classes as f64 + rng.gen_range(-0.03..0.03);
        let mut clutter = Vec::new();
        let mut clutter_hues = Vec::new();
        if !solid {
            for _ in 0..rng.gen_range(0..=3usize) {
                clutter.push(PartShape {
                    part: 0,
                    cy: rng.gen_range(0.0..height as f64),
                    cx: rng.gen_range(0.0..width as f64),
                    a: rng.gen_range(1.5..4.0),
                    b: rng.gen_range(1.0..3.0),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                });
                clutter_hues.push(rng.gen_range(0.0..1.0));
            }
        }
        BackgroundInstance {
            solid,
            hue,
            gradient_angle: rng.gen_range(0.0..std::f64::consts::PI),
            noise_seed: rng.gen(),
            clutter,
            clutter_hues,
        }
    }

    pub fn color(&self, r: usize, c: usize, height: usize, width: usize) -> [f64; 3] {
        for (shape, &hue) in self.clutter.iter().zip(&self.clutter_hues) {
            if shape.contains(r as f64 + 0.5, c as f64 + 0.5) {
                return hsv_to_rgb(hue, 0.6, 0.8);
            }
        }
        if self.solid {
            return hsv_to_rgb(self.hue, 0.35, 0.45);
        }
        let (sin, cos) = self.gradient_angle.sin_cos();
        let t = (cos * c as f64 / width as f64 + sin * r as f64 / height as f64 + 1.0) / 2.0;
        let speckle = 0.08 * (hash2(self.noise_seed, r, c) - 0.5);
        let v = (0.30 + 0.30 * t + speckle).clamp(0.0, 1.0);
        hsv_to_rgb(self.hue, 0.40, v)
    }
}
