//! Procedural shape scenes: a noisy background with overlapping filled shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaxError};
use crate::image::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rect,
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Number of classes including background.
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub kinds: Vec<ShapeKind>,
    /// Fill colour of foreground classes `1..n_classes`.
    pub class_colors: Vec<[u8; 3]>,
    pub background: [u8; 3],
    /// Standard deviation of the additive per-channel Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            n_classes: 3,
            min_shapes: 2,
            max_shapes: 4,
            min_radius: 6.0,
            max_radius: 14.0,
            kinds: vec![ShapeKind::Disc, ShapeKind::Rect, ShapeKind::Polygon],
            class_colors: vec![[230, 190, 40], [40, 180, 230], [200, 60, 200]],
            background: [100, 100, 100],
            noise_sigma: 15.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TaxError::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail(format!("scene size must be positive, got {}x{}", self.height, self.width));
        }
        if !(2..=256).contains(&self.n_classes) {
            return fail(format!("n_classes must be in 2..=256, got {}", self.n_classes));
        }
        if self.class_colors.len() < self.n_classes - 1 {
            return fail(format!("{} foreground classes need as many colors, only {} given", self.n_classes - 1, self.class_colors.len()));
        }
        if self.min_shapes > self.max_shapes {
            return fail(format!("min_shapes {} exceeds max_shapes {}", self.min_shapes, self.max_shapes));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius && self.max_radius.is_finite()) {
            return fail(format!("radius range [{}, {}] is invalid", self.min_radius, self.max_radius));
        }
        if self.kinds.is_empty() && self.max_shapes > 0 {
            return fail("at least one shape kind is required".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
    /// Vertices in counter-clockwise order (angle-sorted on a circle, hence convex).
    Polygon { pts: Vec<(f64, f64)> },
}

impl Shape {
    fn sample(kind: ShapeKind, rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Shape {
        let cy = rng.random_range(0.0..spec.height as f64);
        let cx = rng.random_range(0.0..spec.width as f64);
        let r = rng.random_range(spec.min_radius..=spec.max_radius);
        match kind {
            ShapeKind::Disc => Shape::Disc { cy, cx, r },
            ShapeKind::Rect => Shape::Rect { cy, cx, hy: r * rng.random_range(0.5..=1.0), hx: r * rng.random_range(0.5..=1.0) },
            ShapeKind::Polygon => {
                let n = rng.random_range(3..=7);
                let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(f64::total_cmp);
                Shape::Polygon { pts: angles.into_iter().map(|a| (cy + r * a.sin(), cx + r * a.cos())).collect() }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= *hy && (x - cx).abs() <= *hx,
            Shape::Polygon { pts } => {
                // (y, x) coordinates with increasing angle: inside means every
                // edge has the point on the same (left) side.
                (0..pts.len()).all(|i| {
                    let (ay, ax) = pts[i];
                    let (by, bx) = pts[(i + 1) % pts.len()];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

/// Renders one scene. Later shapes occlude earlier ones; the mask records the
/// class of the topmost shape at every pixel centre.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(RgbImage, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut mask = Mask::new(h, w);
    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.n_classes) as u8;
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let shape = Shape::sample(kind, &mut rng, spec);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask.set(y, x, class);
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| TaxError::Config(e.to_string()))?;
    let mut image = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let base = match mask.get(y, x) {
                0 => spec.background,
                c => spec.class_colors[c as usize - 1],
            };
            let mut px = [0u8; 3];
            for (p, &b) in px.iter_mut().zip(&base) {
                *p = (b as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
            image.put(y, x, px);
        }
    }
    Ok((image, mask))
}
