//! Tiny U-Net whose final 3x3 layer is a set of per-annotator kernel subsets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tax_autodiff::ops::{concat_channels, conv2d, max_pool2d, nearest_upsample, relu, routed_conv2d};
use tax_autodiff::{GroupTag, ParamGroup, Tensor};

use crate::error::{Result, TaxError};
use crate::image::Mask;
use crate::nn::{gaussian_vec, Conv};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channel count at full resolution; doubles at every level.
    pub base_width: usize,
    /// Number of 2x down/up levels.
    pub depth: usize,
    pub n_classes: usize,
    /// Channels entering the final routed layer.
    pub feature_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { height: 64, width: 64, in_channels: 3, base_width: 8, depth: 3, n_classes: 3, feature_width: 8 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1usize << self.depth;
        if self.height % stride != 0 || self.width % stride != 0 || self.height == 0 || self.width == 0 {
            return Err(TaxError::Config(format!(
                "image size {}x{} must be a positive multiple of 2^depth = {stride}",
                self.height, self.width
            )));
        }
        if self.base_width == 0 || self.feature_width == 0 || self.in_channels == 0 {
            return Err(TaxError::Config("channel widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(TaxError::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }
}

/// The kernel subsets of the final layer. With `n` annotators there are `n + 1`
/// subsets; subset `n + 1` is shared. A vanilla model has a single shared
/// subset.
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl KernelSet {
    /// `subsets` identical copies of one small random kernel.
    fn new(subsets: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> KernelSet {
        let std = (1.0 / (cin * 9) as f64).sqrt();
        let w = gaussian_vec(cout * cin * 9, std, rng);
        KernelSet {
            kernels: (0..subsets).map(|_| Tensor::param(w.clone(), &[cout, cin, 3, 3]).expect("shape")).collect(),
            biases: (0..subsets).map(|_| Tensor::param(vec![0.0; cout], &[cout]).expect("shape")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Tag of subset `k` (1-based).
    pub fn tag(&self, k: usize) -> GroupTag {
        if k == self.len() {
            GroupTag::Shared
        } else {
            GroupTag::Annotator(k as u32)
        }
    }
}

#[derive(Debug, Clone)]
struct Level {
    a: Conv,
    b: Conv,
}

impl Level {
    fn new(cin: usize, mid: usize, cout: usize, rng: &mut impl Rng) -> Level {
        Level { a: Conv::he(cin, mid, rng), b: Conv::he(mid, cout, rng) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = relu(&self.a.forward(x)?);
        Ok(relu(&self.b.forward(&y)?))
    }
}

/// Segmentation network: U-Net feature extractor plus [`KernelSet`] head.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: UNetConfig,
    down: Vec<Level>,
    bottleneck: Level,
    up: Vec<Level>,
    pub head: KernelSet,
}

impl SegModel {
    /// `n_annotators = 0` builds a vanilla model with one shared subset.
    pub fn new(config: UNetConfig, n_annotators: usize, rng: &mut impl Rng) -> Result<SegModel> {
        config.validate()?;
        let width = |l: usize| config.base_width << l;
        let mut down = Vec::new();
        for l in 0..config.depth {
            let cin = if l == 0 { config.in_channels } else { width(l - 1) };
            down.push(Level::new(cin, width(l), width(l), rng));
        }
        let bottom_in = if config.depth == 0 { config.in_channels } else { width(config.depth - 1) };
        let bottleneck = Level::new(bottom_in, width(config.depth), width(config.depth), rng);
        let mut up = Vec::new();
        for l in (0..config.depth).rev() {
            let out = if l == 0 { config.feature_width } else { width(l) };
            up.push(Level::new(width(l + 1) + width(l), width(l), out, rng));
        }
        let feat = if config.depth == 0 { width(0) } else { config.feature_width };
        let head = KernelSet::new(n_annotators + 1, feat, config.n_classes, rng);
        Ok(SegModel { config, down, bottleneck, up, head })
    }

    pub fn n_annotators(&self) -> usize {
        self.head.len() - 1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.height, c.width];
        match x.shape() {
            [_, rest @ ..] if rest == want => Ok(()),
            s => Err(TaxError::shape("segmentation input [B, C, H, W]", format!("[B, {}, {}, {}]", want[0], want[1], want[2]), format!("{s:?}"))),
        }
    }

    /// Features entering the final layer, `[B, D, H, W]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::new();
        let mut h = x.clone();
        for level in &self.down {
            h = level.forward(&h)?;
            skips.push(h.clone());
            h = max_pool2d(&h, 2)?;
        }
        h = self.bottleneck.forward(&h)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = nearest_upsample(&h, (2, 2))?;
            h = level.forward(&concat_channels(&h, &skip)?)?;
        }
        Ok(h)
    }

    /// Logits using subset `k` (1-based) at every pixel.
    pub fn forward_subset(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.head.len() {
            return Err(TaxError::Invalid(format!("kernel subset {k} outside 1..={}", self.head.len())));
        }
        let f = self.features(x)?;
        Ok(conv2d(&f, &self.head.kernels[k - 1], Some(&self.head.biases[k - 1]), 1, 1)?)
    }

    /// Logits of a vanilla model (its only, shared, subset).
    pub fn forward_vanilla(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_subset(x, self.head.len())
    }

    /// Logits with the final layer routed per pixel by `route` (`[B, H, W]`,
    /// values in `1..=N+1`).
    pub fn forward_tax(&self, x: &Tensor, route: &[u32]) -> Result<Tensor> {
        let f = self.features(x)?;
        Ok(routed_conv2d(&f, &self.head.kernels, &self.head.biases, route)?)
    }

    /// Every trainable tensor with a stable name, backbone first.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.backbone_named(&mut out);
        for k in 0..self.head.len() {
            out.push((format!("head.{}.weight", k + 1), self.head.kernels[k].clone()));
            out.push((format!("head.{}.bias", k + 1), self.head.biases[k].clone()));
        }
        out
    }

    fn backbone_named(&self, out: &mut Vec<(String, Tensor)>) {
        for (l, level) in self.down.iter().enumerate() {
            level.a.push_named(&format!("down{l}.a"), out);
            level.b.push_named(&format!("down{l}.b"), out);
        }
        self.bottleneck.a.push_named("bottleneck.a", out);
        self.bottleneck.b.push_named("bottleneck.b", out);
        for (i, level) in self.up.iter().enumerate() {
            let l = self.up.len() - 1 - i;
            level.a.push_named(&format!("up{l}.a"), out);
            level.b.push_named(&format!("up{l}.b"), out);
        }
    }

    /// One group for the backbone, one per kernel subset.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut backbone = ParamGroup::new("backbone", GroupTag::Backbone);
        let mut named = Vec::new();
        self.backbone_named(&mut named);
        for (n, t) in named {
            backbone.push(n, t);
        }
        let mut groups = vec![backbone];
        for k in 1..=self.head.len() {
            let mut g = ParamGroup::new(format!("head.{k}"), self.head.tag(k));
            g.push(format!("head.{k}.weight"), self.head.kernels[k - 1].clone());
            g.push(format!("head.{k}.bias"), self.head.biases[k - 1].clone());
            groups.push(g);
        }
        groups
    }
}

/// How the uncertainty map is derived from vanilla predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// The `ceil(q * H * W)` pixels of highest predictive entropy.
    Entropy,
    /// Pixels whose 3x3 neighbourhood holds more than one predicted class.
    BoundaryBand,
}

/// Per-pixel entropy of `softmax(logits)` for one `[K, H, W]` logit block.
pub fn entropy_map(logits: &[f32], k: usize) -> Vec<f64> {
    let hw = logits.len() / k;
    (0..hw)
        .map(|p| {
            let m = (0..k).map(|c| logits[c * hw + p] as f64).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logits[c * hw + p] as f64 - m).exp()).sum();
            -(0..k)
                .map(|c| {
                    let pr = (logits[c * hw + p] as f64 - m).exp() / z;
                    if pr > 0.0 {
                        pr * pr.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

/// Binary map with ones on exactly `ceil(q * H * W)` pixels: those of highest
/// entropy, ties resolved in row-major order.
pub fn top_entropy_mask(entropy: &[f64], height: usize, width: usize, q: f64) -> Mask {
    let n = entropy.len();
    let take = ((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps row-major order among equal entropies.
    order.sort_by(|&a, &b| entropy[b].total_cmp(&entropy[a]));
    let mut m = Mask::new(height, width);
    for &p in &order[..take] {
        m.data[p] = 1;
    }
    m
}

/// Ones where the 3x3 window (clipped) of `pred` holds more than one label.
pub fn boundary_band(pred: &Mask) -> Mask {
    let (h, w) = (pred.height, pred.width);
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = pred.get(y, x);
            let mixed = (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| pred.get(yy, xx) != v));
            out.set(y, x, mixed as u8);
        }
    }
    out
}

/// Argmax class per pixel of a `[K, H, W]` logit block (ties: lowest class).
pub fn argmax_mask(logits: &[f32], k: usize, height: usize, width: usize) -> Mask {
    let hw = height * width;
    let mut m = Mask::new(height, width);
    for p in 0..hw {
        let mut best = 0;
        for c in 1..k {
            if logits[c * hw + p] > logits[best * hw + p] {
                best = c;
            }
        }
        m.data[p] = best as u8;
    }
    m
}

/// Uncertainty map of one image from its vanilla logits `[K, H, W]`.
pub fn uncertainty_from_logits(logits: &[f32], k: usize, height: usize, width: usize, q: f64, mode: UncertaintyMode) -> Mask {
    match mode {
        UncertaintyMode::Entropy => top_entropy_mask(&entropy_map(logits, k), height, width, q),
        UncertaintyMode::BoundaryBand => boundary_band(&argmax_mask(logits, k, height, width)),
    }
}

/// Uncertainty masks for a batch `x` under a frozen vanilla model.
pub fn uncertainty_mask(vanilla: &SegModel, x: &Tensor, q: f64, mode: UncertaintyMode) -> Result<Vec<Mask>> {
    let logits = tax_autodiff::no_grad(|| vanilla.forward_vanilla(x))?;
    let (k, h, w) = (vanilla.config.n_classes, vanilla.config.height, vanilla.config.width);
    let data = logits.data();
    Ok(data.chunks(k * h * w).map(|l| uncertainty_from_logits(l, k, h, w, q, mode)).collect())
}
