//! Annotator assigner: prototype encoder, prototype bank, soft/hard annotator
//! masks, pseudo masks and the assignment loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tax_autodiff::ops::{conv2d, cross_entropy_map, group_max_cosine, max_pool2d, relu, scale, upsample_plane_data, CeTarget, COSINE_EPS};
use tax_autodiff::{GroupTag, ParamGroup, Tensor};

use crate::error::{Result, TaxError};
use crate::image::Mask;
use crate::nn::{gaussian_vec, Conv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignerConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channel widths of the encoder stages; each stage halves the resolution.
    pub widths: Vec<usize>,
    /// Prototype dimension.
    pub dim: usize,
    /// Prototypes per annotator group.
    pub per_group: usize,
    pub n_annotators: usize,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        AssignerConfig { height: 64, width: 64, in_channels: 3, widths: vec![16, 32, 64], dim: 64, per_group: 8, n_annotators: 4 }
    }
}

impl AssignerConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    /// Cell grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    pub fn groups(&self) -> usize {
        self.n_annotators + 1
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.height == 0 || self.width == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(TaxError::Config(format!("image size {}x{} must be a positive multiple of the encoder stride {s}", self.height, self.width)));
        }
        if self.dim == 0 || self.per_group == 0 || self.n_annotators == 0 || self.widths.contains(&0) {
            return Err(TaxError::Config("assigner dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Assigner {
    pub config: AssignerConfig,
    stages: Vec<Conv>,
    project: Conv,
    /// `[d, (N+1) * Q]`; group `k` owns columns `(k-1)*Q .. k*Q`.
    pub bank: Tensor,
}

/// Output of [`Assigner::assign`].
#[derive(Debug, Clone)]
pub struct AssignerOutput {
    /// Best cosine per group, `[B, N+1, h, w]`.
    pub soft: Tensor,
    /// Annotator index per pixel, `[B, H, W]`, values in `1..=N+1`.
    pub hard: Vec<u32>,
    /// Global index of the winning prototype per cell, `[B, h, w]`.
    pub winner_proto: Vec<usize>,
    pub grid: (usize, usize),
    pub ratio: (usize, usize),
}

impl AssignerOutput {
    pub fn hard_mask(&self, b: usize) -> Mask {
        let (h, w) = (self.grid.0 * self.ratio.0, self.grid.1 * self.ratio.1);
        let plane = &self.hard[b * h * w..(b + 1) * h * w];
        Mask::from_vec(h, w, plane.iter().map(|&v| v as u8).collect()).expect("plane size")
    }
}

fn unit_gaussian_column(d: usize, rng: &mut impl Rng) -> Vec<f32> {
    loop {
        let v = gaussian_vec(d, 1.0, rng);
        let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|&x| (x as f64 / n) as f32).collect();
        }
    }
}

impl Assigner {
    pub fn new(config: AssignerConfig, rng: &mut impl Rng) -> Result<Assigner> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for &w in &config.widths {
            stages.push(Conv::he(cin, w, rng));
            cin = w;
        }
        let project = Conv::gaussian(cin, config.dim, (1.0 / (cin * 9) as f64).sqrt(), rng);
        let np = config.groups() * config.per_group;
        let mut bank = vec![0.0f32; config.dim * np];
        for j in 0..np {
            for (i, v) in unit_gaussian_column(config.dim, rng).into_iter().enumerate() {
                bank[i * np + j] = v;
            }
        }
        let bank = Tensor::param(bank, &[config.dim, np])?;
        Ok(Assigner { config, stages, project, bank })
    }

    /// Builds an assigner around existing tensors, given in the order of
    /// [`Assigner::named_tensors`]. The tensors are shared, not copied.
    pub fn from_tensors(config: AssignerConfig, tensors: &[Tensor]) -> Result<Assigner> {
        config.validate()?;
        let want = 2 * config.widths.len() + 3;
        if tensors.len() != want {
            return Err(TaxError::shape("assigner tensor list", want.to_string(), tensors.len().to_string()));
        }
        let conv = |i: usize| Conv { weight: tensors[2 * i].clone(), bias: tensors[2 * i + 1].clone() };
        let stages = (0..config.widths.len()).map(conv).collect();
        let project = conv(config.widths.len());
        let bank = tensors[want - 1].clone();
        let np = config.groups() * config.per_group;
        if bank.shape() != [config.dim, np] {
            return Err(TaxError::shape("prototype bank", format!("[{}, {np}]", config.dim), format!("{:?}", bank.shape())));
        }
        Ok(Assigner { config, stages, project, bank })
    }

    /// Encoded cell features `[B, d, h, w]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.shape().len() != 4 || x.shape()[1..] != [c.in_channels, c.height, c.width] {
            return Err(TaxError::shape(
                "assigner input [B, C, H, W]",
                format!("[B, {}, {}, {}]", c.in_channels, c.height, c.width),
                format!("{:?}", x.shape()),
            ));
        }
        let mut h = x.clone();
        for s in &self.stages {
            h = max_pool2d(&relu(&s.forward(&h)?), 2)?;
        }
        Ok(conv2d(&h, &self.project.weight, Some(&self.project.bias), 1, 1)?)
    }

    /// Soft scores, hard annotator mask and winning prototypes for a batch.
    pub fn assign(&self, x: &Tensor) -> Result<AssignerOutput> {
        let f = self.encode(x)?;
        score(&f, &self.bank, self.config.groups(), self.config.per_group, (self.config.stride(), self.config.stride()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            s.push_named(&format!("encoder.stage{i}"), &mut out);
        }
        self.project.push_named("encoder.project", &mut out);
        out.push(("bank".into(), self.bank.clone()));
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut enc = ParamGroup::new("assigner.encoder", GroupTag::Assigner);
        let mut bank = ParamGroup::new("assigner.bank", GroupTag::Assigner);
        for (n, t) in self.named_tensors() {
            if n == "bank" {
                bank.push(n, t);
            } else {
                enc.push(n, t);
            }
        }
        vec![enc, bank]
    }

    /// Replaces prototypes whose norm fell below `1e-8` with fresh unit
    /// vectors. Returns how many were replaced.
    pub fn reseed_degenerate(&self, rng: &mut impl Rng) -> usize {
        let (d, np) = (self.config.dim, self.bank.shape()[1]);
        let mut data = self.bank.data_mut();
        let mut n = 0;
        for j in 0..np {
            let norm = (0..d).map(|i| (data[i * np + j] as f64).powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                for (i, v) in unit_gaussian_column(d, rng).into_iter().enumerate() {
                    data[i * np + j] = v;
                }
                n += 1;
            }
        }
        n
    }

    /// Group (1-based annotator index) of global prototype `j`.
    pub fn group_of(&self, j: usize) -> u32 {
        (j / self.config.per_group) as u32 + 1
    }
}

/// Scores cell features against the bank (max cosine per group) and derives
/// the hard annotator mask at ratio `r`.
pub fn score(features: &Tensor, bank: &Tensor, groups: usize, per_group: usize, r: (usize, usize)) -> Result<AssignerOutput> {
    let g = group_max_cosine(features, bank, groups, per_group, COSINE_EPS)?;
    let s = g.scores.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let hard = hard_mask(&g.scores.data(), b, groups, h, w, r);
    Ok(AssignerOutput { soft: g.scores, hard, winner_proto: g.winners, grid: (h, w), ratio: r })
}

/// Per-cell argmax over groups of `soft` (`[B, G, h, w]`, ties to the lowest
/// group), as 1-based indices, nearest-upsampled by `r`.
pub fn hard_mask(soft: &[f32], b: usize, groups: usize, h: usize, w: usize, r: (usize, usize)) -> Vec<u32> {
    let hw = h * w;
    let mut cells = vec![0u32; b * hw];
    for bi in 0..b {
        for cell in 0..hw {
            let at = |g: usize| soft[(bi * groups + g) * hw + cell];
            let mut best = 0;
            for g in 1..groups {
                if at(g) > at(best) {
                    best = g;
                }
            }
            cells[bi * hw + cell] = best as u32 + 1;
        }
    }
    upsample_plane_data(&cells, b, h, w, r.0, r.1)
}

/// Soft target `[N+1, h, w]` for an image of annotator `annotator`: the
/// area average over each `r` cell of a one-hot map that is `annotator`
/// where `uncertain` is 1 and `N+1` elsewhere.
pub fn build_pseudo_mask(uncertain: &Mask, annotator: u32, n_annotators: usize, r: (usize, usize)) -> Result<Vec<f32>> {
    let (hh, ww) = (uncertain.height, uncertain.width);
    if r.0 == 0 || r.1 == 0 || hh % r.0 != 0 || ww % r.1 != 0 {
        return Err(TaxError::Invalid(format!("pseudo mask: {hh}x{ww} is not divisible by ratio {r:?}")));
    }
    if !(1..=n_annotators as u32).contains(&annotator) {
        return Err(TaxError::Invalid(format!("annotator {annotator} outside 1..={n_annotators}")));
    }
    let (h, w) = (hh / r.0, ww / r.1);
    let area = r.0 * r.1;
    let groups = n_annotators + 1;
    let mut out = vec![0.0f32; groups * h * w];
    for cy in 0..h {
        for cx in 0..w {
            let mut n = 0usize;
            for y in cy * r.0..(cy + 1) * r.0 {
                for x in cx * r.1..(cx + 1) * r.1 {
                    n += (uncertain.get(y, x) != 0) as usize;
                }
            }
            let cell = cy * w + cx;
            out[(annotator as usize - 1) * h * w + cell] += (n as f64 / area as f64) as f32;
            out[n_annotators * h * w + cell] += ((area - n) as f64 / area as f64) as f32;
        }
    }
    Ok(out)
}

/// Mean over cells of the cross-entropy between `softmax(soft / tau)` along
/// the group axis and the pseudo distribution (same layout as `soft`).
pub fn assignment_loss(soft: &Tensor, pseudo: &[f32], tau: f32) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TaxError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(cross_entropy_map(&scale(soft, 1.0 / tau), CeTarget::Distribution(pseudo))?)
}
