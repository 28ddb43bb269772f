//! Small building blocks shared by the segmentation model and the assigner.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tax_autodiff::ops::conv2d;
use tax_autodiff::Tensor;

use crate::error::Result;
use crate::image::RgbImage;

/// A padded 3x3 convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn he(cin: usize, cout: usize, rng: &mut impl Rng) -> Conv {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        Conv::gaussian(cin, cout, std, rng)
    }

    pub fn gaussian(cin: usize, cout: usize, std: f64, rng: &mut impl Rng) -> Conv {
        let weight = gaussian_vec(cout * cin * 9, std, rng);
        Conv {
            weight: Tensor::param(weight, &[cout, cin, 3, 3]).expect("shape matches"),
            bias: Tensor::param(vec![0.0; cout], &[cout]).expect("shape matches"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.weight, Some(&self.bias), 1, 1)?)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn push_named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub fn gaussian_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect()
}

/// Stacks images into a `[B, 3, H, W]` constant tensor.
pub fn batch_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(crate::TaxError::shape("batch image size", format!("{h}x{w}"), format!("{}x{}", img.height, img.width)));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::new(data, &[images.len(), 3, h, w])?)
}

/// Copies `src` into the data of `dst`, checking the length.
pub fn assign(dst: &Tensor, name: &str, src: &[f32]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(crate::TaxError::shape(format!("tensor '{name}'"), dst.len(), src.len()));
    }
    dst.data_mut().copy_from_slice(src);
    Ok(())
}
