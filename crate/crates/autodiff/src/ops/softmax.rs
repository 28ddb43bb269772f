use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Per-pixel target for [`cross_entropy_map`].
#[derive(Debug, Clone, Copy)]
pub enum CeTarget<'a> {
    /// Class index per pixel, `[B, H, W]`.
    Labels(&'a [u8]),
    /// Distribution over classes per pixel, laid out like the logits
    /// `[B, K, H, W]`.
    Distribution(&'a [f32]),
}

/// Tolerance on a target distribution's per-pixel sum.
pub const TARGET_SUM_TOL: f64 = 1e-5;

/// `(outer, axis length, inner)` decomposition for a reduction axis.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument { op, msg: format!("axis {axis} out of range for shape {shape:?}") });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Log-probabilities along `axis`, accumulated in f64.
fn log_softmax_raw(x: &[f32], outer: usize, k: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * k + c) * inner + i;
            let m = (0..k).map(|c| x[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (x[at(c)] as f64 - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                out[at(c)] = x[at(c)] as f64 - lse;
            }
        }
    }
    out
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, k, inner) = split_axis("softmax", input.shape(), axis)?;
    let probs: Vec<f32> = log_softmax_raw(&input.data(), outer, k, inner).into_iter().map(|l| l.exp() as f32).collect();
    let y = probs.clone();
    Ok(Tensor::from_op("softmax", probs, input.shape().to_vec(), vec![input.clone()], move |g, _| {
        // dx_c = y_c * (g_c - sum_j g_j y_j)
        let mut dx = vec![0.0f32; g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * k + c) * inner + i;
                let dot: f64 = (0..k).map(|c| g[at(c)] as f64 * y[at(c)] as f64).sum();
                for c in 0..k {
                    dx[at(c)] = (y[at(c)] as f64 * (g[at(c)] as f64 - dot)) as f32;
                }
            }
        }
        vec![Some(dx)]
    }))
}

pub fn log_softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, k, inner) = split_axis("log_softmax", input.shape(), axis)?;
    let logp = log_softmax_raw(&input.data(), outer, k, inner);
    let data: Vec<f32> = logp.iter().map(|&l| l as f32).collect();
    Ok(Tensor::from_op("log_softmax", data, input.shape().to_vec(), vec![input.clone()], move |g, _| {
        // dx_c = g_c - p_c * sum_j g_j
        let mut dx = vec![0.0f32; g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * k + c) * inner + i;
                let total: f64 = (0..k).map(|c| g[at(c)] as f64).sum();
                for c in 0..k {
                    dx[at(c)] = (g[at(c)] as f64 - logp[at(c)].exp() * total) as f32;
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Softmax along the channel axis of an NCHW tensor.
pub fn softmax_channel(input: &Tensor) -> Result<Tensor> {
    softmax(input, 1)
}

pub fn log_softmax_channel(input: &Tensor) -> Result<Tensor> {
    log_softmax(input, 1)
}

/// Mean over pixels of `-sum_c target_c * log softmax(logits)_c` for
/// `[B, K, H, W]` logits.
pub fn cross_entropy_map(logits: &Tensor, target: CeTarget<'_>) -> Result<Tensor> {
    const OP: &str = "cross_entropy_map";
    let [batch, k, h, w] = match *logits.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(AutodiffError::Rank { op: OP, expected: 4, shape: logits.shape().to_vec() }),
    };
    let hw = h * w;
    let npix = batch * hw;
    // Dense target, validated.
    let mut t = vec![0.0f64; logits.len()];
    match target {
        CeTarget::Labels(labels) => {
            if labels.len() != npix {
                return Err(AutodiffError::ShapeMismatch { op: OP, what: "label count (B*H*W)".into(), expected: npix, got: labels.len() });
            }
            for (i, &l) in labels.iter().enumerate() {
                let (b, pix) = (i / hw, i % hw);
                if l as usize >= k {
                    return Err(AutodiffError::LabelOutOfRange { label: l as usize, classes: k, b, y: pix / w, x: pix % w });
                }
                t[(b * k + l as usize) * hw + pix] = 1.0;
            }
        }
        CeTarget::Distribution(dist) => {
            if dist.len() != logits.len() {
                return Err(AutodiffError::ShapeMismatch { op: OP, what: "target length".into(), expected: logits.len(), got: dist.len() });
            }
            for b in 0..batch {
                for pix in 0..hw {
                    let mut s = 0.0f64;
                    let mut negative = false;
                    for c in 0..k {
                        let v = dist[(b * k + c) * hw + pix] as f64;
                        negative |= v < -TARGET_SUM_TOL || !v.is_finite();
                        s += v;
                        t[(b * k + c) * hw + pix] = v;
                    }
                    if negative || (s - 1.0).abs() > TARGET_SUM_TOL {
                        return Err(AutodiffError::InvalidTarget { b, y: pix / w, x: pix % w, sum: s });
                    }
                }
            }
        }
    }
    let logp = log_softmax_raw(&logits.data(), batch, k, hw);
    let loss: f64 = -t.iter().zip(&logp).map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>() / npix as f64;
    Ok(Tensor::from_op(OP, vec![loss as f32], vec![], vec![logits.clone()], move |g, _| {
        let scale = g[0] as f64 / npix as f64;
        let mut dx = vec![0.0f32; logp.len()];
        for b in 0..batch {
            for pix in 0..hw {
                let at = |c: usize| (b * k + c) * hw + pix;
                let tsum: f64 = (0..k).map(|c| t[at(c)]).sum();
                for c in 0..k {
                    dx[at(c)] = ((logp[at(c)].exp() * tsum - t[at(c)]) * scale) as f32;
                }
            }
        }
        vec![Some(dx)]
    }))
}
