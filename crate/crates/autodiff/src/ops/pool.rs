//! Resampling and channel plumbing: max pooling, cell averaging, nearest
//! upsampling, channel concatenation.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Splits a shape into `(leading planes, H, W)`.
fn planes(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(AutodiffError::Rank { op, expected: 2, shape: s.to_vec() });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[..s.len() - 2].iter().product(), h, w))
}

fn divisible(op: &'static str, what: &str, size: usize, factor: usize) -> Result<()> {
    if factor == 0 || size % factor != 0 {
        return Err(AutodiffError::NotDivisible { op, what: what.into(), size, factor });
    }
    Ok(())
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

/// Non-overlapping `size x size` max pooling. Ties keep the first element in
/// row-major window order.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor> {
    const OP: &str = "max_pool2d";
    let (n, h, w) = planes(OP, input)?;
    divisible(OP, "height", h, size)?;
    divisible(OP, "width", w, size)?;
    let (ho, wo) = (h / size, w / size);
    let x = input.data();
    let mut out = vec![0.0f32; n * ho * wo];
    let mut arg = vec![0usize; n * ho * wo];
    for c in 0..n {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (oy * size + dy) * w + ox * size + dx;
                        if plane[i] > best || (dy == 0 && dx == 0) {
                            best = plane[i];
                            bi = i;
                        }
                    }
                }
                let o = (c * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = c * h * w + bi;
            }
        }
    }
    drop(x);
    let len = input.len();
    Ok(Tensor::from_op(OP, out, with_hw(input.shape(), ho, wo), vec![input.clone()], move |g, _| {
        let mut dx = vec![0.0f32; len];
        for (gv, &i) in g.iter().zip(&arg) {
            dx[i] += gv;
        }
        vec![Some(dx)]
    }))
}

/// Averages each `rh x rw` cell of the trailing two axes.
pub fn avg_downsample(input: &Tensor, factor: (usize, usize)) -> Result<Tensor> {
    const OP: &str = "avg_downsample";
    let (rh, rw) = factor;
    let (n, h, w) = planes(OP, input)?;
    divisible(OP, "height", h, rh)?;
    divisible(OP, "width", w, rw)?;
    let (ho, wo) = (h / rh, w / rw);
    let area = (rh * rw) as f64;
    let x = input.data();
    let mut out = vec![0.0f32; n * ho * wo];
    for c in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..rh {
                    let row = c * h * w + (oy * rh + dy) * w + ox * rw;
                    acc += x[row..row + rw].iter().map(|&v| v as f64).sum::<f64>();
                }
                out[(c * ho + oy) * wo + ox] = (acc / area) as f32;
            }
        }
    }
    drop(x);
    let len = input.len();
    Ok(Tensor::from_op(OP, out, with_hw(input.shape(), ho, wo), vec![input.clone()], move |g, _| {
        let mut dx = vec![0.0f32; len];
        let inv = (1.0 / area) as f32;
        for c in 0..n {
            for y in 0..h {
                for x in 0..w {
                    dx[c * h * w + y * w + x] = g[(c * ho + y / rh) * wo + x / rw] * inv;
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Replicates every element into an `rh x rw` block.
pub fn nearest_upsample(input: &Tensor, factor: (usize, usize)) -> Result<Tensor> {
    const OP: &str = "nearest_upsample";
    let (rh, rw) = factor;
    if rh == 0 || rw == 0 {
        return Err(AutodiffError::InvalidArgument { op: OP, msg: "factor must be positive".into() });
    }
    let (n, h, w) = planes(OP, input)?;
    let (ho, wo) = (h * rh, w * rw);
    let out = upsample_plane_data(&input.data(), n, h, w, rh, rw);
    Ok(Tensor::from_op(OP, out, with_hw(input.shape(), ho, wo), vec![input.clone()], move |g, _| {
        let mut dx = vec![0.0f32; n * h * w];
        for c in 0..n {
            for y in 0..ho {
                for x in 0..wo {
                    dx[(c * h + y / rh) * w + x / rw] += g[(c * ho + y) * wo + x];
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Nearest-neighbour replication on a raw buffer of `n` planes.
pub fn upsample_plane_data<T: Copy>(x: &[T], n: usize, h: usize, w: usize, rh: usize, rw: usize) -> Vec<T> {
    let (ho, wo) = (h * rh, w * rw);
    let mut out = Vec::with_capacity(n * ho * wo);
    for c in 0..n {
        for y in 0..ho {
            let row = &x[(c * h + y / rh) * w..(c * h + y / rh + 1) * w];
            for xx in 0..wo {
                out.push(row[xx / rw]);
            }
        }
    }
    out
}

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 {
        return Err(AutodiffError::Rank { op: OP, expected: 4, shape: sa.to_vec() });
    }
    if sb.len() != 4 {
        return Err(AutodiffError::Rank { op: OP, expected: 4, shape: sb.to_vec() });
    }
    for d in [0, 2, 3] {
        if sa[d] != sb[d] {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                what: format!("dimension {d}"),
                expected: sa[d],
                got: sb[d],
            });
        }
    }
    let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let (xa, xb) = (a.data(), b.data());
    let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
    for i in 0..batch {
        out.extend_from_slice(&xa[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&xb[i * cb * hw..(i + 1) * cb * hw]);
    }
    drop((xa, xb));
    let shape = vec![batch, ca + cb, sa[2], sa[3]];
    Ok(Tensor::from_op(OP, out, shape, vec![a.clone(), b.clone()], move |g, needs| {
        let split = |first: bool| {
            let (off, c) = if first { (0, ca) } else { (ca, cb) };
            let mut d = Vec::with_capacity(batch * c * hw);
            for i in 0..batch {
                let base = i * (ca + cb) * hw + off * hw;
                d.extend_from_slice(&g[base..base + c * hw]);
            }
            d
        };
        vec![needs[0].then(|| split(true)), needs[1].then(|| split(false))]
    }))
}
