//! 2-D convolution (im2col + gemm) and the per-pixel routed variant.
//!
//! Layout is NCHW for activations and `[Cout, Cin, kh, kw]` for kernels.

use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, View};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(AutodiffError::Rank { op, expected: 4, shape: t.shape().to_vec() }),
    }
}

fn out_size(op: &'static str, what: &str, size: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let span = size + 2 * pad;
    if span < k {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("{what} {size} with padding {pad} is smaller than kernel extent {k}"),
        });
    }
    if (span - k) % stride != 0 {
        return Err(AutodiffError::NotDivisible {
            op,
            what: format!("padded {what} minus kernel extent"),
            size: span - k,
            factor: stride,
        });
    }
    Ok((span - k) / stride + 1)
}

fn geometry(op: &'static str, input: &Tensor, kernel_shape: &[usize], pad: usize, stride: usize) -> Result<Geometry> {
    let [batch, cin, h, w] = rank4(op, input)?;
    let [cout, kcin, kh, kw] = match *kernel_shape {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(AutodiffError::Rank { op, expected: 4, shape: kernel_shape.to_vec() }),
    };
    if kcin != cin {
        return Err(AutodiffError::ShapeMismatch {
            op,
            what: "input channels (kernel dim 1 vs input dim 1)".into(),
            expected: kcin,
            got: cin,
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(AutodiffError::InvalidArgument { op, msg: format!("kernel extent {kh}x{kw} must be odd") });
    }
    if stride == 0 {
        return Err(AutodiffError::InvalidArgument { op, msg: "stride must be >= 1".into() });
    }
    let ho = out_size(op, "height", h, kh, pad, stride)?;
    let wo = out_size(op, "width", w, kw, pad, stride)?;
    Ok(Geometry { batch, cin, h, w, cout, kh, kw, pad, stride, ho, wo })
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col(g: &Geometry, img: &[f32], col: &mut [f32]) {
    let p = g.pixels();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column is in bounds, for stride 1.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi)
}

/// Folds `[cin*kh*kw, ho*wo]` back into `[cin, h, w]`, accumulating.
fn col2im(g: &Geometry, col: &[f32], img: &mut [f32]) {
    let p = g.pixels();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: &Tensor, cout: usize) -> Result<()> {
    if bias.shape() != [cout] {
        return Err(AutodiffError::ShapeMismatch {
            op,
            what: "bias length (Cout)".into(),
            expected: cout,
            got: bias.len(),
        });
    }
    Ok(())
}

/// Plain 2-D cross-correlation with optional bias.
///
/// Output size is `(H + 2*padding - kh) / stride + 1`, which must divide
/// exactly.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: usize, stride: usize) -> Result<Tensor> {
    let g = geometry("conv2d", input, kernel.shape(), padding, stride)?;
    if let Some(b) = bias {
        check_bias("conv2d", b, g.cout)?;
    }
    let (kcols, p) = (g.cols(), g.pixels());
    let x = input.to_vec();
    let wk = kernel.to_vec();
    let bv = bias.map(|b| b.to_vec());
    let mut out = vec![0.0f32; g.batch * g.cout * p];
    let mut col = vec![0.0f32; kcols * p];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(&g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(g.cout, kcols, p, View::row_major(&wk, kcols), View::row_major(&col, p), 0.0, ob);
        if let Some(bv) = &bv {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
    }
    let mut inputs = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let has_bias = bias.is_some();
    let shape = vec![g.batch, g.cout, g.ho, g.wo];
    Ok(Tensor::from_op("conv2d", out, shape, inputs, move |grad, needs| {
        let mut dx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0f32; wk.len()]);
        let mut col = vec![0.0f32; kcols * p];
        let mut dcol = vec![0.0f32; kcols * p];
        for b in 0..g.batch {
            let gb = &grad[b * g.cout * p..(b + 1) * g.cout * p];
            if let Some(dw) = dw.as_mut() {
                im2col(&g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
                gemm(g.cout, p, kcols, View::row_major(gb, p), View::transposed(&col, p), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kcols, g.cout, p, View::transposed(&wk, kcols), View::row_major(gb, p), 0.0, &mut dcol);
                col2im(&g, &dcol, &mut dx[b * in_stride..(b + 1) * in_stride]);
            }
        }
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(needs[2].then(|| bias_grad(grad, g.batch, g.cout, p)));
        }
        grads
    }))
}

fn bias_grad(grad: &[f32], batch: usize, cout: usize, p: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; cout];
    for b in 0..batch {
        for (co, a) in acc.iter_mut().enumerate() {
            let off = (b * cout + co) * p;
            *a += grad[off..off + p].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Per-pixel kernel-routing metadata for [`routed_conv2d`].
///
/// `route` holds one subset index per output pixel, `[B, H, W]` row-major,
/// with values in `1..=n_subsets`.
fn validate_route(route: &[u32], batch: usize, h: usize, w: usize, n_subsets: usize) -> Result<()> {
    if route.len() != batch * h * w {
        return Err(AutodiffError::ShapeMismatch {
            op: "routed_conv2d",
            what: "route length (B*H*W)".into(),
            expected: batch * h * w,
            got: route.len(),
        });
    }
    if let Some(i) = route.iter().position(|&r| r == 0 || r as usize > n_subsets) {
        return Err(AutodiffError::RouteOutOfRange {
            value: route[i],
            max: n_subsets,
            b: i / (h * w),
            y: (i / w) % h,
            x: i % w,
        });
    }
    Ok(())
}

fn routed_geometry(input: &Tensor, kernels: &[Tensor], biases: &[Tensor], route: &[u32]) -> Result<Geometry> {
    const OP: &str = "routed_conv2d";
    let first = kernels
        .first()
        .ok_or_else(|| AutodiffError::InvalidArgument { op: OP, msg: "kernel set is empty".into() })?;
    for k in kernels {
        if k.shape() != first.shape() {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                msg: format!("kernel subsets differ in shape: {:?} vs {:?}", first.shape(), k.shape()),
            });
        }
    }
    if biases.len() != kernels.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: OP,
            what: "bias count (one per subset)".into(),
            expected: kernels.len(),
            got: biases.len(),
        });
    }
    let g = geometry(OP, input, first.shape(), 1, 1)?;
    if g.kh != 3 || g.kw != 3 {
        return Err(AutodiffError::InvalidArgument { op: OP, msg: format!("kernels must be 3x3, got {}x{}", g.kh, g.kw) });
    }
    for b in biases {
        check_bias(OP, b, g.cout)?;
    }
    validate_route(route, g.batch, g.ho, g.wo, kernels.len())?;
    Ok(g)
}

/// Convolution whose 3x3 kernel is chosen per output pixel.
///
/// Output pixel `(u, v)` of image `b` is the response of subset
/// `kernels[route[b,u,v] - 1]` (plus its bias) at that location. Each subset
/// only sees the columns routed to it, so the cost matches one convolution.
/// Gradients flow only into the subset that produced each pixel.
pub fn routed_conv2d(input: &Tensor, kernels: &[Tensor], biases: &[Tensor], route: &[u32]) -> Result<Tensor> {
    let g = routed_geometry(input, kernels, biases, route)?;
    let n_sub = kernels.len();
    let (kcols, p) = (g.cols(), g.pixels());
    let in_stride = g.cin * g.h * g.w;
    let x = input.to_vec();
    let wks: Vec<Vec<f32>> = kernels.iter().map(|k| k.to_vec()).collect();
    let bvs: Vec<Vec<f32>> = biases.iter().map(|b| b.to_vec()).collect();
    let route = route.to_vec();

    let mut out = vec![0.0f32; g.batch * g.cout * p];
    let mut col = vec![0.0f32; kcols * p];
    let mut gathered = Vec::new();
    let mut partial = Vec::new();
    for b in 0..g.batch {
        im2col(&g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
        let rb = &route[b * p..(b + 1) * p];
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for s in 0..n_sub {
            let idx = pixels_for(rb, s);
            if idx.is_empty() {
                continue;
            }
            let n = idx.len();
            gather_cols(&col, kcols, p, &idx, &mut gathered);
            partial.clear();
            partial.resize(g.cout * n, 0.0);
            gemm(g.cout, kcols, n, View::row_major(&wks[s], kcols), View::row_major(&gathered, n), 0.0, &mut partial);
            for co in 0..g.cout {
                let bias = bvs[s][co];
                for (j, &pix) in idx.iter().enumerate() {
                    ob[co * p + pix] = partial[co * n + j] + bias;
                }
            }
        }
    }

    let mut inputs = Vec::with_capacity(1 + 2 * n_sub);
    inputs.push(input.clone());
    inputs.extend(kernels.iter().cloned());
    inputs.extend(biases.iter().cloned());
    let shape = vec![g.batch, g.cout, g.ho, g.wo];
    Ok(Tensor::from_op("routed_conv2d", out, shape, inputs, move |grad, needs| {
        let need_x = needs[0];
        let mut dx = need_x.then(|| vec![0.0f32; x.len()]);
        let mut dws: Vec<Option<Vec<f32>>> =
            (0..n_sub).map(|s| needs[1 + s].then(|| vec![0.0f32; kcols * g.cout])).collect();
        let mut dbs: Vec<Option<Vec<f64>>> =
            (0..n_sub).map(|s| needs[1 + n_sub + s].then(|| vec![0.0f64; g.cout])).collect();
        let mut col = vec![0.0f32; kcols * p];
        let mut dcol = vec![0.0f32; kcols * p];
        let mut gathered = Vec::new();
        let mut gsub = Vec::new();
        let mut dsub = Vec::new();
        for b in 0..g.batch {
            let rb = &route[b * p..(b + 1) * p];
            let gb = &grad[b * g.cout * p..(b + 1) * g.cout * p];
            let any_w = dws.iter().any(Option::is_some);
            if any_w {
                im2col(&g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
            }
            if need_x {
                dcol.fill(0.0);
            }
            for s in 0..n_sub {
                let idx = pixels_for(rb, s);
                if idx.is_empty() {
                    continue;
                }
                let n = idx.len();
                gsub.clear();
                gsub.resize(g.cout * n, 0.0);
                for co in 0..g.cout {
                    for (j, &pix) in idx.iter().enumerate() {
                        gsub[co * n + j] = gb[co * p + pix];
                    }
                }
                if let Some(db) = dbs[s].as_mut() {
                    for (co, acc) in db.iter_mut().enumerate() {
                        *acc += gsub[co * n..(co + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                if let Some(dw) = dws[s].as_mut() {
                    gather_cols(&col, kcols, p, &idx, &mut gathered);
                    gemm(g.cout, n, kcols, View::row_major(&gsub, n), View::transposed(&gathered, n), 1.0, dw);
                }
                if need_x {
                    dsub.clear();
                    dsub.resize(kcols * n, 0.0);
                    gemm(kcols, g.cout, n, View::transposed(&wks[s], kcols), View::row_major(&gsub, n), 0.0, &mut dsub);
                    for r in 0..kcols {
                        for (j, &pix) in idx.iter().enumerate() {
                            dcol[r * p + pix] = dsub[r * n + j];
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                col2im(&g, &dcol, &mut dx[b * in_stride..(b + 1) * in_stride]);
            }
        }
        let mut grads = Vec::with_capacity(1 + 2 * n_sub);
        grads.push(dx);
        grads.extend(dws);
        grads.extend(dbs.into_iter().map(|d| d.map(|d| d.into_iter().map(|v| v as f32).collect())));
        grads
    }))
}

/// Reference path for [`routed_conv2d`]: one full convolution per subset,
/// then a per-pixel select. Forward only; used to cross-check the gathered
/// implementation.
pub fn routed_conv2d_reference(input: &Tensor, kernels: &[Tensor], biases: &[Tensor], route: &[u32]) -> Result<Tensor> {
    let g = routed_geometry(input, kernels, biases, route)?;
    let p = g.pixels();
    let full: Vec<Vec<f32>> = crate::tensor::no_grad(|| {
        kernels
            .iter()
            .zip(biases)
            .map(|(k, b)| conv2d(input, k, Some(b), 1, 1).map(|t| t.to_vec()))
            .collect::<Result<_>>()
    })?;
    let mut out = vec![0.0f32; g.batch * g.cout * p];
    for b in 0..g.batch {
        for co in 0..g.cout {
            for pix in 0..p {
                let s = route[b * p + pix] as usize - 1;
                let i = (b * g.cout + co) * p + pix;
                out[i] = full[s][i];
            }
        }
    }
    Tensor::new(out, &[g.batch, g.cout, g.ho, g.wo])
}

fn pixels_for(route: &[u32], subset: usize) -> Vec<usize> {
    let want = subset as u32 + 1;
    route.iter().enumerate().filter(|(_, &r)| r == want).map(|(i, _)| i).collect()
}

fn gather_cols(col: &[f32], rows: usize, p: usize, idx: &[usize], out: &mut Vec<f32>) {
    let n = idx.len();
    out.clear();
    out.resize(rows * n, 0.0);
    for r in 0..rows {
        let src = &col[r * p..(r + 1) * p];
        let dst = &mut out[r * n..(r + 1) * n];
        for (d, &i) in dst.iter_mut().zip(idx) {
            *d = src[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: &[usize]) -> Tensor {
        Tensor::new(vec![1.0; shape.iter().product()], shape).unwrap()
    }

    #[test]
    fn ones_receptive_field_counts() {
        let out = conv2d(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), None, 1, 1).unwrap();
        let v = out.to_vec();
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = Tensor::new(k, &[1, 1, 3, 3]).unwrap();
        let data: Vec<f32> = (0..20).map(|i| (i as f32 * 0.37).sin()).collect();
        let input = Tensor::new(data.clone(), &[1, 1, 4, 5]).unwrap();
        assert_eq!(conv2d(&input, &kernel, None, 1, 1).unwrap().to_vec(), data);
    }

    #[test]
    fn strided_output_size() {
        let out = conv2d(&ones(&[1, 2, 7, 7]), &ones(&[3, 2, 3, 3]), None, 1, 2).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn non_exact_output_is_an_error() {
        let err = conv2d(&ones(&[1, 1, 6, 6]), &ones(&[1, 1, 3, 3]), None, 1, 2).unwrap_err();
        assert!(matches!(err, AutodiffError::NotDivisible { .. }), "{err}");
    }

    #[test]
    fn channel_mismatch_is_named() {
        let err = conv2d(&ones(&[1, 2, 4, 4]), &ones(&[1, 3, 3, 3]), None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(conv2d(&ones(&[1, 1, 4, 4]), &ones(&[1, 1, 2, 2]), None, 0, 1).is_err());
    }

    #[test]
    fn route_out_of_range_reports_position() {
        let k = vec![ones(&[1, 1, 3, 3]), ones(&[1, 1, 3, 3])];
        let b = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut route = vec![1u32; 9];
        route[5] = 3;
        let err = routed_conv2d(&ones(&[1, 1, 3, 3]), &k, &b, &route).unwrap_err();
        assert_eq!(err, AutodiffError::RouteOutOfRange { value: 3, max: 2, b: 0, y: 1, x: 2 });
        assert!(routed_conv2d(&ones(&[1, 1, 3, 3]), &k, &b, &route[..8]).is_err());
    }

    #[test]
    fn unused_subset_gets_zero_gradient() {
        let x = Tensor::param((0..32).map(|i| i as f32 * 0.1).collect(), &[1, 2, 4, 4]).unwrap();
        let k: Vec<Tensor> = (0..3)
            .map(|s| Tensor::param((0..18).map(|i| ((i + s) as f32).cos()).collect(), &[1, 2, 3, 3]).unwrap())
            .collect();
        let b: Vec<Tensor> = (0..3).map(|_| Tensor::param(vec![0.1], &[1]).unwrap()).collect();
        let route: Vec<u32> = (0..16).map(|i| if i % 2 == 0 { 1 } else { 3 }).collect();
        let y = routed_conv2d(&x, &k, &b, &route).unwrap();
        crate::ops::sum(&y).backward().unwrap();
        assert!(k[1].grad().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(b[1].grad().unwrap(), vec![0.0]);
        assert!(k[0].grad().unwrap().iter().any(|&v| v != 0.0));
        assert_eq!(b[2].grad().unwrap(), vec![8.0]);
    }
}
