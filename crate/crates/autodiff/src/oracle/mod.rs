//! Naive f64 reference implementations and a central finite-difference
//! checker.
//!
//! Nothing here shares code with the engine's ops: loops are written out
//! directly so the oracle stays an independent route to the same values.

pub mod gradcheck;

/// Dense f64 array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "oracle array length");
        Arr { shape: shape.to_vec(), data }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Arr::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => panic!("expected rank 4, got {:?}", self.shape),
        }
    }

    fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let (_, s1, s2, s3) = self.dims4();
        self.data[((a * s1 + b) * s2 + c) * s3 + d]
    }
}

/// Tracks the smallest distance of any nonsmooth decision (relu input, max
/// comparison) from its switching point, so callers can reject samples where
/// finite differences would straddle a kink.
#[derive(Debug, Clone, Copy)]
pub struct Margin(pub f64);

impl Default for Margin {
    fn default() -> Self {
        Margin(f64::INFINITY)
    }
}

impl Margin {
    pub fn observe(&mut self, gap: f64) {
        self.0 = self.0.min(gap.abs());
    }
}

pub fn conv2d(x: &Arr, k: &Arr, bias: Option<&[f64]>, pad: usize, stride: usize) -> Arr {
    let (b, cin, h, w) = x.dims4();
    let (cout, kcin, kh, kw) = k.dims4();
    assert_eq!(cin, kcin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(b * cout * ho * wo);
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at4(n, ci, iy as usize, ix as usize) * k.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    Arr::new(&[b, cout, ho, wo], out)
}

/// Per-pixel routed 3x3 convolution, padding 1; `route` values are 1-based.
pub fn routed_conv2d(x: &Arr, kernels: &[Arr], biases: &[Vec<f64>], route: &[u32]) -> Arr {
    let (b, _, h, w) = x.dims4();
    let cout = kernels[0].shape[0];
    let mut out = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let s = route[(n * h + y) * w + xx] as usize - 1;
                for co in 0..cout {
                    let mut acc = biases[s][co];
                    for ci in 0..kernels[s].shape[1] {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at4(n, ci, iy as usize, ix as usize) * kernels[s].at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((n * cout + co) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Arr::new(&[b, cout, h, w], out)
}

pub fn relu(x: &Arr, margin: &mut Margin) -> Arr {
    Arr::new(
        &x.shape,
        x.data
            .iter()
            .map(|&v| {
                margin.observe(v);
                v.max(0.0)
            })
            .collect(),
    )
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    Arr::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn max_pool2d(x: &Arr, size: usize, margin: &mut Margin) -> Arr {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals: Vec<f64> = Vec::new();
                    for dy in 0..size {
                        for dx in 0..size {
                            vals.push(x.at4(n, ch, oy * size + dy, ox * size + dx));
                        }
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 {
                        margin.observe(vals[0] - vals[1]);
                    }
                    out.push(vals[0]);
                }
            }
        }
    }
    Arr::new(&[b, c, ho, wo], out)
}

pub fn nearest_upsample(x: &Arr, rh: usize, rw: usize) -> Arr {
    let (b, c, h, w) = x.dims4();
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h * rh {
                for xx in 0..w * rw {
                    out.push(x.at4(n, ch, y / rh, xx / rw));
                }
            }
        }
    }
    Arr::new(&[b, c, h * rh, w * rw], out)
}

pub fn avg_downsample(x: &Arr, rh: usize, rw: usize) -> Arr {
    let (b, c, h, w) = x.dims4();
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..h / rh {
                for ox in 0..w / rw {
                    let mut s = 0.0;
                    for dy in 0..rh {
                        for dx in 0..rw {
                            s += x.at4(n, ch, oy * rh + dy, ox * rw + dx);
                        }
                    }
                    out.push(s / (rh * rw) as f64);
                }
            }
        }
    }
    Arr::new(&[b, c, h / rh, w / rw], out)
}

pub fn concat_channels(a: &Arr, b: &Arr) -> Arr {
    let (n, ca, h, w) = a.dims4();
    let (_, cb, _, _) = b.dims4();
    let mut out = Vec::new();
    for i in 0..n {
        out.extend_from_slice(&a.data[i * ca * h * w..(i + 1) * ca * h * w]);
        out.extend_from_slice(&b.data[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Arr::new(&[n, ca + cb, h, w], out)
}

/// Softmax along `axis`, computed from the textbook definition.
pub fn softmax(x: &Arr, axis: usize) -> Arr {
    let outer: usize = x.shape[..axis].iter().product();
    let k = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx: Vec<usize> = (0..k).map(|c| (o * k + c) * inner + i).collect();
            let m = idx.iter().map(|&j| x.data[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.iter().map(|&j| (x.data[j] - m).exp()).sum();
            for &j in &idx {
                out[j] = (x.data[j] - m).exp() / z;
            }
        }
    }
    Arr::new(&x.shape, out)
}

pub fn log_softmax(x: &Arr, axis: usize) -> Arr {
    let s = softmax(x, axis);
    Arr::new(&x.shape, s.data.iter().map(|v| v.ln()).collect())
}

/// Mean over pixels of `-sum_c t_c log p_c`; `target` laid out like `logits`.
pub fn cross_entropy_dist(logits: &Arr, target: &[f64]) -> f64 {
    let (b, _, h, w) = logits.dims4();
    let lp = log_softmax(logits, 1);
    -lp.data.iter().zip(target).map(|(l, t)| l * t).sum::<f64>() / (b * h * w) as f64
}

pub fn one_hot(labels: &[u8], b: usize, k: usize, h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; b * k * h * w];
    for n in 0..b {
        for p in 0..h * w {
            t[(n * k + labels[n * h * w + p] as usize) * h * w + p] = 1.0;
        }
    }
    t
}

pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    dot / (na * nb)
}

/// Max cosine per prototype group for every cell of `features` `[B, d, h, w]`
/// against `bank` `[d, G*Q]`. Returns `[B, G, h, w]`.
pub fn group_max_cosine(features: &Arr, bank: &Arr, groups: usize, per_group: usize, eps: f64, margin: &mut Margin) -> Arr {
    let (b, d, h, w) = features.dims4();
    let np = groups * per_group;
    let mut out = Vec::new();
    for n in 0..b {
        for g in 0..groups {
            for y in 0..h {
                for x in 0..w {
                    let f: Vec<f64> = (0..d).map(|i| features.at4(n, i, y, x)).collect();
                    let mut sims: Vec<f64> = (0..per_group)
                        .map(|q| {
                            let p: Vec<f64> = (0..d).map(|i| bank.data[i * np + g * per_group + q]).collect();
                            cosine(&f, &p, eps)
                        })
                        .collect();
                    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if sims.len() > 1 {
                        margin.observe(sims[0] - sims[1]);
                    }
                    out.push(sims[0]);
                }
            }
        }
    }
    Arr::new(&[b, groups, h, w], out)
}

/// Central differences of `f` at `x` with step `eps`.
pub fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Floor on the denominator of [`max_rel_err`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_ERR_FLOOR)`.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
        })
        .fold(0.0, f64::max)
}

pub fn dot(a: &Arr, w: &[f32]) -> f64 {
    a.data.iter().zip(w).map(|(x, &w)| x * w as f64).sum()
}
