//! Per-op finite-difference checks against the f64 oracle.
//!
//! Each check draws a small random instance from `seed`, reduces the op's
//! output to a scalar with random weights, and compares the engine's
//! gradients with central differences of the f64 re-evaluation. A check
//! returns `None` when the instance sits too close to a nonsmooth point
//! (relu input or max tie) for finite differences to be meaningful.

use super::{self as o, Arr, Margin};
use crate::ops;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_EPS: f64 = 1e-3;
/// Maximum relative error accepted by the gradient suite.
pub const FD_TOL: f64 = 1e-3;
/// Instances with a nonsmooth decision closer than this are redrawn.
pub const MIN_MARGIN: f64 = 10.0 * FD_EPS;

/// Deterministic splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
        lo + (hi - lo) * u
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

/// One differentiable input of a check.
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        Input { shape: shape.to_vec(), data }
    }

    pub fn random(rng: &mut SplitMix, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Input::new(shape, rng.vec(n, -1.0, 1.0))
    }
}

/// Runs one check. `engine` maps parameter tensors to the op output; `oracle`
/// maps the same inputs (as f64 arrays) to the reference output.
pub fn check(
    rng: &mut SplitMix,
    inputs: &[Input],
    engine: impl Fn(&[Tensor]) -> Tensor,
    oracle: impl Fn(&[Arr], &mut Margin) -> Arr,
) -> Option<f64> {
    let params: Vec<Tensor> = inputs.iter().map(|i| Tensor::param(i.data.clone(), &i.shape).unwrap()).collect();
    let out = engine(&params);
    let weights = rng.vec(out.len(), -1.0, 1.0);
    ops::dot_const(&out, &weights).unwrap().backward().unwrap();
    let analytic: Vec<f32> = params
        .iter()
        .flat_map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let base: Vec<f64> = inputs.iter().flat_map(|i| i.data.iter().map(|&v| v as f64)).collect();
    let split = |flat: &[f64]| -> Vec<Arr> {
        let mut off = 0;
        inputs
            .iter()
            .map(|i| {
                let n = i.data.len();
                let a = Arr::new(&i.shape, flat[off..off + n].to_vec());
                off += n;
                a
            })
            .collect()
    };
    let mut margin = Margin::default();
    let reference = oracle(&split(&base), &mut margin);
    if margin.0 < MIN_MARGIN {
        return None;
    }
    // Forward values must agree too, or the gradient comparison is moot.
    let fwd_err = o::max_rel_err(&out.to_vec(), &reference.data);
    assert!(fwd_err < 1e-4, "forward mismatch against oracle: {fwd_err}");
    let numeric = o::central_diff(&base, FD_EPS, |x| {
        let mut m = Margin::default();
        o::dot(&oracle(&split(x), &mut m), &weights)
    });
    Some(o::max_rel_err(&analytic, &numeric))
}

fn kernel_set(rng: &mut SplitMix, n_sub: usize, cout: usize, cin: usize) -> Vec<Input> {
    let mut v: Vec<Input> = (0..n_sub).map(|_| Input::random(rng, &[cout, cin, 3, 3])).collect();
    v.extend((0..n_sub).map(|_| Input::random(rng, &[cout])));
    v
}

pub fn conv2d(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let stride = 1 + rng.below(2);
    let (h, w) = if stride == 1 { (5, 5) } else { (5, 7) };
    let inputs = [
        Input::random(&mut rng, &[1, 2, h, w]),
        Input::random(&mut rng, &[3, 2, 3, 3]),
        Input::random(&mut rng, &[3]),
    ];
    check(
        &mut rng,
        &inputs,
        |p| ops::conv2d(&p[0], &p[1], Some(&p[2]), 1, stride).unwrap(),
        |a, _| o::conv2d(&a[0], &a[1], Some(&a[2].data), 1, stride),
    )
}

pub fn routed_conv2d(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let n_sub = 3;
    let (b, h, w) = (2, 4, 5);
    let route: Vec<u32> = (0..b * h * w).map(|_| 1 + rng.below(n_sub) as u32).collect();
    let mut inputs = vec![Input::random(&mut rng, &[b, 2, h, w])];
    inputs.extend(kernel_set(&mut rng, n_sub, 3, 2));
    let r = route.clone();
    check(
        &mut rng,
        &inputs,
        move |p| ops::routed_conv2d(&p[0], &p[1..1 + n_sub], &p[1 + n_sub..], &r).unwrap(),
        move |a, _| {
            let biases: Vec<Vec<f64>> = a[1 + n_sub..].iter().map(|b| b.data.clone()).collect();
            o::routed_conv2d(&a[0], &a[1..1 + n_sub], &biases, &route)
        },
    )
}

pub fn relu(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[2, 3, 4])];
    check(&mut rng, &inputs, |p| ops::relu(&p[0]), |a, m| o::relu(&a[0], m))
}

pub fn softmax(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::new(&[2, 4, 3, 2], rng.vec(48, -3.0, 3.0))];
    check(&mut rng, &inputs, |p| ops::softmax_channel(&p[0]).unwrap(), |a, _| o::softmax(&a[0], 1))
}

pub fn log_softmax(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::new(&[2, 3, 2, 3], rng.vec(36, -3.0, 3.0))];
    check(&mut rng, &inputs, |p| ops::log_softmax_channel(&p[0]).unwrap(), |a, _| o::log_softmax(&a[0], 1))
}

/// Cross-entropy against integer labels on odd seeds, soft targets on even.
pub fn cross_entropy_map(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let (b, k, h, w) = (1, 3, 4, 4);
    let inputs = [Input::new(&[b, k, h, w], rng.vec(b * k * h * w, -2.0, 2.0))];
    if seed % 2 == 1 {
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.below(k) as u8).collect();
        let t = o::one_hot(&labels, b, k, h, w);
        check(
            &mut rng,
            &inputs,
            move |p| ops::cross_entropy_map(&p[0], ops::CeTarget::Labels(&labels)).unwrap(),
            move |a, _| Arr::new(&[], vec![o::cross_entropy_dist(&a[0], &t)]),
        )
    } else {
        let raw = rng.vec(b * k * h * w, 0.0, 1.0);
        let mut dist = raw.clone();
        for p in 0..h * w {
            let s: f32 = (0..k).map(|c| raw[c * h * w + p]).sum();
            for c in 0..k {
                dist[c * h * w + p] = raw[c * h * w + p] / s;
            }
        }
        let t: Vec<f64> = dist.iter().map(|&v| v as f64).collect();
        check(
            &mut rng,
            &inputs,
            move |p| ops::cross_entropy_map(&p[0], ops::CeTarget::Distribution(&dist)).unwrap(),
            move |a, _| Arr::new(&[], vec![o::cross_entropy_dist(&a[0], &t)]),
        )
    }
}

pub fn cosine_similarity(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let d = 2 + rng.below(6);
    let inputs = [Input::random(&mut rng, &[d]), Input::random(&mut rng, &[d])];
    check(
        &mut rng,
        &inputs,
        |p| ops::cosine_similarity(&p[0], &p[1], ops::COSINE_EPS).unwrap(),
        |a, _| Arr::new(&[], vec![o::cosine(&a[0].data, &a[1].data, ops::COSINE_EPS as f64)]),
    )
}

pub fn group_max_cosine(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let (d, groups, q) = (4, 3, 2);
    let inputs = [Input::random(&mut rng, &[2, d, 2, 2]), Input::random(&mut rng, &[d, groups * q])];
    check(
        &mut rng,
        &inputs,
        move |p| ops::group_max_cosine(&p[0], &p[1], groups, q, ops::COSINE_EPS).unwrap().scores,
        move |a, m| o::group_max_cosine(&a[0], &a[1], groups, q, ops::COSINE_EPS as f64, m),
    )
}

pub fn max_pool2d(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[1, 2, 4, 4])];
    check(&mut rng, &inputs, |p| ops::max_pool2d(&p[0], 2).unwrap(), |a, m| o::max_pool2d(&a[0], 2, m))
}

pub fn avg_downsample(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[1, 2, 4, 6])];
    check(&mut rng, &inputs, |p| ops::avg_downsample(&p[0], (2, 3)).unwrap(), |a, _| o::avg_downsample(&a[0], 2, 3))
}

pub fn nearest_upsample(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[1, 2, 2, 3])];
    check(&mut rng, &inputs, |p| ops::nearest_upsample(&p[0], (2, 2)).unwrap(), |a, _| o::nearest_upsample(&a[0], 2, 2))
}

pub fn concat_channels(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[2, 1, 2, 2]), Input::random(&mut rng, &[2, 3, 2, 2])];
    check(&mut rng, &inputs, |p| ops::concat_channels(&p[0], &p[1]).unwrap(), |a, _| o::concat_channels(&a[0], &a[1]))
}

/// Shared subexpression: `relu(conv(x)) + conv(x)` feeds both branches from one
/// node, so its gradient must be the sum over both paths.
pub fn shared_subexpression(seed: u64) -> Option<f64> {
    let mut rng = SplitMix::new(seed);
    let inputs = [Input::random(&mut rng, &[1, 2, 4, 4]), Input::random(&mut rng, &[2, 2, 3, 3])];
    check(
        &mut rng,
        &inputs,
        |p| {
            let y = ops::conv2d(&p[0], &p[1], None, 1, 1).unwrap();
            ops::add(&ops::relu(&y), &y).unwrap()
        },
        |a, m| {
            let y = o::conv2d(&a[0], &a[1], None, 1, 1);
            o::add(&o::relu(&y, m), &y)
        },
    )
}

/// Named op checks covered by the gradient suite.
pub const SUITE: &[(&str, fn(u64) -> Option<f64>)] = &[
    ("conv2d", conv2d),
    ("routed_conv2d", routed_conv2d),
    ("relu", relu),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("cross_entropy_map", cross_entropy_map),
    ("cosine_similarity", cosine_similarity),
    ("group_max_cosine", group_max_cosine),
    ("max_pool2d", max_pool2d),
    ("avg_downsample", avg_downsample),
    ("nearest_upsample", nearest_upsample),
    ("concat_channels", concat_channels),
    ("shared_subexpression", shared_subexpression),
];

/// Runs `check` on seeds `0, 1, ...` until `accepted` instances pass the
/// margin filter (giving up after `10 * accepted` draws). Returns the worst
/// relative error and the number of accepted instances.
pub fn run_seeds(check: fn(u64) -> Option<f64>, accepted: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..(10 * accepted as u64) {
        if n == accepted {
            break;
        }
        if let Some(err) = check(seed) {
            worst = worst.max(err);
            n += 1;
        }
    }
    (worst, n)
}
