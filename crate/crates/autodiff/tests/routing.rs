use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tax_autodiff::{ops, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

struct Instance {
    input: Tensor,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
    dims: (usize, usize, usize),
}

fn instance(seed: u64) -> (ChaCha8Rng, Instance) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..3);
    let cin = rng.random_range(1..5);
    let cout = rng.random_range(1..4);
    let h = rng.random_range(3..9);
    let w = rng.random_range(3..9);
    let n_sub = rng.random_range(2..6);
    let input = random(&mut rng, &[b, cin, h, w]);
    let kernels = (0..n_sub).map(|_| random(&mut rng, &[cout, cin, 3, 3])).collect();
    let biases = (0..n_sub).map(|_| random(&mut rng, &[cout])).collect();
    (rng, Instance { input, kernels, biases, dims: (b, h, w) })
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.to_vec().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn constant_route_reduces_to_plain_conv() {
    for seed in 0..50 {
        let (mut rng, inst) = instance(seed);
        let (b, h, w) = inst.dims;
        let k = rng.random_range(1..=inst.kernels.len());
        let route = vec![k as u32; b * h * w];
        let routed = ops::routed_conv2d(&inst.input, &inst.kernels, &inst.biases, &route).unwrap();
        let plain = ops::conv2d(&inst.input, &inst.kernels[k - 1], Some(&inst.biases[k - 1]), 1, 1).unwrap();
        assert_eq!(bits(&routed), bits(&plain), "seed {seed}");
    }
}

#[test]
fn mixed_route_matches_reference_path_exactly() {
    for seed in 100..150 {
        let (mut rng, inst) = instance(seed);
        let (b, h, w) = inst.dims;
        let n = inst.kernels.len() as u32;
        let route: Vec<u32> = (0..b * h * w).map(|_| rng.random_range(1..=n)).collect();
        let gathered = ops::routed_conv2d(&inst.input, &inst.kernels, &inst.biases, &route).unwrap();
        let reference = ops::routed_conv2d_reference(&inst.input, &inst.kernels, &inst.biases, &route).unwrap();
        assert_eq!(bits(&gathered), bits(&reference), "seed {seed}");
    }
}

#[test]
fn left_right_split_matches_two_masked_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (5, 6);
    let input = random(&mut rng, &[1, 2, h, w]);
    let kernels = vec![random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3, 2, 3, 3])];
    let biases = vec![random(&mut rng, &[3]), random(&mut rng, &[3])];
    let route: Vec<u32> = (0..h * w).map(|i| if i % w < w / 2 { 1 } else { 2 }).collect();
    let out = ops::routed_conv2d(&input, &kernels, &biases, &route).unwrap().to_vec();
    let left = ops::conv2d(&input, &kernels[0], Some(&biases[0]), 1, 1).unwrap().to_vec();
    let right = ops::conv2d(&input, &kernels[1], Some(&biases[1]), 1, 1).unwrap().to_vec();
    for (i, v) in out.iter().enumerate() {
        let col = i % w;
        let expect = if col < w / 2 { left[i] } else { right[i] };
        assert_eq!(v.to_bits(), expect.to_bits(), "index {i}");
    }
}

#[test]
fn unrouted_subset_gradient_is_zero_on_random_instances() {
    for seed in 200..220 {
        let (mut rng, inst) = instance(seed);
        let (b, h, w) = inst.dims;
        let n = inst.kernels.len() as u32;
        let skip = rng.random_range(1..=n);
        let route: Vec<u32> = (0..b * h * w)
            .map(|_| loop {
                let r = rng.random_range(1..=n);
                if r != skip {
                    break r;
                }
            })
            .collect();
        let params: Vec<Tensor> = inst.kernels.iter().map(|k| Tensor::param(k.to_vec(), k.shape()).unwrap()).collect();
        let y = ops::routed_conv2d(&inst.input, &params, &inst.biases, &route).unwrap();
        ops::sum(&ops::relu(&y)).backward().unwrap();
        let g = params[skip as usize - 1].grad().unwrap();
        assert!(g.iter().all(|&v| v == 0.0), "seed {seed}");
    }
}

proptest! {
    #[test]
    fn softmax_channel_sums_to_one(vals in prop::collection::vec(-50.0f32..50.0, 2 * 5 * 3 * 2)) {
        let t = Tensor::new(vals, &[2, 5, 3, 2]).unwrap();
        let s = ops::softmax_channel(&t).unwrap().to_vec();
        for b in 0..2 {
            for p in 0..6 {
                let total: f64 = (0..5).map(|c| s[(b * 5 + c) * 6 + p] as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-6, "sum {}", total);
            }
        }
    }

    #[test]
    fn cosine_is_bounded_and_scale_invariant(
        a in prop::collection::vec(-10.0f32..10.0, 6),
        b in prop::collection::vec(-10.0f32..10.0, 6),
        s in 0.01f32..100.0,
    ) {
        let ta = Tensor::new(a.clone(), &[6]).unwrap();
        let tb = Tensor::new(b, &[6]).unwrap();
        let c = ops::cosine_similarity(&ta, &tb, ops::COSINE_EPS).unwrap().item();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assume!(norm > 1e-3);
        let scaled = Tensor::new(a.iter().map(|v| v * s).collect(), &[6]).unwrap();
        let c2 = ops::cosine_similarity(&scaled, &tb, ops::COSINE_EPS).unwrap().item();
        prop_assert!((c - c2).abs() < 1e-5);
    }
}
