use tax_autodiff::ops::{self, COSINE_EPS};
use tax_autodiff::oracle::gradcheck::{check, Input, SplitMix};
use tax_autodiff::oracle::{self as o, Arr, Margin};
use tax_core::assigner::{Assigner, AssignerConfig};

pub fn small() -> AssignerConfig {
    AssignerConfig { height: 4, width: 4, in_channels: 2, widths: vec![2, 2], dim: 3, per_group: 2, n_annotators: 2 }
}

fn oracle_encode(a: &[Arr], cfg: &AssignerConfig, m: &mut Margin) -> Arr {
    let mut h = a[0].clone();
    for s in 0..cfg.widths.len() {
        let y = o::conv2d(&h, &a[1 + 2 * s], Some(&a[2 + 2 * s].data), 1, 1);
        h = o::max_pool2d(&o::relu(&y, m), 2, m);
    }
    let p = 1 + 2 * cfg.widths.len();
    o::conv2d(&h, &a[p], Some(&a[p + 1].data), 1, 1)
}

pub fn inputs(rng: &mut SplitMix, cfg: &AssignerConfig) -> Vec<Input> {
    let mut v = vec![Input::random(rng, &[1, cfg.in_channels, cfg.height, cfg.width])];
    let mut cin = cfg.in_channels;
    for &w in cfg.widths.iter().chain(std::iter::once(&cfg.dim)) {
        v.push(Input::random(rng, &[w, cin, 3, 3]));
        v.push(Input::random(rng, &[w]));
        cin = w;
    }
    v.push(Input::random(rng, &[cfg.dim, cfg.groups() * cfg.per_group]));
    v
}

/// Input, encoder weights and bank all receive gradients through
/// `encode` followed by the grouped max cosine.
pub fn encoder_scores(seed: u64) -> Option<f64> {
    let cfg = small();
    let mut rng = SplitMix::new(seed);
    let inp = inputs(&mut rng, &cfg);
    let (c1, c2) = (cfg.clone(), cfg.clone());
    check(
        &mut rng,
        &inp,
        move |p| {
            let a = Assigner::from_tensors(c1.clone(), &p[1..]).unwrap();
            let f = a.encode(&p[0]).unwrap();
            ops::group_max_cosine(&f, &a.bank, c1.groups(), c1.per_group, COSINE_EPS).unwrap().scores
        },
        move |a, m| {
            let f = oracle_encode(a, &c2, m);
            o::group_max_cosine(&f, a.last().unwrap(), c2.groups(), c2.per_group, COSINE_EPS as f64, m)
        },
    )
}

pub fn encoder_features(seed: u64) -> Option<f64> {
    let cfg = small();
    let mut rng = SplitMix::new(seed);
    let inp = inputs(&mut rng, &cfg);
    let (c1, c2) = (cfg.clone(), cfg.clone());
    check(
        &mut rng,
        &inp,
        move |p| Assigner::from_tensors(c1.clone(), &p[1..]).unwrap().encode(&p[0]).unwrap(),
        move |a, m| oracle_encode(a, &c2, m),
    )
}

/// Gradient checks over the assigner encoder, in the shape of the autodiff suite.
pub const ENCODER_SUITE: &[(&str, fn(u64) -> Option<f64>)] = &[("encoder features", encoder_features), ("encoder scores", encoder_scores)];
