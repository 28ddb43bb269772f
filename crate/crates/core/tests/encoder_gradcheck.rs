mod common;

use common::encoder::{inputs, small, ENCODER_SUITE};
use tax_autodiff::oracle::gradcheck::{run_seeds, SplitMix, FD_TOL};
use tax_core::assigner::Assigner;

#[test]
fn encoder_stack_matches_finite_differences() {
    for &(name, f) in ENCODER_SUITE {
        let (worst, n) = run_seeds(f, 20);
        assert_eq!(n, 20, "{name}: too few smooth instances");
        assert!(worst < FD_TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn from_tensors_rejects_wrong_count() {
    let cfg = small();
    let mut rng = SplitMix::new(1);
    let t: Vec<_> = inputs(&mut rng, &cfg)[1..].iter().map(|i| tax_autodiff::Tensor::param(i.data.clone(), &i.shape).unwrap()).collect();
    assert!(Assigner::from_tensors(cfg.clone(), &t).is_ok());
    assert!(Assigner::from_tensors(cfg, &t[1..]).is_err());
}
