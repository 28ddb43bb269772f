use tax_autodiff::oracle::gradcheck::{self, FD_TOL, SUITE};

const SEEDS: usize = 20;

fn run(name: &str) {
    let (_, check) = SUITE.iter().find(|(n, _)| *n == name).expect("op in suite");
    let (worst, n) = gradcheck::run_seeds(*check, SEEDS);
    eprintln!("{name}: worst relative error {worst:.3e} over {n} instances");
    assert_eq!(n, SEEDS, "{name}: only {n} usable instances");
    assert!(worst < FD_TOL, "{name}: max relative error {worst:.3e}");
}

#[test]
fn conv2d() {
    run("conv2d");
}

#[test]
fn routed_conv2d() {
    run("routed_conv2d");
}

#[test]
fn relu() {
    run("relu");
}

#[test]
fn softmax() {
    run("softmax");
}

#[test]
fn log_softmax() {
    run("log_softmax");
}

#[test]
fn cross_entropy_map() {
    run("cross_entropy_map");
}

#[test]
fn cosine_similarity() {
    run("cosine_similarity");
}

#[test]
fn group_max_cosine() {
    run("group_max_cosine");
}

#[test]
fn pooling_and_resampling() {
    run("max_pool2d");
    run("avg_downsample");
    run("nearest_upsample");
    run("concat_channels");
}

#[test]
fn shared_subexpression_accumulates_over_paths() {
    run("shared_subexpression");
}
