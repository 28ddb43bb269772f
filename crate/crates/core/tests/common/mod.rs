#![allow(dead_code)]

pub mod encoder;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tax_core::assigner::AssignerConfig;
use tax_core::config::RunConfig;
use tax_core::data::{synthesize_record, DatasetSpec, Record, SceneSpec};
use tax_core::image::Mask;
use tax_core::model::UNetConfig;

pub const SIZE: usize = 16;

pub fn tiny_spec(n_annotators: usize) -> DatasetSpec {
    DatasetSpec {
        scene: SceneSpec { height: SIZE, width: SIZE, min_radius: 2.0, max_radius: 5.0, ..SceneSpec::default() },
        n_annotators,
        n_train: 8,
        n_val: 4,
        n_test: 4,
        ..DatasetSpec::default()
    }
}

/// `n` records, annotators assigned round-robin.
pub fn tiny_records(n: usize, n_annotators: usize, with_variants: bool) -> Vec<Record> {
    let spec = tiny_spec(n_annotators);
    (0..n).map(|i| synthesize_record(3, &spec, i as u64, (i % n_annotators) as u32 + 1, with_variants).unwrap()).collect()
}

pub fn tiny_unet() -> UNetConfig {
    UNetConfig { height: SIZE, width: SIZE, in_channels: 3, base_width: 4, depth: 2, n_classes: 3, feature_width: 4 }
}

pub fn tiny_assigner(n_annotators: usize) -> AssignerConfig {
    AssignerConfig { height: SIZE, width: SIZE, in_channels: 3, widths: vec![4, 8], dim: 8, per_group: 2, n_annotators }
}

/// Small end-to-end configuration: 2 annotators, 8 training images, 3 epochs per stage.
pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig { seed: 5, data: tiny_spec(2), ..RunConfig::default() };
    c.model.base_width = 4;
    c.model.depth = 2;
    c.model.feature_width = 4;
    c.model.encoder_widths = vec![4, 8];
    c.model.prototype_dim = 8;
    c.model.prototypes_per_group = 2;
    for s in [&mut c.train.vanilla, &mut c.train.assigner, &mut c.train.tax] {
        s.epochs = 3;
        s.batch_size = 2;
    }
    c
}

/// Random rectangles of random classes on a background.
pub fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> Mask {
    let mut m = Mask::new(h, w);
    for _ in 0..rng.random_range(1..6) {
        let c = rng.random_range(1..=classes);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = ((y0 + rng.random_range(1..h / 2)).min(h), (x0 + rng.random_range(1..w / 2)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, c);
            }
        }
    }
    m
}
