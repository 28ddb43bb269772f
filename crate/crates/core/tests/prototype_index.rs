mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tax_core::assigner::Assigner;
use tax_core::explain::{build_prototype_index, cell_features, explain, prototype, PrototypeIndex};
use tax_core::TaxError;

fn assigner(seed: u64, n: usize) -> Assigner {
    Assigner::new(common::tiny_assigner(n), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Exhaustive search with its own cosine, visiting records and cells in order.
fn brute_force(a: &Assigner, records: &[tax_core::data::Record]) -> Vec<(u64, usize, f32)> {
    let np = a.bank.shape()[1];
    let imgs: Vec<_> = records.iter().map(|r| &r.image).collect();
    let feats = cell_features(a, &imgs).unwrap();
    (0..np)
        .map(|j| {
            let p = prototype(a, j);
            let mut best = (0u64, 0usize, f32::NEG_INFINITY);
            for (r, cells) in records.iter().zip(&feats) {
                for (c, f) in cells.iter().enumerate() {
                    let dot: f64 = f.iter().zip(&p).map(|(x, y)| x * y).sum();
                    let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                    let np_ = p.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                    let s = (dot / (nf * np_)) as f32;
                    if s > best.2 {
                        best = (r.id, c, s);
                    }
                }
            }
            best
        })
        .collect()
}

#[test]
fn matches_exhaustive_search() {
    // 5 images x 4 prototypes: one annotator group plus the shared group, two each.
    let mut cfg = common::tiny_assigner(1);
    cfg.per_group = 2;
    let a = Assigner::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a.bank.shape()[1], 4);
    let records = common::tiny_records(5, 1, false);
    let idx = build_prototype_index(&a, &records, 1).unwrap();
    let gw = a.config.grid().1;
    for (j, (rid, cell, score)) in brute_force(&a, &records).into_iter().enumerate() {
        let e = &idx.prototypes[j][0];
        assert_eq!((e.record_id, e.cell, e.score), (rid, [cell / gw, cell % gw], score), "prototype {j}");
        let s = a.config.stride();
        assert_eq!(e.patch, [e.cell[0] * s, e.cell[1] * s, s, s]);
    }
}

#[test]
fn stored_score_is_cosine_at_stored_cell() {
    let a = assigner(2, 3);
    let records = common::tiny_records(6, 3, false);
    let idx = build_prototype_index(&a, &records, 2).unwrap();
    let gw = a.config.grid().1;
    for (j, list) in idx.prototypes.iter().enumerate() {
        assert_eq!(list.len(), 2);
        assert!(list[0].score >= list[1].score);
        for e in list {
            let r = records.iter().find(|r| r.id == e.record_id).unwrap();
            assert_eq!(e.annotator, r.annotator);
            let f = &cell_features(&a, &[&r.image]).unwrap()[0][e.cell[0] * gw + e.cell[1]];
            let s = tax_core::explain::cosine(f, &prototype(&a, j)) as f32;
            assert_eq!(s, e.score);
        }
    }
}

#[test]
fn single_image_and_rebuilds() {
    let a = assigner(3, 2);
    let one = common::tiny_records(1, 2, false);
    let idx = build_prototype_index(&a, &one, 1).unwrap();
    assert!(idx.prototypes.iter().all(|l| l[0].record_id == one[0].id));
    let records = common::tiny_records(4, 2, false);
    let x = build_prototype_index(&a, &records, 1).unwrap();
    assert_eq!(x, build_prototype_index(&a, &records, 1).unwrap());
    assert!(build_prototype_index(&a, &[], 1).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("index.json");
    x.write(&p).unwrap();
    assert_eq!(PrototypeIndex::read(&p).unwrap(), x);
}

#[test]
fn explanations_are_consistent() {
    let a = assigner(4, 3);
    let train = common::tiny_records(6, 3, false);
    let test = common::tiny_records(3, 3, false);
    let idx = build_prototype_index(&a, &train, 1).unwrap();
    let s = a.config.stride();
    for rec in &test {
        let hard = a.assign(&tax_core::nn::batch_tensor(&[&rec.image]).unwrap()).unwrap().hard_mask(0);
        for y in 0..common::SIZE {
            for x in 0..common::SIZE {
                let e = explain(None, &a, &idx, rec, (y, x), &train, None).unwrap();
                assert_eq!(e.who, hard.get(y, x) as u32);
                assert_eq!(e.prototype_group, e.who);
                assert_eq!(a.group_of(e.prototype), e.who);
                // Every pixel of a cell shares the cell's explanation.
                let corner = explain(None, &a, &idx, rec, (y / s * s, x / s * s), &train, None).unwrap();
                assert_eq!((corner.prototype, &corner.why), (e.prototype, &e.why));
            }
        }
    }
    assert!(explain(None, &a, &idx, &test[0], (common::SIZE, 0), &train, None).is_err());
}

#[test]
fn stale_index_is_rejected() {
    let a = assigner(5, 2);
    let train = common::tiny_records(2, 2, false);
    let idx = build_prototype_index(&a, &train, 1).unwrap();
    a.bank.data_mut()[0] += 0.5;
    match explain(None, &a, &idx, &train[0], (0, 0), &train, None) {
        Err(TaxError::StaleIndex { .. }) => {}
        r => panic!("expected a stale index error, got {r:?}"),
    }
}

#[test]
fn overlays_are_written() {
    let a = assigner(6, 2);
    let model = tax_core::model::SegModel::new(common::tiny_unet(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let train = common::tiny_records(2, 2, false);
    let idx = build_prototype_index(&a, &train, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let e = explain(Some(&model), &a, &idx, &train[1], (5, 9), &train, Some(dir.path())).unwrap();
    assert_eq!(e.overlays.len(), 4);
    for p in &e.overlays {
        let img = tax_core::image::read_ppm(p).unwrap();
        assert!(img.height > 0);
    }
}
