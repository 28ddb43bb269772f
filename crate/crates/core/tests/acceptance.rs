//! Acceptance run: every criterion prints one PASS/FAIL line, then the test
//! fails if any criterion did.
//!
//! Criteria 6-9 share one full default pipeline (dataset, three training
//! stages, evaluation, prototype index), which takes several CPU-minutes.

mod common;

use std::cell::OnceCell;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tax_autodiff::oracle::gradcheck::{run_seeds, FD_TOL, SUITE};
use tax_autodiff::{no_grad, ops, OptimState, Tensor};
use tax_core::assigner::{build_pseudo_mask, Assigner};
use tax_core::checkpoint::Checkpoint;
use tax_core::config::{RoutingSource, RunConfig, VoteMode};
use tax_core::data::{build_dataset, generate_scene, manipulate, Dataset, MorphParams, Record, SceneSpec, Tendency};
use tax_core::eval::{assignment_accuracy, per_tendency_eval, predict_tax, predict_vanilla, score_masks, AssignmentReport, TendencyMatrix};
use tax_core::explain::{build_prototype_index, explain, PrototypeIndex};
use tax_core::image::Mask;
use tax_core::model::SegModel;
use tax_core::nn::batch_tensor;
use tax_core::train::{assigner_from, finished_checkpoint, pseudo_route, tax_from, tax_step, train_stage, vanilla_from, RunDir, Stage, StageOptions};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// CPU seconds consumed by the calling thread.
fn thread_cpu_seconds() -> f64 {
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: `ru` is a valid, writable rusage struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_THREAD, &mut ru) };
    assert_eq!(rc, 0, "getrusage failed");
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for &(name, f) in SUITE.iter().chain(common::encoder::ENCODER_SUITE) {
        let (worst, n) = run_seeds(f, 20);
        ok &= n >= 20 && worst < FD_TOL;
        lines.push(format!("{name} {worst:.1e}/{n}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    verdict(ok, format!("{} ops, {:.1}s; {}", lines.len(), secs, lines.join(", ")))
}

// ---------------------------------------------------------------- 2

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn routing_reduction() -> Outcome {
    let mut worst = 0f32;
    let mut mixed_exact = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..4));
        let (h, w, n_sub) = (rng.random_range(3..10), rng.random_range(3..10), rng.random_range(2..6));
        let x = random_tensor(&mut rng, &[b, cin, h, w]);
        let kernels: Vec<Tensor> = (0..n_sub).map(|_| random_tensor(&mut rng, &[cout, cin, 3, 3])).collect();
        let biases: Vec<Tensor> = (0..n_sub).map(|_| random_tensor(&mut rng, &[cout])).collect();

        let k = rng.random_range(1..=n_sub);
        let routed = ops::routed_conv2d(&x, &kernels, &biases, &vec![k as u32; b * h * w]).unwrap().to_vec();
        let plain = ops::conv2d(&x, &kernels[k - 1], Some(&biases[k - 1]), 1, 1).unwrap().to_vec();
        for (r, p) in routed.iter().zip(&plain) {
            worst = worst.max((r - p).abs());
        }

        let route: Vec<u32> = (0..b * h * w).map(|_| rng.random_range(1..=n_sub as u32)).collect();
        let gathered = ops::routed_conv2d(&x, &kernels, &biases, &route).unwrap().to_vec();
        let reference = ops::routed_conv2d_reference(&x, &kernels, &biases, &route).unwrap().to_vec();
        if gathered.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()) {
            mixed_exact += 1;
        }
    }
    verdict(worst <= 1e-6 && mixed_exact == 50, format!("constant route max |diff| {worst:e}; mixed route exact {mixed_exact}/50"))
}

// ---------------------------------------------------------------- 3

fn checksum(ts: &[&Tensor]) -> Vec<u8> {
    let mut h = Sha256::new();
    for t in ts {
        for v in t.data().iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

fn head_and_backbone_sums(m: &SegModel) -> (Vec<Vec<u8>>, Vec<u8>) {
    let heads = (0..m.head.len()).map(|k| checksum(&[&m.head.kernels[k], &m.head.biases[k]])).collect();
    let backbone: Vec<Tensor> = m.named_tensors().into_iter().filter(|(n, _)| !n.starts_with("head.")).map(|(_, t)| t).collect();
    (heads, checksum(&backbone.iter().collect::<Vec<_>>()))
}

fn gradient_routing() -> Outcome {
    let n = 3;
    let records: Vec<Record> = common::tiny_records(9, n, false).into_iter().filter(|r| r.annotator == 2).collect();
    let model = SegModel::new(common::tiny_unet(), n, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    let groups = model.param_groups();
    let mut optim = OptimState::new(0.05, 0.9, &groups).unwrap();
    // Uncertain band across the middle rows, so both C_2 and the shared subset are routed.
    let mut band = Mask::new(common::SIZE, common::SIZE);
    for y in 5..11 {
        for x in 0..common::SIZE {
            band.set(y, x, 1);
        }
    }
    let routes: Vec<Vec<u32>> = records.iter().map(|r| pseudo_route(&band, r.annotator, n as u32)).collect();
    let (h0, b0) = head_and_backbone_sums(&model);
    let batch: Vec<usize> = (0..records.len()).collect();
    tax_step(&model, &groups, &mut optim, &records, &routes, &batch).unwrap();
    let (h1, b1) = head_and_backbone_sums(&model);
    let same = |k: usize| h0[k] == h1[k];
    let ok = same(0) && same(2) && !same(1) && !same(3) && b0 != b1;
    verdict(
        ok,
        format!(
            "C1 unchanged {}, C3 unchanged {}, C2 changed {}, C4 changed {}, backbone changed {}",
            same(0),
            same(2),
            !same(1),
            !same(3),
            b0 != b1
        ),
    )
}

// ---------------------------------------------------------------- 4

fn morphology() -> Outcome {
    let p = MorphParams::default();
    let mut masks: Vec<Mask> = (0..100).map(|s| generate_scene(5000 + s, &SceneSpec::default()).unwrap().1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    masks.extend((0..100).map(|_| common::blob_mask(&mut rng, 32, 32, 2)));
    let fg = |m: &Mask| m.data.iter().filter(|&&v| v != 0).count();
    let mut bad = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let d = manipulate(m, Tendency::Dilated, p).unwrap();
        let e = manipulate(m, Tendency::Eroded, p).unwrap();
        let s = manipulate(m, Tendency::Simplified, p).unwrap();
        let extensive = (0..m.data.len()).all(|k| m.data[k] == 0 || d.data[k] == m.data[k]);
        let anti = (0..m.data.len()).all(|k| e.data[k] == 0 || e.data[k] == m.data[k]);
        let ordered = fg(&e) <= fg(m) && fg(m) <= fg(&d);
        let blocky = (0..m.height).all(|y| (0..m.width).all(|x| s.get(y, x) == s.get(y / p.block * p.block, x / p.block * p.block)));
        if !(extensive && anti && ordered && blocky) {
            bad.push(i);
        }
    }
    verdict(bad.is_empty(), format!("{} masks, violations at {:?}", masks.len(), bad))
}

// ---------------------------------------------------------------- 5

fn pseudo_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_sum, mut leaks) = (0f64, 0usize);
    for case in 0..100 {
        let n = rng.random_range(1..=5usize);
        let a = rng.random_range(1..=n as u32);
        let r = [(8, 8), (4, 4), (2, 2), (4, 8)][case % 4];
        let (h, w) = (r.0 * rng.random_range(1..5), r.1 * rng.random_range(1..5));
        let density: f64 = rng.random();
        let u = Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(density) as u8).collect()).unwrap();
        let p = build_pseudo_mask(&u, a, n, r).unwrap();
        let cells = (h / r.0) * (w / r.1);
        for c in 0..cells {
            let total: f64 = (0..=n).map(|g| p[g * cells + c] as f64).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            leaks += (0..n).filter(|&g| g + 1 != a as usize && p[g * cells + c] != 0.0).count();
        }
    }
    let mut half = Mask::new(8, 8);
    for y in 0..8 {
        for x in 0..4 {
            half.set(y, x, 1);
        }
    }
    let cell = build_pseudo_mask(&half, 3, 4, (8, 8)).unwrap();
    let half_ok = cell == [0.0, 0.0, 0.5, 0.0, 0.5];
    verdict(
        worst_sum <= 1e-5 && leaks == 0 && half_ok,
        format!("max |sum-1| {worst_sum:e}; mass outside support in {leaks} cells; half-covered cell {cell:?}"),
    )
}

// ---------------------------------------------------------------- 6-9

struct Pipeline {
    ds: Dataset,
    assigner: Assigner,
    index: PrototypeIndex,
    cpu_seconds: f64,
    vanilla_miou: f64,
    tax_miou: f64,
    matrix: TendencyMatrix,
    assignment: AssignmentReport,
}

fn pipeline() -> &'static Pipeline {
    thread_local!(static P: OnceCell<&'static Pipeline> = const { OnceCell::new() });
    P.with(|c| *c.get_or_init(|| Box::leak(Box::new(run_pipeline()))))
}

fn run_pipeline() -> Pipeline {
    let cpu0 = thread_cpu_seconds();
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    build_dataset(&data, cfg.seed, &cfg.data).unwrap();
    let ds = Dataset::load(&data).unwrap();
    let run = RunDir::new(dir.path().join("run"));
    for st in Stage::ALL {
        train_stage(st, &ds, &cfg, &run, &StageOptions::default()).unwrap();
    }
    let vanilla = vanilla_from(&finished_checkpoint(&run, Stage::Vanilla).unwrap(), &ds).unwrap();
    let assigner = assigner_from(&finished_checkpoint(&run, Stage::Assigner).unwrap(), &ds).unwrap();
    let tax = tax_from(&finished_checkpoint(&run, Stage::Tax).unwrap(), &ds).unwrap();
    let (k, batch) = (ds.n_classes(), cfg.eval.batch_size);
    let gts: Vec<&Mask> = ds.test.iter().map(|r| &r.mask).collect();
    let vanilla_miou = score_masks(&predict_vanilla(&vanilla, &ds.test, batch).unwrap(), &gts, k, serde_json::Value::Null).unwrap().miou;
    let tax_miou = score_masks(&predict_tax(&tax, &assigner, &ds.test, batch).unwrap(), &gts, k, serde_json::Value::Null).unwrap().miou;
    let matrix = per_tendency_eval(&tax, &ds.test, batch).unwrap();
    let assignment = assignment_accuracy(&assigner, &ds.test, cfg.eval.vote, batch).unwrap();
    let index = build_prototype_index(&assigner, &ds.train, cfg.eval.top_m).unwrap();
    let cpu_seconds = thread_cpu_seconds() - cpu0;
    Pipeline { ds, assigner, index, cpu_seconds, vanilla_miou, tax_miou, matrix, assignment }
}

fn per_tendency_margin() -> Outcome {
    let p = pipeline();
    let m = p.matrix.margin();
    let rows: Vec<String> = p.matrix.matrix.iter().map(|r| format!("{:.3?}", r)).collect();
    verdict(
        m >= 0.05 && p.cpu_seconds <= 30.0 * 60.0,
        format!("margin {:.2} points (diag {:.4}, off {:.4}); pipeline {:.1} CPU-min; matrix {}", 100.0 * m, p.matrix.diagonal_mean, p.matrix.off_diagonal_mean, p.cpu_seconds / 60.0, rows.join(" ")),
    )
}

fn tax_vs_vanilla() -> Outcome {
    let p = pipeline();
    verdict(p.tax_miou >= p.vanilla_miou - 0.02, format!("TAX mIoU {:.4} vs vanilla {:.4}", p.tax_miou, p.vanilla_miou))
}

fn assignment() -> Outcome {
    let a = &pipeline().assignment;
    verdict(a.accuracy >= 0.80, format!("accuracy {:.3} ({}/{}, {:?} vote)", a.accuracy, a.correct, a.total, VoteMode::Specific))
}

/// Pixels with a 4-neighbour of a different label.
fn boundary_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            let v = m.get(y, x);
            let differs = (y > 0 && m.get(y - 1, x) != v)
                || (y + 1 < m.height && m.get(y + 1, x) != v)
                || (x > 0 && m.get(y, x - 1) != v)
                || (x + 1 < m.width && m.get(y, x + 1) != v);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

fn explanation_audit() -> Outcome {
    let p = pipeline();
    let n = p.ds.n_annotators() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut consistent, mut traced, mut specific, mut specific_traced) = (0, 0, 0, 0);
    let queries = 100;
    for _ in 0..queries {
        let rec = &p.ds.test[rng.random_range(0..p.ds.test.len())];
        let border = boundary_pixels(&rec.mask);
        let px = border[rng.random_range(0..border.len())];
        let e = explain(None, &p.assigner, &p.index, rec, px, &p.ds.train, None).unwrap();
        let out = no_grad(|| p.assigner.assign(&batch_tensor(&[&rec.image]).unwrap())).unwrap();
        let m_a = out.hard_mask(0).get(px.0, px.1) as u32;
        if e.who == m_a && p.index.group_of(e.prototype) == e.who && e.prototype_group == e.who {
            consistent += 1;
        }
        if e.why.annotator == e.who {
            traced += 1;
        }
        if e.who <= n {
            specific += 1;
            specific_traced += (e.why.annotator == e.who) as usize;
        }
    }
    let frac = traced as f64 / queries as f64;
    verdict(
        consistent == queries && frac >= 0.70,
        format!(
            "consistent {consistent}/{queries}; trace matches who {traced}/{queries} ({:.0}%); who specific in {specific}/{queries}, of which {specific_traced} traced to that annotator; shared-group queries ({}) have no single training annotator",
            100.0 * frac,
            queries - specific
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run_config();
    cfg.train.routing = RoutingSource::Pseudo;
    for s in [&mut cfg.train.vanilla, &mut cfg.train.assigner, &mut cfg.train.tax] {
        s.epochs = 4;
    }
    build_dataset(&dir.path().join("data"), cfg.seed, &cfg.data).unwrap();
    let ds = Dataset::load(&dir.path().join("data")).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    let (a, b, split) = (RunDir::new(dir.path().join("a")), RunDir::new(dir.path().join("b")), RunDir::new(dir.path().join("split")));
    let (mut logs_equal, mut roundtrip, mut resumed, mut steps) = (true, true, true, 0);
    for st in Stage::ALL {
        let full = train_stage(st, &ds, &cfg, &a, &StageOptions::default()).unwrap();
        train_stage(st, &ds, &cfg, &b, &StageOptions::default()).unwrap();
        logs_equal &= read(&a.log(st)) == read(&b.log(st));
        let copy = dir.path().join("copy.ckpt");
        Checkpoint::load(&a.checkpoint(st)).unwrap().save(&copy).unwrap();
        roundtrip &= read(&copy) == read(&a.checkpoint(st));
        train_stage(st, &ds, &cfg, &split, &StageOptions { max_steps: Some(5), resume: false }).unwrap();
        let rest = train_stage(st, &ds, &cfg, &split, &StageOptions { max_steps: None, resume: true }).unwrap();
        resumed &= read(&split.checkpoint(st)) == read(&a.checkpoint(st)) && read(&split.log(st)) == read(&a.log(st));
        steps = full.progress.steps;
        assert_eq!(rest.progress.steps, full.progress.steps);
    }
    verdict(
        logs_equal && roundtrip && resumed && steps >= 15,
        format!("identical logs {logs_equal}; save-load-save identical {roundtrip}; interrupted at step 5 and resumed to {steps} identical {resumed}"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("routing reduction", routing_reduction),
        ("gradient routing", gradient_routing),
        ("morphology", morphology),
        ("pseudo mask", pseudo_masks),
        ("per-tendency margin", per_tendency_margin),
        ("TAX vs vanilla mIoU", tax_vs_vanilla),
        ("assignment accuracy", assignment),
        ("explanation audit", explanation_audit),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut failed = Vec::new();
    writeln!(std::io::stderr()).unwrap();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        // Written straight to stderr so the lines survive output capture.
        writeln!(std::io::stderr(), "criterion {:>2} {tag}: {name}: {detail}", i + 1).unwrap();
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
