//! Staged training: vanilla model, assigner, then the annotator-routed model.
//!
//! Every stage shuffles the training split with a generator derived from
//! `(seed, stage, epoch)`, saves a checkpoint after every epoch and appends
//! one JSON line per epoch to its log. A step budget lets a run stop early
//! and resume later with bit-identical results.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tax_autodiff::ops::{cross_entropy_map, CeTarget};
use tax_autodiff::{no_grad, sgd_step, GroupTag, OptimState, ParamGroup, Tensor};

use crate::assigner::{assignment_loss, build_pseudo_mask, Assigner};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{RoutingSource, RunConfig, StageConfig};
use crate::data::{Dataset, Record};
use crate::error::{Result, TaxError};
use crate::image::Mask;
use crate::model::{uncertainty_mask, SegModel};
use crate::nn::batch_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vanilla,
    Assigner,
    Tax,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Vanilla, Stage::Assigner, Stage::Tax];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vanilla => "vanilla",
            Stage::Assigner => "assigner",
            Stage::Tax => "tax",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }

    /// The stage whose finished checkpoint this one needs.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Vanilla => None,
            Stage::Assigner => Some(Stage::Vanilla),
            Stage::Tax => Some(Stage::Assigner),
        }
    }

    pub fn config(self, cfg: &RunConfig) -> &StageConfig {
        match self {
            Stage::Vanilla => &cfg.train.vanilla,
            Stage::Assigner => &cfg.train.assigner,
            Stage::Tax => &cfg.train.tax,
        }
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.ckpt", stage.name()))
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.log.jsonl", stage.name()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Stop after this many batches in this invocation (checkpointing first).
    pub max_steps: Option<u64>,
    /// Continue from the stage's own checkpoint.
    pub resume: bool,
}

/// Position inside a stage. Loss accumulators are kept as raw bits so a
/// resumed epoch averages exactly as an uninterrupted one would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub steps: u64,
    pub loss_sum_bits: u64,
    pub loss_count: u64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Epochs completed during this invocation.
    pub epochs: Vec<EpochLog>,
    pub progress: Progress,
}

/// Mixes a seed with stream labels into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// The order in which training records are visited in `epoch`.
pub fn epoch_order(seed: u64, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage.id(), epoch as u64])));
    idx
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| TaxError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stacks the planar images of `records[idx]` into `[B, 3, H, W]`.
fn gather_images(records: &[Record], idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<_> = idx.iter().map(|&i| &records[i].image).collect();
    batch_tensor(&imgs)
}

/// Shared machinery of the three stages.
struct Engine<'a> {
    stage: Stage,
    cfg: &'a RunConfig,
    groups: Vec<ParamGroup>,
    named: Vec<(String, Tensor)>,
    optim: OptimState,
    progress: Progress,
    rng: ChaCha8Rng,
    upstream: Value,
    run: &'a RunDir,
}

impl<'a> Engine<'a> {
    fn new(stage: Stage, cfg: &'a RunConfig, run: &'a RunDir, groups: Vec<ParamGroup>, named: Vec<(String, Tensor)>, upstream: Value) -> Result<Self> {
        let sc = stage.config(cfg);
        let optim = OptimState::new(sc.learning_rate as f32, sc.momentum as f32, &groups)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stage.id(), 0xC0FFEE]));
        Ok(Engine { stage, cfg, groups, named, optim, progress: Progress::default(), rng, upstream, run })
    }

    fn checkpoint(&self) -> Checkpoint {
        let state = json!({
            "progress": self.progress,
            "rng": RngState::capture(&self.rng),
            "upstream": self.upstream,
        });
        let mut ck = Checkpoint::new(self.stage.name(), self.cfg.to_value(), state);
        ck.push_tensors(&self.named);
        for (name, v) in self.optim.velocity() {
            ck.push(format!("velocity:{name}"), &[v.len()], v.clone());
        }
        ck
    }

    fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.run.root).map_err(|e| TaxError::io(&self.run.root, e))?;
        self.checkpoint().save(&self.run.checkpoint(self.stage))
    }

    fn resume(&mut self) -> Result<()> {
        let path = self.run.checkpoint(self.stage);
        let ck = Checkpoint::load(&path)?;
        let saved = RunConfig::from_value(ck.config.clone())?;
        if saved.training_echo() != self.cfg.training_echo() {
            return Err(TaxError::Config(format!("{}: training configuration differs from the checkpoint being resumed", path.display())));
        }
        if ck.state["upstream"] != self.upstream {
            return Err(TaxError::Config(format!("{}: an earlier stage was retrained since this checkpoint was written", path.display())));
        }
        ck.restore_into(&self.named)?;
        let names: Vec<String> = self.optim.velocity().keys().cloned().collect();
        for name in names {
            let (_, v) = ck.get(&format!("velocity:{name}")).ok_or_else(|| TaxError::Invalid(format!("{}: missing velocity for '{name}'", path.display())))?;
            self.optim.set_velocity(&name, v.to_vec())?;
        }
        self.progress = serde_json::from_value(ck.state["progress"].clone()).map_err(|e| TaxError::Invalid(format!("{}: progress: {e}", path.display())))?;
        let rng: RngState = serde_json::from_value(ck.state["rng"].clone()).map_err(|e| TaxError::Invalid(format!("{}: rng: {e}", path.display())))?;
        self.rng = rng.restore()?;
        // Drop log lines of epochs the checkpoint has not completed.
        let log = self.run.log(self.stage);
        let kept: Vec<String> = fs::read_to_string(&log)
            .unwrap_or_default()
            .lines()
            .filter(|l| serde_json::from_str::<EpochLog>(l).is_ok_and(|e| e.epoch < self.progress.epoch))
            .map(str::to_owned)
            .collect();
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&log, text).map_err(|e| TaxError::io(&log, e))
    }

    fn append_log(&self, entry: &EpochLog) -> Result<()> {
        let path = self.run.log(self.stage);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| TaxError::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(entry).expect("log entry serializes")).map_err(|e| TaxError::io(&path, e))
    }

    /// Runs the remaining epochs. `step` performs the optimizer steps of one
    /// batch and returns their losses.
    fn run(
        &mut self,
        n_train: usize,
        opts: &StageOptions,
        mut step: impl FnMut(&[usize], &[ParamGroup], &mut OptimState, &mut ChaCha8Rng) -> Result<Vec<f64>>,
    ) -> Result<StageReport> {
        if n_train == 0 {
            return Err(TaxError::Invalid("training split is empty".into()));
        }
        if opts.resume {
            self.resume()?;
        } else {
            let log = self.run.log(self.stage);
            fs::create_dir_all(&self.run.root).map_err(|e| TaxError::io(&self.run.root, e))?;
            fs::write(&log, "").map_err(|e| TaxError::io(&log, e))?;
            self.save()?;
        }
        let sc = self.stage.config(self.cfg).clone();
        let mut report = StageReport { stage: self.stage, epochs: Vec::new(), progress: self.progress };
        let mut taken = 0u64;
        while self.progress.epoch < sc.epochs {
            let order = epoch_order(self.cfg.seed, self.stage, self.progress.epoch, n_train);
            let batches: Vec<&[usize]> = order.chunks(sc.batch_size).collect();
            while self.progress.batch < batches.len() {
                if opts.max_steps.is_some_and(|m| taken >= m) {
                    self.save()?;
                    report.progress = self.progress;
                    return Ok(report);
                }
                let losses = step(batches[self.progress.batch], &self.groups, &mut self.optim, &mut self.rng)?;
                let mut sum = f64::from_bits(self.progress.loss_sum_bits);
                for l in losses {
                    if !l.is_finite() {
                        return Err(TaxError::Diverged { stage: self.stage.name().into(), epoch: self.progress.epoch, loss: l });
                    }
                    sum += l;
                    self.progress.loss_count += 1;
                }
                self.progress.loss_sum_bits = sum.to_bits();
                self.progress.batch += 1;
                self.progress.steps += 1;
                taken += 1;
            }
            let loss = f64::from_bits(self.progress.loss_sum_bits) / self.progress.loss_count.max(1) as f64;
            let entry = EpochLog { stage: self.stage, epoch: self.progress.epoch, loss };
            self.append_log(&entry)?;
            report.epochs.push(entry);
            self.progress = Progress { epoch: self.progress.epoch + 1, steps: self.progress.steps, ..Progress::default() };
            self.progress.done = self.progress.epoch >= sc.epochs;
            self.save()?;
        }
        report.progress = self.progress;
        Ok(report)
    }
}

/// Loads a finished stage checkpoint, failing with a message naming the
/// stage when it is missing or incomplete.
pub fn finished_checkpoint(run: &RunDir, stage: Stage) -> Result<Checkpoint> {
    let path = run.checkpoint(stage);
    if !path.exists() {
        return Err(TaxError::Config(format!("stage '{}' has not been trained ({} is missing)", stage.name(), path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let done = ck.state["progress"]["done"].as_bool().unwrap_or(false);
    if !done {
        return Err(TaxError::Config(format!("stage '{}' is incomplete; resume it first", stage.name())));
    }
    Ok(ck)
}

fn init_rng(cfg: &RunConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stage.id(), 0x1417]))
}

/// Rebuilds the vanilla model stored in `ck`.
pub fn vanilla_from(ck: &Checkpoint, ds: &Dataset) -> Result<SegModel> {
    let cfg = RunConfig::from_value(ck.config.clone())?;
    let m = SegModel::new(cfg.unet(&ds.manifest), 0, &mut init_rng(&cfg, Stage::Vanilla))?;
    ck.restore_into(&m.named_tensors())?;
    Ok(m)
}

pub fn assigner_from(ck: &Checkpoint, ds: &Dataset) -> Result<Assigner> {
    let cfg = RunConfig::from_value(ck.config.clone())?;
    let a = Assigner::new(cfg.assigner(&ds.manifest), &mut init_rng(&cfg, Stage::Assigner))?;
    ck.restore_into(&a.named_tensors())?;
    Ok(a)
}

pub fn tax_from(ck: &Checkpoint, ds: &Dataset) -> Result<SegModel> {
    let cfg = RunConfig::from_value(ck.config.clone())?;
    let m = SegModel::new(cfg.unet(&ds.manifest), ds.n_annotators(), &mut init_rng(&cfg, Stage::Tax))?;
    ck.restore_into(&m.named_tensors())?;
    Ok(m)
}

/// Uncertainty masks of `records` under the frozen vanilla model.
pub fn uncertainty_masks(vanilla: &SegModel, records: &[Record], cfg: &RunConfig) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(records.len());
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(cfg.eval.batch_size) {
        let x = gather_images(records, chunk)?;
        out.extend(uncertainty_mask(vanilla, &x, cfg.train.uncertainty_fraction, cfg.train.uncertainty_mode)?);
    }
    Ok(out)
}

/// Per-image annotator routes `[H, W]` for the routed model.
pub fn training_routes(source: RoutingSource, records: &[Record], assigner: &Assigner, uncertain: Option<&[Mask]>, cfg: &RunConfig) -> Result<Vec<Vec<u32>>> {
    let n = assigner.config.n_annotators as u32;
    match source {
        RoutingSource::Predicted => {
            let idx: Vec<usize> = (0..records.len()).collect();
            let mut out = Vec::with_capacity(records.len());
            for chunk in idx.chunks(cfg.eval.batch_size) {
                let x = gather_images(records, chunk)?;
                let o = no_grad(|| assigner.assign(&x))?;
                let hw = o.hard.len() / chunk.len();
                out.extend(o.hard.chunks(hw).map(<[u32]>::to_vec));
            }
            Ok(out)
        }
        RoutingSource::Pseudo => {
            let u = uncertain.ok_or_else(|| TaxError::Invalid("pseudo routing needs uncertainty masks".into()))?;
            Ok(records.iter().zip(u).map(|(r, m)| pseudo_route(m, r.annotator, n)).collect())
        }
    }
}

/// Full-resolution pseudo route: `annotator` where uncertain, `n + 1` elsewhere.
pub fn pseudo_route(uncertain: &Mask, annotator: u32, n: u32) -> Vec<u32> {
    uncertain.data.iter().map(|&u| if u != 0 { annotator } else { n + 1 }).collect()
}

/// One routed-model update on a batch: images are grouped by annotator and
/// each group takes its own SGD step that may touch only its kernel subset,
/// the shared subset and the backbone. Returns one loss per group.
pub fn tax_step(
    model: &SegModel,
    groups: &[ParamGroup],
    optim: &mut OptimState,
    records: &[Record],
    routes: &[Vec<u32>],
    batch: &[usize],
) -> Result<Vec<f64>> {
    let n = model.n_annotators() as u32;
    let mut losses = Vec::new();
    for k in 1..=n {
        let sub: Vec<usize> = batch.iter().copied().filter(|&i| records[i].annotator == k).collect();
        if sub.is_empty() {
            continue;
        }
        let x = gather_images(records, &sub)?;
        let route: Vec<u32> = sub.iter().flat_map(|&i| routes[i].iter().copied()).collect();
        let labels: Vec<u8> = sub.iter().flat_map(|&i| records[i].mask.data.iter().copied()).collect();
        let logits = model.forward_tax(&x, &route)?;
        let loss = cross_entropy_map(&logits, CeTarget::Labels(&labels))?;
        loss.backward()?;
        let active = BTreeSet::from([GroupTag::Annotator(k), GroupTag::Shared, GroupTag::Backbone]);
        sgd_step(groups, optim, &active)?;
        losses.push(loss.item() as f64);
    }
    Ok(losses)
}

/// Trains the vanilla model on (image, mask) pairs, ignoring annotators.
pub fn train_vanilla(ds: &Dataset, cfg: &RunConfig, run: &RunDir, opts: &StageOptions) -> Result<StageReport> {
    let model = SegModel::new(cfg.unet(&ds.manifest), 0, &mut init_rng(cfg, Stage::Vanilla))?;
    let mut engine = Engine::new(Stage::Vanilla, cfg, run, model.param_groups(), model.named_tensors(), json!({}))?;
    let active = BTreeSet::from([GroupTag::Shared, GroupTag::Backbone]);
    let records = &ds.train;
    engine.run(records.len(), opts, |batch, groups, optim, _| {
        let x = gather_images(records, batch)?;
        let labels: Vec<u8> = batch.iter().flat_map(|&i| records[i].mask.data.iter().copied()).collect();
        let loss = cross_entropy_map(&model.forward_vanilla(&x)?, CeTarget::Labels(&labels))?;
        loss.backward()?;
        sgd_step(groups, optim, &active)?;
        Ok(vec![loss.item() as f64])
    })
}

/// Trains encoder and prototype bank on pseudo annotator masks derived from
/// the frozen vanilla model.
pub fn train_assigner(ds: &Dataset, cfg: &RunConfig, run: &RunDir, opts: &StageOptions) -> Result<StageReport> {
    let vck = finished_checkpoint(run, Stage::Vanilla)?;
    let upstream = json!({ "vanilla": file_digest(&run.checkpoint(Stage::Vanilla))? });
    let vanilla = vanilla_from(&vck, ds)?;
    let records = &ds.train;
    let uncertain = uncertainty_masks(&vanilla, records, cfg)?;
    let assigner = Assigner::new(cfg.assigner(&ds.manifest), &mut init_rng(cfg, Stage::Assigner))?;
    let r = (assigner.config.stride(), assigner.config.stride());
    let n = ds.n_annotators();
    let targets = records.iter().zip(&uncertain).map(|(rec, u)| build_pseudo_mask(u, rec.annotator, n, r)).collect::<Result<Vec<_>>>()?;
    let tau = cfg.train.temperature as f32;
    let mut engine = Engine::new(Stage::Assigner, cfg, run, assigner.param_groups(), assigner.named_tensors(), upstream)?;
    let active = BTreeSet::from([GroupTag::Assigner]);
    engine.run(records.len(), opts, |batch, groups, optim, rng| {
        let x = gather_images(records, batch)?;
        let target: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let out = assigner.assign(&x)?;
        let loss = assignment_loss(&out.soft, &target, tau)?;
        loss.backward()?;
        sgd_step(groups, optim, &active)?;
        assigner.reseed_degenerate(rng);
        Ok(vec![loss.item() as f64])
    })
}

/// Trains the routed model with annotator-grouped updates, routing by the
/// frozen assigner (or by pseudo masks, per configuration).
pub fn train_tax(ds: &Dataset, cfg: &RunConfig, run: &RunDir, opts: &StageOptions) -> Result<StageReport> {
    let ack = finished_checkpoint(run, Stage::Assigner)?;
    let upstream = json!({
        "vanilla": file_digest(&run.checkpoint(Stage::Vanilla))?,
        "assigner": file_digest(&run.checkpoint(Stage::Assigner))?,
    });
    let assigner = assigner_from(&ack, ds)?;
    let records = &ds.train;
    let uncertain = match cfg.train.routing {
        RoutingSource::Pseudo => Some(uncertainty_masks(&vanilla_from(&finished_checkpoint(run, Stage::Vanilla)?, ds)?, records, cfg)?),
        RoutingSource::Predicted => None,
    };
    let routes = training_routes(cfg.train.routing, records, &assigner, uncertain.as_deref(), cfg)?;
    let model = SegModel::new(cfg.unet(&ds.manifest), ds.n_annotators(), &mut init_rng(cfg, Stage::Tax))?;
    let mut engine = Engine::new(Stage::Tax, cfg, run, model.param_groups(), model.named_tensors(), upstream)?;
    engine.run(records.len(), opts, |batch, groups, optim, _| tax_step(&model, groups, optim, records, &routes, batch))
}

pub fn train_stage(stage: Stage, ds: &Dataset, cfg: &RunConfig, run: &RunDir, opts: &StageOptions) -> Result<StageReport> {
    match stage {
        Stage::Vanilla => train_vanilla(ds, cfg, run, opts),
        Stage::Assigner => train_assigner(ds, cfg, run, opts),
        Stage::Tax => train_tax(ds, cfg, run, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_permutation_and_varies() {
        let a = epoch_order(1, Stage::Vanilla, 0, 50);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(1, Stage::Vanilla, 1, 50));
        assert_ne!(a, epoch_order(1, Stage::Tax, 0, 50));
        assert_eq!(a, epoch_order(1, Stage::Vanilla, 0, 50));
    }

    #[test]
    fn pseudo_route_values() {
        let u = Mask::from_vec(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(pseudo_route(&u, 2, 3), vec![2, 4, 2]);
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::Tax.prerequisite(), Some(Stage::Assigner));
    }
}
