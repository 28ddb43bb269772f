//! Segmentation metrics, assignment accuracy and per-tendency evaluation.
//!
//! Dataset-level scores come from a confusion matrix accumulated over all
//! images, so every class IoU is a ratio of pixel totals.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tax_autodiff::{no_grad, Tensor};

use crate::assigner::Assigner;
use crate::config::VoteMode;
use crate::data::Record;
use crate::error::{Result, TaxError};
use crate::image::{Mask, RgbImage};
use crate::model::{argmax_mask, SegModel};
use crate::nn::batch_tensor;

/// Per-class IoU (`None` where prediction and target both lack the class)
/// and their mean over the remaining classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<Option<f64>>,
    pub mdice: f64,
    /// DICE of the binarized foreground (every non-zero class against background).
    pub foreground: Option<f64>,
}

/// Pixel confusion counts, `counts[gt * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
    /// Foreground pixel counts: `[both, pred only, gt only]`.
    fg: [u64; 3],
    pub samples: usize,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { k, counts: vec![0; k * k], fg: [0; 3], samples: 0 }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(TaxError::shape("prediction vs target", format!("{}x{}", gt.height, gt.width), format!("{}x{}", pred.height, pred.width)));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p as usize >= self.k || g as usize >= self.k {
                return Err(TaxError::Invalid(format!("label {} outside 0..{}", p.max(g), self.k)));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
            match (p != 0, g != 0) {
                (true, true) => self.fg[0] += 1,
                (true, false) => self.fg[1] += 1,
                (false, true) => self.fg[2] += 1,
                _ => {}
            }
        }
        self.samples += 1;
        Ok(())
    }

    fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let inter = self.counts[c * self.k + c];
        let gt: u64 = self.counts[c * self.k..(c + 1) * self.k].iter().sum();
        let pred: u64 = (0..self.k).map(|g| self.counts[g * self.k + c]).sum();
        (inter, pred, gt)
    }

    pub fn iou(&self) -> IouScores {
        let per_class: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let (i, p, g) = self.class_counts(c);
                let union = p + g - i;
                (union > 0).then(|| i as f64 / union as f64)
            })
            .collect();
        IouScores { miou: mean_present(&per_class), per_class }
    }

    pub fn dice(&self) -> DiceScores {
        let per_class: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let (i, p, g) = self.class_counts(c);
                (p + g > 0).then(|| 2.0 * i as f64 / (p + g) as f64)
            })
            .collect();
        let [both, p_only, g_only] = self.fg;
        let denom = 2 * both + p_only + g_only;
        let foreground = (denom > 0).then(|| 2.0 * both as f64 / denom as f64);
        DiceScores { mdice: mean_present(&per_class), per_class, foreground }
    }

    pub fn report(&self, config: Value) -> MetricReport {
        let iou = self.iou();
        let dice = self.dice();
        MetricReport {
            per_class_iou: iou.per_class,
            miou: iou.miou,
            per_class_dice: dice.per_class,
            mdice: dice.mdice,
            foreground_dice: dice.foreground,
            samples: self.samples,
            config,
        }
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn miou(pred: &Mask, gt: &Mask, k: usize) -> Result<IouScores> {
    let mut c = Confusion::new(k);
    c.add(pred, gt)?;
    Ok(c.iou())
}

pub fn dice_scores(pred: &Mask, gt: &Mask, k: usize) -> Result<DiceScores> {
    let mut c = Confusion::new(k);
    c.add(pred, gt)?;
    Ok(c.dice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_dice: Vec<Option<f64>>,
    pub mdice: f64,
    pub foreground_dice: Option<f64>,
    pub samples: usize,
    pub config: Value,
}

pub fn score_masks(preds: &[Mask], gts: &[&Mask], k: usize, config: Value) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(TaxError::Invalid(format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let mut c = Confusion::new(k);
    for (p, g) in preds.iter().zip(gts) {
        c.add(p, g)?;
    }
    Ok(c.report(config))
}

/// Runs `f` on consecutive batches of `records`' images and concatenates
/// the per-image results.
fn batched<T>(records: &[Record], batch: usize, mut f: impl FnMut(&Tensor, &[Record]) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let x = batch_tensor(&imgs)?;
        out.extend(no_grad(|| f(&x, chunk))?);
    }
    Ok(out)
}

fn logits_to_masks(model: &SegModel, logits: &Tensor) -> Vec<Mask> {
    let (k, h, w) = (model.config.n_classes, model.config.height, model.config.width);
    logits.data().chunks(k * h * w).map(|l| argmax_mask(l, k, h, w)).collect()
}

pub fn predict_vanilla(model: &SegModel, records: &[Record], batch: usize) -> Result<Vec<Mask>> {
    batched(records, batch, |x, _| Ok(logits_to_masks(model, &model.forward_vanilla(x)?)))
}

/// Predictions with every pixel routed to subset `k` (1-based).
pub fn predict_subset(model: &SegModel, records: &[Record], k: usize, batch: usize) -> Result<Vec<Mask>> {
    batched(records, batch, |x, _| Ok(logits_to_masks(model, &model.forward_subset(x, k)?)))
}

/// Predictions routed by the assigner's hard annotator mask.
pub fn predict_tax(model: &SegModel, assigner: &Assigner, records: &[Record], batch: usize) -> Result<Vec<Mask>> {
    batched(records, batch, |x, _| {
        let route = assigner.assign(x)?.hard;
        Ok(logits_to_masks(model, &model.forward_tax(x, &route)?))
    })
}

/// Modal annotator of a hard annotator mask (values `1..=n+1`), ties to the
/// lowest index. In `Specific` mode shared cells (`n+1`) do not vote unless
/// every cell is shared.
pub fn majority_vote(hard: &[u32], n: usize, mode: VoteMode) -> u32 {
    let mut counts = vec![0usize; n + 2];
    for &v in hard {
        counts[(v as usize).min(n + 1)] += 1;
    }
    let specific = counts[1..=n].iter().any(|&c| c > 0);
    let top = if mode == VoteMode::Specific && specific { n } else { n + 1 };
    let mut best = 1;
    for a in 2..=top {
        if counts[a] > counts[best] {
            best = a;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub vote: VoteMode,
    /// `votes[i]` is the voted annotator of the i-th record.
    pub votes: Vec<u32>,
}

pub fn assignment_accuracy(assigner: &Assigner, records: &[Record], vote: VoteMode, batch: usize) -> Result<AssignmentReport> {
    if records.is_empty() {
        return Err(TaxError::Invalid("assignment accuracy needs a non-empty split".into()));
    }
    let n = assigner.config.n_annotators;
    let votes = batched(records, batch, |x, chunk| {
        let hard = assigner.assign(x)?.hard;
        let hw = hard.len() / chunk.len();
        Ok(hard.chunks(hw).map(|h| majority_vote(h, n, vote)).collect())
    })?;
    let correct = votes.iter().zip(records).filter(|(v, r)| **v == r.annotator).count();
    Ok(AssignmentReport { accuracy: correct as f64 / records.len() as f64, correct, total: records.len(), vote, votes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendencyMatrix {
    /// `matrix[k][j]`: mIoU of subset `k+1` against the tendency-`j+1` masks.
    pub matrix: Vec<Vec<f64>>,
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
}

impl TendencyMatrix {
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Self {
        let n = matrix.len();
        let diag: f64 = (0..n).map(|i| matrix[i][i]).sum();
        let total: f64 = matrix.iter().flatten().sum();
        let off = if n > 1 { (total - diag) / (n * n - n) as f64 } else { 0.0 };
        TendencyMatrix { diagonal_mean: diag / n.max(1) as f64, off_diagonal_mean: off, matrix }
    }

    pub fn margin(&self) -> f64 {
        self.diagonal_mean - self.off_diagonal_mean
    }
}

pub fn per_tendency_eval(model: &SegModel, records: &[Record], batch: usize) -> Result<TendencyMatrix> {
    let n = model.n_annotators();
    if n == 0 {
        return Err(TaxError::Invalid("per-tendency evaluation needs an annotator-routed model".into()));
    }
    if let Some(r) = records.iter().find(|r| r.variants.len() != n) {
        return Err(TaxError::Invalid(format!("record {} has {} tendency masks, expected {n}", r.id, r.variants.len())));
    }
    let k = model.config.n_classes;
    let mut matrix = Vec::with_capacity(n);
    for subset in 1..=n {
        let preds = predict_subset(model, records, subset, batch)?;
        let row = (0..n)
            .map(|j| {
                let gts: Vec<&Mask> = records.iter().map(|r| &r.variants[j]).collect();
                Ok(score_masks(&preds, &gts, k, Value::Null)?.miou)
            })
            .collect::<Result<Vec<f64>>>()?;
        matrix.push(row);
    }
    Ok(TendencyMatrix::from_matrix(matrix))
}
