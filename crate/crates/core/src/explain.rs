//! Who/why explanations: the annotator an image region is assigned to, and
//! the training patch most similar to the prototype that won it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tax_autodiff::no_grad;
use tax_autodiff::ops::COSINE_EPS;

use crate::assigner::Assigner;
use crate::data::Record;
use crate::error::{Result, TaxError};
use crate::image::{write_ppm, Mask, RgbImage};
use crate::model::{argmax_mask, SegModel};
use crate::nn::batch_tensor;
use crate::train::hex;

/// Images encoded per forward pass while indexing.
const INDEX_BATCH: usize = 16;

/// Pixel rectangle `[y0, x0, height, width]`.
pub type PatchBox = [usize; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub record_id: u64,
    pub annotator: u32,
    /// Cell coordinates `(row, column)` on the feature grid.
    pub cell: [usize; 2],
    pub score: f32,
    pub patch: PatchBox,
}

/// For every prototype, the training cells most similar to it (best first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeIndex {
    pub bank_hash: String,
    pub per_group: usize,
    pub top_m: usize,
    pub prototypes: Vec<Vec<IndexEntry>>,
}

impl PrototypeIndex {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(path, text).map_err(|e| TaxError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<PrototypeIndex> {
        let text = fs::read_to_string(path).map_err(|e| TaxError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TaxError::Format { path: path.to_path_buf(), format: "prototype index", msg: e.to_string() })
    }

    pub fn group_of(&self, j: usize) -> u32 {
        (j / self.per_group) as u32 + 1
    }

    /// Fails unless the index was built from exactly these assigner weights.
    pub fn check_fresh(&self, assigner: &Assigner) -> Result<()> {
        let current = assigner_hash(assigner);
        if current != self.bank_hash {
            return Err(TaxError::StaleIndex { index: self.bank_hash.clone(), current });
        }
        Ok(())
    }
}

/// SHA-256 over every assigner tensor (names, shapes and values), so both a
/// retrained bank and a retrained encoder invalidate an index.
pub fn assigner_hash(assigner: &Assigner) -> String {
    let mut h = Sha256::new();
    for (name, t) in assigner.named_tensors() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// `a.b / (max(|a|, eps) * max(|b|, eps))` in double precision.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS as f64);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS as f64);
    dot / (na * nb)
}

/// Column `j` of the bank as `f64`.
pub fn prototype(assigner: &Assigner, j: usize) -> Vec<f64> {
    let bank = assigner.bank.data();
    let np = assigner.bank.shape()[1];
    (0..assigner.config.dim).map(|i| bank[i * np + j] as f64).collect()
}

/// Encoded cell features of one image, `[h*w][d]` in row-major cell order.
pub fn cell_features(assigner: &Assigner, images: &[&RgbImage]) -> Result<Vec<Vec<Vec<f64>>>> {
    let f = no_grad(|| assigner.encode(&batch_tensor(images)?))?;
    let s = f.shape().to_vec();
    let (d, hw) = (s[1], s[2] * s[3]);
    let data = f.data();
    Ok((0..s[0]).map(|b| (0..hw).map(|c| (0..d).map(|i| data[(b * d + i) * hw + c] as f64).collect()).collect()).collect())
}

/// Scans every training cell for every prototype, keeping the `top_m` most
/// similar. Scan order is record order then row-major cells; equal scores
/// keep the earlier location.
pub fn build_prototype_index(assigner: &Assigner, train: &[Record], top_m: usize) -> Result<PrototypeIndex> {
    if train.is_empty() {
        return Err(TaxError::Invalid("cannot index an empty training split".into()));
    }
    if top_m == 0 {
        return Err(TaxError::Invalid("top_m must be positive".into()));
    }
    let cfg = &assigner.config;
    let (_, gw) = cfg.grid();
    let stride = cfg.stride();
    let np = assigner.bank.shape()[1];
    let protos: Vec<Vec<f64>> = (0..np).map(|j| prototype(assigner, j)).collect();
    let mut best: Vec<Vec<IndexEntry>> = vec![Vec::new(); np];
    for chunk in train.chunks(INDEX_BATCH) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|r| &r.image).collect();
        let feats = cell_features(assigner, &imgs)?;
        for (rec, cells) in chunk.iter().zip(&feats) {
            for (c, fv) in cells.iter().enumerate() {
                let (u, v) = (c / gw, c % gw);
                for (j, p) in protos.iter().enumerate() {
                    let score = cosine(fv, p) as f32;
                    let list = &mut best[j];
                    if list.len() == top_m && list.last().is_some_and(|e| score <= e.score) {
                        continue;
                    }
                    let at = list.iter().position(|e| score > e.score).unwrap_or(list.len());
                    let entry = IndexEntry { record_id: rec.id, annotator: rec.annotator, cell: [u, v], score, patch: [u * stride, v * stride, stride, stride] };
                    list.insert(at, entry);
                    list.truncate(top_m);
                }
            }
        }
    }
    Ok(PrototypeIndex { bank_hash: assigner_hash(assigner), per_group: cfg.per_group, top_m, prototypes: best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub record_id: u64,
    pub annotator: u32,
    pub cell: [usize; 2],
    pub score: f32,
    pub patch: PatchBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_id: u64,
    /// Query pixel `(row, column)`.
    pub pixel: [usize; 2],
    pub cell: [usize; 2],
    /// Annotator index at the pixel (`N+1` for the shared subset).
    pub who: u32,
    pub prototype: usize,
    pub prototype_group: u32,
    /// Cosine between the query cell and the winning prototype.
    pub score: f32,
    pub query_patch: PatchBox,
    /// The training patch closest to the winning prototype.
    pub why: Trace,
    pub overlays: Vec<PathBuf>,
}

/// Explains `pixel` of `image`. Overlays are rendered into `out_dir` when given.
pub fn explain(
    model: Option<&SegModel>,
    assigner: &Assigner,
    index: &PrototypeIndex,
    image: &Record,
    pixel: (usize, usize),
    train: &[Record],
    out_dir: Option<&Path>,
) -> Result<ExplanationRecord> {
    index.check_fresh(assigner)?;
    let (hh, ww) = (image.image.height, image.image.width);
    if pixel.0 >= hh || pixel.1 >= ww {
        return Err(TaxError::Invalid(format!("pixel {},{} is outside the {hh}x{ww} image", pixel.0, pixel.1)));
    }
    let x = batch_tensor(&[&image.image])?;
    let out = no_grad(|| assigner.assign(&x))?;
    let (_, gw) = out.grid;
    let (ry, rx) = out.ratio;
    let hard = out.hard_mask(0);
    let who = hard.get(pixel.0, pixel.1) as u32;
    let cell = [pixel.0 / ry, pixel.1 / rx];
    let proto = out.winner_proto[cell[0] * gw + cell[1]];
    let groups = assigner.config.groups();
    let score = out.soft.data()[(who as usize - 1) * out.grid.0 * gw + cell[0] * gw + cell[1]];
    let e = index
        .prototypes
        .get(proto)
        .and_then(|l| l.first())
        .ok_or_else(|| TaxError::Invalid(format!("prototype {proto} is not in the index; rebuild it")))?;
    let why = Trace { record_id: e.record_id, annotator: e.annotator, cell: e.cell, score: e.score, patch: e.patch };
    let mut rec = ExplanationRecord {
        image_id: image.id,
        pixel: [pixel.0, pixel.1],
        cell,
        who,
        prototype: proto,
        prototype_group: index.group_of(proto),
        score,
        query_patch: [cell[0] * ry, cell[1] * rx, ry, rx],
        why,
        overlays: Vec::new(),
    };
    if let Some(dir) = out_dir {
        let seg = match model {
            Some(m) => {
                let logits = no_grad(|| m.forward_tax(&x, &out.hard))?;
                let mask = argmax_mask(&logits.data(), m.config.n_classes, hh, ww);
                Some(mask)
            }
            None => None,
        };
        let traced = train
            .iter()
            .find(|r| r.id == rec.why.record_id)
            .ok_or_else(|| TaxError::Invalid(format!("traced record {} is not in the training split", rec.why.record_id)))?;
        rec.overlays = render_overlays(dir, &rec, &image.image, seg.as_ref(), &hard, groups, &traced.image)?;
    }
    Ok(rec)
}

const ANNOTATOR_COLORS: [[u8; 3]; 6] = [[230, 60, 60], [60, 200, 60], [60, 100, 240], [240, 200, 40], [200, 80, 220], [40, 220, 220]];
const CLASS_COLORS: [[u8; 3]; 6] = [[0, 0, 0], [255, 140, 0], [0, 200, 255], [255, 0, 160], [120, 255, 80], [160, 80, 255]];

pub fn annotator_color(a: u32, n_groups: usize) -> [u8; 3] {
    // The shared group is always grey.
    if a as usize == n_groups {
        return [150, 150, 150];
    }
    ANNOTATOR_COLORS[(a as usize + ANNOTATOR_COLORS.len() - 1) % ANNOTATOR_COLORS.len()]
}

fn blend(img: &RgbImage, color_of: impl Fn(usize, usize) -> Option<[u8; 3]>) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if let Some(c) = color_of(y, x) {
                let p = img.get(y, x);
                out.put(y, x, std::array::from_fn(|i| ((p[i] as u16 + c[i] as u16) / 2) as u8));
            }
        }
    }
    out
}

fn mark_box(img: &mut RgbImage, b: PatchBox, color: [u8; 3]) {
    let [y0, x0, h, w] = b;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if y == y0 || x == x0 || y + 1 == y0 + h || x + 1 == x0 + w {
                img.put(y, x, color);
            }
        }
    }
}

fn render_overlays(dir: &Path, rec: &ExplanationRecord, image: &RgbImage, seg: Option<&Mask>, hard: &Mask, groups: usize, traced: &RgbImage) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| TaxError::io(dir, e))?;
    let stem = format!("{:06}_{}_{}", rec.image_id, rec.pixel[0], rec.pixel[1]);
    let mut files = Vec::new();
    let mut save = |name: &str, img: &RgbImage| -> Result<()> {
        let p = dir.join(format!("{stem}_{name}.ppm"));
        write_ppm(&p, img)?;
        files.push(p);
        Ok(())
    };
    if let Some(seg) = seg {
        save("segmentation", &blend(image, |y, x| (seg.get(y, x) != 0).then(|| CLASS_COLORS[seg.get(y, x) as usize % CLASS_COLORS.len()])))?;
    }
    let mut ann = blend(image, |y, x| Some(annotator_color(hard.get(y, x) as u32, groups)));
    mark_box(&mut ann, rec.query_patch, [255, 255, 255]);
    save("annotators", &ann)?;
    let [y0, x0, h, w] = rec.query_patch;
    save("query_patch", &image.crop(y0, x0, h, w).enlarge(8))?;
    let [y0, x0, h, w] = rec.why.patch;
    save("traced_patch", &traced.crop(y0, x0, h, w).enlarge(8))?;
    Ok(files)
}

pub fn write_record(path: &Path, rec: &ExplanationRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(rec).expect("record serializes");
    fs::write(path, text).map_err(|e| TaxError::io(path, e))
}
