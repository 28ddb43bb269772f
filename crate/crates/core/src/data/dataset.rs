//! Multi-annotator dataset assembly, on-disk layout and manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::morph::{manipulate, MorphParams, Tendency};
use super::scene::{generate_scene, SceneSpec};
use crate::error::{Result, TaxError};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm, Mask, RgbImage};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub n_annotators: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub morph: MorphParams,
    /// Background colour per annotator. Each annotator's images come from a
    /// separate acquisition domain, which is what lets an assigner infer the
    /// annotator from the image. Empty means every image uses
    /// `scene.background`.
    pub domain_backgrounds: Vec<[u8; 3]>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            n_annotators: 4,
            n_train: 400,
            n_val: 50,
            n_test: 50,
            morph: MorphParams::default(),
            domain_backgrounds: vec![[100, 100, 100], [70, 85, 130], [85, 125, 80], [135, 85, 75]],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        Tendency::for_annotators(self.n_annotators)?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(TaxError::Config(format!(
                "split sizes must be positive, got train={} val={} test={}",
                self.n_train, self.n_val, self.n_test
            )));
        }
        if !self.domain_backgrounds.is_empty() && self.domain_backgrounds.len() < self.n_annotators {
            return Err(TaxError::Config(format!(
                "{} annotators need as many domain backgrounds, only {} given",
                self.n_annotators,
                self.domain_backgrounds.len()
            )));
        }
        if self.morph.block == 0 || self.scene.height % self.morph.block != 0 || self.scene.width % self.morph.block != 0 {
            return Err(TaxError::Config(format!("simplify block {} must divide the image size", self.morph.block)));
        }
        if self.morph.radius == 0 {
            return Err(TaxError::Config("morphology radius must be at least 1".into()));
        }
        Ok(())
    }

    /// Scene parameters for images of annotator `a` (1-based).
    pub fn scene_for(&self, a: u32) -> SceneSpec {
        let mut s = self.scene.clone();
        if let Some(&bg) = self.domain_backgrounds.get(a as usize - 1) {
            s.background = bg;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub id: u64,
    pub annotator: u32,
    pub tendency: Tendency,
    /// Paths relative to the dataset root.
    pub image: String,
    /// The annotator's manipulated mask.
    pub mask: String,
    pub orig: String,
    /// Val/test only: one manipulated mask per annotator, in annotator order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<RecordEntry>,
    pub val: Vec<RecordEntry>,
    pub test: Vec<RecordEntry>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[RecordEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<RecordEntry> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_annotators: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub tendencies: Vec<Tendency>,
    pub spec: DatasetSpec,
    pub splits: Splits,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| TaxError::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| TaxError::Format { path: path.clone(), format: "manifest JSON", msg: e.to_string() })?;
        if m.version != MANIFEST_VERSION {
            return Err(TaxError::Format {
                path,
                format: "manifest JSON",
                msg: format!("version {} is not supported (expected {MANIFEST_VERSION})", m.version),
            });
        }
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| TaxError::io(&path, e))
    }

    /// Number of training records per annotator, index 0 = annotator 1.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_annotators];
        for r in &self.splits.train {
            counts[r.annotator as usize - 1] += 1;
        }
        counts
    }
}

/// One record held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub annotator: u32,
    pub tendency: Tendency,
    pub image: RgbImage,
    pub mask: Mask,
    pub orig: Mask,
    /// Manipulated masks of every annotator (val/test only).
    pub variants: Vec<Mask>,
}

/// Synthesizes record `id` for annotator `annotator` without touching disk.
pub fn synthesize_record(seed: u64, spec: &DatasetSpec, id: u64, annotator: u32, with_variants: bool) -> Result<Record> {
    let tendencies = Tendency::for_annotators(spec.n_annotators)?;
    let (image, orig) = generate_scene(seed ^ id, &spec.scene_for(annotator))?;
    let tendency = tendencies[annotator as usize - 1];
    let mask = manipulate(&orig, tendency, spec.morph)?;
    let variants = if with_variants {
        tendencies.iter().map(|&t| manipulate(&orig, t, spec.morph)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Record { id, annotator, tendency, image, mask, orig, variants })
}

/// First record id and record count of `split`.
fn split_range(split: Split, spec: &DatasetSpec) -> (u64, usize) {
    match split {
        Split::Train => (0, spec.n_train),
        Split::Val => (spec.n_train as u64, spec.n_val),
        Split::Test => ((spec.n_train + spec.n_val) as u64, spec.n_test),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| TaxError::io(path, e))
}

/// Generates all splits under `root` and writes the manifest.
///
/// Record ids are global (train first, then val, then test); annotators are
/// assigned round-robin within each split.
pub fn build_dataset(root: &Path, seed: u64, spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    let tendencies = Tendency::for_annotators(spec.n_annotators)?;
    let mut splits = Splits::default();
    for split in Split::ALL {
        let (offset, n) = split_range(split, spec);
        let dir = root.join(split.name());
        for sub in ["images", "masks", "orig"] {
            create_dir(&dir.join(sub))?;
        }
        let with_variants = split != Split::Train;
        for i in 0..n {
            let id = offset + i as u64;
            let annotator = (i % spec.n_annotators) as u32 + 1;
            let rec = synthesize_record(seed, spec, id, annotator, with_variants)?;
            let rel = |sub: &str, suffix: &str, ext: &str| format!("{}/{sub}/{id:06}{suffix}.{ext}", split.name());
            let image = rel("images", "", "ppm");
            let orig = rel("orig", "", "pgm");
            write_ppm(&root.join(&image), &rec.image)?;
            write_pgm(&root.join(&orig), &rec.orig)?;
            let (mask, variants) = if with_variants {
                let mut paths = Vec::new();
                for (t, m) in tendencies.iter().zip(&rec.variants) {
                    let p = rel("masks", &format!("_{t}"), "pgm");
                    write_pgm(&root.join(&p), m)?;
                    paths.push(p);
                }
                (paths[annotator as usize - 1].clone(), paths)
            } else {
                let p = rel("masks", "", "pgm");
                write_pgm(&root.join(&p), &rec.mask)?;
                (p, Vec::new())
            };
            splits.get_mut(split).push(RecordEntry { id, annotator, tendency: rec.tendency, image, mask, orig, variants });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        n_annotators: spec.n_annotators,
        height: spec.scene.height,
        width: spec.scene.width,
        n_classes: spec.scene.n_classes,
        tendencies,
        spec: spec.clone(),
        splits,
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// A dataset loaded fully into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest = Manifest::read(root)?;
        let n = manifest.n_annotators;
        if manifest.tendencies.len() != n {
            return Err(TaxError::shape("manifest tendencies", n, manifest.tendencies.len()));
        }
        let mut loaded: Vec<Vec<Record>> = Vec::new();
        for split in Split::ALL {
            let mut out = Vec::new();
            for e in manifest.splits.get(split) {
                if !(1..=n as u32).contains(&e.annotator) {
                    return Err(TaxError::Invalid(format!("record {} has annotator {} outside 1..={n}", e.id, e.annotator)));
                }
                let load_mask = |p: &str| -> Result<Mask> {
                    let m = read_pgm(&root.join(p))?;
                    if (m.height, m.width) != (manifest.height, manifest.width) {
                        return Err(TaxError::shape(format!("mask {p}"), format!("{}x{}", manifest.height, manifest.width), format!("{}x{}", m.height, m.width)));
                    }
                    if let Some(&v) = m.data.iter().find(|&&v| v as usize >= manifest.n_classes) {
                        return Err(TaxError::Invalid(format!("mask {p} holds class {v} but n_classes is {}", manifest.n_classes)));
                    }
                    Ok(m)
                };
                let image = read_ppm(&root.join(&e.image))?;
                if (image.height, image.width) != (manifest.height, manifest.width) {
                    return Err(TaxError::shape(
                        format!("image {}", e.image),
                        format!("{}x{}", manifest.height, manifest.width),
                        format!("{}x{}", image.height, image.width),
                    ));
                }
                let variants = e.variants.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
                if split != Split::Train && variants.len() != n {
                    return Err(TaxError::Invalid(format!("record {} lists {} tendency masks, expected {n}", e.id, variants.len())));
                }
                out.push(Record {
                    id: e.id,
                    annotator: e.annotator,
                    tendency: e.tendency,
                    image,
                    mask: load_mask(&e.mask)?,
                    orig: load_mask(&e.orig)?,
                    variants,
                });
            }
            loaded.push(out);
        }
        let test = loaded.pop().unwrap_or_default();
        let val = loaded.pop().unwrap_or_default();
        let train = loaded.pop().unwrap_or_default();
        Ok(Dataset { root: root.to_path_buf(), manifest, train, val, test })
    }

    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_annotators(&self) -> usize {
        self.manifest.n_annotators
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }
}
