//! Dataset manifests: folder scanning, JSON (de)serialization and
//! deterministic stratified splitting.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Whether a sample is an on-disk original or a materialized augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    /// Index into the manifest's class list.
    pub class: usize,
    pub origin: Origin,
}

/// Declarative listing of image samples, class labels and their origins.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Builds a manifest, validating the class/sample invariants.
    pub fn new(classes: Vec<String>, samples: Vec<Sample>, seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c) {
                return Err(Error::Ingest(format!("duplicate class name {c:?}")));
            }
        }
        for s in &samples {
            if s.class >= classes.len() {
                return Err(Error::Ingest(format!(
                    "sample {} has class index {} out of range ({} classes)",
                    s.path.display(),
                    s.class,
                    classes.len()
                )));
            }
        }
        Ok(Self {
            classes,
            samples,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample tally, aligned with `classes`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }

    /// Sample indices grouped by class, in manifest order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.class].push(i);
        }
        groups
    }

    /// A copy holding only the listed sample indices (class list unchanged).
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        DatasetManifest::new(manifest.classes, manifest.samples, manifest.seed)
    }

    /// Content fingerprint used to tie checkpoints to their training data.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("manifest serializes"));
        hex::encode(hasher.finalize())
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans a folder tree with one subdirectory per class into a manifest.
/// Classes are ordered lexicographically by directory name. Unreadable
/// files are skipped; the returned count reports how many were.
pub fn scan_folder(root: &Path) -> Result<(DatasetManifest, usize)> {
    if !root.is_dir() {
        return Err(Error::Ingest(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().is_dir() {
            class_dirs.push((
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            ));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Ingest(format!(
            "no classes found under {}",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut classes = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (class_index, (name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            match entry {
                Ok(e) if e.path().is_file() && is_image_file(&e.path()) => files.push(e.path()),
                Ok(_) => {}
                Err(_) => skipped += 1,
            }
        }
        if files.is_empty() {
            return Err(Error::Ingest(format!(
                "class directory {} contains no images",
                dir.display()
            )));
        }
        files.sort();
        classes.push(name.clone());
        for path in files {
            samples.push(Sample {
                path,
                class: class_index,
                origin: Origin::Original,
            });
        }
    }
    Ok((DatasetManifest::new(classes, samples, 0)?, skipped))
}

/// How to carve a manifest into training and evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// Stratified fraction split: each class contributes `train_fraction`
    /// of its samples (within one sample) to the training set.
    Fraction { train_fraction: f64, seed: u64 },
    /// Stratified k-fold partition.
    KFold { k: usize, seed: u64 },
    /// External evaluation manifest; the whole input manifest trains.
    DedicatedTest { test_manifest: PathBuf },
}

/// Output of [`make_split`].
#[derive(Debug, Clone)]
pub enum SplitOutcome {
    TrainEval {
        train: DatasetManifest,
        eval: DatasetManifest,
    },
    /// k disjoint (train, eval) pairs covering the manifest.
    Folds(Vec<(DatasetManifest, DatasetManifest)>),
}

pub fn make_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<SplitOutcome> {
    if manifest.is_empty() {
        return Err(Error::Split("manifest is empty".into()));
    }
    match spec {
        SplitSpec::Fraction {
            train_fraction,
            seed,
        } => {
            let (train, eval) = fraction_split(manifest, *train_fraction, *seed)?;
            Ok(SplitOutcome::TrainEval { train, eval })
        }
        SplitSpec::KFold { k, seed } => {
            if *k < 2 {
                return Err(Error::Split(format!("k must be >= 2, got {k}")));
            }
            Ok(SplitOutcome::Folds(kfold_split(manifest, *k, *seed)))
        }
        SplitSpec::DedicatedTest { test_manifest } => {
            let eval = DatasetManifest::load(test_manifest)?;
            if eval.classes != manifest.classes {
                return Err(Error::Split(format!(
                    "dedicated test manifest {} lists different classes",
                    test_manifest.display()
                )));
            }
            Ok(SplitOutcome::TrainEval {
                train: manifest.clone(),
                eval,
            })
        }
    }
}

/// Stratified fraction split; deterministic for a fixed seed.
pub fn fraction_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie in (0,1], got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for (class, group) in manifest.indices_by_class().into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let take = (train_fraction * group.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Split(format!(
                "train fraction {train_fraction} leaves class {:?} with zero training samples",
                manifest.classes[class]
            )));
        }
        let mut shuffled = group;
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..take]);
        eval_idx.extend_from_slice(&shuffled[take..]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    Ok((manifest.subset(&train_idx), manifest.subset(&eval_idx)))
}

/// Stratified k-fold partition: within each class, fold sizes differ by at
/// most one; folds are disjoint and cover the manifest.
pub fn kfold_split(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Vec<(DatasetManifest, DatasetManifest)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for group in manifest.indices_by_class() {
        let mut shuffled = group;
        shuffled.shuffle(&mut rng);
        for (i, idx) in shuffled.into_iter().enumerate() {
            fold_members[i % k].push(idx);
        }
    }
    (0..k)
        .map(|fold| {
            let mut eval: Vec<usize> = fold_members[fold].clone();
            let mut train: Vec<usize> = fold_members
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != fold)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            eval.sort_unstable();
            train.sort_unstable();
            (manifest.subset(&train), manifest.subset(&eval))
        })
        .collect()
}

/// Formats a class/count table for CLI output.
pub fn format_count_table(manifest: &DatasetManifest) -> String {
    let counts = manifest.counts();
    let mut rows: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, count) in manifest.classes.iter().zip(counts.iter()) {
        rows.insert(name, *count);
    }
    let width = manifest
        .classes
        .iter()
        .map(|c| c.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = format!("{:width$}  count\n", "class");
    for (name, count) in rows {
        out.push_str(&format!("{name:width$}  {count}\n"));
    }
    out.push_str(&format!("{:width$}  {}\n", "total", manifest.len()));
    out
}
