//! Majority-voting inference: support galleries, per-column nearest-class
//! voting with the minimum-average-distance tie-break, and evaluation
//! reports.

use crate::checkpoint::params_fingerprint;
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::manifest::DatasetManifest;
use crate::net::{embed, Embedding, NetworkParams};
use crate::train::{embedding_distance, ImageStore};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Support images per class.
pub const SUPPORT_PER_CLASS: usize = 5;

/// Which training samples a gallery was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryProvenance {
    /// Per class, the paths of the selected support images.
    pub support_paths: Vec<Vec<PathBuf>>,
    pub selection_seed: u64,
    /// Fingerprint of the checkpoint the embeddings came from.
    pub params_fingerprint: String,
}

/// n classes x 5 support embeddings, fixed per evaluation run.
#[derive(Debug, Clone)]
pub struct SupportGallery {
    pub classes: Vec<String>,
    /// `embeddings[class][j]` for j in 0..5.
    pub embeddings: Vec<Vec<Embedding>>,
    pub provenance: GalleryProvenance,
}

/// Builds a gallery by drawing 5 seeded-random support samples per class
/// from the training split and embedding them in eval mode.
pub fn build_gallery(
    params: &NetworkParams<f32>,
    train_manifest: &DatasetManifest,
    store: &ImageStore,
    seed: u64,
) -> Result<SupportGallery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = train_manifest.indices_by_class();
    let mut embeddings = Vec::with_capacity(groups.len());
    let mut support_paths = Vec::with_capacity(groups.len());
    for (class, group) in groups.iter().enumerate() {
        if group.len() < SUPPORT_PER_CLASS {
            return Err(Error::Gallery(format!(
                "class {:?} has {} training samples, needs at least {SUPPORT_PER_CLASS}",
                train_manifest.classes[class],
                group.len()
            )));
        }
        let picks: Vec<usize> = group
            .choose_multiple(&mut rng, SUPPORT_PER_CLASS)
            .copied()
            .collect();
        let mut class_embeddings = Vec::with_capacity(SUPPORT_PER_CLASS);
        let mut class_paths = Vec::with_capacity(SUPPORT_PER_CLASS);
        for &idx in &picks {
            let image = PixelImage::new(store.get(idx).clone())?;
            class_embeddings.push(embed(params, &image)?);
            class_paths.push(train_manifest.samples[idx].path.clone());
        }
        embeddings.push(class_embeddings);
        support_paths.push(class_paths);
    }
    Ok(SupportGallery {
        classes: train_manifest.classes.clone(),
        embeddings,
        provenance: GalleryProvenance {
            support_paths,
            selection_seed: seed,
            params_fingerprint: params_fingerprint(params),
        },
    })
}

/// A single classification outcome with the full voting breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: usize,
    /// Winning class of each support column j = 1..5.
    pub column_winners: Vec<usize>,
    pub vote_counts: Vec<usize>,
    /// Mean of each class's 5 column distances.
    pub average_distances: Vec<f64>,
    pub tie_break_used: bool,
}

/// Majority voting over an n x 5 distance matrix: each column elects the
/// class of its minimal distance; the mode wins; vote-count ties fall back
/// to the smallest average distance among the tied classes, and any exact
/// tie after that to the lowest class index.
pub fn vote(distances: &Array2<f64>) -> Prediction {
    let (n, cols) = distances.dim();
    assert_eq!(cols, SUPPORT_PER_CLASS, "expected 5 support columns");
    assert!(n >= 1, "need at least one class");

    let mut column_winners = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut best = 0usize;
        for i in 1..n {
            if distances[[i, j]] < distances[[best, j]] {
                best = i;
            }
        }
        column_winners.push(best);
    }

    let mut vote_counts = vec![0usize; n];
    for &w in &column_winners {
        vote_counts[w] += 1;
    }
    let average_distances: Vec<f64> = (0..n)
        .map(|i| (0..cols).map(|j| distances[[i, j]]).sum::<f64>() / cols as f64)
        .collect();

    let max_votes = *vote_counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..n).filter(|&i| vote_counts[i] == max_votes).collect();
    let (predicted, tie_break_used) = if tied.len() == 1 {
        (tied[0], false)
    } else {
        let mut best = tied[0];
        for &i in &tied[1..] {
            if average_distances[i] < average_distances[best] {
                best = i;
            }
        }
        (best, true)
    };
    Prediction {
        predicted,
        column_winners,
        vote_counts,
        average_distances,
        tie_break_used,
    }
}

/// Distances from a query embedding to every gallery support embedding.
pub fn distance_matrix(gallery: &SupportGallery, query: &Embedding) -> Array2<f64> {
    let n = gallery.classes.len();
    Array2::from_shape_fn((n, SUPPORT_PER_CLASS), |(i, j)| {
        embedding_distance(query, &gallery.embeddings[i][j])
    })
}

/// Classifies one query image against the gallery.
pub fn classify(
    gallery: &SupportGallery,
    params: &NetworkParams<f32>,
    query: &PixelImage,
) -> Result<Prediction> {
    if gallery.provenance.params_fingerprint != params_fingerprint(params) {
        return Err(Error::Config(
            "gallery was built from a different checkpoint than the supplied parameters".into(),
        ));
    }
    let query_embedding = embed(params, query)?;
    Ok(vote(&distance_matrix(gallery, &query_embedding)))
}

/// Accuracy report over an evaluation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub overall_accuracy: f64,
    /// Per-class recall; null for classes absent from the evaluation set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub sample_count: usize,
    pub gallery_provenance: GalleryProvenance,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Flat `class,samples,accuracy` CSV for per-class bar plots.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class,samples,accuracy\n");
        for (i, name) in self.classes.iter().enumerate() {
            let samples: usize = self.confusion[i].iter().sum();
            let acc = self.per_class_accuracy[i]
                .map(|a| a.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{name},{samples},{acc}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Classifies every evaluation sample and aggregates the confusion matrix.
/// Rejects evaluation samples that appear among the gallery's support
/// images.
pub fn evaluate(
    gallery: &SupportGallery,
    params: &NetworkParams<f32>,
    eval_manifest: &DatasetManifest,
    store: &ImageStore,
) -> Result<EvalReport> {
    if gallery.provenance.params_fingerprint != params_fingerprint(params) {
        return Err(Error::Config(
            "gallery was built from a different checkpoint than the supplied parameters".into(),
        ));
    }
    let support: HashSet<&PathBuf> = gallery.provenance.support_paths.iter().flatten().collect();
    let n = gallery.classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (idx, sample) in eval_manifest.samples.iter().enumerate() {
        if support.contains(&sample.path) {
            return Err(Error::Contamination(format!(
                "evaluation sample {} is also a gallery support image",
                sample.path.display()
            )));
        }
        let image = PixelImage::new(store.get(idx).clone())?;
        let query_embedding = embed(params, &image)?;
        let prediction = vote(&distance_matrix(gallery, &query_embedding));
        confusion[sample.class][prediction.predicted] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = (0..n)
        .map(|i| {
            let row: usize = confusion[i].iter().sum();
            (row > 0).then(|| confusion[i][i] as f64 / row as f64)
        })
        .collect();
    Ok(EvalReport {
        classes: gallery.classes.clone(),
        confusion,
        overall_accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        per_class_accuracy,
        sample_count: total,
        gallery_provenance: gallery.provenance.clone(),
    })
}
