//! Labeled similar/dissimilar pair construction for contrastive training.

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Binary pair label: 0 for same class, 1 for different classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn value(self) -> u8 {
        match self {
            PairLabel::Similar => 0,
            PairLabel::Dissimilar => 1,
        }
    }
}

/// A pair of sample indices into a manifest plus its similarity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub first: usize,
    pub second: usize,
    pub label: PairLabel,
}

/// Draws `count` labeled pairs: `round(count * similar_ratio)` similar, the
/// rest dissimilar. Similar pairs are class-balanced (class chosen uniformly,
/// then two distinct samples); dissimilar pairs use a uniformly random
/// distinct class pair. Deterministic per seed.
pub fn sample_pairs(
    manifest: &DatasetManifest,
    count: usize,
    similar_ratio: f64,
    seed: u64,
) -> Result<Vec<LabeledPair>> {
    if !(0.0..=1.0).contains(&similar_ratio) {
        return Err(Error::Sampling(format!(
            "similar ratio must lie in [0,1], got {similar_ratio}"
        )));
    }
    let groups = manifest.indices_by_class();
    let multi: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    let nonempty: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();

    let similar_count = (count as f64 * similar_ratio).round() as usize;
    let dissimilar_count = count - similar_count;
    if similar_count > 0 && multi.is_empty() {
        return Err(Error::Sampling(
            "similar pairs need at least one class with two or more samples".into(),
        ));
    }
    if dissimilar_count > 0 && nonempty.len() < 2 {
        return Err(Error::Sampling(
            "dissimilar pairs need at least two non-empty classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..similar_count {
        let group = multi[rng.gen_range(0..multi.len())];
        let picks: Vec<usize> = group.choose_multiple(&mut rng, 2).copied().collect();
        pairs.push(LabeledPair {
            first: picks[0],
            second: picks[1],
            label: PairLabel::Similar,
        });
    }
    for _ in 0..dissimilar_count {
        let a = rng.gen_range(0..nonempty.len());
        let mut b = rng.gen_range(0..nonempty.len() - 1);
        if b >= a {
            b += 1;
        }
        let first = *nonempty[a].choose(&mut rng).expect("non-empty class");
        let second = *nonempty[b].choose(&mut rng).expect("non-empty class");
        pairs.push(LabeledPair {
            first,
            second,
            label: PairLabel::Dissimilar,
        });
    }
    // Interleave the labels: consumers batch this list in order, and a
    // label-sorted list would yield single-label batches that alternately
    // blow the embeddings apart and collapse them.
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Dumps pairs as `path1,path2,Y` CSV for audit and replay.
pub fn write_pairs_csv(
    manifest: &DatasetManifest,
    pairs: &[LabeledPair],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("path1,path2,Y\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{}\n",
            manifest.samples[p.first].path.display(),
            manifest.samples[p.second].path.display(),
            p.label.value()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
