//! Offline augmentation: materializes the seven transforms of every
//! original sample into image files and an 8x manifest.

use crate::error::{Error, Result};
use crate::image::{augment, Augmentation, PixelImage};
use crate::manifest::{DatasetManifest, Origin, Sample};
use std::path::Path;

/// Writes the 7 augmented variants of every original next to a copy of the
/// original under `out_dir/<class>/`, returning the enhanced manifest.
/// Refuses manifests that already contain augmented samples.
pub fn materialize(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::Ingest("manifest has no samples to augment".into()));
    }
    if manifest
        .samples
        .iter()
        .any(|s| s.origin == Origin::Augmented)
    {
        return Err(Error::Ingest(
            "manifest already contains augmented samples; augmenting twice would \
             compound transforms"
                .into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(manifest.len() * 8);
    for sample in &manifest.samples {
        let class_dir = out_dir.join(&manifest.classes[sample.class]);
        std::fs::create_dir_all(&class_dir)?;
        let stem = sample
            .path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| {
                Error::Ingest(format!("unusable file name {}", sample.path.display()))
            })?;
        let image = PixelImage::load(&sample.path)?;
        let original_path = class_dir.join(format!("{stem}_orig.png"));
        image.save_png(&original_path)?;
        samples.push(Sample {
            path: original_path,
            class: sample.class,
            origin: Origin::Original,
        });
        for (aug, out) in Augmentation::ALL.iter().zip(augment(&image)) {
            let path = class_dir.join(format!("{stem}_{}.png", aug.tag()));
            out.save_png(&path)?;
            samples.push(Sample {
                path,
                class: sample.class,
                origin: Origin::Augmented,
            });
        }
    }
    DatasetManifest::new(manifest.classes.clone(), samples, manifest.seed)
}
