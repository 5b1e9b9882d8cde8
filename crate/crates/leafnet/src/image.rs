//! Pixel-level image handling: decoding, bilinear resizing and the
//! seven-transform augmentation set.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// Side length every ingested image is resized to.
pub const IMAGE_SIZE: usize = 128;
/// Channel count after ingestion (grayscale inputs are replicated).
pub const IMAGE_CHANNELS: usize = 3;

/// A normalized image in channel-major layout (3, 128, 128) with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    data: Array3<f32>,
}

impl PixelImage {
    /// Wraps an array, checking the shape and value-range invariants.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let shape = data.dim();
        if shape != (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::Ingest(format!(
                "expected {}x{}x{} image, got {:?}",
                IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE, shape
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Ingest("pixel values outside [0,1]".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Decodes JPEG/PNG bytes and resizes to the canonical shape.
    pub fn decode_resize(bytes: &[u8], origin: &Path) -> Result<Self> {
        let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut src = Array3::<f32>::zeros((IMAGE_CHANNELS, h, w));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..IMAGE_CHANNELS {
                src[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        let resized = bilinear_resize(&src, IMAGE_SIZE, IMAGE_SIZE);
        PixelImage::new(resized)
    }

    /// Reads and decodes an image file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode_resize(&bytes, path)
    }

    /// Writes the image as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..IMAGE_CHANNELS {
                let v = self.data[[c, y as usize, x as usize]];
                px.0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        buf.save(path)
            .map_err(|e| Error::Ingest(format!("failed to write {}: {e}", path.display())))
    }
}

/// Bilinear resampling with half-pixel centers, channel by channel.
pub fn bilinear_resize(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (channels, in_h, in_w) = src.dim();
    let mut out = Array3::<f32>::zeros((channels, out_h, out_w));
    let scale_y = in_h as f32 / out_h as f32;
    let scale_x = in_w as f32 / out_w as f32;
    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = ((ox as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f32;
            for c in 0..channels {
                let top = src[[c, y0, x0]] * (1.0 - fx) + src[[c, y0, x1]] * fx;
                let bot = src[[c, y1, x0]] * (1.0 - fx) + src[[c, y1, x1]] * fx;
                out[[c, oy, ox]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// The seven augmentation transforms, in the fixed order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Augmentation {
    Rotate90,
    Rotate180,
    Rotate270,
    MirrorHorizontal,
    MirrorVertical,
    BrightnessUp,
    BrightnessDown,
}

impl Augmentation {
    pub const ALL: [Augmentation; 7] = [
        Augmentation::Rotate90,
        Augmentation::Rotate180,
        Augmentation::Rotate270,
        Augmentation::MirrorHorizontal,
        Augmentation::MirrorVertical,
        Augmentation::BrightnessUp,
        Augmentation::BrightnessDown,
    ];

    /// Short suffix used in augmented file names.
    pub fn tag(&self) -> &'static str {
        match self {
            Augmentation::Rotate90 => "rot90",
            Augmentation::Rotate180 => "rot180",
            Augmentation::Rotate270 => "rot270",
            Augmentation::MirrorHorizontal => "mirh",
            Augmentation::MirrorVertical => "mirv",
            Augmentation::BrightnessUp => "brup",
            Augmentation::BrightnessDown => "brdn",
        }
    }

    pub fn apply(&self, img: &PixelImage) -> PixelImage {
        let src = img.data();
        let (channels, h, w) = src.dim();
        let mut out = Array3::<f32>::zeros((channels, h, w));
        match self {
            // Clockwise quarter turn: column y of the output reads row y of
            // the input bottom-up.
            Augmentation::Rotate90 => {
                for c in 0..channels {
                    for y in 0..h {
                        for x in 0..w {
                            out[[c, y, x]] = src[[c, h - 1 - x, y]];
                        }
                    }
                }
            }
            Augmentation::Rotate180 => {
                for c in 0..channels {
                    for y in 0..h {
                        for x in 0..w {
                            out[[c, y, x]] = src[[c, h - 1 - y, w - 1 - x]];
                        }
                    }
                }
            }
            Augmentation::Rotate270 => {
                for c in 0..channels {
                    for y in 0..h {
                        for x in 0..w {
                            out[[c, y, x]] = src[[c, x, w - 1 - y]];
                        }
                    }
                }
            }
            Augmentation::MirrorHorizontal => {
                for c in 0..channels {
                    for y in 0..h {
                        for x in 0..w {
                            out[[c, y, x]] = src[[c, y, w - 1 - x]];
                        }
                    }
                }
            }
            Augmentation::MirrorVertical => {
                for c in 0..channels {
                    for y in 0..h {
                        for x in 0..w {
                            out[[c, y, x]] = src[[c, h - 1 - y, x]];
                        }
                    }
                }
            }
            Augmentation::BrightnessUp => {
                out.assign(src);
                out.mapv_inplace(|v| (v * 1.25).min(1.0));
            }
            Augmentation::BrightnessDown => {
                out.assign(src);
                out.mapv_inplace(|v| v * 0.75);
            }
        }
        PixelImage { data: out }
    }
}

/// Applies all seven transforms, returning the outputs in fixed order.
/// The original is retained separately by the caller.
pub fn augment(img: &PixelImage) -> Vec<PixelImage> {
    Augmentation::ALL.iter().map(|a| a.apply(img)).collect()
}
