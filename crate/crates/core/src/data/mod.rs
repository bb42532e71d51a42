//! Dataset IO, the synthetic scribble-annotated generator, and augmentation.
//!
//! Images are binary PPM (P6), masks and saliency maps binary PGM (P5), all
//! maxval 255. Scribbles encode Unlabeled/Foreground/Background as 0/255/128.
//! A manifest is one tab-separated line per sample:
//! `image<TAB>scribble[<TAB>mask]`, paths relative to the manifest location.

mod augment;
mod pnm;
pub(crate) mod synth;

pub use augment::{augment, hflip_sample, resize_map, resize_sample};
pub use synth::synth_generate;
pub(crate) use synth::mix_seed as seed_mix;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{Label, SaliencyMap, ScribbleMask};
use crate::tensor::Tensor;

pub const SCRIBBLE_UNLABELED: u8 = 0;
pub const SCRIBBLE_FOREGROUND: u8 = 255;
pub const SCRIBBLE_BACKGROUND: u8 = 128;

/// Dense binary ground truth, evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

/// One training or evaluation sample.
///
/// `full_mask` is ground truth for metrics; the training losses never see it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub scribble: ScribbleMask,
    pub full_mask: Option<BinaryMask>,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub scribble: PathBuf,
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    /// Image file stem; used to pair predictions with samples.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected 2 or 3 tab-separated paths", lineno + 1),
                });
            }
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                scribble: PathBuf::from(fields[1]),
                mask: fields.get(2).map(PathBuf::from),
            });
        }
        if entries.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: "no entries".to_string(),
            });
        }
        let manifest = DatasetManifest { root, entries };
        for entry in &manifest.entries {
            for rel in [Some(&entry.image), Some(&entry.scribble), entry.mask.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = manifest.root.join(rel);
                if !full.exists() {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        detail: format!("referenced file missing: {}", full.display()),
                    });
                }
            }
        }
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load sample `idx` fully into memory.
    pub fn load_sample(&self, idx: usize) -> Result<Sample> {
        let entry = &self.entries[idx];
        let image = load_image(&self.root.join(&entry.image))?;
        let scribble = load_scribble(&self.root.join(&entry.scribble))?;
        let (_, h, w) = image_dims(&image)?;
        if scribble.width != w || scribble.height != h {
            return Err(Error::shape(
                "load_sample",
                format!(
                    "scribble {}x{} does not match image {}x{}",
                    scribble.width, scribble.height, w, h
                ),
            ));
        }
        let full_mask = match &entry.mask {
            Some(rel) => {
                let m = load_binary_mask(&self.root.join(rel))?;
                if m.width != w || m.height != h {
                    return Err(Error::shape(
                        "load_sample",
                        format!("mask {}x{} does not match image {}x{}", m.width, m.height, w, h),
                    ));
                }
                Some(m)
            }
            None => None,
        };
        Ok(Sample {
            image,
            scribble,
            full_mask,
            id: entry.id(),
        })
    }
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] if *c == 3 => Ok((*c, *h, *w)),
        other => Err(Error::shape(
            "image_dims",
            format!("expected [3, H, W] image, got {other:?}"),
        )),
    }
}

/// RGB image scaled to `[0, 1]`, shape `[3, H, W]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    match pnm::read_pnm(path)? {
        pnm::Pnm::Rgb { width, height, data, .. } => {
            let plane = width * height;
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in data.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = px[c] as f64 / 255.0;
                }
            }
            Tensor::from_vec(&[3, height, width], out)
        }
        pnm::Pnm::Gray { .. } => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected P6 color image, got P5".to_string(),
        }),
    }
}

fn gray_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>, usize)> {
    match pnm::read_pnm(path)? {
        pnm::Pnm::Gray { width, height, data, data_offset } => Ok((width, height, data, data_offset)),
        pnm::Pnm::Rgb { .. } => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected P5 grayscale file, got P6".to_string(),
        }),
    }
}

/// Ternary scribble mask; any byte outside {0, 128, 255} is rejected with its
/// file offset.
pub fn load_scribble(path: &Path) -> Result<ScribbleMask> {
    let (width, height, data, data_offset) = gray_pgm(path)?;
    let mut labels = Vec::with_capacity(data.len());
    for (i, b) in data.iter().enumerate() {
        labels.push(match *b {
            SCRIBBLE_UNLABELED => Label::Unlabeled,
            SCRIBBLE_FOREGROUND => Label::Foreground,
            SCRIBBLE_BACKGROUND => Label::Background,
            byte => {
                return Err(Error::LabelByte {
                    path: path.to_path_buf(),
                    byte,
                    offset: data_offset + i,
                })
            }
        });
    }
    ScribbleMask::new(width, height, labels)
}

/// Strict binary mask: 0 or 255 only.
pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    let (width, height, data, data_offset) = gray_pgm(path)?;
    let mut values = Vec::with_capacity(data.len());
    for (i, b) in data.iter().enumerate() {
        values.push(match *b {
            0 => false,
            255 => true,
            byte => {
                return Err(Error::LabelByte {
                    path: path.to_path_buf(),
                    byte,
                    offset: data_offset + i,
                })
            }
        });
    }
    Ok(BinaryMask { width, height, values })
}

/// Grayscale saliency map scaled back to `[0, 1]`.
pub fn load_map(path: &Path) -> Result<SaliencyMap> {
    let (width, height, data, _) = gray_pgm(path)?;
    SaliencyMap::new(
        width,
        height,
        data.iter().map(|b| *b as f64 / 255.0).collect(),
    )
}

/// Quantize to 8 bits (`round(255·v)`) and write as PGM.
pub fn save_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pnm::write_pgm(path, map.width, map.height, &bytes)
}

pub fn save_scribble(path: &Path, mask: &ScribbleMask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .labels
        .iter()
        .map(|l| match l {
            Label::Unlabeled => SCRIBBLE_UNLABELED,
            Label::Foreground => SCRIBBLE_FOREGROUND,
            Label::Background => SCRIBBLE_BACKGROUND,
        })
        .collect();
    pnm::write_pgm(path, mask.width, mask.height, &bytes)
}

pub fn save_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.values.iter().map(|v| if *v { 255 } else { 0 }).collect();
    pnm::write_pgm(path, mask.width, mask.height, &bytes)
}

/// RGB tensor in `[0, 1]` to interleaved bytes.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image_dims(image)?;
    let plane = h * w;
    let mut rgb = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            rgb[i * 3 + c] = (image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    pnm::write_ppm(path, w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_pgm_is_all_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        pnm::write_pgm(&path, 4, 3, &[0; 12]).unwrap();
        let mask = load_scribble(&path).unwrap();
        assert_eq!(mask.count(Label::Unlabeled), 12);
    }

    #[test]
    fn map_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = SaliencyMap::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        save_map(&path, &map).unwrap();
        let back = load_map(&path).unwrap();
        for (a, b) in map.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn out_of_spec_scribble_byte_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        let mut data = vec![0u8; 9];
        data[4] = 77;
        pnm::write_pgm(&path, 3, 3, &data).unwrap();
        let err = load_scribble(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 77"), "{msg}");
        // header "P5\n3 3\n255\n" is 11 bytes; byte 4 of the data section
        assert!(msg.contains("offset 15"), "{msg}");
    }

    #[test]
    fn manifest_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        pnm::write_ppm(&dir.path().join("a.ppm"), 2, 2, &[0; 12]).unwrap();
        pnm::write_pgm(&dir.path().join("a_s.pgm"), 2, 2, &[0; 4]).unwrap();
        let manifest_path = dir.path().join("manifest.tsv");
        std::fs::write(&manifest_path, "a.ppm\ta_s.pgm\n").unwrap();
        let m = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries[0].id(), "a");
        let s = m.load_sample(0).unwrap();
        assert!(s.full_mask.is_none());

        std::fs::write(&manifest_path, "a.ppm\tmissing.pgm\n").unwrap();
        assert!(DatasetManifest::load(&manifest_path).is_err());
    }
}
