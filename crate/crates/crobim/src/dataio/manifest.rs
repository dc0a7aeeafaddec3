//! Line-delimited triplet manifests and PNG image/mask loading.
//!
//! One UTF-8 record per line, tab-separated:
//! `id<TAB>image<TAB>mask<TAB>split<TAB>category<TAB>expression`,
//! with image/mask paths relative to the manifest's directory.

use crate::config::ModelConfig;
use crate::dataio::vocab;
use crate::encoders::{Triplet, TripletMeta};
use crate::error::{CrobimError, Result};
use ndarray::{Array2, Array3};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CrobimError::InvalidArgument(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub category: String,
    pub expression: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parse and validate: fields well-formed, ids unique, referenced files
    /// present.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| CrobimError::Data {
            record: path.display().to_string(),
            detail: format!("cannot read manifest: {e}"),
        })?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(CrobimError::Data {
                    record: format!("{}:{}", path.display(), lineno + 1),
                    detail: format!("expected 6 tab-separated fields, got {}", fields.len()),
                });
            }
            let record = ManifestRecord {
                id: fields[0].to_string(),
                image: base_dir.join(fields[1]),
                mask: base_dir.join(fields[2]),
                split: Split::parse(fields[3])?,
                category: fields[4].to_string(),
                expression: fields[5].to_string(),
            };
            if !seen.insert(record.id.clone()) {
                return Err(CrobimError::Data {
                    record: record.id,
                    detail: "duplicate record id across splits".into(),
                });
            }
            for (what, file) in [("image", &record.image), ("mask", &record.mask)] {
                if !file.exists() {
                    return Err(CrobimError::Data {
                        record: record.id.clone(),
                        detail: format!("{what} file {} does not exist", file.display()),
                    });
                }
            }
            records.push(record);
        }
        Ok(Manifest { records, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            let rel = |p: &Path| {
                p.strip_prefix(&self.base_dir)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                rel(&r.image),
                rel(&r.mask),
                r.split,
                r.category,
                r.expression
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn load_image_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| CrobimError::Data {
            record: path.display().to_string(),
            detail: format!("cannot decode image: {e}"),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Load a mask and binarize it (nonzero -> 1). Returns the mask and whether
/// non-binary values were present.
pub fn load_mask(path: &Path) -> Result<(Array2<u8>, bool)> {
    let img = image::open(path)
        .map_err(|e| CrobimError::Data {
            record: path.display().to_string(),
            detail: format!("cannot decode mask: {e}"),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    let mut non_binary = false;
    for (x, y, px) in img.enumerate_pixels() {
        let v = px.0[0];
        if v != 0 && v != 255 {
            non_binary = true;
        }
        out[[y as usize, x as usize]] = (v != 0) as u8;
    }
    Ok((out, non_binary))
}

pub fn save_image_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| CrobimError::Data {
        record: path.display().to_string(),
        detail: format!("cannot encode image: {e}"),
    })
}

pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] != 0 { 255 } else { 0 }]),
            );
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| CrobimError::Data {
        record: path.display().to_string(),
        detail: format!("cannot encode mask: {e}"),
    })
}

/// Load the triplets of one split in manifest order, decoding and
/// binarizing as we go.
pub fn load_manifest(path: &Path, split: Split, config: &ModelConfig) -> Result<Vec<Triplet>> {
    let manifest = Manifest::load(path)?;
    let mut triplets = Vec::new();
    for record in manifest.split(split) {
        let image = load_image_rgb(&record.image).map_err(|e| CrobimError::Data {
            record: record.id.clone(),
            detail: e.to_string(),
        })?;
        let (mask, non_binary) = load_mask(&record.mask).map_err(|e| CrobimError::Data {
            record: record.id.clone(),
            detail: e.to_string(),
        })?;
        if non_binary {
            log::warn!(
                "record {}: mask {} has non-binary values, binarized",
                record.id,
                record.mask.display()
            );
        }
        let triplet = Triplet {
            image,
            expression: vocab::tokenize(&record.expression),
            mask,
            meta: TripletMeta {
                category: record.category.clone(),
                source_id: record.id.clone(),
                expression_text: record.expression.clone(),
            },
        };
        triplet.validate(config).map_err(|e| CrobimError::Data {
            record: record.id.clone(),
            detail: e.to_string(),
        })?;
        triplets.push(triplet);
    }
    Ok(triplets)
}
