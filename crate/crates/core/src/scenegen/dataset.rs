//! On-disk dataset format.
//!
//! Layout of a dataset root directory:
//! - `manifest.json` — sample ids in order, split assignment, attributes
//! - `images/<id>.png` — lossless 8-bit RGB raster
//! - `masks/<id>.mask` — integer label map, 16-byte header:
//!   magic `SKMK` (4 bytes), dtype code u32 LE (2 = u16), H u32 LE,
//!   W u32 LE, followed by H*W little-endian values (0 = background).

use super::{ObjectAttributes, SceneSample};
use crate::error::{Result, SlotError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MASK_MAGIC: &[u8; 4] = b"SKMK";
const DTYPE_U16: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: u64,
    split: Split,
    attributes: Vec<[String; 4]>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    samples: Vec<ManifestEntry>,
}

/// A sample held compactly in memory; images stay 8-bit until used.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub id: u64,
    pub image_u8: Array3<u8>,
    pub label_map: Array2<u16>,
    pub attributes: Vec<ObjectAttributes>,
    pub split: Split,
}

impl StoredSample {
    pub fn from_scene(scene: &SceneSample, split: Split) -> Self {
        StoredSample {
            id: scene.id,
            image_u8: scene.image.mapv(|v| (v * 255.0).round() as u8),
            label_map: scene.label_map.clone(),
            attributes: scene.attributes.clone(),
            split,
        }
    }

    pub fn to_scene(&self) -> SceneSample {
        SceneSample {
            id: self.id,
            image: self.image_u8.mapv(|v| v as f64 / 255.0),
            label_map: self.label_map.clone(),
            attributes: self.attributes.clone(),
        }
    }
}

/// Read-only dataset; samples appear in manifest order.
#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<StoredSample>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn write_mask(path: &Path, mask: &Array2<u16>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    w.write_u32::<LittleEndian>(DTYPE_U16)?;
    w.write_u32::<LittleEndian>(mask.nrows() as u32)?;
    w.write_u32::<LittleEndian>(mask.ncols() as u32)?;
    for &v in mask.iter() {
        w.write_u16::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<Array2<u16>> {
    let err = |msg: &str| SlotError::Dataset {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| SlotError::Dataset {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
    if &magic != MASK_MAGIC {
        return Err(err("bad magic"));
    }
    let dtype = r.read_u32::<LittleEndian>().map_err(|_| err("truncated header"))?;
    if dtype != DTYPE_U16 {
        return Err(err("unsupported dtype code"));
    }
    let h = r.read_u32::<LittleEndian>().map_err(|_| err("truncated header"))? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(|_| err("truncated header"))? as usize;
    let mut data = vec![0u16; h * w];
    r.read_u16_into::<LittleEndian>(&mut data)
        .map_err(|_| err("truncated mask data"))?;
    Array2::from_shape_vec((h, w), data).map_err(|_| err("bad mask shape"))
}

fn image_path(root: &Path, id: u64) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, id: u64) -> PathBuf {
    root.join("masks").join(format!("{id}.mask"))
}

/// Write a dataset directory: manifest plus per-sample image and mask files.
pub fn save_dataset(root: &Path, samples: &[StoredSample]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w, _) = s.image_u8.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for ((y, x, c), &v) in s.image_u8.indexed_iter() {
            img.get_pixel_mut(x as u32, y as u32).0[c] = v;
        }
        img.save(image_path(root, s.id)).map_err(|e| SlotError::Dataset {
            path: image_path(root, s.id).display().to_string(),
            msg: e.to_string(),
        })?;
        write_mask(&mask_path(root, s.id), &s.label_map)?;
        entries.push(ManifestEntry {
            id: s.id,
            split: s.split,
            attributes: s
                .attributes
                .iter()
                .map(|a| {
                    [
                        a.size.as_str().to_string(),
                        a.color.as_str().to_string(),
                        a.texture.as_str().to_string(),
                        a.shape.as_str().to_string(),
                    ]
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        version: 1,
        samples: entries,
    };
    let mut f = BufWriter::new(fs::File::create(root.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| SlotError::Dataset {
        path: root.join("manifest.json").display().to_string(),
        msg: e.to_string(),
    })?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Load a dataset directory, validating mask/attribute consistency.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| SlotError::Dataset {
        path: manifest_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SlotError::Dataset {
        path: manifest_path.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.version != 1 {
        return Err(SlotError::Dataset {
            path: manifest_path.display().to_string(),
            msg: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let ipath = image_path(root, entry.id);
        let img = image::open(&ipath)
            .map_err(|e| SlotError::Dataset {
                path: ipath.display().to_string(),
                msg: e.to_string(),
            })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let image_u8 = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c]
        });
        let label_map = read_mask(&mask_path(root, entry.id))?;
        if label_map.dim() != (h, w) {
            return Err(SlotError::Dataset {
                path: mask_path(root, entry.id).display().to_string(),
                msg: "mask size differs from image".into(),
            });
        }
        let attributes = entry
            .attributes
            .iter()
            .map(|[s, c, t, sh]| {
                Ok(ObjectAttributes {
                    size: super::Size::parse(s)?,
                    color: super::Color::parse(c)?,
                    texture: super::Texture::parse(t)?,
                    shape: super::Shape::parse(sh)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let max_label = label_map.iter().copied().max().unwrap_or(0) as usize;
        if max_label != attributes.len() {
            return Err(SlotError::Validation(format!(
                "sample {}: {} mask labels but {} attribute tuples",
                entry.id,
                max_label,
                attributes.len()
            )));
        }
        samples.push(StoredSample {
            id: entry.id,
            image_u8,
            label_map,
            attributes,
            split: entry.split,
        });
    }
    Ok(Dataset { samples })
}

/// Generate `n` scenes and assign splits by fraction in manifest order.
pub fn generate_split_dataset(
    spec: &super::GeneratorSpec,
    n: usize,
    train_frac: f64,
    val_frac: f64,
    base_seed: u64,
) -> Result<Vec<StoredSample>> {
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let scene = super::generate_scene(base_seed.wrapping_add(i as u64), spec)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.push(StoredSample::from_scene(&scene, split));
    }
    Ok(out)
}
