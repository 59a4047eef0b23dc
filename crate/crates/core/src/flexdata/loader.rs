//! Directory datasets described by a CSV manifest.
//!
//! Header: `id,rgb,depth,ir,label,split`. Image paths are relative to the
//! dataset root; an empty `depth` or `ir` cell marks the modality absent.
//! Labels are `1`/`live` or `0`/`spoof`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::sample::{Label, MultimodalSample, Plane};
use crate::error::DataError;

pub const MANIFEST_HEADER: [&str; 6] = ["id", "rgb", "depth", "ir", "label", "split"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub rgb: String,
    pub depth: String,
    pub ir: String,
    pub label: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub sample: MultimodalSample,
    pub split: String,
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "live" => Some(Label::Live),
        "0" | "spoof" => Some(Label::Spoof),
        _ => None,
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let bad = |reason: String| DataError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(format!("header must be `{}`", MANIFEST_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ManifestRow>() {
        let row = rec.map_err(|e| bad(e.to_string()))?;
        if parse_label(&row.label).is_none() {
            return Err(bad(format!("row `{}`: bad label `{}`", row.id, row.label)));
        }
        if row.rgb.is_empty() {
            return Err(bad(format!("row `{}`: rgb path is required", row.id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn load_image(root: &Path, rel: &str, size: usize, id: &str) -> Result<DynamicImage, DataError> {
    let path = root.join(rel);
    let img = image::open(&path).map_err(|e| DataError::Row {
        id: id.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    let s = size as u32;
    Ok(if img.width() == s && img.height() == s {
        img
    } else {
        img.resize_exact(s, s, FilterType::Triangle)
    })
}

fn rgb_plane(img: &DynamicImage) -> Plane {
    let buf = img.to_rgb32f();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Plane::from_fn(3, h, w, |c, y, x| buf.get_pixel(x as u32, y as u32)[c])
}

fn gray_plane(img: &DynamicImage) -> Plane {
    let buf = img.to_luma32f();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Plane::from_fn(1, h, w, |_, y, x| buf.get_pixel(x as u32, y as u32)[0])
}

/// Decodes every manifest row, resizing to `image_size` and scaling to `[0, 1]`.
pub fn load_directory_dataset(
    root: &Path,
    manifest: &Path,
    image_size: usize,
) -> Result<Vec<LoadedSample>, DataError> {
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        log::warn!("manifest {} lists no samples", manifest.display());
    }
    rows.into_iter()
        .map(|row| {
            let optional = |rel: &str| -> Result<Option<Plane>, DataError> {
                if rel.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(gray_plane(&load_image(root, rel, image_size, &row.id)?)))
                }
            };
            let rgb = rgb_plane(&load_image(root, &row.rgb, image_size, &row.id)?);
            let sample = MultimodalSample {
                id: row.id.clone(),
                rgb,
                depth: optional(&row.depth)?,
                ir: optional(&row.ir)?,
                label: parse_label(&row.label).expect("validated in read_manifest"),
            };
            Ok(LoadedSample {
                sample,
                split: row.split,
            })
        })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(path: &Path, plane: &Plane) -> Result<(), DataError> {
    let (w, h) = (plane.width as u32, plane.height as u32);
    let res = if plane.channels == 3 {
        RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| to_u8(plane.at(c, y, x))))
        })
        .save(path)
    } else {
        GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(plane.at(0, y as usize, x as usize))])).save(path)
    };
    res.map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

/// Writes PNGs under `root/<split>/` plus `root/manifest.csv`; returns the
/// manifest path.
pub fn write_directory_dataset(root: &Path, samples: &[LoadedSample]) -> Result<PathBuf, DataError> {
    let manifest = root.join("manifest.csv");
    let mut wtr = csv::Writer::from_path(&manifest).map_err(|e| DataError::Manifest {
        path: manifest.clone(),
        reason: e.to_string(),
    })?;
    for ls in samples {
        let s = &ls.sample;
        let dir = root.join(&ls.split);
        fs::create_dir_all(&dir).map_err(|e| DataError::from((dir.clone(), e)))?;
        let write = |plane: Option<&Plane>, kind: &str| -> Result<String, DataError> {
            match plane {
                None => Ok(String::new()),
                Some(p) => {
                    let rel = format!("{}/{}_{kind}.png", ls.split, s.id);
                    save_png(&root.join(&rel), p)?;
                    Ok(rel)
                }
            }
        };
        let row = ManifestRow {
            id: s.id.clone(),
            rgb: write(Some(&s.rgb), "rgb")?,
            depth: write(s.depth.as_ref(), "depth")?,
            ir: write(s.ir.as_ref(), "ir")?,
            label: s.label.class().to_string(),
            split: ls.split.clone(),
        };
        wtr.serialize(row).map_err(|e| DataError::Invalid(e.to_string()))?;
    }
    wtr.flush().map_err(|e| DataError::from((manifest.clone(), e)))?;
    Ok(manifest)
}
