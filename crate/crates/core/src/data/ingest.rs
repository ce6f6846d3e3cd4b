//! Loading manifest records into memory and scanning on-disk layouts.

use std::path::{Path, PathBuf};

use super::{build_manifest, DatasetManifest, SampleRecord, SourceImage, Split};
use crate::error::{Error, Result};
use crate::plane::{ClassMap, ImagePlane};
use crate::pngio::{self, PixelLayout};

/// A decoded crop: raw 8-bit RGB values in `[0, 255]` and an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImagePlane,
    pub label: Option<ClassMap>,
    pub city: String,
}

pub fn read_rgb(path: &Path) -> Result<ImagePlane> {
    let img = pngio::read(path)?;
    let pixels: Vec<f64> = match img.layout {
        PixelLayout::Rgb => img.pixels.iter().map(|&p| p as f64).collect(),
        PixelLayout::Gray => img.pixels.iter().flat_map(|&p| [p as f64; 3]).collect(),
    };
    ImagePlane::from_vec(img.height, img.width, 3, pixels)
}

pub fn write_rgb(image: &ImagePlane, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("{}-channel image written as rgb", image.channels())));
    }
    let bytes: Vec<u8> = image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    pngio::write(path, image.width(), image.height(), PixelLayout::Rgb, &bytes)
}

/// Reads a label image. Gray labels hold class indices, except that a
/// two-class label stored as 0/255 is thresholded. RGB labels map
/// blue-dominant pixels to road (1), red-dominant to building (2) and the
/// rest to background (0).
pub fn read_label(path: &Path, num_classes: usize) -> Result<ClassMap> {
    let img = pngio::read(path)?;
    let classes: Vec<u8> = match img.layout {
        PixelLayout::Gray => {
            let max = img.pixels.iter().copied().max().unwrap_or(0) as usize;
            if max >= num_classes.max(2) && num_classes <= 2 {
                img.pixels.iter().map(|&p| (p > 127) as u8).collect()
            } else {
                img.pixels
            }
        }
        PixelLayout::Rgb => img
            .pixels
            .chunks(3)
            .map(|p| {
                let (r, g, b) = (p[0] as i32, p[1] as i32, p[2] as i32);
                if b > 127 && b > r + 40 && b > g + 40 {
                    1
                } else if r > 127 && r > g + 40 && r > b + 40 {
                    2
                } else {
                    0
                }
            })
            .collect(),
    };
    ClassMap::from_vec(img.height, img.width, classes)
}

pub fn write_label(label: &ClassMap, path: &Path) -> Result<()> {
    pngio::write(path, label.width(), label.height(), PixelLayout::Gray, label.classes())
}

fn resolve(root: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Reads and crops one record. Relative references resolve against `root`.
pub fn load_record(record: &SampleRecord, crop: usize, num_classes: usize, root: &Path) -> Result<Sample> {
    let full = read_rgb(&resolve(root, &record.image_ref))?;
    let (r, c) = record.crop_offset;
    let (h, w) = if crop == 0 { (full.height(), full.width()) } else { (crop, crop) };
    let image = full.crop(r, c, h, w)?;
    let label = match &record.label_ref {
        Some(l) => Some(read_label(&resolve(root, l), num_classes)?.crop(r, c, h, w)?),
        None => None,
    };
    Ok(Sample {
        id: format!("{}@{},{}", record.source_id, r, c),
        image,
        label,
        city: record.city.clone(),
    })
}

pub fn load_samples(manifest: &DatasetManifest, root: &Path) -> Result<Vec<Sample>> {
    let k = manifest.class_names.len();
    manifest
        .records
        .iter()
        .map(|r| load_record(r, manifest.crop_size, k, root))
        .collect()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn dims(path: &Path) -> Result<(usize, usize)> {
    let img = pngio::read(path)?;
    Ok((img.height, img.width))
}

/// DeepGlobe-style folder: `<id>.png` or `<id>_sat.png` next to an optional
/// `<id>_mask.png`.
pub fn scan_deepglobe(dir: &Path) -> Result<Vec<SourceImage>> {
    let mut sources = Vec::new();
    for path in png_files(dir)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem.ends_with("_mask") {
            continue;
        }
        let id = stem.strip_suffix("_sat").unwrap_or(stem).to_string();
        let label = dir.join(format!("{id}_mask.png"));
        let (height, width) = dims(&path)?;
        sources.push(SourceImage {
            image_ref: path.to_string_lossy().into_owned(),
            label_ref: label.exists().then(|| label.to_string_lossy().into_owned()),
            id,
            height,
            width,
            city: "-".into(),
        });
    }
    Ok(sources)
}

/// CITY-OSM-style tree: one folder per city holding `<name>_image.png` and
/// `<name>_labels.png`.
pub fn scan_city_osm(root: &Path) -> Result<Vec<SourceImage>> {
    let mut cities: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cities.sort();
    let mut sources = Vec::new();
    for dir in cities {
        let city = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for path in png_files(&dir)? {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some(name) = stem.strip_suffix("_image") else { continue };
            let label = dir.join(format!("{name}_labels.png"));
            let (height, width) = dims(&path)?;
            sources.push(SourceImage {
                id: format!("{city}/{name}"),
                image_ref: path.to_string_lossy().into_owned(),
                label_ref: label.exists().then(|| label.to_string_lossy().into_owned()),
                height,
                width,
                city: city.clone(),
            });
        }
    }
    Ok(sources)
}

/// Groups sources by size and tiles each group, so one manifest can hold
/// images of several sizes.
pub fn manifest_from_sources(
    sources: &[SourceImage],
    crop: usize,
    overlap: usize,
    split: Split,
) -> Result<DatasetManifest> {
    let mut sizes: Vec<(usize, usize)> = sources.iter().map(|s| (s.height, s.width)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out: Option<DatasetManifest> = None;
    for size in sizes {
        let group: Vec<SourceImage> = sources
            .iter()
            .filter(|s| (s.height, s.width) == size)
            .cloned()
            .collect();
        let m = build_manifest(&group, crop, overlap, split)?;
        match out.as_mut() {
            Some(o) => o.records.extend(m.records),
            None => out = Some(m),
        }
    }
    out.ok_or_else(|| Error::EmptyInput("no source images found".into()))
}
