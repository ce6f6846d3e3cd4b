//! Dataset manifests, tiling and subsetting, augmentation, and the
//! synthetic aerial-road generator.

pub mod augment;
pub mod ingest;
pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng;

pub use augment::{augment, five_crop, normalize, ChannelStats, Transform};
pub use ingest::{load_samples, Sample};
pub use synthetic::{generate_synthetic_scene, Style, SyntheticSceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
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

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One crop of one source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_ref: String,
    pub label_ref: Option<String>,
    pub split: Split,
    pub source_id: String,
    /// `(row, col)` of the crop's top-left corner in the source image.
    pub crop_offset: (usize, usize),
    /// City or synthetic style tag; `-` when unknown.
    pub city: String,
}

/// A full-size image before cropping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub id: String,
    pub image_ref: String,
    pub label_ref: Option<String>,
    pub height: usize,
    pub width: usize,
    pub city: String,
}

impl SourceImage {
    /// A source with no backing file, for cardinality checks.
    pub fn placeholder(id: impl Into<String>, height: usize, width: usize) -> Self {
        let id = id.into();
        SourceImage {
            image_ref: format!("{id}.png"),
            label_ref: Some(format!("{id}_mask.png")),
            id,
            height,
            width,
            city: "-".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub crop_size: usize,
    pub overlap: usize,
    pub class_names: Vec<String>,
    /// cm per pixel; informational only.
    pub ground_sampling_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetLevel {
    Full,
    Half,
    Quarter,
}

impl SubsetLevel {
    pub fn keep(self, n: usize) -> usize {
        match self {
            SubsetLevel::Full => n,
            SubsetLevel::Half => n.div_ceil(2),
            SubsetLevel::Quarter => n.div_ceil(4),
        }
    }
}

impl fmt::Display for SubsetLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsetLevel::Full => "full",
            SubsetLevel::Half => "half",
            SubsetLevel::Quarter => "quarter",
        })
    }
}

impl FromStr for SubsetLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SubsetLevel::Full),
            "half" => Ok(SubsetLevel::Half),
            "quarter" => Ok(SubsetLevel::Quarter),
            other => Err(Error::Config(format!("unknown subset level `{other}`"))),
        }
    }
}

fn axis_offsets(size: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..=(size - crop) / stride).map(|i| i * stride).collect();
    let last = *offs.last().expect("at least one offset");
    if last + crop < size {
        // flush final tile to the far edge
        offs.push(size - crop);
    }
    offs
}

/// Top-left corners of `crop×crop` tiles on a grid with stride
/// `crop − overlap`. When the grid does not end on the far edge, one more
/// tile flush with that edge is added.
pub fn crop_tiles(source: (usize, usize), crop: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let (h, w) = source;
    if crop == 0 || overlap >= crop {
        return Err(Error::InvalidStride(format!(
            "overlap {overlap} must be smaller than crop {crop}"
        )));
    }
    if crop > h || crop > w {
        return Err(Error::InvalidStride(format!("crop {crop} exceeds {h}x{w} source")));
    }
    let stride = crop - overlap;
    let rows = axis_offsets(h, crop, stride);
    let cols = axis_offsets(w, crop, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// One record per (source, tile). All sources must share one size.
pub fn build_manifest(
    sources: &[SourceImage],
    crop: usize,
    overlap: usize,
    split: Split,
) -> Result<DatasetManifest> {
    let first = sources
        .first()
        .ok_or_else(|| Error::EmptyInput("no source images".into()))?;
    if let Some(odd) = sources
        .iter()
        .find(|s| (s.height, s.width) != (first.height, first.width))
    {
        return Err(Error::HeterogeneousInput(format!(
            "{} is {}x{}, {} is {}x{}",
            first.id, first.height, first.width, odd.id, odd.height, odd.width
        )));
    }
    let tiles = crop_tiles((first.height, first.width), crop, overlap)?;
    let mut records = Vec::with_capacity(sources.len() * tiles.len());
    for s in sources {
        for &offset in &tiles {
            records.push(SampleRecord {
                image_ref: s.image_ref.clone(),
                label_ref: s.label_ref.clone(),
                split,
                source_id: s.id.clone(),
                crop_offset: offset,
                city: s.city.clone(),
            });
        }
    }
    Ok(DatasetManifest {
        records,
        crop_size: crop,
        overlap,
        class_names: vec!["background".into(), "road".into()],
        ground_sampling_distance: None,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct source ids in first-seen order.
    pub fn source_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.source_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> DatasetManifest {
        DatasetManifest {
            records,
            ..self.clone()
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&SampleRecord) -> bool) -> DatasetManifest {
        self.with_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        self.filter(|r| r.split == split)
    }

    /// Records whose city tag is (or is not, with `exclude`) in `cities`.
    pub fn filter_cities(&self, cities: &[&str], exclude: bool) -> DatasetManifest {
        self.filter(|r| cities.contains(&r.city.as_str()) != exclude)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# roadfill-manifest v1\n");
        out.push_str(&format!("# crop_size={}\n", self.crop_size));
        out.push_str(&format!("# overlap={}\n", self.overlap));
        out.push_str(&format!("# class_names={}\n", self.class_names.join(",")));
        if let Some(gsd) = self.ground_sampling_distance {
            out.push_str(&format!("# gsd_cm={gsd}\n"));
        }
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.image_ref,
                r.label_ref.as_deref().unwrap_or("-"),
                r.split,
                r.source_id,
                r.crop_offset.0,
                r.crop_offset.1,
                r.city
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<DatasetManifest> {
        let mut m = DatasetManifest {
            records: Vec::new(),
            crop_size: 0,
            overlap: 0,
            class_names: vec!["background".into(), "road".into()],
            ground_sampling_distance: None,
        };
        for (i, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 1));
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k {
                        "crop_size" => m.crop_size = v.parse().map_err(|_| bad("crop_size"))?,
                        "overlap" => m.overlap = v.parse().map_err(|_| bad("overlap"))?,
                        "class_names" => m.class_names = v.split(',').map(str::to_string).collect(),
                        "gsd_cm" => m.ground_sampling_distance = Some(v.parse().map_err(|_| bad("gsd_cm"))?),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(&format!("expected 7 tab-separated fields, found {}", f.len())));
            }
            m.records.push(SampleRecord {
                image_ref: f[0].to_string(),
                label_ref: (f[1] != "-").then(|| f[1].to_string()),
                split: f[2].parse().map_err(|_| bad("split"))?,
                source_id: f[3].to_string(),
                crop_offset: (
                    f[4].parse().map_err(|_| bad("row"))?,
                    f[5].parse().map_err(|_| bad("col"))?,
                ),
                city: f[6].to_string(),
            });
        }
        if m.class_names.is_empty() {
            return Err(Error::format(path, "no class names"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// Keeps a seeded uniform sample of source images (not crops) and all of
/// their records.
///
/// Sources are ranked by a seeded hash of their id and the lowest-ranked
/// `⌈n/2⌉` (or `⌈n/4⌉`) are kept, so for one seed the quarter subset is
/// contained in the half subset, and halving a half subset gives the
/// quarter subset.
pub fn subset_halving(manifest: &DatasetManifest, level: SubsetLevel, seed: u64) -> Result<DatasetManifest> {
    let sources = manifest.source_ids();
    if sources.is_empty() {
        return Err(Error::EmptyInput("manifest has no records".into()));
    }
    let mut ranked: Vec<(u64, &str)> = sources
        .iter()
        .map(|&id| (rng::derive_seed(seed, &[rng::hash_str(id)]), id))
        .collect();
    ranked.sort_unstable();
    let kept: BTreeSet<&str> = ranked
        .iter()
        .take(level.keep(sources.len()))
        .map(|&(_, id)| id)
        .collect();
    Ok(manifest.filter(|r| kept.contains(r.source_id.as_str())))
}
