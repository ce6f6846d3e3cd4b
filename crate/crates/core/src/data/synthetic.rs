//! Procedural aerial scenes with exact road labels.
//!
//! A scene is a textured ground layer, rectangular buildings, road-coloured
//! distractors that are *not* roads (parking lots, dirt tracks), and straight
//! edge-to-edge roads drawn last. The label is 1 exactly on road pixels.
//! Each [`Style`] has its own palette and texture statistics, which gives a
//! measurable domain gap between styles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ingest::{write_label, write_rgb, Sample};
use super::{DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::plane::{BinaryMask, ClassMap, ImagePlane};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    A,
    B,
    C,
    D,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::A, Style::B, Style::C, Style::D];

    fn palette(self) -> Palette {
        match self {
            // humid, green
            Style::A => Palette {
                ground: [88.0, 118.0, 64.0],
                ground_var: [26.0, 30.0, 18.0],
                grain: 9.0,
                texture_cell: 8,
                roofs: &[[150.0, 80.0, 60.0], [190.0, 180.0, 170.0], [120.0, 110.0, 105.0]],
                road: [122.0, 120.0, 116.0],
                marking: [225.0, 225.0, 210.0],
                lot: [112.0, 110.0, 108.0],
                track: [150.0, 125.0, 90.0],
            },
            // arid, tan
            Style::B => Palette {
                ground: [176.0, 150.0, 110.0],
                ground_var: [22.0, 20.0, 16.0],
                grain: 12.0,
                texture_cell: 6,
                roofs: &[[205.0, 195.0, 180.0], [160.0, 120.0, 90.0], [140.0, 140.0, 135.0]],
                road: [100.0, 96.0, 92.0],
                marking: [240.0, 230.0, 160.0],
                lot: [110.0, 104.0, 98.0],
                track: [196.0, 170.0, 128.0],
            },
            // dense urban, grey
            Style::C => Palette {
                ground: [132.0, 130.0, 122.0],
                ground_var: [20.0, 20.0, 20.0],
                grain: 10.0,
                texture_cell: 4,
                roofs: &[[170.0, 165.0, 160.0], [95.0, 90.0, 88.0], [180.0, 100.0, 80.0]],
                road: [80.0, 80.0, 84.0],
                marking: [235.0, 235.0, 235.0],
                lot: [92.0, 92.0, 96.0],
                track: [150.0, 140.0, 120.0],
            },
            // cold, bluish light; held out for domain-shift runs
            Style::D => Palette {
                ground: [150.0, 162.0, 170.0],
                ground_var: [24.0, 22.0, 22.0],
                grain: 11.0,
                texture_cell: 5,
                roofs: &[[110.0, 60.0, 55.0], [200.0, 205.0, 210.0], [70.0, 75.0, 85.0]],
                road: [62.0, 66.0, 78.0],
                marking: [250.0, 250.0, 250.0],
                lot: [74.0, 78.0, 88.0],
                track: [170.0, 165.0, 150.0],
            },
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Style::A),
            "B" => Ok(Style::B),
            "C" => Ok(Style::C),
            "D" => Ok(Style::D),
            other => Err(Error::Config(format!("unknown style `{other}`"))),
        }
    }
}

struct Palette {
    ground: [f64; 3],
    ground_var: [f64; 3],
    grain: f64,
    texture_cell: usize,
    roofs: &'static [[f64; 3]],
    road: [f64; 3],
    marking: [f64; 3],
    lot: [f64; 3],
    track: [f64; 3],
}

/// A straight band between two points given as continuous `(y, x)`
/// coordinates, where pixel `(r, c)` covers `[r, r+1) × [c, c+1)`. The band
/// has flat ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPath {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub width: f64,
}

impl RoadPath {
    pub fn horizontal(top_row: usize, width: usize, canvas: usize) -> Self {
        let y = top_row as f64 + width as f64 / 2.0;
        RoadPath {
            start: (y, 0.0),
            end: (y, canvas as f64),
            width: width as f64,
        }
    }

    pub fn length(&self) -> f64 {
        (self.end.0 - self.start.0).hypot(self.end.1 - self.start.1)
    }

    /// `(along, across)` coordinates of a pixel center relative to the band,
    /// or `None` when the center lies outside it.
    fn locate(&self, y: usize, x: usize) -> Option<(f64, f64)> {
        let len = self.length();
        if len == 0.0 {
            return None;
        }
        let (uy, ux) = ((self.end.0 - self.start.0) / len, (self.end.1 - self.start.1) / len);
        let (dy, dx) = (y as f64 + 0.5 - self.start.0, x as f64 + 0.5 - self.start.1);
        let along = dy * uy + dx * ux;
        let across = dx * uy - dy * ux;
        (along > 0.0 && along < len && across.abs() < self.width / 2.0).then_some((along, across))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    /// Side of the square canvas in pixels.
    pub canvas: usize,
    pub road_count: usize,
    /// Inclusive road width range in pixels.
    pub road_width_range: (usize, usize),
    pub seed: u64,
    /// Share of the canvas covered by buildings, roughly.
    pub building_density: f64,
    /// Expected number of road-coloured non-road objects.
    pub distractors: f64,
    pub style: Style,
    /// Explicit roads; when set, `road_count` and the width range are ignored.
    pub roads: Option<Vec<RoadPath>>,
}

impl SyntheticSceneSpec {
    pub fn new(canvas: usize, seed: u64, style: Style) -> Self {
        SyntheticSceneSpec {
            canvas,
            road_count: 2,
            road_width_range: (3, 6),
            seed,
            building_density: 0.15,
            distractors: 1.0,
            style,
            roads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.road_width_range;
        if self.canvas == 0 {
            return Err(Error::Config("canvas must be positive".into()));
        }
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad road width range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.building_density) {
            return Err(Error::Config("building density must lie in [0, 1]".into()));
        }
        if !(self.distractors.is_finite() && self.distractors >= 0.0) {
            return Err(Error::Config("distractor count must be non-negative".into()));
        }
        if let Some(roads) = &self.roads {
            if roads.iter().any(|r| !(r.width >= 1.0)) {
                return Err(Error::Config("explicit roads need width >= 1".into()));
            }
        }
        Ok(())
    }

    /// Widest road in pixels.
    pub fn max_width(&self) -> f64 {
        match &self.roads {
            Some(r) => r.iter().map(|r| r.width).fold(0.0, f64::max),
            None => self.road_width_range.1 as f64,
        }
    }

    pub fn effective_road_count(&self) -> usize {
        self.roads.as_ref().map_or(self.road_count, Vec::len)
    }
}

fn point_on_side(side: u8, t: f64, n: f64) -> (f64, f64) {
    match side {
        0 => (0.0, t * n),
        1 => (t * n, n),
        2 => (n, t * n),
        _ => (t * n, 0.0),
    }
}

fn random_road(rng: &mut ChaCha8Rng, canvas: usize, widths: (usize, usize)) -> RoadPath {
    let n = canvas as f64;
    let a = rng.gen_range(0..4u8);
    let b = (a + rng.gen_range(1..4u8)) % 4;
    RoadPath {
        start: point_on_side(a, rng.gen_range(0.1..0.9), n),
        end: point_on_side(b, rng.gen_range(0.1..0.9), n),
        width: rng.gen_range(widths.0..=widths.1) as f64,
    }
}

/// Bilinear value noise in `[-1, 1]` with lattice spacing `cell`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let cells = size / cell + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * cells + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Renders a scene. Returns raw 8-bit RGB values (integers in `[0, 255]`)
/// and the road mask.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<(ImagePlane, BinaryMask)> {
    spec.validate()?;
    let n = spec.canvas;
    let pal = spec.style.palette();
    let mut rng = rng::stream(spec.seed, &[0x7363_656e]);
    let mut img = ImagePlane::zeros(n, n, 3);

    // ground
    let coarse = value_noise(&mut rng, n, (n / pal.texture_cell).max(2));
    let fine = value_noise(&mut rng, n, 2);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            for c in 0..3 {
                let v = pal.ground[c] + pal.ground_var[c] * coarse[i] + 0.4 * pal.grain * fine[i];
                img.set(y, x, c, v);
            }
        }
    }

    // buildings
    let side = |rng: &mut ChaCha8Rng| rng.gen_range((n / 16).max(2)..=(n / 6).max(3));
    let mean_area = ((n / 16).max(2) + (n / 6).max(3)).pow(2) as f64 / 4.0;
    let buildings = (spec.building_density * (n * n) as f64 / mean_area).round() as usize;
    for _ in 0..buildings {
        let (bh, bw) = (side(&mut rng), side(&mut rng));
        let (r0, c0) = (rng.gen_range(0..n.saturating_sub(bh).max(1)), rng.gen_range(0..n.saturating_sub(bw).max(1)));
        let roof = pal.roofs[rng.gen_range(0..pal.roofs.len())];
        let shade = rng.gen_range(-12.0..12.0);
        for y in r0..(r0 + bh).min(n) {
            for x in c0..(c0 + bw).min(n) {
                let edge = y == r0 + bh - 1 || x == c0 + bw - 1;
                for c in 0..3 {
                    img.set(y, x, c, roof[c] + shade - if edge { 35.0 } else { 0.0 });
                }
            }
        }
    }

    // distractors: parking lots and dirt tracks look like roads but are not
    let count = spec.distractors.floor() as usize + rng.gen_bool(spec.distractors.fract()) as usize;
    for _ in 0..count {
        if rng.gen_bool(0.5) {
            let (lh, lw) = (rng.gen_range(n / 8..=n / 4).max(2), rng.gen_range(n / 8..=n / 4).max(2));
            let (r0, c0) = (rng.gen_range(0..n - lh.min(n - 1)), rng.gen_range(0..n - lw.min(n - 1)));
            for y in r0..(r0 + lh).min(n) {
                for x in c0..(c0 + lw).min(n) {
                    for c in 0..3 {
                        img.set(y, x, c, pal.lot[c]);
                    }
                }
            }
        } else {
            let mut track = random_road(&mut rng, n, spec.road_width_range);
            track.width = (track.width * 0.6).max(1.0);
            for y in 0..n {
                for x in 0..n {
                    if track.locate(y, x).is_some() {
                        for c in 0..3 {
                            img.set(y, x, c, pal.track[c]);
                        }
                    }
                }
            }
        }
    }

    // roads
    let roads = match &spec.roads {
        Some(r) => r.clone(),
        None => (0..spec.road_count)
            .map(|_| random_road(&mut rng, n, spec.road_width_range))
            .collect(),
    };
    let mut mask = BinaryMask::zeros(n, n);
    for road in &roads {
        let dashed = road.width >= 4.0;
        for y in 0..n {
            for x in 0..n {
                let Some((along, across)) = road.locate(y, x) else { continue };
                mask.set(y, x, true);
                let marking = dashed && across.abs() < 0.5 && (along / 3.0) as usize % 2 == 0;
                let colour = if marking { pal.marking } else { pal.road };
                for c in 0..3 {
                    img.set(y, x, c, colour[c]);
                }
            }
        }
    }

    // sensor grain over everything
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-1.0..1.0) * pal.grain).round().clamp(0.0, 255.0);
    }
    Ok((img, mask))
}

/// Settings for a whole synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub canvas: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    /// Styles cycled through by scene index, per split.
    pub train_styles: Vec<Style>,
    pub val_styles: Vec<Style>,
}

impl SyntheticDatasetSpec {
    pub fn scene_spec(&self, split: Split, index: usize) -> SyntheticSceneSpec {
        let styles = match split {
            Split::Train => &self.train_styles,
            _ => &self.val_styles,
        };
        let seed = rng::derive_seed(self.seed, &[split as u64, index as u64]);
        let mut r = rng::stream(seed, &[1]);
        let mut s = SyntheticSceneSpec::new(self.canvas, seed, styles[index % styles.len()]);
        s.road_count = r.gen_range(1..=3);
        s.road_width_range = ((self.canvas / 20).max(2), (self.canvas / 10).max(3));
        s.building_density = r.gen_range(0.05..0.3);
        s.distractors = r.gen_range(0.0..2.5);
        s
    }
}

/// An in-memory synthetic scene with its provenance.
pub struct SyntheticScene {
    pub split: Split,
    pub index: usize,
    pub style: Style,
    pub image: ImagePlane,
    pub road: BinaryMask,
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Vec<SyntheticScene>> {
    if spec.train_styles.is_empty() || spec.val_styles.is_empty() {
        return Err(Error::Config("style lists must not be empty".into()));
    }
    let mut out = Vec::with_capacity(spec.train_scenes + spec.val_scenes);
    for (split, count) in [(Split::Train, spec.train_scenes), (Split::Val, spec.val_scenes)] {
        for index in 0..count {
            let s = spec.scene_spec(split, index);
            let (image, road) = generate_synthetic_scene(&s)?;
            out.push(SyntheticScene {
                split,
                index,
                style: s.style,
                image,
                road,
            });
        }
    }
    Ok(out)
}

fn scene_name(s: &SyntheticScene) -> String {
    format!("scene_{:05}.png", s.index)
}

/// The manifest [`write_dataset`] would write, without touching the disk.
pub fn scenes_manifest(scenes: &[SyntheticScene], canvas: usize) -> DatasetManifest {
    let records = scenes
        .iter()
        .map(|s| SampleRecord {
            image_ref: format!("images/{}/{}", s.split, scene_name(s)),
            label_ref: Some(format!("labels/{}/{}", s.split, scene_name(s))),
            split: s.split,
            source_id: scene_id(s),
            crop_offset: (0, 0),
            city: s.style.to_string(),
        })
        .collect();
    DatasetManifest {
        records,
        crop_size: canvas,
        overlap: 0,
        class_names: vec!["background".into(), "road".into()],
        ground_sampling_distance: None,
    }
}

pub fn scene_id(s: &SyntheticScene) -> String {
    format!("{}-{:05}", s.split, s.index)
}

/// In-memory samples with ids matching the manifest's source ids.
pub fn scene_samples<'a>(scenes: impl IntoIterator<Item = &'a SyntheticScene>) -> Vec<Sample> {
    scenes
        .into_iter()
        .map(|s| Sample {
            id: scene_id(s),
            image: s.image.clone(),
            label: Some(ClassMap::from(&s.road)),
            city: s.style.to_string(),
        })
        .collect()
}

/// Writes `{images,labels}/{train,val}/scene_NNNNN.png` under `out` plus
/// `manifest.tsv`, with paths in the manifest relative to `out`.
pub fn write_dataset(scenes: &[SyntheticScene], canvas: usize, out: &Path) -> Result<DatasetManifest> {
    let manifest = scenes_manifest(scenes, canvas);
    for (s, r) in scenes.iter().zip(&manifest.records) {
        write_rgb(&s.image, &out.join(&r.image_ref))?;
        write_label(&ClassMap::from(&s.road), &out.join(r.label_ref.as_ref().expect("synthetic label")))?;
    }
    manifest.save(&out.join("manifest.tsv"))?;
    Ok(manifest)
}
