//! Scheduled square-cluster masks for the inpainting steps.
//!
//! A mask starts as all ones. `cluster_count` top-left corners are drawn
//! uniformly (with replacement) from positions where a `cluster_size` square
//! fits entirely inside the image, and each square is zeroed. Squares may
//! overlap. The [`MaskSchedule`] grows the squares and thins their number as
//! training progresses.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::plane::{BinaryMask, ImagePlane};
use crate::pngio::{self, PixelLayout};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Milestone {
    pub epoch: usize,
    pub cluster_count: usize,
    pub cluster_size: usize,
}

/// Ordered epoch milestones. Between milestones the previous values hold;
/// past the last milestone its values hold forever.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSchedule {
    milestones: Vec<Milestone>,
}

impl MaskSchedule {
    pub fn new(milestones: Vec<Milestone>) -> Result<Self> {
        let first = milestones
            .first()
            .ok_or_else(|| Error::InvalidSchedule("no milestones".into()))?;
        if first.epoch != 0 {
            return Err(Error::InvalidSchedule(format!(
                "first milestone at epoch {}, expected 0",
                first.epoch
            )));
        }
        for m in &milestones {
            if m.cluster_size == 0 {
                return Err(Error::InvalidSchedule(format!(
                    "zero cluster size at epoch {}",
                    m.epoch
                )));
            }
        }
        for pair in milestones.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.epoch <= a.epoch {
                return Err(Error::InvalidSchedule(format!(
                    "epochs not strictly increasing: {} then {}",
                    a.epoch, b.epoch
                )));
            }
            if b.cluster_size < a.cluster_size {
                return Err(Error::InvalidSchedule(format!(
                    "cluster size shrinks at epoch {}",
                    b.epoch
                )));
            }
            if b.cluster_count > a.cluster_count {
                return Err(Error::InvalidSchedule(format!(
                    "cluster count grows at epoch {}",
                    b.epoch
                )));
            }
        }
        Ok(MaskSchedule { milestones })
    }

    /// The cluster progression used for 512-pixel crops.
    pub fn table() -> Self {
        const ROWS: [(usize, usize, usize); 6] = [
            (0, 100, 10),
            (10, 70, 12),
            (20, 52, 14),
            (30, 50, 15),
            (40, 25, 20),
            (50, 11, 30),
        ];
        MaskSchedule::new(
            ROWS.iter()
                .map(|&(epoch, cluster_count, cluster_size)| Milestone {
                    epoch,
                    cluster_count,
                    cluster_size,
                })
                .collect(),
        )
        .expect("built-in schedule is valid")
    }

    pub fn milestones(&self) -> &[Milestone] {
        &self.milestones
    }

    pub fn last(&self) -> Milestone {
        *self.milestones.last().expect("schedule is never empty")
    }

    pub fn at(&self, epoch: usize) -> (usize, usize) {
        let idx = self.milestones.partition_point(|m| m.epoch <= epoch);
        let m = self.milestones[idx - 1];
        (m.cluster_count, m.cluster_size)
    }

    /// Rescales milestone epochs by `epoch_factor` (rounded down, minimum 1
    /// for every milestone after the first) and cluster sizes by
    /// `size_factor` (rounded, minimum 1). Counts are kept so the masked
    /// fraction stays roughly unchanged when images shrink by `size_factor`.
    /// Milestones that land on the same epoch collapse onto the later one.
    pub fn scaled(&self, epoch_factor: f64, size_factor: f64) -> Result<Self> {
        let mut out: Vec<Milestone> = Vec::with_capacity(self.milestones.len());
        for m in &self.milestones {
            let epoch = if m.epoch == 0 {
                0
            } else {
                ((m.epoch as f64 * epoch_factor).floor() as usize).max(1)
            };
            let scaled = Milestone {
                epoch,
                cluster_count: m.cluster_count,
                cluster_size: ((m.cluster_size as f64 * size_factor).round() as usize).max(1),
            };
            match out.last_mut() {
                Some(prev) if prev.epoch == epoch => *prev = scaled,
                _ => out.push(scaled),
            }
        }
        MaskSchedule::new(out)
    }
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule::table()
    }
}

/// One `epoch count size` triple per line; `#` starts a comment.
impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# epoch count size")?;
        for m in &self.milestones {
            writeln!(f, "{} {} {}", m.epoch, m.cluster_count, m.cluster_size)?;
        }
        Ok(())
    }
}

impl FromStr for MaskSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut milestones = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<usize> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidSchedule(format!("line {}: {e}", lineno + 1)))?;
            let [epoch, cluster_count, cluster_size] = fields[..] else {
                return Err(Error::InvalidSchedule(format!(
                    "line {}: expected 3 fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            milestones.push(Milestone {
                epoch,
                cluster_count,
                cluster_size,
            });
        }
        MaskSchedule::new(milestones)
    }
}

// Serialized as a list of `[epoch, count, size]` triples.
impl serde::Serialize for MaskSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<[usize; 3]> = self
            .milestones
            .iter()
            .map(|m| [m.epoch, m.cluster_count, m.cluster_size])
            .collect();
        rows.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for MaskSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<[usize; 3]>::deserialize(d)?;
        MaskSchedule::new(
            rows.into_iter()
                .map(|[epoch, cluster_count, cluster_size]| Milestone {
                    epoch,
                    cluster_count,
                    cluster_size,
                })
                .collect(),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Cluster count and size in effect at `epoch`.
pub fn schedule_at(schedule: &MaskSchedule, epoch: usize) -> (usize, usize) {
    schedule.at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub cluster_count: usize,
    pub cluster_size: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(cluster_count: usize, cluster_size: usize, seed: u64) -> Self {
        MaskSpec {
            cluster_count,
            cluster_size,
            seed,
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.cluster_size == 0 {
            return Err(Error::InvalidSpec("cluster size must be positive".into()));
        }
        if self.cluster_size > height.min(width) {
            return Err(Error::InvalidSpec(format!(
                "cluster size {} exceeds {height}x{width} image",
                self.cluster_size
            )));
        }
        Ok(())
    }
}

/// Seed of the mask for one sample in one epoch of one training step.
pub fn sample_mask_seed(global_seed: u64, step: u64, epoch: usize, sample: usize) -> u64 {
    rng::derive_seed(global_seed, &[0x6d61_736b, step, epoch as u64, sample as u64])
}

/// Top-left corners of the squares for `spec`, in draw order.
pub fn sample_corners(height: usize, width: usize, spec: &MaskSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate(height, width)?;
    let mut rng = rng::stream(spec.seed, &[]);
    let (rows, cols) = (height - spec.cluster_size, width - spec.cluster_size);
    Ok((0..spec.cluster_count)
        .map(|_| (rng.gen_range(0..=rows), rng.gen_range(0..=cols)))
        .collect())
}

pub fn generate_mask(height: usize, width: usize, spec: &MaskSpec) -> Result<BinaryMask> {
    let corners = sample_corners(height, width, spec)?;
    let mut mask = BinaryMask::ones(height, width);
    let s = spec.cluster_size;
    for (r, c) in corners {
        for y in r..r + s {
            for x in c..c + s {
                mask.set(y, x, false);
            }
        }
    }
    Ok(mask)
}

/// Share of pixels set to 0.
pub fn masked_fraction(mask: &BinaryMask) -> f64 {
    let total = mask.height() * mask.width();
    if total == 0 {
        return 0.0;
    }
    mask.count_zeros() as f64 / total as f64
}

/// Multiplies every channel of `image` by the mask.
pub fn apply_mask(image: &ImagePlane, mask: &BinaryMask) -> Result<ImagePlane> {
    check_dims(image, mask)?;
    let channels = image.channels();
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_mut(channels).zip(mask.values()) {
        if m == 0 {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

pub(crate) fn check_dims(image: &ImagePlane, mask: &BinaryMask) -> Result<()> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!(
            "{}x{} mask for a {}x{} image",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// 8-bit gray pixels with `0 ↔ 0` and `255 ↔ 1`.
pub fn mask_to_gray(mask: &BinaryMask) -> Vec<u8> {
    mask.values().iter().map(|&v| v * 255).collect()
}

pub fn mask_to_png(mask: &BinaryMask) -> Vec<u8> {
    pngio::encode_to_vec(mask.width(), mask.height(), PixelLayout::Gray, &mask_to_gray(mask))
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    pngio::write(path, mask.width(), mask.height(), PixelLayout::Gray, &mask_to_gray(mask))
}

/// Reads a single-channel PNG, mapping any non-zero sample to 1.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = pngio::read(path)?;
    if img.layout != PixelLayout::Gray {
        return Err(Error::format(path, "mask png must be single-channel"));
    }
    BinaryMask::from_vec(
        img.height,
        img.width,
        img.pixels.iter().map(|&p| (p > 0) as u8).collect(),
    )
}

/// Renders masks for several epochs side by side, separated by a gray gutter.
pub fn preview_strip(
    schedule: &MaskSchedule,
    epochs: &[usize],
    size: usize,
    seed: u64,
) -> Result<(usize, usize, Vec<u8>)> {
    const GUTTER: usize = 4;
    let n = epochs.len();
    let width = n * size + n.saturating_sub(1) * GUTTER;
    let mut pixels = vec![128u8; width * size];
    for (i, &epoch) in epochs.iter().enumerate() {
        let (cluster_count, cluster_size) = schedule.at(epoch);
        let spec = MaskSpec::new(cluster_count, cluster_size, sample_mask_seed(seed, 0, epoch, 0));
        let mask = generate_mask(size, size, &spec)?;
        let x0 = i * (size + GUTTER);
        for y in 0..size {
            for x in 0..size {
                pixels[y * width + x0 + x] = mask.get(y, x) * 255;
            }
        }
    }
    Ok((width, size, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let s = MaskSchedule::table();
        assert_eq!(schedule_at(&s, 0), (100, 10));
        assert_eq!(schedule_at(&s, 9), (100, 10));
        assert_eq!(schedule_at(&s, 10), (70, 12));
        assert_eq!(schedule_at(&s, 20), (52, 14));
        assert_eq!(schedule_at(&s, 35), (50, 15));
        assert_eq!(schedule_at(&s, 40), (25, 20));
        assert_eq!(schedule_at(&s, 50), (11, 30));
        assert_eq!(schedule_at(&s, 500), (11, 30));
    }

    #[test]
    fn schedule_text_round_trip() {
        let s = MaskSchedule::table();
        let parsed: MaskSchedule = s.to_string().parse().unwrap();
        assert_eq!(parsed, s);
        let inline: MaskSchedule = "0,5,2\n3,4,3 # later".parse().unwrap();
        assert_eq!(inline.at(4), (4, 3));
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!("".parse::<MaskSchedule>().is_err());
        assert!("1 10 10".parse::<MaskSchedule>().is_err());
        assert!("0 10 10\n0 9 11".parse::<MaskSchedule>().is_err());
        assert!("0 10 10\n5 9 9".parse::<MaskSchedule>().is_err());
        assert!("0 10 10\n5 11 12".parse::<MaskSchedule>().is_err());
        assert!("0 10".parse::<MaskSchedule>().is_err());
    }

    #[test]
    fn desk_scaling() {
        let s = MaskSchedule::table().scaled(0.1, 0.125).unwrap();
        let epochs: Vec<_> = s.milestones().iter().map(|m| m.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(s.at(0), (100, 1));
        assert_eq!(s.at(5), (11, 4));
        let collapsed = MaskSchedule::table().scaled(0.02, 1.0).unwrap();
        assert_eq!(collapsed.milestones().len(), 2);
        assert_eq!(collapsed.at(1), (11, 30));
    }

    #[test]
    fn empty_and_single_cluster() {
        let m = generate_mask(512, 512, &MaskSpec::new(0, 10, 3)).unwrap();
        assert_eq!(m.count_zeros(), 0);
        let m = generate_mask(512, 512, &MaskSpec::new(1, 10, 3)).unwrap();
        assert_eq!(m.count_zeros(), 100);
        let (r, c) = sample_corners(512, 512, &MaskSpec::new(1, 10, 3)).unwrap()[0];
        for y in r..r + 10 {
            for x in c..c + 10 {
                assert_eq!(m.get(y, x), 0);
            }
        }
    }

    #[test]
    fn oversized_cluster_is_rejected() {
        let err = generate_mask(8, 16, &MaskSpec::new(1, 9, 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
        assert!(generate_mask(8, 16, &MaskSpec::new(1, 8, 0)).is_ok());
    }

    #[test]
    fn fractions() {
        assert_eq!(masked_fraction(&BinaryMask::ones(8, 8)), 0.0);
        assert_eq!(masked_fraction(&BinaryMask::zeros(8, 8)), 1.0);
        let m = generate_mask(512, 512, &MaskSpec::new(11, 30, 9)).unwrap();
        assert!(masked_fraction(&m) <= 11.0 * 900.0 / 262144.0);
    }

    #[test]
    fn apply_mask_diagonal() {
        let img = ImagePlane::filled(2, 2, 3, 0.5);
        let mask = BinaryMask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(0, 0, c), 0.5);
            assert_eq!(out.get(1, 1, c), 0.5);
            assert_eq!(out.get(0, 1, c), 0.0);
            assert_eq!(out.get(1, 0, c), 0.0);
        }
        assert_eq!(img.get(0, 1, 0), 0.5);
        assert!(apply_mask(&img, &BinaryMask::ones(3, 2)).is_err());
    }

    #[test]
    fn png_round_trip() {
        let m = generate_mask(40, 30, &MaskSpec::new(5, 6, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mask_png(&m, &path).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), m);
    }

    #[test]
    fn preview_has_one_panel_per_epoch() {
        let (w, h, px) = preview_strip(&MaskSchedule::table(), &[10, 30, 50], 128, 1).unwrap();
        assert_eq!((w, h), (3 * 128 + 8, 128));
        assert_eq!(px.len(), w * h);
    }
}
