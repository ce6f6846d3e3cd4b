//! FiveCrop, dihedral augmentation and per-channel normalization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::plane::{BinaryMask, ClassMap, ImagePlane};
use crate::rng;

/// The four corner crops followed by the center crop.
pub fn five_crop(image: &ImagePlane, crop: usize) -> Result<[ImagePlane; 5]> {
    let offsets = five_crop_offsets(image.height(), image.width(), crop)?;
    let mut crops = offsets.iter().map(|&(r, c)| image.crop(r, c, crop, crop));
    Ok([
        crops.next().unwrap()?,
        crops.next().unwrap()?,
        crops.next().unwrap()?,
        crops.next().unwrap()?,
        crops.next().unwrap()?,
    ])
}

pub fn five_crop_offsets(height: usize, width: usize, crop: usize) -> Result<[(usize, usize); 5]> {
    if crop == 0 || crop > height || crop > width {
        return Err(Error::Shape(format!("five-crop of {crop} from {height}x{width}")));
    }
    let (bottom, right) = (height - crop, width - crop);
    Ok([
        (0, 0),
        (0, right),
        (bottom, 0),
        (bottom, right),
        (bottom / 2, right / 2),
    ])
}

/// A dihedral transform: optional left-right mirror, optional up-down flip,
/// then `rotations` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub mirror: bool,
    pub flip: bool,
    pub rotations: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        mirror: false,
        flip: false,
        rotations: 0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x6175_6720]);
        Transform {
            mirror: r.gen(),
            flip: r.gen(),
            rotations: r.gen_range(0..4),
        }
    }

    pub fn all() -> impl Iterator<Item = Transform> {
        (0..16u8).map(|i| Transform {
            mirror: i & 1 == 1,
            flip: i & 2 == 2,
            rotations: i >> 2,
        })
    }

    /// Output size for an `h×w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rotations % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel for output pixel `(y, x)` of an `h×w` input.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        // undo the rotations on the output grid, then the flips
        let (mut y, mut x) = (y, x);
        let (mut ch, mut cw) = self.output_dims(h, w);
        for _ in 0..self.rotations % 4 {
            // output of one CCW turn at (y, x) came from (x, cw_prev - 1 - y)
            // where the pre-rotation grid is cw×ch
            let (py, px) = (x, ch - 1 - y);
            y = py;
            x = px;
            std::mem::swap(&mut ch, &mut cw);
        }
        if self.flip {
            y = h - 1 - y;
        }
        if self.mirror {
            x = w - 1 - x;
        }
        (y, x)
    }

    pub fn apply_plane(&self, image: &ImagePlane) -> ImagePlane {
        let (h, w, c) = image.shape();
        let (oh, ow) = self.output_dims(h, w);
        let mut out = ImagePlane::zeros(oh, ow, c);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                for ch in 0..c {
                    out.set(y, x, ch, image.get(sy, sx, ch));
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (h, w) = (mask.height(), mask.width());
        let (oh, ow) = self.output_dims(h, w);
        BinaryMask::from_fn(oh, ow, |y, x| {
            let (sy, sx) = self.source(y, x, h, w);
            mask.get(sy, sx) == 1
        })
    }

    pub fn apply_classes(&self, map: &ClassMap) -> ClassMap {
        let (h, w) = (map.height(), map.width());
        let (oh, ow) = self.output_dims(h, w);
        let mut classes = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                classes.push(map.get(sy, sx));
            }
        }
        ClassMap::from_vec(oh, ow, classes).expect("dims preserved")
    }
}

/// Applies one seeded dihedral transform to the image and, identically, to
/// its label.
pub fn augment(
    image: &ImagePlane,
    label: Option<&ClassMap>,
    seed: u64,
) -> Result<(ImagePlane, Option<ClassMap>)> {
    if let Some(l) = label {
        if (l.height(), l.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!(
                "{}x{} label for {}x{} image",
                l.height(),
                l.width(),
                image.height(),
                image.width()
            )));
        }
    }
    let t = Transform::sample(seed);
    Ok((t.apply_plane(image), label.map(|l| t.apply_classes(l))))
}

/// Per-channel mean and standard deviation in `[0, 1]` units.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let s = ChannelStats { mean, std };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::InvalidStats("mean and std lengths differ".into()));
        }
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidStats(format!("std {s} is not positive")));
        }
        Ok(())
    }

    /// Stats of raw 8-bit images over every pixel of every image.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a ImagePlane>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for img in images {
            let c = img.channels();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Shape("images differ in channel count".into()));
            }
            for px in img.data().chunks(c) {
                for (ch, v) in px.iter().enumerate() {
                    let v = v / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += img.height() * img.width();
        }
        if n == 0 {
            return Err(Error::EmptyInput("no pixels to compute stats from".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        ChannelStats::new(mean, std)
    }
}

/// `mean=a,b,c;std=d,e,f`, the form stored in checkpoint metadata.
impl fmt::Display for ChannelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        write!(f, "mean={};std={}", join(&self.mean), join(&self.std))
    }
}

impl FromStr for ChannelStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidStats(format!("cannot parse `{s}`"));
        let (mean, std) = s.split_once(';').ok_or_else(bad)?;
        let parse = |part: &str, key: &str| -> Result<Vec<f64>> {
            part.strip_prefix(key)
                .ok_or_else(bad)?
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                .collect()
        };
        ChannelStats::new(parse(mean, "mean=")?, parse(std, "std=")?)
    }
}

/// `(x / 255 − mean) / std` per channel, for raw 8-bit values.
pub fn normalize(raw: &ImagePlane, stats: &ChannelStats) -> Result<ImagePlane> {
    stats.validate()?;
    if stats.mean.len() != raw.channels() {
        return Err(Error::InvalidStats(format!(
            "{} channel stats for a {}-channel image",
            stats.mean.len(),
            raw.channels()
        )));
    }
    let c = raw.channels();
    let mut out = raw.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v / 255.0 - stats.mean[ch]) / stats.std[ch];
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &ImagePlane, stats: &ChannelStats) -> Result<ImagePlane> {
    stats.validate()?;
    let c = image.channels();
    let mut out = image.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v * stats.std[ch] + stats.mean[ch]) * 255.0;
        }
    }
    Ok(out)
}
