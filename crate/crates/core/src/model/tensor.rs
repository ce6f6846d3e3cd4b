use crate::error::{Error, Result};
use crate::plane::ImagePlane;

/// A dense `N×C×H×W` f32 batch, the layout the network layers work in.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Stacks `H×W×C` planes into one batch.
    pub fn from_planes(planes: &[&ImagePlane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        let (h, w, c) = first.shape();
        let mut t = Tensor::zeros(planes.len(), c, h, w);
        for (i, p) in planes.iter().enumerate() {
            if p.shape() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w, c),
                    p.shape()
                )));
            }
            let out = t.sample_mut(i);
            for (px, vals) in p.data().chunks(c).enumerate() {
                for (ch, &v) in vals.iter().enumerate() {
                    out[ch * h * w + px] = v as f32;
                }
            }
        }
        Ok(t)
    }

    pub fn to_plane(&self, i: usize) -> ImagePlane {
        let (h, w, c) = (self.h, self.w, self.c);
        let s = self.sample(i);
        ImagePlane::from_fn(h, w, c, |y, x, ch| s[ch * h * w + y * w + x] as f64)
    }

    pub fn to_planes(&self) -> Vec<ImagePlane> {
        (0..self.n).map(|i| self.to_plane(i)).collect()
    }

    /// Zero-pads bottom and right edges up to `h×w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.n, self.c, h, w);
        for plane in 0..self.n * self.c {
            for y in 0..self.h {
                let src = plane * self.h * self.w + y * self.w;
                let dst = plane * h * w + y * w;
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop_to(&self, h: usize, w: usize) -> Tensor {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.n, self.c, h, w);
        for plane in 0..self.n * self.c {
            for y in 0..h {
                let src = plane * self.h * self.w + y * self.w;
                let dst = plane * h * w + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}
