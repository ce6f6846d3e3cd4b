//! Browser bindings: mask previews, synthetic scenes and inpainting losses.
//!
//! Everything here is a thin wrapper; the same functions run natively so the
//! tests do not need a browser.

use roadfill::data::{generate_synthetic_scene, Style, SyntheticSceneSpec};
use roadfill::losses::{inpaint_loss, LossWeights};
use roadfill::masking::{apply_mask, generate_mask, preview_strip, sample_mask_seed, MaskSchedule, MaskSpec};
use roadfill::{BinaryMask, ImagePlane};
use wasm_bindgen::prelude::*;

/// An RGBA bitmap ready for `ImageData`.
#[wasm_bindgen]
pub struct Bitmap {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Bitmap {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Bitmap {
    fn gray(width: usize, height: usize, px: &[u8]) -> Bitmap {
        let rgba = px.iter().flat_map(|&v| [v, v, v, 255]).collect();
        Bitmap { width, height, rgba }
    }

    fn from_plane(p: &ImagePlane) -> Bitmap {
        let rgb = p.to_u8();
        let rgba = rgb.chunks(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect();
        Bitmap {
            width: p.width(),
            height: p.height(),
            rgba,
        }
    }

    fn from_mask(m: &BinaryMask) -> Bitmap {
        let px: Vec<u8> = (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
            .map(|(y, x)| m.get(y, x) * 255)
            .collect();
        Bitmap::gray(m.width(), m.height(), &px)
    }
}

fn js_err(e: roadfill::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// The standard schedule with cluster sizes rescaled for a `size`-pixel
/// image.
fn schedule_for(size: usize) -> roadfill::Result<MaskSchedule> {
    MaskSchedule::table().scaled(1.0, size as f64 / 512.0)
}

pub fn preview(epochs: &[u32], size: usize, seed: u64) -> roadfill::Result<Bitmap> {
    let epochs: Vec<usize> = epochs.iter().map(|&e| e as usize).collect();
    let (w, h, px) = preview_strip(&schedule_for(size)?, &epochs, size, seed)?;
    Ok(Bitmap::gray(w, h, &px))
}

/// Masks for each epoch side by side, white where pixels are kept.
#[wasm_bindgen(js_name = maskPreview)]
pub fn mask_preview(epochs: Vec<u32>, size: usize, seed: u64) -> Result<Bitmap, JsError> {
    preview(&epochs, size, seed).map_err(js_err)
}

#[wasm_bindgen]
pub struct Scene {
    image: Bitmap,
    label: Bitmap,
    road_fraction: f64,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Bitmap {
        clone_bitmap(&self.image)
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> Bitmap {
        clone_bitmap(&self.label)
    }

    #[wasm_bindgen(getter, js_name = roadFraction)]
    pub fn road_fraction(&self) -> f64 {
        self.road_fraction
    }
}

fn clone_bitmap(b: &Bitmap) -> Bitmap {
    Bitmap {
        width: b.width,
        height: b.height,
        rgba: b.rgba.clone(),
    }
}

fn scene_planes(canvas: usize, seed: u64, style: &str) -> roadfill::Result<(ImagePlane, BinaryMask)> {
    let style: Style = style.parse()?;
    generate_synthetic_scene(&SyntheticSceneSpec::new(canvas, seed, style))
}

pub fn scene(canvas: usize, seed: u64, style: &str) -> roadfill::Result<Scene> {
    let (image, road) = scene_planes(canvas, seed, style)?;
    Ok(Scene {
        image: Bitmap::from_plane(&image),
        label: Bitmap::from_mask(&road),
        road_fraction: road.count_ones() as f64 / (canvas * canvas) as f64,
    })
}

/// A synthetic aerial tile and its road label. `style` is one of A, B, C, D.
#[wasm_bindgen(js_name = syntheticScene)]
pub fn synthetic_scene(canvas: usize, seed: u64, style: &str) -> Result<Scene, JsError> {
    scene(canvas, seed, style).map_err(js_err)
}

#[wasm_bindgen]
pub struct Losses {
    masked: Bitmap,
    filled: Bitmap,
    pub l_id: f64,
    pub l_fill: f64,
    pub l_total: f64,
    pub guided_id: f64,
    pub guided_fill: f64,
    pub guided_total: f64,
    pub masked_fraction: f64,
}

#[wasm_bindgen]
impl Losses {
    /// Input with the mask applied.
    #[wasm_bindgen(getter)]
    pub fn masked(&self) -> Bitmap {
        clone_bitmap(&self.masked)
    }

    /// The naive fill the losses are measured on.
    #[wasm_bindgen(getter)]
    pub fn filled(&self) -> Bitmap {
        clone_bitmap(&self.filled)
    }
}

/// Fills every masked pixel with the mean colour of the kept ones, a stand-in
/// for a network output.
fn mean_fill(image: &ImagePlane, mask: &BinaryMask) -> ImagePlane {
    let c = image.channels();
    let mut mean = vec![0.0; c];
    let kept = mask.count_ones().max(1) as f64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) == 1 {
                for (m, v) in mean.iter_mut().zip(image.pixel(y, x)) {
                    *m += v / kept;
                }
            }
        }
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) == 0 {
                for (k, m) in mean.iter().enumerate() {
                    out.set(y, x, k, *m);
                }
            }
        }
    }
    out
}

pub fn losses(canvas: usize, seed: u64, style: &str, epoch: u32, w_id: f64, w_fill: f64) -> roadfill::Result<Losses> {
    let (image, road) = scene_planes(canvas, seed, style)?;
    let (count, size) = schedule_for(canvas)?.at(epoch as usize);
    let mask = generate_mask(canvas, canvas, &MaskSpec::new(count, size, sample_mask_seed(seed, 0, epoch as usize, 0)))?;
    let weights = LossWeights::new(w_id, w_fill)?;
    let filled = mean_fill(&image, &mask);
    let plain = inpaint_loss(&filled, &image, &mask, None, &weights, None)?;
    let guided = inpaint_loss(&filled, &image, &mask, Some(&road), &weights, None)?;
    Ok(Losses {
        masked: Bitmap::from_plane(&apply_mask(&image, &mask)?),
        filled: Bitmap::from_plane(&filled),
        l_id: plain.l_id,
        l_fill: plain.l_fill,
        l_total: plain.l_total,
        guided_id: guided.l_id,
        guided_fill: guided.l_fill,
        guided_total: guided.l_total,
        masked_fraction: mask.count_zeros() as f64 / (canvas * canvas) as f64,
    })
}

/// Masks a synthetic scene at `epoch`, fills the holes with the mean colour
/// and reports the plain and road-guided inpainting losses of that fill.
#[wasm_bindgen(js_name = inpaintLosses)]
pub fn inpaint_losses(canvas: usize, seed: u64, style: &str, epoch: u32, w_id: f64, w_fill: f64) -> Result<Losses, JsError> {
    losses(canvas, seed, style, epoch, w_id, w_fill).map_err(js_err)
}
