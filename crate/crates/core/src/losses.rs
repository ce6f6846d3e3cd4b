//! Reconstruction losses for the two inpainting steps, and the per-pixel
//! classification loss used for segmentation fine-tuning.
//!
//! Every reconstruction loss is a mean squared error between the output and
//! the input after both are multiplied by a binary gate:
//!
//! | loss                 | gate        |
//! |----------------------|-------------|
//! | identity             | `M`         |
//! | fill                 | `1 − M`     |
//! | guided identity      | `M · S`     |
//! | guided fill          | `(1 − M)·S` |
//!
//! The mean runs over all `H·W·C` elements, zeros included, so the magnitude
//! of a loss scales with the share of pixels its gate keeps.
//! [`LossReport::masked_pixel_count`] lets callers renormalize for logging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::check_dims;
use crate::plane::{BinaryMask, ClassMap, ImagePlane};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_id: f64,
    pub w_fill: f64,
}

impl LossWeights {
    pub fn new(w_id: f64, w_fill: f64) -> Result<Self> {
        let w = LossWeights { w_id, w_fill };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_id) || !ok(self.w_fill) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {})",
                self.w_id, self.w_fill
            )));
        }
        if self.w_id == 0.0 && self.w_fill == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_id: 0.2,
            w_fill: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_fill: f64,
    pub l_total: f64,
    /// Pixels removed by the inpainting mask.
    pub masked_pixel_count: usize,
    /// Road pixels, for the guided losses.
    pub road_pixel_count: Option<usize>,
}

impl LossReport {
    /// Batch reduction: losses are averaged, pixel counts summed.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        LossReport {
            l_id: reports.iter().map(|r| r.l_id).sum::<f64>() / n,
            l_fill: reports.iter().map(|r| r.l_fill).sum::<f64>() / n,
            l_total: reports.iter().map(|r| r.l_total).sum::<f64>() / n,
            masked_pixel_count: reports.iter().map(|r| r.masked_pixel_count).sum(),
            road_pixel_count: reports
                .iter()
                .map(|r| r.road_pixel_count)
                .try_fold(0usize, |acc, c| c.map(|c| acc + c)),
        }
    }
}

fn check_planes(output: &ImagePlane, input: &ImagePlane) -> Result<()> {
    if output.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "output {:?} vs input {:?}",
            output.shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// `MSE(O ⊙ G, X ⊙ G)` over all elements, plus its gradient w.r.t. `O` when
/// requested. The gate value of pixel `i` is `gate[i]`.
fn gated_mse(
    output: &ImagePlane,
    input: &ImagePlane,
    gate: &[u8],
    mut grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let channels = output.channels();
    let n = output.data().len();
    if n == 0 {
        return 0.0;
    }
    let scale = 2.0 * weight / n as f64;
    let mut sum = 0.0;
    for (p, &g) in gate.iter().enumerate() {
        if g == 0 {
            continue;
        }
        for i in p * channels..(p + 1) * channels {
            let d = output.data()[i] - input.data()[i];
            sum += d * d;
            if let Some(grad) = grad.as_deref_mut() {
                grad[i] += scale * d;
            }
        }
    }
    sum / n as f64
}

fn gates(mask: &BinaryMask, road: Option<&BinaryMask>) -> (Vec<u8>, Vec<u8>) {
    let keep = mask.values();
    match road {
        None => (keep.to_vec(), keep.iter().map(|m| 1 - m).collect()),
        Some(s) => (
            keep.iter().zip(s.values()).map(|(m, s)| m & s).collect(),
            keep.iter().zip(s.values()).map(|(m, s)| (1 - m) & s).collect(),
        ),
    }
}

fn check_all(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    road: Option<&BinaryMask>,
) -> Result<()> {
    check_planes(output, input)?;
    check_dims(output, mask)?;
    if let Some(road) = road {
        check_dims(output, road)?;
    }
    Ok(())
}

/// Identity loss: reproduction error on the pixels the mask keeps.
pub fn identity_loss(output: &ImagePlane, input: &ImagePlane, mask: &BinaryMask) -> Result<f64> {
    check_all(output, input, mask, None)?;
    Ok(gated_mse(output, input, mask.values(), None, 1.0))
}

/// Fill loss: reconstruction error on the pixels the mask removes.
pub fn fill_loss(output: &ImagePlane, input: &ImagePlane, mask: &BinaryMask) -> Result<f64> {
    check_all(output, input, mask, None)?;
    let (_, fill) = gates(mask, None);
    Ok(gated_mse(output, input, &fill, None, 1.0))
}

pub fn guided_identity_loss(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    road: &BinaryMask,
) -> Result<f64> {
    check_all(output, input, mask, Some(road))?;
    let (id, _) = gates(mask, Some(road));
    Ok(gated_mse(output, input, &id, None, 1.0))
}

pub fn guided_fill_loss(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    road: &BinaryMask,
) -> Result<f64> {
    check_all(output, input, mask, Some(road))?;
    let (_, fill) = gates(mask, Some(road));
    Ok(gated_mse(output, input, &fill, None, 1.0))
}

/// Weighted inpainting loss and, optionally, its gradient w.r.t. `output`.
///
/// With `road = None` this is the step-1 objective; with a road mask it is
/// the guided step-2 objective.
pub fn inpaint_loss(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    road: Option<&BinaryMask>,
    weights: &LossWeights,
    mut grad: Option<&mut ImagePlane>,
) -> Result<LossReport> {
    check_all(output, input, mask, road)?;
    if let Some(g) = grad.as_deref() {
        check_planes(output, g)?;
    }
    let (id_gate, fill_gate) = gates(mask, road);
    let l_id = gated_mse(
        output,
        input,
        &id_gate,
        grad.as_deref_mut().map(|g| g.data_mut()),
        weights.w_id,
    );
    let l_fill = gated_mse(
        output,
        input,
        &fill_gate,
        grad.as_deref_mut().map(|g| g.data_mut()),
        weights.w_fill,
    );
    Ok(LossReport {
        l_id,
        l_fill,
        l_total: weights.w_id * l_id + weights.w_fill * l_fill,
        masked_pixel_count: mask.count_zeros(),
        road_pixel_count: road.map(|s| s.count_ones()),
    })
}

pub fn total_inpaint_loss(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    weights: &LossWeights,
) -> Result<LossReport> {
    inpaint_loss(output, input, mask, None, weights, None)
}

pub fn total_guided_loss(
    output: &ImagePlane,
    input: &ImagePlane,
    mask: &BinaryMask,
    road: &BinaryMask,
    weights: &LossWeights,
) -> Result<LossReport> {
    inpaint_loss(output, input, mask, Some(road), weights, None)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel cross-entropy of segmentation logits against class labels,
/// averaged over pixels. One channel means binary logits (class 1 is the
/// positive class); more channels mean softmax logits.
pub fn segmentation_loss(
    logits: &ImagePlane,
    label: &ClassMap,
    mut grad: Option<&mut ImagePlane>,
) -> Result<f64> {
    if logits.height() != label.height() || logits.width() != label.width() {
        return Err(Error::Shape(format!(
            "{}x{} label for {}x{} logits",
            label.height(),
            label.width(),
            logits.height(),
            logits.width()
        )));
    }
    let k = logits.channels();
    let num_classes = k.max(2);
    if let Some(&bad) = label.classes().iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::LabelDomain {
            class: bad,
            num_classes: k,
        });
    }
    let pixels = label.classes().len();
    if pixels == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / pixels as f64;
    let mut sum = 0.0;
    for (p, &class) in label.classes().iter().enumerate() {
        let z = &logits.data()[p * k..(p + 1) * k];
        if k == 1 {
            let (x, t) = (z[0], class as f64);
            sum += softplus(x) - t * x;
            if let Some(g) = grad.as_deref_mut() {
                g.data_mut()[p] += (sigmoid(x) - t) * inv;
            }
        } else {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            sum += max + denom.ln() - z[class as usize];
            if let Some(g) = grad.as_deref_mut() {
                let gp = &mut g.data_mut()[p * k..(p + 1) * k];
                for (c, gv) in gp.iter_mut().enumerate() {
                    let prob = (z[c] - max).exp() / denom;
                    let target = (c == class as usize) as u8 as f64;
                    *gv += (prob - target) * inv;
                }
            }
        }
    }
    Ok(sum * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(vals: &[f64]) -> ImagePlane {
        ImagePlane::from_vec(2, 2, 1, vals.to_vec()).unwrap()
    }

    fn case() -> (ImagePlane, ImagePlane, BinaryMask) {
        (
            plane(&[1.0, 0.0, 3.0, 0.0]),
            plane(&[1.0, 2.0, 3.0, 4.0]),
            BinaryMask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap(),
        )
    }

    #[test]
    fn worked_example() {
        let (o, x, m) = case();
        assert_eq!(identity_loss(&o, &x, &m).unwrap(), 4.0);
        // Only (0,1) survives the complement gate with a residual: (0 - 2)² / 4.
        assert_eq!(fill_loss(&o, &x, &m).unwrap(), 1.0);
        let r = total_inpaint_loss(&o, &x, &m, &LossWeights::default()).unwrap();
        assert!((r.l_total - 1.6).abs() < 1e-12);
        assert_eq!(r.masked_pixel_count, 2);
        let r = total_inpaint_loss(&o, &x, &m, &LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(r.l_total, r.l_id);
    }

    #[test]
    fn guided_worked_example() {
        // S keeps the top row: only (0,0) survives M·S, only (0,1) survives (1−M)·S.
        let (o, x, m) = case();
        let s = BinaryMask::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(guided_identity_loss(&o, &x, &m, &s).unwrap(), 0.0);
        assert_eq!(guided_fill_loss(&o, &x, &m, &s).unwrap(), 1.0);
        let r = total_guided_loss(&o, &x, &m, &s, &LossWeights::default()).unwrap();
        assert!((r.l_total - 0.8).abs() < 1e-12);
        assert_eq!(r.road_pixel_count, Some(2));
    }

    #[test]
    fn unit_residual() {
        let x = ImagePlane::from_fn(5, 7, 3, |y, xx, c| (y * 7 + xx + c) as f64);
        let o = ImagePlane::from_fn(5, 7, 3, |y, xx, c| (y * 7 + xx + c) as f64 + 1.0);
        assert_eq!(identity_loss(&o, &x, &BinaryMask::ones(5, 7)).unwrap(), 1.0);
        assert_eq!(fill_loss(&o, &x, &BinaryMask::ones(5, 7)).unwrap(), 0.0);
        assert_eq!(
            guided_identity_loss(&o, &x, &BinaryMask::ones(5, 7), &BinaryMask::zeros(5, 7)).unwrap(),
            0.0
        );
    }

    #[test]
    fn shape_errors() {
        let (o, x, m) = case();
        let big = ImagePlane::zeros(3, 2, 1);
        assert!(matches!(identity_loss(&big, &x, &m), Err(Error::Shape(_))));
        assert!(fill_loss(&o, &x, &BinaryMask::ones(3, 3)).is_err());
        assert!(guided_fill_loss(&o, &x, &m, &BinaryMask::ones(1, 2)).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn batch_mean() {
        let a = LossReport {
            l_id: 1.0,
            l_fill: 2.0,
            l_total: 3.0,
            masked_pixel_count: 4,
            road_pixel_count: Some(1),
        };
        let b = LossReport {
            l_id: 3.0,
            road_pixel_count: Some(2),
            ..a
        };
        let m = LossReport::mean(&[a, b]);
        assert_eq!(m.l_id, 2.0);
        assert_eq!(m.masked_pixel_count, 8);
        assert_eq!(m.road_pixel_count, Some(3));
    }

    #[test]
    fn binary_cross_entropy_values() {
        let logits = ImagePlane::from_vec(1, 2, 1, vec![0.0, 2.0]).unwrap();
        let label = ClassMap::from_vec(1, 2, vec![1, 0]).unwrap();
        let mut g = ImagePlane::zeros(1, 2, 1);
        let l = segmentation_loss(&logits, &label, Some(&mut g)).unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((g.get(0, 0, 0) - (0.5 - 1.0) / 2.0).abs() < 1e-12);
        let bad = ClassMap::from_vec(1, 2, vec![2, 0]).unwrap();
        assert!(matches!(
            segmentation_loss(&logits, &bad, None),
            Err(Error::LabelDomain { class: 2, .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_uniform() {
        let logits = ImagePlane::zeros(2, 2, 3);
        let label = ClassMap::from_vec(2, 2, vec![0, 1, 2, 1]).unwrap();
        let l = segmentation_loss(&logits, &label, None).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(segmentation_loss(&logits, &ClassMap::filled(2, 2, 3), None).is_err());
    }
}
