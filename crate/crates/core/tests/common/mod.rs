//! Independent per-pixel oracles and random instance builders shared by the
//! integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use roadfill::masking::{sample_corners, MaskSpec};
use roadfill::losses::{
    fill_loss, guided_fill_loss, guided_identity_loss, identity_loss, inpaint_loss, LossWeights,
};
use roadfill::{BinaryMask, ClassMap, ImagePlane};

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImagePlane {
    ImagePlane::from_fn(h, w, c, |_, _, _| r.gen_range(-2.0..2.0))
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(0.5))
}

/// Every `{0,1}` mask of an `h×w` grid, in binary-counting order.
pub fn all_masks(h: usize, w: usize) -> Vec<BinaryMask> {
    (0u32..1 << (h * w))
        .map(|bits| BinaryMask::from_fn(h, w, |y, x| bits >> (y * w + x) & 1 == 1))
        .collect()
}

/// `(1 / HWC) Σ gate(y, x) · (O − X)²`, one element at a time.
pub fn gated_mse_oracle(o: &ImagePlane, x: &ImagePlane, gate: impl Fn(usize, usize) -> f64) -> f64 {
    let (h, w, c) = o.shape();
    let mut sum = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let d = o.get(y, xx, ch) - x.get(y, xx, ch);
                sum += gate(y, xx) * d * d;
            }
        }
    }
    sum / (h * w * c) as f64
}

pub struct LossOracle {
    pub id: f64,
    pub fill: f64,
    pub guided_id: f64,
    pub guided_fill: f64,
}

pub fn loss_oracle(o: &ImagePlane, x: &ImagePlane, m: &BinaryMask, s: &BinaryMask) -> LossOracle {
    let mv = |y, xx| m.get(y, xx) as f64;
    let sv = |y, xx| s.get(y, xx) as f64;
    LossOracle {
        id: gated_mse_oracle(o, x, |y, xx| mv(y, xx)),
        fill: gated_mse_oracle(o, x, |y, xx| 1.0 - mv(y, xx)),
        guided_id: gated_mse_oracle(o, x, |y, xx| mv(y, xx) * sv(y, xx)),
        guided_fill: gated_mse_oracle(o, x, |y, xx| (1.0 - mv(y, xx)) * sv(y, xx)),
    }
}

/// Mean binary or softmax cross-entropy over pixels.
pub fn cross_entropy_oracle(logits: &ImagePlane, label: &ClassMap) -> f64 {
    let (h, w, k) = logits.shape();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = label.get(y, x) as usize;
            if k == 1 {
                let p = 1.0 / (1.0 + (-logits.get(y, x, 0)).exp());
                sum -= if l == 1 { p.ln() } else { (1.0 - p).ln() };
            } else {
                let z: f64 = (0..k).map(|c| logits.get(y, x, c).exp()).sum();
                sum -= (logits.get(y, x, l).exp() / z).ln();
            }
        }
    }
    sum / (h * w) as f64
}

/// Paints the seeded squares pixel by pixel: 0 inside any square, 1 elsewhere.
pub fn rasterize_oracle(h: usize, w: usize, spec: &MaskSpec) -> BinaryMask {
    let corners = sample_corners(h, w, spec).unwrap();
    let s = spec.cluster_size;
    BinaryMask::from_fn(h, w, |y, x| {
        !corners.iter().any(|&(cy, cx)| y >= cy && y < cy + s && x >= cx && x < cx + s)
    })
}

pub fn iou_oracle(pred: &ClassMap, label: &ClassMap, class: u8) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let (p, l) = (pred.get(y, x) == class, label.get(y, x) == class);
            if p && l {
                inter += 1;
            }
            if p || l {
                union += 1;
            }
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Central differences of `f` at every element of `o`.
pub fn numeric_grad(o: &ImagePlane, step: f64, f: impl Fn(&ImagePlane) -> f64) -> Vec<f64> {
    let mut probe = o.clone();
    (0..o.data().len())
        .map(|i| {
            let v = o.data()[i];
            probe.data_mut()[i] = v + step;
            let up = f(&probe);
            probe.data_mut()[i] = v - step;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Gradient of `w_id·L_id + w_fill·L_fill` (or the guided pair) from the
/// library, starting from a zeroed buffer.
pub fn library_grad(
    o: &ImagePlane,
    x: &ImagePlane,
    m: &BinaryMask,
    s: Option<&BinaryMask>,
    weights: &LossWeights,
) -> ImagePlane {
    let (h, w, c) = o.shape();
    let mut g = ImagePlane::zeros(h, w, c);
    inpaint_loss(o, x, m, s, weights, Some(&mut g)).unwrap();
    g
}

/// Compares every loss on one instance against the oracle, returning the
/// largest absolute deviation.
pub fn loss_oracle_deviation(o: &ImagePlane, x: &ImagePlane, m: &BinaryMask, s: &BinaryMask) -> f64 {
    let want = loss_oracle(o, x, m, s);
    let got = [
        identity_loss(o, x, m).unwrap(),
        fill_loss(o, x, m).unwrap(),
        guided_identity_loss(o, x, m, s).unwrap(),
        guided_fill_loss(o, x, m, s).unwrap(),
    ];
    let w = LossWeights::default();
    let total = inpaint_loss(o, x, m, None, &w, None).unwrap().l_total;
    let guided = inpaint_loss(o, x, m, Some(s), &w, None).unwrap().l_total;
    let expected = [
        want.id,
        want.fill,
        want.guided_id,
        want.guided_fill,
        w.w_id * want.id + w.w_fill * want.fill,
        w.w_id * want.guided_id + w.w_fill * want.guided_fill,
    ];
    got.iter()
        .chain([total, guided].iter())
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Relative error of each of the six analytic gradients against central
/// differences, plus whether every gradient is exactly zero off its gate.
pub fn gradient_check(o: &ImagePlane, x: &ImagePlane, m: &BinaryMask, s: &BinaryMask) -> (f64, bool) {
    let c = o.channels();
    let mv = |p: usize| m.values()[p];
    let sv = |p: usize| s.values()[p];
    let w = LossWeights::default();
    let only_id = LossWeights::new(1.0, 0.0).unwrap();
    let only_fill = LossWeights::new(0.0, 1.0).unwrap();
    type Gate<'a> = Box<dyn Fn(usize) -> bool + 'a>;
    let cases: Vec<(Option<&BinaryMask>, LossWeights, Gate)> = vec![
        (None, only_id, Box::new(|p| mv(p) == 1)),
        (None, only_fill, Box::new(|p| mv(p) == 0)),
        (None, w, Box::new(|_| true)),
        (Some(s), only_id, Box::new(|p| mv(p) == 1 && sv(p) == 1)),
        (Some(s), only_fill, Box::new(|p| mv(p) == 0 && sv(p) == 1)),
        (Some(s), w, Box::new(|p| sv(p) == 1)),
    ];
    let mut worst = 0.0f64;
    let mut zero_off_support = true;
    for (road, weights, support) in cases {
        let analytic = library_grad(o, x, m, road, &weights);
        let numeric = numeric_grad(o, 1e-5, |probe| {
            inpaint_loss(probe, x, m, road, &weights, None).unwrap().l_total
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
        for (i, &g) in analytic.data().iter().enumerate() {
            if !support(i / c) && g != 0.0 {
                zero_off_support = false;
            }
        }
    }
    (worst, zero_off_support)
}

/// Checks one generate_mask call against the fraction bound, square
/// membership (the mask equals the painted corners) and determinism.
pub fn mask_invariants(h: usize, w: usize, spec: &MaskSpec) -> Result<(), String> {
    let mask = roadfill::masking::generate_mask(h, w, spec).map_err(|e| e.to_string())?;
    let total = (h * w) as f64;
    let fraction = roadfill::masking::masked_fraction(&mask);
    let budget = (spec.cluster_count * spec.cluster_size * spec.cluster_size) as f64 / total;
    if fraction > budget.min(1.0) + 1e-12 {
        return Err(format!("fraction {fraction} above bound {budget}"));
    }
    if spec.cluster_count > 0 && mask.count_zeros() < spec.cluster_size * spec.cluster_size {
        return Err(format!("fraction {fraction} below one square"));
    }
    if mask != rasterize_oracle(h, w, spec) {
        return Err("mask differs from painted squares".into());
    }
    let again = roadfill::masking::generate_mask(h, w, spec).map_err(|e| e.to_string())?;
    if again != mask {
        return Err("same seed produced a different mask".into());
    }
    Ok(())
}

pub fn random_mask_case(r: &mut ChaCha8Rng) -> (usize, usize, MaskSpec) {
    let h = r.gen_range(1..=64);
    let w = r.gen_range(1..=64);
    let size = r.gen_range(1..=h.min(w));
    let count = r.gen_range(0..=120);
    (h, w, MaskSpec::new(count, size, r.gen()))
}

/// Runs the inpainting and segmentation head swaps on a fresh model and
/// reports which non-output parameters changed and whether the features on
/// a fixed input moved.
pub fn head_swap_check(num_classes: usize, seed: u64) -> (Vec<String>, bool) {
    use roadfill::model::{to_inpainting_head, to_segmentation_head, SegmentationModel, Tensor, ToyUNet};
    let original = ToyUNet::with_base(3, num_classes, 8, seed);
    let mut r = rng(seed ^ 0x5eed);
    let probe = random_plane(&mut r, 16, 16, 3);
    let input = Tensor::from_planes(&[&probe]).unwrap();
    let before = original.features(&input);
    let swapped = to_inpainting_head(original.clone(), seed + 1).unwrap();
    let swapped = to_segmentation_head(swapped, num_classes, seed + 2).unwrap();
    let after = swapped.features(&input);
    let changed = original
        .parameters()
        .iter()
        .zip(swapped.parameters())
        .filter(|((name, _), _)| !original.is_final_layer_param(name))
        .filter(|((_, a), (_, b))| {
            a.value.iter().zip(&b.value).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|((name, _), _)| name.clone())
        .collect();
    let same_features = before.data.iter().zip(&after.data).all(|(a, b)| a.to_bits() == b.to_bits());
    (changed, same_features)
}

/// Largest deviation between the library IoU and the oracle over every class
/// of one prediction/label pair; `None`-ness must agree exactly.
pub fn iou_deviation(pred: &ClassMap, label: &ClassMap, classes: u8) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for class in 0..classes {
        let got = roadfill::evaluation::iou(pred, label, class).map_err(|e| e.to_string())?;
        match (got, iou_oracle(pred, label, class)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            (a, b) => return Err(format!("class {class}: {a:?} vs oracle {b:?}")),
        }
    }
    Ok(worst)
}

/// Every class map of an `h×w` grid over `k` classes.
pub fn all_class_maps(h: usize, w: usize, k: u8) -> Vec<ClassMap> {
    let n = h * w;
    let total = (k as usize).pow(n as u32);
    (0..total)
        .map(|mut code| {
            let v = (0..n)
                .map(|_| {
                    let c = (code % k as usize) as u8;
                    code /= k as usize;
                    c
                })
                .collect();
            ClassMap::from_vec(h, w, v).unwrap()
        })
        .collect()
}

pub fn random_class_map(r: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> ClassMap {
    ClassMap::from_vec(h, w, (0..h * w).map(|_| r.gen_range(0..k)).collect()).unwrap()
}

/// A desk-profile config shrunk to a few epochs and a narrow network, and
/// synthetic data to match, so a whole pipeline runs in about a second.
pub fn tiny_pipeline(seed: u64) -> (
    roadfill::trainer::PipelineConfig,
    roadfill::trainer::PipelineData,
) {
    use roadfill::data::synthetic::{generate_dataset, scene_samples, SyntheticDatasetSpec};
    use roadfill::data::{Split, Style};
    use roadfill::trainer::{PipelineConfig, PipelineData, Profile};
    let mut cfg = PipelineConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg.base_channels = 4;
    cfg.step1 = cfg.step1.shortened(3).unwrap();
    cfg.step2 = cfg.step2.shortened(2).unwrap();
    cfg.step3 = cfg.step3.shortened(3).unwrap();
    let spec = SyntheticDatasetSpec {
        canvas: 32,
        train_scenes: 6,
        val_scenes: 2,
        seed: 77,
        train_styles: Style::ALL.to_vec(),
        val_styles: Style::ALL.to_vec(),
    };
    let scenes = generate_dataset(&spec).unwrap();
    let train = scene_samples(scenes.iter().filter(|s| s.split == Split::Train));
    let val = scene_samples(scenes.iter().filter(|s| s.split == Split::Val));
    let data = PipelineData::new(train.clone(), train, val).unwrap();
    (cfg, data)
}
