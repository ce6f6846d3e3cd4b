//! IoU metrics, the baseline/ablation experiment matrix and report output.

pub mod desk;
mod matrix;
mod report;

pub use matrix::{
    run_matrix, Arm, Domain, ExperimentMatrix, MatrixRow, MatrixRowSpec, MatrixSpec, RowOutcome, Variant,
};
pub use matrix::{bundle_stats, evaluate_bundle, load_manifest_samples, NORMALIZATION_KEY};
pub use report::{
    emit_report, iou_plot_svg, matrix_tsv, parse_matrix_tsv, plot_series, summarize, ReportFiles, ReportOptions,
    SummaryRow,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{normalize, ChannelStats, Sample};
use crate::error::{Error, Result};
use crate::losses::sigmoid;
use crate::model::{SegmentationModel, Tensor};
use crate::plane::{ClassMap, ImagePlane};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_same_dims(prediction: &ClassMap, label: &ClassMap) -> Result<()> {
    if (prediction.height(), prediction.width()) != (label.height(), label.width()) {
        return Err(Error::Shape(format!(
            "{}x{} prediction for a {}x{} label",
            prediction.height(),
            prediction.width(),
            label.height(),
            label.width()
        )));
    }
    Ok(())
}

/// Intersection and union pixel counts of `class`.
pub fn class_counts(prediction: &ClassMap, label: &ClassMap, class: u8) -> Result<(u64, u64)> {
    check_same_dims(prediction, label)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &l) in prediction.classes().iter().zip(label.classes()) {
        let (p, l) = (p == class, l == class);
        inter += (p && l) as u64;
        union += (p || l) as u64;
    }
    Ok((inter, union))
}

/// `|pred = c ∧ label = c| / |pred = c ∨ label = c|`, or `None` when neither
/// map contains the class.
pub fn iou(prediction: &ClassMap, label: &ClassMap, class: u8) -> Result<Option<f64>> {
    let (inter, union) = class_counts(prediction, label, class)?;
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Logits to class indices. One channel is thresholded after a sigmoid with
/// ties going to the foreground; several channels take the argmax (first
/// maximum wins).
pub fn predict_to_classes(logits: &ImagePlane, threshold: f64) -> ClassMap {
    let (h, w, k) = logits.shape();
    let classes = logits
        .data()
        .chunks(k.max(1))
        .map(|px| {
            if k == 1 {
                (sigmoid(px[0]) >= threshold) as u8
            } else {
                let mut best = 0;
                for (i, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = i;
                    }
                }
                best as u8
            }
        })
        .collect();
    ClassMap::from_vec(h, w, classes).expect("class map from logits")
}

/// Classes that are scored for a `k`-channel head: road only for binary
/// heads, every non-background class otherwise.
pub fn scored_classes(k: usize) -> Vec<u8> {
    if k <= 2 {
        vec![1]
    } else {
        (1..k as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassIou {
    pub intersection: u64,
    pub union: u64,
    /// Mean of per-image IoU over images where the class occurs.
    pub per_image_mean: Option<f64>,
    pub images_scored: usize,
}

impl ClassIou {
    /// Dataset-level IoU; `None` flags a class absent from every prediction
    /// and label.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoUReport {
    pub per_class: BTreeMap<u8, ClassIou>,
    pub n_images: usize,
}

impl IoUReport {
    pub fn iou(&self, class: u8) -> Option<f64> {
        self.per_class.get(&class).and_then(ClassIou::iou)
    }

    /// Classes whose union is empty over the whole dataset.
    pub fn undefined_classes(&self) -> Vec<u8> {
        self.per_class
            .iter()
            .filter(|(_, c)| c.union == 0)
            .map(|(&k, _)| k)
            .collect()
    }

    /// Mean dataset-level IoU over classes where it is defined.
    pub fn mean_iou(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.values().filter_map(ClassIou::iou).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tintersection\tunion\tiou\tper_image_mean\timages_scored\n");
        for (class, c) in &self.per_class {
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{class}\t{}\t{}\t{}\t{}\t{}",
                c.intersection,
                c.union,
                fmt(c.iou()),
                fmt(c.per_image_mean),
                c.images_scored
            );
        }
        let _ = writeln!(out, "# n_images={}", self.n_images);
        out
    }
}

/// Sums intersections and unions over a dataset.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    classes: Vec<u8>,
    counts: BTreeMap<u8, ClassIou>,
    per_image_sum: BTreeMap<u8, f64>,
    n_images: usize,
}

impl IouAccumulator {
    pub fn new(classes: &[u8]) -> Self {
        IouAccumulator {
            classes: classes.to_vec(),
            counts: classes.iter().map(|&c| (c, ClassIou::default())).collect(),
            per_image_sum: classes.iter().map(|&c| (c, 0.0)).collect(),
            n_images: 0,
        }
    }

    pub fn add(&mut self, prediction: &ClassMap, label: &ClassMap) -> Result<()> {
        check_same_dims(prediction, label)?;
        for &class in &self.classes {
            let (inter, union) = class_counts(prediction, label, class)?;
            let c = self.counts.get_mut(&class).expect("tracked class");
            c.intersection += inter;
            c.union += union;
            if union > 0 {
                c.images_scored += 1;
                *self.per_image_sum.get_mut(&class).expect("tracked class") += inter as f64 / union as f64;
            }
        }
        self.n_images += 1;
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let mut per_class = self.counts.clone();
        for (class, c) in per_class.iter_mut() {
            c.per_image_mean = (c.images_scored > 0).then(|| self.per_image_sum[class] / c.images_scored as f64);
        }
        IoUReport {
            per_class,
            n_images: self.n_images,
        }
    }
}

/// Batch size used for inference.
const EVAL_BATCH: usize = 8;

/// Runs `model` over raw samples and returns one logit plane per sample.
pub fn infer<M: SegmentationModel>(model: &M, samples: &[Sample], stats: &ChannelStats) -> Result<Vec<ImagePlane>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let planes = chunk
            .iter()
            .map(|s| normalize(&s.image, stats))
            .collect::<Result<Vec<_>>>()?;
        let input = Tensor::from_planes(&planes.iter().collect::<Vec<_>>())?;
        out.extend(model.forward(&input).to_planes());
    }
    Ok(out)
}

/// Dataset-level IoU of `model` on labelled samples.
pub fn evaluate<M: SegmentationModel>(
    model: &M,
    samples: &[Sample],
    stats: &ChannelStats,
    threshold: f64,
) -> Result<IoUReport> {
    let mut acc = IouAccumulator::new(&scored_classes(model.out_channels()));
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = infer(model, chunk, stats)?;
        for (s, l) in chunk.iter().zip(&logits) {
            let label = s.label.as_ref().ok_or_else(|| Error::MissingLabel(s.id.clone()))?;
            acc.add(&predict_to_classes(l, threshold), label)?;
        }
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> ClassMap {
        ClassMap::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn worked_iou() {
        let label = map(4, 4, &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pred = map(4, 4, &[1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(iou(&pred, &label, 1).unwrap(), Some(0.6));
        assert_eq!(iou(&label, &label, 1).unwrap(), Some(1.0));
        let other = map(4, 4, &[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(iou(&other, &label, 1).unwrap(), Some(0.0));
        assert_eq!(iou(&map(4, 4, &[0; 16]), &map(4, 4, &[0; 16]), 1).unwrap(), None);
    }

    #[test]
    fn ties_go_to_foreground() {
        let logits = ImagePlane::zeros(3, 2, 1);
        assert!(predict_to_classes(&logits, 0.5).classes().iter().all(|&c| c == 1));
    }

    #[test]
    fn argmax_classes() {
        let logits = ImagePlane::from_vec(1, 2, 3, vec![0.1, 0.9, 0.3, 2.0, -1.0, 2.0]).unwrap();
        assert_eq!(predict_to_classes(&logits, 0.5).classes(), &[1, 0]);
    }

    #[test]
    fn accumulator_flags_empty_classes() {
        let mut acc = IouAccumulator::new(&[1, 2]);
        acc.add(&map(1, 2, &[1, 0]), &map(1, 2, &[1, 1])).unwrap();
        acc.add(&map(1, 2, &[0, 0]), &map(1, 2, &[0, 0])).unwrap();
        let r = acc.report();
        assert_eq!(r.iou(1), Some(0.5));
        assert_eq!(r.per_class[&1].per_image_mean, Some(0.5));
        assert_eq!(r.per_class[&1].images_scored, 1);
        assert_eq!(r.undefined_classes(), vec![2]);
        assert_eq!(r.mean_iou(), Some(0.5));
        assert_eq!(r.n_images, 2);
    }
}
