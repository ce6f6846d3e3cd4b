//! The contract a segmentation network must satisfy to go through the three
//! training steps, the output-layer swaps between them, checkpointing, and a
//! reference U-Net.

pub mod adapters;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod unet;

use std::fmt::Write as _;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, LoadReport, StepTag};
pub use layers::Param;
pub use tensor::Tensor;
pub use unet::ToyUNet;

use crate::error::{Error, Result};

/// How the output layer is turned into an RGB layer for inpainting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadAdaptation {
    /// Swap the output layer for a fresh 3-channel one.
    #[default]
    Replace,
    /// Keep the existing output filters and append fresh ones up to 3.
    Extend,
}

/// What the trainer needs from a network.
///
/// `forward` maps `N×3×H×W` to `N×K×H×W`; the output keeps the input's
/// spatial size. Parameters are enumerated by stable names, and the output
/// layer is identified so it can be swapped between steps.
pub trait SegmentationModel {
    fn out_channels(&self) -> usize;

    fn forward(&self, input: &Tensor) -> Tensor;

    /// Activations that feed the output layer.
    fn features(&self, input: &Tensor) -> Tensor;

    fn parameters(&self) -> Vec<(String, &Param)>;

    fn parameters_mut(&mut self) -> Vec<(String, &mut Param)>;

    /// Name prefix of the output layer's parameters, or `None` if the model
    /// does not expose it.
    fn final_layer(&self) -> Option<String>;

    fn replace_head(&mut self, out_channels: usize, seed: u64) -> Result<()>;

    fn extend_head(&mut self, out_channels: usize, seed: u64) -> Result<()>;

    fn head_adaptation(&self) -> HeadAdaptation {
        HeadAdaptation::Replace
    }

    fn describe_architecture(&self) -> String {
        "model".into()
    }

    fn is_final_layer_param(&self, name: &str) -> bool {
        self.final_layer()
            .is_some_and(|prefix| name.strip_prefix(&prefix).is_some_and(|r| r.starts_with('.')))
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}

pub trait TrainableModel: SegmentationModel {
    /// Forward pass that records what [`TrainableModel::backward`] needs.
    fn forward_train(&mut self, input: &Tensor) -> Tensor;

    /// Accumulates parameter gradients for the last `forward_train` call.
    fn backward(&mut self, grad_output: &Tensor);

    fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

pub const RGB_CHANNELS: usize = 3;

/// Turns the output layer into a 3-channel RGB layer. Every other parameter
/// is left untouched. A model that already emits 3 channels is returned as is.
pub fn to_inpainting_head<M: SegmentationModel>(mut model: M, seed: u64) -> Result<M> {
    if model.final_layer().is_none() {
        return Err(Error::ContractViolation("output layer is not exposed".into()));
    }
    if model.out_channels() == RGB_CHANNELS {
        return Ok(model);
    }
    match model.head_adaptation() {
        HeadAdaptation::Replace => model.replace_head(RGB_CHANNELS, seed)?,
        HeadAdaptation::Extend => model.extend_head(RGB_CHANNELS, seed)?,
    }
    Ok(model)
}

/// Restores a `num_classes`-channel output layer with fresh weights. The
/// inpainting output layer has no segmentation weights to fall back to, so
/// the layer is always reinitialized.
pub fn to_segmentation_head<M: SegmentationModel>(
    mut model: M,
    num_classes: usize,
    seed: u64,
) -> Result<M> {
    if num_classes < 1 {
        return Err(Error::InvalidClassCount(num_classes));
    }
    if model.final_layer().is_none() {
        return Err(Error::ContractViolation("output layer is not exposed".into()));
    }
    model.replace_head(num_classes, seed)?;
    Ok(model)
}

/// One line per parameter (`name<TAB>shape`) followed by the head summary.
pub fn describe<M: SegmentationModel>(model: &M) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", model.describe_architecture());
    for (name, p) in model.parameters() {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{name}\t{}", dims.join("x"));
    }
    let _ = writeln!(
        s,
        "# final layer: {}  out_channels: {}  adaptation: {:?}  parameters: {}",
        model.final_layer().unwrap_or_else(|| "<opaque>".into()),
        model.out_channels(),
        model.head_adaptation(),
        model.parameter_count()
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::ImagePlane;

    fn snapshot<M: SegmentationModel>(m: &M) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        m.parameters()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone(), p.value.clone()))
            .collect()
    }

    #[test]
    fn shape_contract_and_size() {
        let net = ToyUNet::new(3, 2, 1);
        assert!(net.parameter_count() < 2_000_000);
        for (h, w) in [(16, 16), (18, 13), (64, 64)] {
            let x = Tensor::zeros(1, 3, h, w);
            assert_eq!(net.forward(&x).dims(), [1, 2, h, w]);
        }
    }

    #[test]
    fn inpainting_head_from_one_class() {
        let net = ToyUNet::new(3, 1, 1);
        let before = snapshot(&net);
        let rgb = to_inpainting_head(net, 5).unwrap();
        assert_eq!(rgb.out_channels(), 3);
        for ((name, shape, value), (n2, s2, v2)) in before.iter().zip(snapshot(&rgb)) {
            assert_eq!(name, &n2);
            if rgb.is_final_layer_param(name) {
                assert_ne!(shape, &s2);
            } else {
                assert_eq!((shape, value), (&s2, &v2));
            }
        }
    }

    #[test]
    fn rgb_model_is_left_alone() {
        let net = ToyUNet::new(3, 3, 1);
        let before = snapshot(&net);
        let after = to_inpainting_head(net, 5).unwrap();
        assert_eq!(before, snapshot(&after));
    }

    #[test]
    fn extend_keeps_existing_filters() {
        let mut net = ToyUNet::new(3, 1, 1);
        let old = net.parameters()[net.parameters().len() - 2].1.value.clone();
        net.extend_head(3, 9).unwrap();
        let head = net.parameters().iter().find(|(n, _)| n == "head.weight").unwrap().1.clone();
        assert_eq!(&head.value[..old.len()], &old[..]);
        assert_eq!(head.shape, vec![3, 16, 1, 1]);
    }

    #[test]
    fn segmentation_head_rejects_zero_classes() {
        let net = ToyUNet::new(3, 3, 1);
        assert!(matches!(to_segmentation_head(net, 0, 1), Err(Error::InvalidClassCount(0))));
    }

    #[test]
    fn swap_keeps_features() {
        let net = ToyUNet::new(3, 1, 2);
        let img = ImagePlane::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
        let x = Tensor::from_planes(&[&img]).unwrap();
        let before = net.features(&x);
        let net = to_segmentation_head(to_inpainting_head(net, 3).unwrap(), 1, 4).unwrap();
        assert_eq!(before, net.features(&x));
    }

    #[test]
    fn describe_lists_every_parameter() {
        let net = ToyUNet::new(3, 1, 2);
        let text = describe(&net);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), net.parameters().len());
        assert!(text.contains("head.weight\t1x16x1x1"));
    }
}
