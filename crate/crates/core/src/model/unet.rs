//! Reference three-level U-Net.

use super::layers::{concat, relu_backward, relu_inplace, split, Conv2d, ConvTranspose2x2, MaxPool2, Param};
use super::checkpoint::{load_checkpoint, CheckpointBundle};
use super::tensor::Tensor;
use super::{SegmentationModel, TrainableModel};
use crate::error::{Error, Result};
use crate::rng;

/// Two 3×3 conv + ReLU pairs per level, 2×2 max pooling on the way down,
/// 2×2 transposed convolutions and skip concatenation on the way up, and a
/// 1×1 convolution as the output layer (`head`).
#[derive(Debug, Clone)]
pub struct ToyUNet {
    base: usize,
    enc1: [Conv2d; 2],
    enc2: [Conv2d; 2],
    bottleneck: [Conv2d; 2],
    up2: ConvTranspose2x2,
    dec2: [Conv2d; 2],
    up1: ConvTranspose2x2,
    dec1: [Conv2d; 2],
    head: Conv2d,
    pool1: MaxPool2,
    pool2: MaxPool2,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    input_hw: (usize, usize),
    acts: [Tensor; 10],
}

const HEAD: &str = "head";

impl ToyUNet {
    pub const DEFAULT_BASE_CHANNELS: usize = 16;

    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        Self::with_base(in_channels, out_channels, Self::DEFAULT_BASE_CHANNELS, seed)
    }

    pub fn with_base(in_channels: usize, out_channels: usize, base: usize, seed: u64) -> Self {
        let s = |i: u64| rng::derive_seed(seed, &[i]);
        let (c1, c2, c3) = (base, 2 * base, 4 * base);
        ToyUNet {
            base,
            enc1: [Conv2d::new(in_channels, c1, 3, s(0)), Conv2d::new(c1, c1, 3, s(1))],
            enc2: [Conv2d::new(c1, c2, 3, s(2)), Conv2d::new(c2, c2, 3, s(3))],
            bottleneck: [Conv2d::new(c2, c3, 3, s(4)), Conv2d::new(c3, c3, 3, s(5))],
            up2: ConvTranspose2x2::new(c3, c2, s(6)),
            dec2: [Conv2d::new(2 * c2, c2, 3, s(7)), Conv2d::new(c2, c2, 3, s(8))],
            up1: ConvTranspose2x2::new(c2, c1, s(9)),
            dec1: [Conv2d::new(2 * c1, c1, 3, s(10)), Conv2d::new(c1, c1, 3, s(11))],
            head: Conv2d::new(c1, out_channels, 1, s(12)),
            pool1: MaxPool2::default(),
            pool2: MaxPool2::default(),
            cache: None,
        }
    }

    /// Rebuilds a network with the shapes stored in `bundle` and loads its
    /// parameters.
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        let first = bundle
            .parameters
            .get("enc1.conv1.weight")
            .ok_or(Error::IncompatibleCheckpoint)?;
        let [base, in_channels, _, _] = first.shape[..] else {
            return Err(Error::IncompatibleCheckpoint);
        };
        let mut net = ToyUNet::with_base(in_channels, bundle.head_channels, base, 0);
        load_checkpoint(bundle, &mut net)?;
        Ok(net)
    }

    pub fn base_channels(&self) -> usize {
        self.base
    }

    pub fn in_channels(&self) -> usize {
        self.enc1[0].in_channels()
    }

    fn padded_hw(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(4) * 4, w.div_ceil(4) * 4)
    }

    fn conv_relu(conv: &Conv2d, x: &Tensor) -> Tensor {
        let mut y = conv.forward(x);
        relu_inplace(&mut y);
        y
    }

    fn conv_relu_train(conv: &mut Conv2d, x: &Tensor) -> Tensor {
        let mut y = conv.forward_train(x);
        relu_inplace(&mut y);
        y
    }

    fn decoder_features(&self, x: &Tensor) -> Tensor {
        let (ph, pw) = Self::padded_hw(x.h, x.w);
        let x = x.pad_to(ph, pw);
        let e1 = Self::conv_relu(&self.enc1[1], &Self::conv_relu(&self.enc1[0], &x));
        let p1 = MaxPool2::forward(&e1);
        let e2 = Self::conv_relu(&self.enc2[1], &Self::conv_relu(&self.enc2[0], &p1));
        let p2 = MaxPool2::forward(&e2);
        let b = Self::conv_relu(&self.bottleneck[1], &Self::conv_relu(&self.bottleneck[0], &p2));
        let c2 = concat(&self.up2.forward(&b), &e2);
        let d2 = Self::conv_relu(&self.dec2[1], &Self::conv_relu(&self.dec2[0], &c2));
        let c1 = concat(&self.up1.forward(&d2), &e1);
        Self::conv_relu(&self.dec1[1], &Self::conv_relu(&self.dec1[0], &c1))
    }

    fn convs(&self) -> Vec<(&'static str, &Conv2d)> {
        vec![
            ("enc1.conv1", &self.enc1[0]),
            ("enc1.conv2", &self.enc1[1]),
            ("enc2.conv1", &self.enc2[0]),
            ("enc2.conv2", &self.enc2[1]),
            ("bottleneck.conv1", &self.bottleneck[0]),
            ("bottleneck.conv2", &self.bottleneck[1]),
            ("dec2.conv1", &self.dec2[0]),
            ("dec2.conv2", &self.dec2[1]),
            ("dec1.conv1", &self.dec1[0]),
            ("dec1.conv2", &self.dec1[1]),
            (HEAD, &self.head),
        ]
    }
}

impl SegmentationModel for ToyUNet {
    fn out_channels(&self) -> usize {
        self.head.out_channels()
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        let features = self.decoder_features(input);
        self.head.forward(&features).crop_to(input.h, input.w)
    }

    fn features(&self, input: &Tensor) -> Tensor {
        self.decoder_features(input).crop_to(input.h, input.w)
    }

    fn parameters(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            if name == HEAD {
                continue;
            }
            out.push((format!("{name}.weight"), &conv.weight));
            out.push((format!("{name}.bias"), &conv.bias));
        }
        out.push(("up2.weight".into(), &self.up2.weight));
        out.push(("up2.bias".into(), &self.up2.bias));
        out.push(("up1.weight".into(), &self.up1.weight));
        out.push(("up1.bias".into(), &self.up1.bias));
        out.push((format!("{HEAD}.weight"), &self.head.weight));
        out.push((format!("{HEAD}.bias"), &self.head.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        let named: [(&str, &mut Conv2d); 10] = {
            let [e1a, e1b] = &mut self.enc1;
            let [e2a, e2b] = &mut self.enc2;
            let [ba, bb] = &mut self.bottleneck;
            let [d2a, d2b] = &mut self.dec2;
            let [d1a, d1b] = &mut self.dec1;
            [
                ("enc1.conv1", e1a),
                ("enc1.conv2", e1b),
                ("enc2.conv1", e2a),
                ("enc2.conv2", e2b),
                ("bottleneck.conv1", ba),
                ("bottleneck.conv2", bb),
                ("dec2.conv1", d2a),
                ("dec2.conv2", d2b),
                ("dec1.conv1", d1a),
                ("dec1.conv2", d1b),
            ]
        };
        for (name, conv) in named {
            out.push((format!("{name}.weight"), &mut conv.weight));
            out.push((format!("{name}.bias"), &mut conv.bias));
        }
        out.push(("up2.weight".into(), &mut self.up2.weight));
        out.push(("up2.bias".into(), &mut self.up2.bias));
        out.push(("up1.weight".into(), &mut self.up1.weight));
        out.push(("up1.bias".into(), &mut self.up1.bias));
        out.push((format!("{HEAD}.weight"), &mut self.head.weight));
        out.push((format!("{HEAD}.bias"), &mut self.head.bias));
        out
    }

    fn final_layer(&self) -> Option<String> {
        Some(HEAD.into())
    }

    fn replace_head(&mut self, out_channels: usize, seed: u64) -> Result<()> {
        if out_channels == 0 {
            return Err(Error::InvalidClassCount(0));
        }
        self.head = Conv2d::new(self.base, out_channels, 1, seed);
        Ok(())
    }

    fn extend_head(&mut self, out_channels: usize, seed: u64) -> Result<()> {
        let current = self.out_channels();
        if out_channels <= current {
            return self.replace_head(out_channels, seed);
        }
        let mut fresh = Conv2d::new(self.base, out_channels, 1, seed);
        let keep = current * self.base;
        fresh.weight.value[..keep].copy_from_slice(&self.head.weight.value);
        fresh.bias.value[..current].copy_from_slice(&self.head.bias.value);
        self.head = fresh;
        Ok(())
    }

    fn describe_architecture(&self) -> String {
        format!(
            "ToyUNet(in={}, base={}, levels=3, out={})",
            self.in_channels(),
            self.base,
            self.out_channels()
        )
    }
}

impl TrainableModel for ToyUNet {
    fn forward_train(&mut self, input: &Tensor) -> Tensor {
        let (ph, pw) = Self::padded_hw(input.h, input.w);
        let x = input.pad_to(ph, pw);
        let e1a = Self::conv_relu_train(&mut self.enc1[0], &x);
        let e1 = Self::conv_relu_train(&mut self.enc1[1], &e1a);
        let p1 = self.pool1.forward_train(&e1);
        let e2a = Self::conv_relu_train(&mut self.enc2[0], &p1);
        let e2 = Self::conv_relu_train(&mut self.enc2[1], &e2a);
        let p2 = self.pool2.forward_train(&e2);
        let b1 = Self::conv_relu_train(&mut self.bottleneck[0], &p2);
        let b = Self::conv_relu_train(&mut self.bottleneck[1], &b1);
        let c2 = concat(&self.up2.forward_train(&b), &e2);
        let d2a = Self::conv_relu_train(&mut self.dec2[0], &c2);
        let d2 = Self::conv_relu_train(&mut self.dec2[1], &d2a);
        let c1 = concat(&self.up1.forward_train(&d2), &e1);
        let d1a = Self::conv_relu_train(&mut self.dec1[0], &c1);
        let d1 = Self::conv_relu_train(&mut self.dec1[1], &d1a);
        let out = self.head.forward_train(&d1);
        self.cache = Some(Cache {
            input_hw: (input.h, input.w),
            acts: [e1a, e1, e2a, e2, b1, b, d2a, d2, d1a, d1],
        });
        out.crop_to(input.h, input.w)
    }

    fn backward(&mut self, grad_output: &Tensor) {
        let cache = self.cache.take().expect("backward called before forward_train");
        assert_eq!((grad_output.h, grad_output.w), cache.input_hw, "gradient shape");
        let [e1a, e1, e2a, e2, b1, b, d2a, d2, d1a, d1] = &cache.acts;
        let g = grad_output.pad_to(d1.h, d1.w);

        let back = |conv: &mut Conv2d, g: &mut Tensor, act: &Tensor, need: bool| {
            relu_backward(g, act);
            conv.backward(g, need)
        };

        let mut g = self.head.backward(&g, true).unwrap();
        let mut g = back(&mut self.dec1[1], &mut g, d1, true).unwrap();
        let g = back(&mut self.dec1[0], &mut g, d1a, true).unwrap();
        let (g_up1, g_skip1) = split(&g, self.base);
        let mut g = self.up1.backward(&g_up1);
        let mut g = back(&mut self.dec2[1], &mut g, d2, true).unwrap();
        let g = back(&mut self.dec2[0], &mut g, d2a, true).unwrap();
        let (g_up2, g_skip2) = split(&g, 2 * self.base);
        let mut g = self.up2.backward(&g_up2);
        let mut g = back(&mut self.bottleneck[1], &mut g, b, true).unwrap();
        let g = back(&mut self.bottleneck[0], &mut g, b1, true).unwrap();
        let mut g = self.pool2.backward(&g);
        add_assign(&mut g, &g_skip2);
        let mut g = back(&mut self.enc2[1], &mut g, e2, true).unwrap();
        let g = back(&mut self.enc2[0], &mut g, e2a, true).unwrap();
        let mut g = self.pool1.backward(&g);
        add_assign(&mut g, &g_skip1);
        let mut g = back(&mut self.enc1[1], &mut g, e1, true).unwrap();
        back(&mut self.enc1[0], &mut g, e1a, false);
    }
}

fn add_assign(a: &mut Tensor, b: &Tensor) {
    assert_eq!(a.dims(), b.dims());
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}
