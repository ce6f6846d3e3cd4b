//! Convolution, pooling and activation layers with hand-written backward
//! passes. Matrix products go through `matrixmultiply::sgemm`.

use rand::Rng;

use super::tensor::Tensor;
use crate::rng;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn from_value(shape: &[usize], value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
        }
    }

    /// Kaiming-uniform fill for a ReLU network: `U(-b, b)` with `b = √(6 / fan_in)`.
    pub fn kaiming(shape: &[usize], fan_in: usize, seed: u64) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        let mut rng = rng::stream(seed, &[]);
        let len = shape.iter().product();
        Param::from_value(shape, (0..len).map(|_| rng.gen_range(-bound..=bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Square-kernel, stride-1 convolution with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    cols: Vec<f32>,
    input_dims: [usize; 4],
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, seed: u64) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::kaiming(&[out_ch, in_ch, kernel, kernel], fan_in, seed),
            bias: Param::zeros(&[out_ch]),
            kernel,
            cols: Vec::new(),
            input_dims: [0; 4],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn col_rows(&self) -> usize {
        self.in_channels() * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let k = self.kernel;
        if k == 1 {
            cols.copy_from_slice(x);
            return;
        }
        let pad = k / 2;
        let hw = h * w;
        for c in 0..self.in_channels() {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    for y in 0..h {
                        let out = &mut row[y * w..(y + 1) * w];
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h || x_lo >= x_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let sy = sy - pad;
                        out[..x_lo].fill(0.0);
                        out[x_hi..].fill(0.0);
                        let src = sy * w + x_lo + kx - pad;
                        out[x_lo..x_hi].copy_from_slice(&plane[src..src + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let k = self.kernel;
        if k == 1 {
            dx.iter_mut().zip(cols).for_each(|(d, c)| *d += c);
            return;
        }
        let pad = k / 2;
        let hw = h * w;
        for c in 0..self.in_channels() {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let dst = (sy - pad) * w + x_lo + kx - pad;
                        let src = &row[y * w + x_lo..y * w + x_hi];
                        for (d, s) in plane[dst..dst + src.len()].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, cols: &mut [f32]) -> Tensor {
        assert_eq!(x.c, self.in_channels(), "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let rows = self.col_rows();
        let cout = self.out_channels();
        let mut out = Tensor::zeros(x.n, cout, h, w);
        for i in 0..x.n {
            let col = &mut cols[i * rows * hw..(i + 1) * rows * hw];
            self.im2col(x.sample(i), h, w, col);
            let y = out.sample_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                y[o * hw..(o + 1) * hw].fill(*b);
            }
            gemm(cout, rows, hw, &self.weight.value, (rows, 1), col, (hw, 1), 1.0, y, (hw, 1));
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cols = vec![0.0; x.n * self.col_rows() * x.plane_len()];
        self.run(x, &mut cols)
    }

    /// Forward pass that keeps the unfolded input for [`Conv2d::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut cols = std::mem::take(&mut self.cols);
        cols.resize(x.n * self.col_rows() * x.plane_len(), 0.0);
        let out = self.run(x, &mut cols);
        self.cols = cols;
        self.input_dims = x.dims();
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let [n, cin, h, w] = self.input_dims;
        let hw = h * w;
        let rows = self.col_rows();
        let cout = self.out_channels();
        assert_eq!(dy.dims(), [n, cout, h, w], "conv output gradient shape");
        let mut dx = need_input_grad.then(|| Tensor::zeros(n, cin, h, w));
        let mut dcols = if need_input_grad { vec![0.0; rows * hw] } else { Vec::new() };
        for i in 0..n {
            let g = dy.sample(i);
            let col = &self.cols[i * rows * hw..(i + 1) * rows * hw];
            // dW (cout×rows) += dY (cout×hw) · colsᵀ (hw×rows)
            gemm(cout, hw, rows, g, (hw, 1), col, (1, hw), 1.0, &mut self.weight.grad, (rows, 1));
            for (o, db) in self.bias.grad.iter_mut().enumerate() {
                *db += g[o * hw..(o + 1) * hw].iter().sum::<f32>();
            }
            if let Some(dx) = dx.as_mut() {
                // dcols (rows×hw) = Wᵀ (rows×cout) · dY (cout×hw)
                gemm(rows, cout, hw, &self.weight.value, (1, rows), g, (hw, 1), 0.0, &mut dcols, (hw, 1));
                self.col2im(&dcols, h, w, dx.sample_mut(i));
            }
        }
        dx
    }
}

/// 2×2, stride-2 transposed convolution (exact ×2 upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    /// `[in, out, 2, 2]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose2x2 {
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Self {
        ConvTranspose2x2 {
            weight: Param::kaiming(&[in_ch, out_ch, 2, 2], in_ch, seed),
            bias: Param::zeros(&[out_ch]),
            input: None,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[0], self.weight.shape[1])
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (cin, cout) = self.dims();
        assert_eq!(x.c, cin, "transposed conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(x.n, cout, oh, ow);
        let mut tmp = vec![0.0; cout * 4 * hw];
        for i in 0..x.n {
            // tmp (cout·4 × hw) = Wᵀ (cout·4 × cin) · X (cin × hw)
            gemm(cout * 4, cin, hw, &self.weight.value, (1, cout * 4), x.sample(i), (hw, 1), 0.0, &mut tmp, (hw, 1));
            let y = out.sample_mut(i);
            for o in 0..cout {
                let b = self.bias.value[o];
                for ky in 0..2 {
                    for kx in 0..2 {
                        let src = &tmp[(o * 4 + ky * 2 + kx) * hw..][..hw];
                        for yy in 0..h {
                            let row = &mut y[o * oh * ow + (2 * yy + ky) * ow..][..ow];
                            for xx in 0..w {
                                row[2 * xx + kx] = src[yy * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.forward(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (cin, cout) = self.dims();
        let x = self.input.as_ref().expect("backward before forward_train");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        assert_eq!(dy.dims(), [x.n, cout, oh, ow], "transposed conv output gradient shape");
        let mut dx = Tensor::zeros(x.n, cin, h, w);
        let mut g = vec![0.0; cout * 4 * hw];
        for i in 0..x.n {
            let d = dy.sample(i);
            for o in 0..cout {
                let plane = &d[o * oh * ow..(o + 1) * oh * ow];
                self.bias.grad[o] += plane.iter().sum::<f32>();
                for ky in 0..2 {
                    for kx in 0..2 {
                        let dst = &mut g[(o * 4 + ky * 2 + kx) * hw..][..hw];
                        for yy in 0..h {
                            let row = &plane[(2 * yy + ky) * ow..][..ow];
                            for xx in 0..w {
                                dst[yy * w + xx] = row[2 * xx + kx];
                            }
                        }
                    }
                }
            }
            // dX (cin × hw) = W (cin × cout·4) · G (cout·4 × hw)
            gemm(cin, cout * 4, hw, &self.weight.value, (cout * 4, 1), &g, (hw, 1), 0.0, dx.sample_mut(i), (hw, 1));
            // dW (cin × cout·4) += X (cin × hw) · Gᵀ (hw × cout·4)
            gemm(cin, hw, cout * 4, x.sample(i), (hw, 1), &g, (1, hw), 1.0, &mut self.weight.grad, (cout * 4, 1));
        }
        dx
    }
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    input_dims: [usize; 4],
}

impl MaxPool2 {
    fn run(x: &Tensor, mut argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out.data.len());
        }
        for plane in 0..x.n * x.c {
            let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * y + dy) * x.w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.data[plane * oh * ow + y * ow + xx] = src[best];
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best as u32);
                    }
                }
            }
        }
        out
    }

    pub fn forward(x: &Tensor) -> Tensor {
        MaxPool2::run(x, None)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input_dims = x.dims();
        let mut argmax = std::mem::take(&mut self.argmax);
        let out = MaxPool2::run(x, Some(&mut argmax));
        self.argmax = argmax;
        out
    }

    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = self.input_dims;
        let mut dx = Tensor::zeros(n, c, h, w);
        let per_plane = dy.h * dy.w;
        for (i, (&g, &idx)) in dy.data.iter().zip(&self.argmax).enumerate() {
            let plane = i / per_plane;
            dx.data[plane * h * w + idx as usize] += g;
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the activation output was not positive.
pub fn relu_backward(dy: &mut Tensor, activation: &Tensor) {
    for (g, &a) in dy.data.iter_mut().zip(&activation.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial dims");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.sample_mut(i);
        let (la, lb) = (a.sample_len(), b.sample_len());
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..la + lb].copy_from_slice(b.sample(i));
    }
    out
}

/// Splits a concatenation gradient back into its `a`/`b` parts.
pub fn split(d: &Tensor, a_channels: usize) -> (Tensor, Tensor) {
    let b_channels = d.c - a_channels;
    let mut da = Tensor::zeros(d.n, a_channels, d.h, d.w);
    let mut db = Tensor::zeros(d.n, b_channels, d.h, d.w);
    let la = da.sample_len();
    for i in 0..d.n {
        let src = d.sample(i);
        da.sample_mut(i).copy_from_slice(&src[..la]);
        db.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(dims: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        let [n, c, h, w] = dims;
        let mut t = Tensor::zeros(n, c, h, w);
        t.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        t
    }

    /// Direct nested-loop convolution.
    fn conv_reference(conv: &Conv2d, x: &Tensor) -> Tensor {
        let k = conv.kernel as isize;
        let pad = k / 2;
        let cout = conv.out_channels();
        let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for o in 0..cout {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut acc = conv.bias.value[o] as f64;
                        for c in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * x.c + c) * k as usize + ky as usize) * k as usize + kx as usize];
                                    let xv = x.data[((i * x.c + c) * x.h + sy as usize) * x.w + sx as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        out.data[((i * cout + o) * x.h + y as usize) * x.w + xx as usize] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        for k in [1, 3] {
            let mut conv = Conv2d::new(3, 4, k, 5);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = rand_tensor([2, 3, 5, 6], 1);
            let fast = conv.forward(&x);
            let slow = conv_reference(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// Loss = Σ r ⊙ layer(x) for a fixed random r, checked by central differences.
    fn check_grad(
        mut f: impl FnMut(&Tensor) -> Tensor,
        x: &Tensor,
        analytic_dx: &Tensor,
        r: &Tensor,
    ) {
        let eps = 1e-2f32;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let lp: f64 = f(&xp).data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let lm: f64 = f(&xm).data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let numeric = (lp - lm) / (2.0 * eps as f64);
            let a = analytic_dx.data[idx] as f64;
            assert!((numeric - a).abs() < 2e-3 * (1.0 + a.abs()), "idx {idx}: {numeric} vs {a}");
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let mut conv = Conv2d::new(2, 3, 3, 9);
        let x = rand_tensor([2, 2, 4, 5], 2);
        let y = conv.forward_train(&x);
        let r = rand_tensor(y.dims(), 3);
        let dx = conv.backward(&r, true).unwrap();
        let frozen = conv.clone();
        check_grad(|t| frozen.forward(t), &x, &dx, &r);

        // weight gradient via perturbing the weights
        let eps = 1e-2f32;
        for idx in 0..conv.weight.len() {
            let mut cp = frozen.clone();
            cp.weight.value[idx] += eps;
            let mut cm = frozen.clone();
            cm.weight.value[idx] -= eps;
            let dot = |t: Tensor| -> f64 { t.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum() };
            let numeric = (dot(cp.forward(&x)) - dot(cm.forward(&x))) / (2.0 * eps as f64);
            let a = conv.weight.grad[idx] as f64;
            assert!((numeric - a).abs() < 2e-3 * (1.0 + a.abs()));
        }
        let bias_sum: f32 = r.data.chunks(20).enumerate().filter(|(i, _)| i % 3 == 0).map(|(_, c)| c.iter().sum::<f32>()).sum();
        assert!((conv.bias.grad[0] - bias_sum).abs() < 1e-4);
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut up = ConvTranspose2x2::new(3, 2, 4);
        up.bias.value = vec![0.5, -0.5];
        let x = rand_tensor([2, 3, 3, 2], 5);
        let y = up.forward_train(&x);
        assert_eq!(y.dims(), [2, 2, 6, 4]);
        let r = rand_tensor(y.dims(), 6);
        let dx = up.backward(&r);
        let frozen = up.clone();
        check_grad(|t| frozen.forward(t), &x, &dx, &r);
        let eps = 1e-2f32;
        for idx in 0..up.weight.len() {
            let mut cp = frozen.clone();
            cp.weight.value[idx] += eps;
            let mut cm = frozen.clone();
            cm.weight.value[idx] -= eps;
            let dot = |t: Tensor| -> f64 { t.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum() };
            let numeric = (dot(cp.forward(&x)) - dot(cm.forward(&x))) / (2.0 * eps as f64);
            let a = up.weight.grad[idx] as f64;
            assert!((numeric - a).abs() < 2e-3 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::default();
        let x = rand_tensor([1, 2, 4, 4], 8);
        let y = pool.forward_train(&x);
        assert_eq!(y.dims(), [1, 2, 2, 2]);
        let r = rand_tensor(y.dims(), 9);
        let dx = pool.backward(&r);
        check_grad(MaxPool2::forward, &x, &dx, &r);
        assert_eq!(dx.data.iter().filter(|v| **v != 0.0).count(), 8);
    }

    #[test]
    fn concat_split_inverse() {
        let a = rand_tensor([2, 3, 2, 2], 1);
        let b = rand_tensor([2, 1, 2, 2], 2);
        let (da, db) = split(&concat(&a, &b), 3);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
