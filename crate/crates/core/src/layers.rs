//! Dense building blocks with hand-written backward passes: 3×3 same-padding
//! convolution, affine maps and the Conv-ReLU-Conv residual block.
//!
//! Every layer stores its parameters as plain `ndarray` buffers and exposes
//! them through [`Parameters`], which fixes a stable visiting order used for
//! optimisation, gradient accumulation and checkpointing.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::Rng;

/// Ordered access to the learnable tensors of a module.
pub trait Parameters {
    /// Calls `f(name, shape, values)` for every tensor, in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    /// Same order as [`Parameters::visit`], with mutable access.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all parameters from a flat vector in visiting order.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, v| v.fill(value));
    }

    /// `self += other`, element-wise over matching tensors.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            let len = v.len();
            for (a, b) in v.iter_mut().zip(&flat[offset..offset + len]) {
                *a += b;
            }
            offset += len;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_fill(v: &mut [f64], bound: f64, rng: &mut impl Rng) {
    for x in v {
        *x = rng.gen_range(-bound..bound);
    }
}

/// 3×3 convolution, stride 1, zero padding 1 (output keeps the input size).
///
/// Weights are stored as `[out, in·9]` with column index `c·9 + ky·3 + kx`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Upper bound on im2col buffer entries; larger images are processed in row bands.
const IM2COL_BUDGET: usize = 1 << 22;

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((out_ch, in_ch * 9)),
            bias: Array1::zeros(out_ch),
        }
    }

    /// Fan-in scaled uniform initialisation, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch);
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        uniform_fill(conv.weight.as_slice_mut().unwrap(), bound, rng);
        uniform_fill(conv.bias.as_slice_mut().unwrap(), bound, rng);
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn band_rows(&self, w: usize) -> usize {
        (IM2COL_BUDGET / (self.weight.ncols() * w).max(1)).max(1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channel mismatch");
        let x = x.as_standard_layout();
        let cout = self.out_channels();
        let mut out = Array2::<f64>::zeros((cout, h * w));
        let band = self.band_rows(w);
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + band).min(h);
            let cols = im2col(x.as_slice().unwrap(), cin, h, w, r0, r1);
            let mut dst = out.slice_mut(s![.., r0 * w..r1 * w]);
            general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut dst);
            r0 = r1;
        }
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        out.into_shape_with_order((cout, h, w)).unwrap()
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to `x` when `input_grad` is set.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_out: &Array3<f64>,
        grad: &mut Conv2d,
        input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (cin, h, w) = x.dim();
        let cout = self.out_channels();
        let x = x.as_standard_layout();
        let go = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, h * w))
            .unwrap();
        for (gb, row) in grad.bias.iter_mut().zip(go.rows()) {
            *gb += row.sum();
        }
        let mut dx = input_grad.then(|| vec![0.0; cin * h * w]);
        let band = self.band_rows(w);
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + band).min(h);
            let cols = im2col(x.as_slice().unwrap(), cin, h, w, r0, r1);
            let go_band = go.slice(s![.., r0 * w..r1 * w]);
            general_mat_mul(1.0, &go_band, &cols.t(), 1.0, &mut grad.weight);
            if let Some(dx) = dx.as_mut() {
                let mut dcols = Array2::<f64>::zeros(cols.dim());
                general_mat_mul(1.0, &self.weight.t(), &go_band, 0.0, &mut dcols);
                col2im_add(&dcols, dx, cin, h, w, r0, r1);
            }
            r0 = r1;
        }
        dx.map(|v| Array3::from_shape_vec((cin, h, w), v).unwrap())
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, r0: usize, r1: usize) -> Array2<f64> {
    let rows = r1 - r0;
    let mut cols = Array2::<f64>::zeros((cin * 9, rows * w));
    let buf = cols.as_slice_mut().unwrap();
    let stride = rows * w;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (c * 9 + ky * 3 + kx) * stride;
                for r in r0..r1 {
                    let sy = r as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut buf[base + (r - r0) * w..base + (r - r0 + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &Array2<f64>,
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    r0: usize,
    r1: usize,
) {
    let rows = r1 - r0;
    let buf = cols.as_slice().unwrap();
    let stride = rows * w;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (c * 9 + ky * 3 + kx) * stride;
                for r in r0..r1 {
                    let sy = r as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &buf[base + (r - r0) * w..base + (r - r0 + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.out_channels(), self.in_channels(), 3, 3];
        f(&join(prefix, "weight"), &shape, self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), &[self.out_channels()], self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), self.bias.as_slice_mut().unwrap());
    }
}

/// Affine map `y = W x (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((outputs, inputs)),
            bias: bias.then(|| Array1::zeros(outputs)),
        }
    }

    pub fn init(inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let mut fc = Self::zeros(inputs, outputs, bias);
        let bound = 1.0 / (inputs as f64).sqrt();
        uniform_fill(fc.weight.as_slice_mut().unwrap(), bound, rng);
        if let Some(b) = fc.bias.as_mut() {
            uniform_fill(b.as_slice_mut().unwrap(), bound, rng);
        }
        fc
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut y = self.weight.dot(&x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        for (i, &g) in grad_out.iter().enumerate() {
            grad.weight.row_mut(i).scaled_add(g, &x);
        }
        if let Some(b) = grad.bias.as_mut() {
            *b += &grad_out;
        }
        self.weight.t().dot(&grad_out)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.outputs(), self.inputs()];
        f(&join(prefix, "weight"), &shape, self.weight.as_slice().unwrap());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &[b.len()], b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().unwrap());
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b.as_slice_mut().unwrap());
        }
    }
}

/// `out = x + conv_b(relu(conv_a(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

/// Activations kept by [`ResidualBlock::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ResidualCache {
    pre: Array3<f64>,
    hidden: Array3<f64>,
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

impl ResidualBlock {
    pub fn zeros(channels: usize) -> Self {
        ResidualBlock {
            conv_a: Conv2d::zeros(channels, channels),
            conv_b: Conv2d::zeros(channels, channels),
        }
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv_a: Conv2d::init(channels, channels, rng),
            conv_b: Conv2d::init(channels, channels, rng),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, ResidualCache) {
        let pre = self.conv_a.forward(x);
        let hidden = relu(&pre);
        let out = x + &self.conv_b.forward(&hidden);
        (out, ResidualCache { pre, hidden })
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        cache: &ResidualCache,
        grad_out: &Array3<f64>,
        grad: &mut ResidualBlock,
    ) -> Array3<f64> {
        let mut d_hidden = self
            .conv_b
            .backward(&cache.hidden, grad_out, &mut grad.conv_b, true)
            .unwrap();
        ndarray::Zip::from(&mut d_hidden)
            .and(&cache.pre)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
        let d_x = self
            .conv_a
            .backward(x, &d_hidden, &mut grad.conv_a, true)
            .unwrap();
        grad_out + &d_x
    }
}

impl Parameters for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = rng(seed);
        Array::from_shape_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let cout = conv.out_channels();
        let mut out = Array3::<f64>::zeros((cout, h, w));
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = conv.bias[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (y, xx) = (i as isize + ky - 1, j as isize + kx - 1);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[[o, c * 9 + (ky * 3 + kx) as usize]]
                                    * x[[c, y as usize, xx as usize]];
                            }
                        }
                    }
                    out[[o, i, j]] = acc;
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v))
    }

    #[test]
    fn conv_matches_naive_loops() {
        let conv = Conv2d::init(3, 5, &mut rng(1));
        let x = random3((3, 7, 9), 2);
        assert!(max_abs_diff(&conv.forward(&x), &naive_conv(&conv, &x)) < 1e-12);
    }

    #[test]
    fn conv_banding_is_transparent() {
        // 2 input channels × 9 × width 1200 forces bands of a couple hundred rows
        let conv = Conv2d::init(2, 2, &mut rng(3));
        let x = random3((2, 700, 1200), 4);
        let banded = conv.forward(&x);
        assert!(conv.band_rows(1200) < 700);
        let probe = x.slice(s![.., 300..310, ..]).to_owned();
        let reference = naive_conv(&conv, &probe);
        // interior rows of the probe see the same neighbourhood
        let lhs = banded.slice(s![.., 301..309, ..]).to_owned();
        let rhs = reference.slice(s![.., 1..9, ..]).to_owned();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let conv = Conv2d::init(4, 3, &mut rng(5));
        let x = random3((4, 6, 5), 6);
        let g = random3((3, 6, 5), 7);
        let mut grad = Conv2d::zeros(4, 3);
        let dx = conv.backward(&x, &g, &mut grad, true).unwrap();
        // <conv_nobias(x), g> == <x, dx>
        let mut nobias = conv.clone();
        nobias.bias.fill(0.0);
        let lhs: f64 = (&nobias.forward(&x) * &g).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // bias gradient = channel sums of g
        for o in 0..3 {
            let s: f64 = g.slice(s![o, .., ..]).sum();
            assert!((grad.bias[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let rb = ResidualBlock::zeros(4);
        let x = random3((4, 5, 5), 8);
        let y = rb.forward(&x);
        assert_eq!(y, x);
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn residual_block_gradient_matches_central_differences() {
        let rb = ResidualBlock::init(3, &mut rng(9));
        let x = random3((3, 5, 6), 10);
        let (out, cache) = rb.forward_cached(&x);
        let ones = Array3::<f64>::ones(out.dim());
        let mut grad = ResidualBlock::zeros(3);
        rb.backward(&x, &cache, &ones, &mut grad);
        let eps = 1e-5;
        let analytic = grad.conv_a.weight.clone();
        for idx in [0usize, 7, 13, 26] {
            for o in 0..3 {
                let mut plus = rb.clone();
                plus.conv_a.weight[[o, idx]] += eps;
                let mut minus = rb.clone();
                minus.conv_a.weight[[o, idx]] -= eps;
                let fd = (plus.forward(&x).sum() - minus.forward(&x).sum()) / (2.0 * eps);
                let a = analytic[[o, idx]];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4, "weight ({o},{idx}): fd {fd} vs {a}");
            }
        }
    }

    #[test]
    fn linear_backward() {
        let fc = Linear::init(4, 3, true, &mut rng(11));
        let x = Array1::from(vec![0.5, -1.0, 2.0, 0.25]);
        let g = Array1::from(vec![1.0, -2.0, 0.5]);
        let mut grad = Linear::zeros(4, 3, true);
        let dx = fc.backward(x.view(), g.view(), &mut grad);
        assert_eq!(dx, fc.weight.t().dot(&g));
        assert_eq!(grad.weight[[1, 2]], -4.0);
        assert_eq!(grad.bias.unwrap(), g);
    }

    #[test]
    fn parameter_flatten_round_trip() {
        let mut rb = ResidualBlock::init(2, &mut rng(12));
        assert_eq!(rb.param_count(), 2 * (2 * 18 + 2));
        let flat = rb.flatten();
        let mut other = ResidualBlock::zeros(2);
        other.load_flat(&flat);
        assert_eq!(other, rb);
        rb.accumulate(&other);
        assert_eq!(rb.flatten()[3], 2.0 * flat[3]);
    }
}
