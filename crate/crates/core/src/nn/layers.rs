//! Layers with explicit backward passes. Each layer caches what its backward
//! pass needs during `forward` and accumulates parameter gradients into a
//! [`GradientTape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{GradientTape, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization, running averages updated.
    Train,
    /// Running statistics; outputs are a pure function of the inputs.
    Eval,
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::of_f64(dist.sample(rng))).collect())
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in y.chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], grad: &mut [T]) {
    let c = grad.len();
    for row in dy.chunks(c) {
        for (g, &d) in grad.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// Square convolution, stride 1, "same" padding. Weights are stored as
/// `[k*k*cin, cout]`, one `cin x cout` slab per kernel offset.
///
/// The input is zero-padded once; in the flattened padded frame every kernel
/// offset is a constant row shift, so the convolution is `k*k` accumulated
/// matrix products over one buffer. Frame rows that straddle a border are
/// computed and discarded.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Padded input and original input shape of one convolution call.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    padded: Vec<T>,
    shape: [usize; 4],
}

/// Geometry of the padded frame.
struct Frame {
    pad: usize,
    hp: usize,
    wp: usize,
    /// Rows of the frame product; the largest shift stays in bounds.
    rows: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = kernel * kernel * cin;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[fan_in, cout], (2.0 / fan_in as f64).sqrt()),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Conv2d {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }

    fn frame(&self, shape: [usize; 4]) -> Frame {
        let [b, h, w, _] = shape;
        let pad = self.kernel / 2;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let span = (self.kernel - 1) * wp + self.kernel - 1;
        Frame {
            pad,
            hp,
            wp,
            rows: b * hp * wp - span,
        }
    }

    fn pad_input<T: Scalar>(&self, x: &Tensor<T>, f: &Frame) -> Vec<T> {
        let [b, h, w, c] = dims4(x);
        if f.pad == 0 {
            return x.data().to_vec();
        }
        let mut p = vec![T::zero(); b * f.hp * f.wp * c];
        let xd = x.data();
        for bi in 0..b {
            for y in 0..h {
                let src = ((bi * h + y) * w) * c;
                let dst = ((bi * f.hp + y + f.pad) * f.wp + f.pad) * c;
                p[dst..dst + w * c].copy_from_slice(&xd[src..src + w * c]);
            }
        }
        p
    }

    /// Frame row of output pixel `(bi, y, x)`.
    fn frame_row(f: &Frame, bi: usize, y: usize, x: usize) -> usize {
        (bi * f.hp + y) * f.wp + x
    }

    /// Frame-layout product of the padded input with `weight`.
    fn frame_product<T: Scalar>(&self, padded: &[T], f: &Frame, weight: &[T]) -> Vec<T> {
        let c = self.cin;
        let k = self.kernel;
        let mut frame_out = vec![T::zero(); f.rows * self.cout];
        for ky in 0..k {
            for kx in 0..k {
                let shift = (ky * f.wp + kx) * c;
                let slab = (ky * k + kx) * c * self.cout;
                T::gemm(
                    f.rows,
                    c,
                    self.cout,
                    &padded[shift..shift + f.rows * c],
                    false,
                    &weight[slab..slab + c * self.cout],
                    false,
                    &mut frame_out,
                    ky + kx > 0,
                );
            }
        }
        frame_out
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let shape = dims4(x);
        let [b, h, w, c] = shape;
        assert_eq!(c, self.cin, "conv input channels");
        let f = self.frame(shape);
        let padded = self.pad_input(x, &f);
        let frame_out = self.frame_product(&padded, &f, store.get(self.weight).data());
        let bias = store.get(self.bias).data();
        let mut y = Vec::with_capacity(b * h * w * self.cout);
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let r = Self::frame_row(&f, bi, yy, xx) * self.cout;
                    y.extend(frame_out[r..r + self.cout].iter().zip(bias).map(|(&v, &bb)| v + bb));
                }
            }
        }
        let y = Tensor::from_vec(&[b, h, w, self.cout], y);
        (y, ConvCache { padded, shape })
    }

    /// Inference-only convolution followed by the per-channel affine map
    /// `v * scale + shift` (folded into the weights) and an in-place
    /// `epilogue(pixel, channels)` over each output pixel, pixels numbered
    /// row-major over `(batch, y, x)`.
    pub fn forward_affine<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        scale: &[T],
        shift: &[T],
        mut epilogue: impl FnMut(usize, &mut [T]),
    ) -> Tensor<T> {
        let shape = dims4(x);
        let [b, h, w, c] = shape;
        assert_eq!(c, self.cin, "conv input channels");
        assert!(scale.len() == self.cout && shift.len() == self.cout, "affine width");
        let folded: Vec<T> = store
            .get(self.weight)
            .data()
            .chunks(self.cout)
            .flat_map(|row| row.iter().zip(scale).map(|(&v, &s)| v * s))
            .collect();
        let bias: Vec<T> = store
            .get(self.bias)
            .data()
            .iter()
            .zip(scale)
            .zip(shift)
            .map(|((&bb, &s), &t)| bb * s + t)
            .collect();
        let f = self.frame(shape);
        let padded = self.pad_input(x, &f);
        let frame_out = self.frame_product(&padded, &f, &folded);
        let mut y = vec![T::zero(); b * h * w * self.cout];
        let mut pixel = 0;
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let r = Self::frame_row(&f, bi, yy, xx) * self.cout;
                    let out = &mut y[pixel * self.cout..(pixel + 1) * self.cout];
                    for ((o, &v), &bb) in out.iter_mut().zip(&frame_out[r..r + self.cout]).zip(&bias) {
                        *o = v + bb;
                    }
                    epilogue(pixel, out);
                    pixel += 1;
                }
            }
        }
        Tensor::from_vec(&[b, h, w, self.cout], y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradientTape<T>,
        cache: ConvCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let ConvCache { padded, shape } = cache;
        let [b, h, w, c] = shape;
        let f = self.frame(shape);
        let k = self.kernel;
        bias_grad(dy.data(), tape.get_mut(self.bias).data_mut());
        // gradient in the frame layout, zero on discarded rows
        let mut dframe = vec![T::zero(); f.rows * self.cout];
        let dyd = dy.data();
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let r = Self::frame_row(&f, bi, yy, xx) * self.cout;
                    let s = ((bi * h + yy) * w + xx) * self.cout;
                    dframe[r..r + self.cout].copy_from_slice(&dyd[s..s + self.cout]);
                }
            }
        }
        let weight = store.get(self.weight).data();
        let mut dpadded = vec![T::zero(); padded.len()];
        for ky in 0..k {
            for kx in 0..k {
                let shift = (ky * f.wp + kx) * c;
                let slab = (ky * k + kx) * c * self.cout;
                T::gemm(
                    c,
                    f.rows,
                    self.cout,
                    &padded[shift..shift + f.rows * c],
                    true,
                    &dframe,
                    false,
                    &mut tape.get_mut(self.weight).data_mut()[slab..slab + c * self.cout],
                    true,
                );
                T::gemm(
                    f.rows,
                    self.cout,
                    c,
                    &dframe,
                    false,
                    &weight[slab..slab + c * self.cout],
                    true,
                    &mut dpadded[shift..shift + f.rows * c],
                    true,
                );
            }
        }
        if f.pad == 0 {
            return Tensor::from_vec(&shape, dpadded);
        }
        let mut dx = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for yy in 0..h {
                let src = ((bi * f.hp + yy + f.pad) * f.wp + f.pad) * c;
                dx.extend_from_slice(&dpadded[src..src + w * c]);
            }
        }
        Tensor::from_vec(&shape, dx)
    }
}

/// 2x2 stride-2 transposed convolution; doubles height and width.
/// Weights are `[cin, 4*cout]` ordered (dy, dx, cout).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[cin, 4 * cout], (1.0 / cin as f64).sqrt()),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        ConvTranspose2x2 {
            cin,
            cout,
            weight,
            bias,
        }
    }

    /// The cache is the input itself.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        assert_eq!(c, self.cin, "transposed conv input channels");
        let rows = b * h * w;
        let co = self.cout;
        let mut z = vec![T::zero(); rows * 4 * co];
        T::gemm(
            rows,
            c,
            4 * co,
            x.data(),
            false,
            store.get(self.weight).data(),
            false,
            &mut z,
            false,
        );
        let mut y = Tensor::zeros(&[b, 2 * h, 2 * w, co]);
        let bias = store.get(self.bias).data();
        let yd = y.data_mut();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = ((bi * h + i) * w + j) * 4 * co;
                    for q in 0..4 {
                        let (dy, dx) = (q / 2, q % 2);
                        let dst = ((bi * 2 * h + 2 * i + dy) * 2 * w + 2 * j + dx) * co;
                        for o in 0..co {
                            yd[dst + o] = z[src + q * co + o] + bias[o];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradientTape<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let [b, h, w, c] = dims4(x);
        let co = self.cout;
        let rows = b * h * w;
        let mut dz = vec![T::zero(); rows * 4 * co];
        let dyd = dy.data();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let dst = ((bi * h + i) * w + j) * 4 * co;
                    for q in 0..4 {
                        let (qy, qx) = (q / 2, q % 2);
                        let src = ((bi * 2 * h + 2 * i + qy) * 2 * w + 2 * j + qx) * co;
                        dz[dst + q * co..dst + (q + 1) * co].copy_from_slice(&dyd[src..src + co]);
                    }
                }
            }
        }
        T::gemm(
            c,
            rows,
            4 * co,
            x.data(),
            true,
            &dz,
            false,
            tape.get_mut(self.weight).data_mut(),
            true,
        );
        bias_grad(dy.data(), tape.get_mut(self.bias).data_mut());
        let mut dx = vec![T::zero(); rows * c];
        T::gemm(
            rows,
            4 * co,
            c,
            &dz,
            false,
            store.get(self.weight).data(),
            true,
            &mut dx,
            false,
        );
        Tensor::from_vec(&[b, h, w, c], dx)
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch mean and unbiased variance when normalized with batch statistics.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-channel batch normalization over all non-channel axes.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Weight kept by the running averages at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::filled(&[channels], T::one()),
                false,
            ),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BnCache<T>) {
        let c = self.channels;
        assert_eq!(x.channels(), c, "batch norm channels");
        let n = x.rows();
        let xd = x.data();
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                for row in xd.chunks(c) {
                    for k in 0..c {
                        mean[k] += row[k].as_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0f64; c];
                for row in xd.chunks(c) {
                    for k in 0..c {
                        let d = row[k].as_f64() - mean[k];
                        var[k] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let unbiased = var.iter().map(|v| v * unbias).collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Mode::Eval => (
                store.get(self.running_mean).data().iter().map(|v| v.as_f64()).collect(),
                store.get(self.running_var).data().iter().map(|v| v.as_f64()).collect(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of_f64(1.0 / (v + self.eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of_f64).collect();
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for ((row, hrow), yrow) in xd.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
            for (((((&v, h), out), &m), &s), (&g, &b)) in row
                .iter()
                .zip(hrow.iter_mut())
                .zip(yrow.iter_mut())
                .zip(&mean)
                .zip(&inv_std)
                .zip(gamma.iter().zip(beta))
            {
                *h = (v - m) * s;
                *out = g * *h + b;
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_stats,
        };
        (Tensor::from_vec(x.shape(), y), cache)
    }

    /// Inference normalization as a per-channel `(scale, shift)`.
    pub fn eval_affine<T: Scalar>(&self, store: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let mean = store.get(self.running_mean).data();
        let var = store.get(self.running_var).data();
        (0..self.channels)
            .map(|k| {
                let s = gamma[k].as_f64() / (var[k].as_f64() + self.eps).sqrt();
                (T::of_f64(s), T::of_f64(beta[k].as_f64() - mean[k].as_f64() * s))
            })
            .unzip()
    }

    /// Fold the batch statistics of a training-mode call into the running averages.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) {
        let Some((mean, var)) = &cache.batch_stats else {
            return;
        };
        let m = self.momentum;
        let rm = store.get_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(mean) {
            *r = T::of_f64(m * r.as_f64() + (1.0 - m) * b);
        }
        let rv = store.get_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(var) {
            *r = T::of_f64(m * r.as_f64() + (1.0 - m) * b);
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradientTape<T>,
        cache: BnCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let c = self.channels;
        let n = dy.rows();
        let dyd = dy.data();
        let gamma = store.get(self.gamma).data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (row, hrow) in dyd.chunks(c).zip(cache.xhat.chunks(c)) {
            for k in 0..c {
                sum_dy[k] += row[k];
                sum_dy_xhat[k] += row[k] * hrow[k];
            }
        }
        {
            let g = tape.get_mut(self.gamma).data_mut();
            for k in 0..c {
                g[k] += sum_dy_xhat[k];
            }
        }
        {
            let g = tape.get_mut(self.beta).data_mut();
            for k in 0..c {
                g[k] += sum_dy[k];
            }
        }
        let mut dx = vec![T::zero(); dyd.len()];
        if cache.batch_stats.is_some() {
            let nf = T::of_f64(n as f64);
            for ((row, hrow), drow) in dyd.chunks(c).zip(cache.xhat.chunks(c)).zip(dx.chunks_mut(c)) {
                for k in 0..c {
                    drow[k] = gamma[k] * cache.inv_std[k] / nf * (nf * row[k] - sum_dy[k] - hrow[k] * sum_dy_xhat[k]);
                }
            }
        } else {
            for (row, drow) in dyd.chunks(c).zip(dx.chunks_mut(c)) {
                for k in 0..c {
                    drow[k] = row[k] * gamma[k] * cache.inv_std[k];
                }
            }
        }
        Tensor::from_vec(dy.shape(), dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
// 0.5 x (1 + tanh u) = x sigmoid(2u); one exp instead of a tanh
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).act_exp());
    (s, c * (T::one() + T::of_f64(3.0) * a * x * x))
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_parts(x).0
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (s, du) = gelu_parts(x);
    let two = T::of_f64(2.0);
    s + x * two * s * (T::one() - s) * du
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu)
}

/// `x` is the input of the forward call.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| gelu_grad(v) * d)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// 2x2 average pooling, stride 2.
pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, h, w, c] = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    let mut y = Tensor::zeros(&[b, ho, wo, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let dst = ((bi * ho + i) * wo + j) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((bi * h + 2 * i + dy) * w + 2 * j + dx) * c;
                    for k in 0..c {
                        yd[dst + k] += xd[src + k] * quarter;
                    }
                }
            }
        }
    }
    y
}

/// `in_shape` is the shape of the forward input.
pub fn avg_pool_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [b, h, w, c] = in_shape;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    let mut dx = Tensor::zeros(&[b, h, w, c]);
    let dyd = dy.data();
    let d = dx.data_mut();
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let src = ((bi * ho + i) * wo + j) * c;
                for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((bi * h + 2 * i + qy) * w + 2 * j + qx) * c;
                    for k in 0..c {
                        d[dst + k] = dyd[src + k] * quarter;
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer on `[batch, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            input,
            output,
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(rng, &[input, output], (1.0 / input as f64).sqrt()),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]), true),
        }
    }

    /// The cache is the input itself.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.input, "linear input width");
        let rows = x.rows();
        let mut y = vec![T::zero(); rows * self.output];
        T::gemm(
            rows,
            self.input,
            self.output,
            x.data(),
            false,
            store.get(self.weight).data(),
            false,
            &mut y,
            false,
        );
        add_bias(&mut y, store.get(self.bias).data());
        Tensor::from_vec(&[rows, self.output], y)
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut GradientTape<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let rows = x.rows();
        T::gemm(
            self.input,
            rows,
            self.output,
            x.data(),
            true,
            dy.data(),
            false,
            tape.get_mut(self.weight).data_mut(),
            true,
        );
        bias_grad(dy.data(), tape.get_mut(self.bias).data_mut());
        let mut dx = vec![T::zero(); rows * self.input];
        T::gemm(
            rows,
            self.output,
            self.input,
            dy.data(),
            false,
            store.get(self.weight).data(),
            true,
            &mut dx,
            false,
        );
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Lookup table of learned vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub rows: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Embedding {
            rows,
            dim,
            table: store.add(format!("{name}.table"), normal_tensor(rng, &[rows, dim], 1.0), true),
        }
    }

    /// Panics on an index outside the table; callers validate labels first.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, indices: &[usize]) -> Tensor<T> {
        let table = store.get(self.table).data();
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            assert!(i < self.rows, "embedding index {i} out of range");
            out.extend_from_slice(&table[i * self.dim..(i + 1) * self.dim]);
        }
        Tensor::from_vec(&[indices.len(), self.dim], out)
    }

    pub fn backward<T: Scalar>(&self, tape: &mut GradientTape<T>, indices: &[usize], dy: &Tensor<T>) {
        let g = tape.get_mut(self.table).data_mut();
        for (row, &i) in dy.data().chunks(self.dim).zip(indices) {
            for (a, &d) in g[i * self.dim..(i + 1) * self.dim].iter_mut().zip(row) {
                *a += d;
            }
        }
    }
}

/// Sinusoidal features of a diffusion step: `[sin(t w_k), cos(t w_k)]`.
pub fn step_features<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0, "step embedding width must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (sins, coss): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((t * w).sin(), (t * w).cos())).unzip();
        out.extend(sins.into_iter().chain(coss).map(T::of_f64));
    }
    Tensor::from_vec(&[steps.len(), dim], out)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, cb) = (a.channels(), b.channels());
    assert_eq!(a.rows(), b.rows(), "concat row mismatch");
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = ca + cb;
    Tensor::from_vec(&shape, out)
}

pub fn split_channels<T: Scalar>(d: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let c = d.channels();
    let second = c - first;
    let mut a = Vec::with_capacity(d.rows() * first);
    let mut b = Vec::with_capacity(d.rows() * second);
    for row in d.data().chunks(c) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    let mut sa = d.shape().to_vec();
    let mut sb = d.shape().to_vec();
    *sa.last_mut().expect("rank >= 1") = first;
    *sb.last_mut().expect("rank >= 1") = second;
    (Tensor::from_vec(&sa, a), Tensor::from_vec(&sb, b))
}

/// `x[b, h, w, :] += v[b, :]`.
pub fn add_per_sample<T: Scalar>(x: &mut Tensor<T>, v: &Tensor<T>) {
    let [b, h, w, c] = dims4(x);
    assert_eq!(v.shape(), &[b, c], "per-sample bias shape");
    let vd = v.data();
    for (k, row) in x.data_mut().chunks_mut(c).enumerate() {
        let bi = k / (h * w);
        for (a, &d) in row.iter_mut().zip(&vd[bi * c..(bi + 1) * c]) {
            *a += d;
        }
    }
}

/// Gradient of [`add_per_sample`] with respect to `v`.
pub fn add_per_sample_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [b, h, w, c] = dims4(dy);
    let mut out = Tensor::zeros(&[b, c]);
    let o = out.data_mut();
    for (k, row) in dy.data().chunks(c).enumerate() {
        let bi = k / (h * w);
        for (a, &d) in o[bi * c..(bi + 1) * c].iter_mut().zip(row) {
            *a += d;
        }
    }
    out
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    match *x.shape() {
        [b, h, w, c] => [b, h, w, c],
        ref s => panic!("expected an NHWC tensor, got shape {s:?}"),
    }
}
