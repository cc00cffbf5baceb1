//! Layers with hand-written backward passes.
//!
//! Every layer keeps its trainable tensors in [`Param`]s; `backward` adds
//! into `Param::grad`, and the optimizer consumes and clears them. Batch
//! dimensions are processed per sample through [`crate::par`], and weight
//! gradients are summed from per-sample partials in sample order.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::par;
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::tensor::{sum_partials, Batch};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn accumulate(&mut self, delta: &[T]) {
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }
}

/// A non-trainable state tensor (e.g. running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

fn kaiming<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..len).map(|_| T::of(normal.sample(rng))).collect()
}

fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    (0..len).map(|_| T::of(dist.sample(rng))).collect()
}

/// 3×3 convolution, stride 1, zero padding 1, no bias.
///
/// Weights are laid out `(ky, kx, cin) × cout` to match the im2col rows.
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, cols: &mut [T]) {
    let row_len = 9 * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    let dst = &mut row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let row_len = 9 * c;
    dx.iter_mut().for_each(|v| *v = T::zero());
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    let dst = (sy as usize * w + sx as usize) * c;
                    for (d, s) in dx[dst..dst + c].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            vec![3, 3, cin, cout],
            kaiming(rng, 9 * cin, 9 * cin * cout),
        );
        Self { cin, cout, weight }
    }

    pub fn forward(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let mut out = Batch::zeros(x.n, h, w, self.cout);
        let k = 9 * self.cin;
        let weight = &self.weight.value;
        par::for_each_chunk_mut(&mut out.data, h * w * self.cout, |i, y| {
            let mut cols = vec![T::zero(); h * w * k];
            im2col(x.sample(i), h, w, self.cin, &mut cols);
            matmul(h * w, k, self.cout, &cols, weight, y, T::zero());
        });
        out
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Batch<T>, dy: &Batch<T>, need_dx: bool) -> Option<Batch<T>> {
        let (h, w, cin, cout) = (x.h, x.w, self.cin, self.cout);
        let k = 9 * cin;
        let weight = &self.weight.value;
        let trainable = self.weight.trainable;
        let mut dx = Batch::zeros(if need_dx { x.n } else { 0 }, h, w, cin);
        let partials = par::map_range(x.n, |i| {
            let mut cols = vec![T::zero(); h * w * k];
            let dw = if trainable {
                im2col(x.sample(i), h, w, cin, &mut cols);
                let mut dw = vec![T::zero(); k * cout];
                matmul_tn(k, h * w, cout, &cols, dy.sample(i), &mut dw, T::zero());
                dw
            } else {
                Vec::new()
            };
            let dxs = if need_dx {
                matmul_nt(h * w, cout, k, dy.sample(i), weight, &mut cols, T::zero());
                let mut dxs = vec![T::zero(); h * w * cin];
                col2im(&cols, h, w, cin, &mut dxs);
                dxs
            } else {
                Vec::new()
            };
            (dw, dxs)
        });
        let mut dws = Vec::with_capacity(partials.len());
        for (i, (dw, dxs)) in partials.into_iter().enumerate() {
            if need_dx {
                dx.sample_mut(i).copy_from_slice(&dxs);
            }
            dws.push(dw);
        }
        if trainable {
            let total = sum_partials(dws, k * cout);
            self.weight.accumulate(&total);
        }
        need_dx.then_some(dx)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormTape<T> {
    x_hat: Batch<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![T::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![T::one(); channels],
            },
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn per_channel_sums(&self, x: &Batch<T>, f: impl Fn(usize, T) -> T + Sync + Send) -> Vec<T> {
        let c = self.channels;
        let partials = par::map_range(x.n, |i| {
            let mut acc = vec![T::zero(); c];
            for px in x.sample(i).chunks_exact(c) {
                for (ch, (a, v)) in acc.iter_mut().zip(px).enumerate() {
                    *a += f(ch, *v);
                }
            }
            acc
        });
        sum_partials(partials, c)
    }

    /// Normalizes with running statistics; no state changes.
    pub fn forward_eval(&self, x: &Batch<T>) -> Batch<T> {
        let c = self.channels;
        let eps = T::of(self.eps);
        let scale: Vec<T> = (0..c)
            .map(|ch| self.gamma.value[ch] / (self.running_var.value[ch] + eps).sqrt())
            .collect();
        let shift: Vec<T> = (0..c)
            .map(|ch| self.beta.value[ch] - self.running_mean.value[ch] * scale[ch])
            .collect();
        let mut out = x.clone();
        par::for_each_chunk_mut(&mut out.data, x.sample_len().max(1), |_, s| {
            for px in s.chunks_exact_mut(c) {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        });
        out
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Batch<T>) -> (Batch<T>, BatchNormTape<T>) {
        let c = self.channels;
        let count = (x.n * x.h * x.w) as f64;
        let sums = self.per_channel_sums(x, |_, v| v);
        let mean: Vec<T> = sums.iter().map(|&s| s / T::of(count)).collect();
        let sq = self.per_channel_sums(x, |ch, v| (v - mean[ch]) * (v - mean[ch]));
        let var: Vec<T> = sq.iter().map(|&s| s / T::of(count)).collect();
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mom = T::of(self.momentum);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - mom) * *rv + mom * var[ch] * T::of(unbias);
        }

        let mut x_hat = x.clone();
        let mut out = x.clone();
        let (gamma, beta) = (&self.gamma.value, &self.beta.value);
        par::for_each_chunk_mut(&mut x_hat.data, x.sample_len().max(1), |_, s| {
            for px in s.chunks_exact_mut(c) {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        });
        par::for_each_chunk_mut(&mut out.data, x.sample_len().max(1), |i, s| {
            let xh = x_hat.sample(i);
            for (px, hx) in s.chunks_exact_mut(c).zip(xh.chunks_exact(c)) {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = hx[ch] * gamma[ch] + beta[ch];
                }
            }
        });
        (out, BatchNormTape { x_hat, inv_std })
    }

    pub fn backward(&mut self, tape: &BatchNormTape<T>, dy: &Batch<T>) -> Batch<T> {
        let c = self.channels;
        let x_hat = &tape.x_hat;
        let count = T::of((dy.n * dy.h * dy.w) as f64);
        let partials = par::map_range(dy.n, |i| {
            let mut acc = vec![T::zero(); 2 * c];
            for (g, xh) in dy.sample(i).chunks_exact(c).zip(x_hat.sample(i).chunks_exact(c)) {
                for ch in 0..c {
                    acc[ch] += g[ch];
                    acc[c + ch] += g[ch] * xh[ch];
                }
            }
            acc
        });
        let sums = sum_partials(partials, 2 * c);
        let (dbeta, dgamma) = sums.split_at(c);
        if self.gamma.trainable {
            self.gamma.accumulate(dgamma);
            self.beta.accumulate(dbeta);
        }
        let gamma = &self.gamma.value;
        let inv_std = &tape.inv_std;
        let mut dx = dy.clone();
        par::for_each_chunk_mut(&mut dx.data, dy.sample_len().max(1), |i, s| {
            let xh = x_hat.sample(i);
            for (px, hx) in s.chunks_exact_mut(c).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    let g = px[ch];
                    px[ch] = gamma[ch] * inv_std[ch] / count
                        * (count * g - dbeta[ch] - hx[ch] * dgamma[ch]);
                }
            }
        });
        dx
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Batch<T>) {
    let len = x.sample_len().max(1);
    par::for_each_chunk_mut(&mut x.data, len, |_, s| {
        s.iter_mut().for_each(|v| *v = v.max(T::zero()));
    });
}

/// Gradient of ReLU given its output.
pub fn relu_backward_inplace<T: Scalar>(out: &Batch<T>, dy: &mut Batch<T>) {
    let len = dy.sample_len().max(1);
    par::for_each_chunk_mut(&mut dy.data, len, |i, s| {
        for (g, o) in s.iter_mut().zip(out.sample(i)) {
            if *o <= T::zero() {
                *g = T::zero();
            }
        }
    });
}

/// 2×2 max pooling with stride 2 in ceil mode (odd edges pool a partial window).
pub fn max_pool2<T: Scalar>(x: &Batch<T>) -> (Batch<T>, Vec<u32>) {
    let (h, w, c) = (x.h, x.w, x.c);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Batch::zeros(x.n, oh, ow, c);
    let mut idx = vec![0u32; x.n * oh * ow * c];
    let per = oh * ow * c;
    let arg = par::map_chunks_mut(&mut out.data, per.max(1), |i, o| {
        let xs = x.sample(i);
        let mut a = vec![0u32; per];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                            if y < h && xx < w {
                                let j = (y * w + xx) * c + ch;
                                if xs[j] > best {
                                    best = xs[j];
                                    best_i = j;
                                }
                            }
                        }
                    }
                    let o_i = (oy * ow + ox) * c + ch;
                    o[o_i] = best;
                    a[o_i] = best_i as u32;
                }
            }
        }
        a
    });
    for (i, a) in arg.into_iter().enumerate() {
        idx[i * per..(i + 1) * per].copy_from_slice(&a);
    }
    (out, idx)
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    dy: &Batch<T>,
) -> Batch<T> {
    let (n, h, w, c) = input_shape;
    let mut dx = Batch::zeros(n, h, w, c);
    let per = dy.sample_len();
    par::for_each_chunk_mut(&mut dx.data, (h * w * c).max(1), |i, s| {
        let g = dy.sample(i);
        for (j, &src) in argmax[i * per..(i + 1) * per].iter().enumerate() {
            s[src as usize] += g[j];
        }
    });
    dx
}

/// Fully connected layer; weight stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(
                format!("{name}.weight"),
                vec![inputs, outputs],
                fan_in_uniform(rng, inputs, inputs * outputs),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![outputs],
                fan_in_uniform(rng, inputs, outputs),
            ),
        }
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(
                format!("{name}.weight"),
                vec![inputs, outputs],
                vec![T::zero(); inputs * outputs],
            ),
            bias: Param::new(format!("{name}.bias"), vec![outputs], vec![T::zero(); outputs]),
        }
    }

    /// `rows × inputs` → `rows × outputs`.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out: Vec<T> = (0..rows).flat_map(|_| self.bias.value.iter().copied()).collect();
        matmul(rows, self.inputs, self.outputs, x, &self.weight.value, &mut out, T::one());
        out
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        if self.weight.trainable {
            let mut dw = vec![T::zero(); self.inputs * self.outputs];
            matmul_tn(self.inputs, rows, self.outputs, x, dy, &mut dw, T::zero());
            self.weight.accumulate(&dw);
            let mut db = vec![T::zero(); self.outputs];
            for r in dy.chunks_exact(self.outputs) {
                for (d, g) in db.iter_mut().zip(r) {
                    *d += *g;
                }
            }
            self.bias.accumulate(&db);
        }
        let mut dx = vec![T::zero(); rows * self.inputs];
        matmul_nt(rows, self.outputs, self.inputs, dy, &self.weight.value, &mut dx, T::zero());
        dx
    }
}
