use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{matmul, Mode, Scalar, Tensor, GROUP};

/// A trainable tensor with its gradient and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            shape,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Uniform weights in `±sqrt(6 / fan_in)`.
pub fn init_uniform_fan_in<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Param<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let value = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Param::new(shape, value)
}

fn expect_rank<T: Scalar>(x: &Tensor<T>, dims: &[usize], what: &str) -> Result<()> {
    if x.shape().len() != dims.len() + 1 || &x.shape()[1..] != dims {
        return Err(Error::Shape(format!(
            "{what} expects [batch, {dims:?}], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

/// Valid (unpadded), stride-1 2-D cross-correlation.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [T]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let plane = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let src = (ci * h + y + dy) * w + dx;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, dx_out: &mut [T]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let plane = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let dst = (ci * h + y + dy) * w + dx;
                    for (d, s) in dx_out[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_shape: [usize; 3], filters: usize, kernel_h: usize, kernel_w: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [c, h, w] = in_shape;
        if kernel_h == 0 || kernel_w == 0 || kernel_h > h || kernel_w > w {
            return Err(Error::Shape(format!(
                "{kernel_h}x{kernel_w} kernel does not fit {h}x{w} input"
            )));
        }
        let fan_in = c * kernel_h * kernel_w;
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            filters,
            kernel_h,
            kernel_w,
            weight: init_uniform_fan_in(vec![filters, c, kernel_h, kernel_w], fan_in, rng),
            bias: bias.then(|| Param::filled(vec![filters], T::zero())),
            input: None,
            corrupt_backward: false,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [
            self.filters,
            self.in_h - self.kernel_h + 1,
            self.in_w - self.kernel_w + 1,
        ]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, &[self.in_channels, self.in_h, self.in_w], "conv2d")?;
        let batch = x.batch();
        let [f, oh, ow] = self.out_shape();
        let plane = oh * ow;
        let (in_len, out_len) = (x.sample_len(), f * plane);
        let rows = self.col_rows();
        let mut out = vec![T::zero(); batch * out_len];
        out.par_chunks_mut(out_len * GROUP)
            .zip(x.data().par_chunks(in_len * GROUP))
            .for_each(|(out_g, in_g)| {
                let mut col = vec![T::zero(); rows * plane];
                for (o, xi) in out_g.chunks_exact_mut(out_len).zip(in_g.chunks_exact(in_len)) {
                    im2col(xi, self.in_channels, self.in_h, self.in_w, self.kernel_h, self.kernel_w, &mut col);
                    match &self.bias {
                        Some(b) => {
                            for (row, &bv) in o.chunks_exact_mut(plane).zip(&b.value) {
                                row.fill(bv);
                            }
                            matmul(f, rows, plane, &self.weight.value, false, &col, false, o, T::one());
                        }
                        None => matmul(f, rows, plane, &self.weight.value, false, &col, false, o, T::zero()),
                    }
                }
            });
        Tensor::new(vec![batch, f, oh, ow], out)
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(&x)?;
        if mode == Mode::Train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("conv2d backward without a training forward".into()))?;
        let batch = x.batch();
        let [f, oh, ow] = self.out_shape();
        let plane = oh * ow;
        if dy.shape() != [batch, f, oh, ow] {
            return Err(Error::Shape(format!("conv2d backward got gradient {:?}", dy.shape())));
        }
        let (in_len, out_len) = (x.sample_len(), f * plane);
        let rows = self.col_rows();
        let n_groups = batch.div_ceil(GROUP);
        let (c, h, w, kh, kw) = (self.in_channels, self.in_h, self.in_w, self.kernel_h, self.kernel_w);
        let weight = &self.weight.value;
        let has_bias = self.bias.is_some();

        let work = |g: usize, dx_g: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
            let mut dw = vec![T::zero(); f * rows];
            let mut db = vec![T::zero(); if has_bias { f } else { 0 }];
            let mut col = vec![T::zero(); rows * plane];
            let mut dcol = if dx_g.is_some() { vec![T::zero(); rows * plane] } else { Vec::new() };
            let lo = g * GROUP;
            let hi = (lo + GROUP).min(batch);
            let mut dx_g = dx_g;
            for (j, b) in (lo..hi).enumerate() {
                let xi = x.sample(b);
                let dyi = dy.sample(b);
                im2col(xi, c, h, w, kh, kw, &mut col);
                matmul(f, plane, rows, dyi, false, &col, true, &mut dw, T::one());
                for (acc, row) in db.iter_mut().zip(dyi.chunks_exact(plane)) {
                    *acc += row.iter().copied().sum::<T>();
                }
                if let Some(dx) = dx_g.as_deref_mut() {
                    matmul(rows, f, plane, weight, true, dyi, false, &mut dcol, T::zero());
                    col2im_add(&dcol, c, h, w, kh, kw, &mut dx[j * in_len..(j + 1) * in_len]);
                }
            }
            (dw, db)
        };

        let (partials, dx): (Vec<(Vec<T>, Vec<T>)>, Option<Vec<T>>) = if need_input_grad {
            let mut dx = vec![T::zero(); batch * in_len];
            let partials = dx
                .par_chunks_mut(in_len * GROUP)
                .enumerate()
                .map(|(g, dxg)| work(g, Some(dxg)))
                .collect();
            (partials, Some(dx))
        } else {
            ((0..n_groups).into_par_iter().map(|g| work(g, None)).collect(), None)
        };
        let _ = out_len;

        for (dw, db) in &partials {
            for (g, d) in self.weight.grad.iter_mut().zip(dw) {
                *g += *d;
            }
            if let Some(b) = &mut self.bias {
                for (g, d) in b.grad.iter_mut().zip(db) {
                    *g += *d;
                }
            }
        }
        if self.corrupt_backward {
            let k = T::from_f64_lossy(1.5);
            for g in self.weight.grad.iter_mut() {
                *g *= k;
            }
        }
        let restore = x.shape().to_vec();
        dx.map(|d| Tensor::new(restore, d)).transpose()
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation

/// Per-channel batch normalisation over `[batch, channels, spatial…]`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub spatial: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<f64>)>,
}

impl<T: Scalar> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(in_shape: &[usize]) -> Self {
        let channels = in_shape.first().copied().unwrap_or(1);
        let spatial = in_shape.iter().skip(1).product();
        Self {
            channels,
            spatial,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.sample_len() != self.channels * self.spatial || x.shape().len() < 2 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels x {} got {:?}",
                self.channels,
                self.spatial,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut y = x.clone();
        let (c, s) = (self.channels, self.spatial);
        let scale: Vec<T> = (0..c)
            .map(|i| {
                T::from_f64_lossy(
                    self.gamma.value[i].as_f64() / (self.running_var[i].as_f64() + self.eps).sqrt(),
                )
            })
            .collect();
        for sample in y.data_mut().chunks_exact_mut(c * s) {
            for (ch, row) in sample.chunks_exact_mut(s).enumerate() {
                let (mu, k, b) = (self.running_mean[ch], scale[ch], self.beta.value[ch]);
                for v in row {
                    *v = (*v - mu) * k + b;
                }
            }
        }
        Ok(y)
    }

    fn forward_train(&mut self, mut x: Tensor<T>) -> Result<Tensor<T>> {
        self.check(&x)?;
        let batch = x.batch();
        if batch < 2 {
            return Err(Error::Config("batch normalisation in training mode needs a batch of at least 2".into()));
        }
        let (c, s) = (self.channels, self.spatial);
        let n = (batch * s) as f64;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for sample in x.data().chunks_exact(c * s) {
            for (ch, row) in sample.chunks_exact(s).enumerate() {
                sum[ch] += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        for sample in x.data().chunks_exact(c * s) {
            for (ch, row) in sample.chunks_exact(s).enumerate() {
                sq[ch] += row.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let var: Vec<f64> = sq.iter().map(|v| v / n).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.len()];
        for (sample, xh) in x.data_mut().chunks_exact_mut(c * s).zip(xhat.chunks_exact_mut(c * s)) {
            for (ch, (row, hrow)) in sample.chunks_exact_mut(s).zip(xh.chunks_exact_mut(s)).enumerate() {
                let mu = T::from_f64_lossy(mean[ch]);
                let k = T::from_f64_lossy(inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (v, h) in row.iter_mut().zip(hrow.iter_mut()) {
                    *h = (*v - mu) * k;
                    *v = *h * g + b;
                }
            }
        }

        let unbias = n / (n - 1.0);
        for ch in 0..c {
            let m = self.momentum;
            self.running_mean[ch] = T::from_f64_lossy(m * self.running_mean[ch].as_f64() + (1.0 - m) * mean[ch]);
            self.running_var[ch] =
                T::from_f64_lossy(m * self.running_var[ch].as_f64() + (1.0 - m) * var[ch] * unbias);
        }
        self.cache = Some((xhat, inv_std));
        Ok(x)
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.infer(&x),
        }
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv_std) = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batchnorm backward without a training forward".into()))?;
        if dy.len() != xhat.len() {
            return Err(Error::Shape("batchnorm gradient shape mismatch".into()));
        }
        let (c, s) = (self.channels, self.spatial);
        let n = (dy.batch() * s) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (sample, xh) in dy.data().chunks_exact(c * s).zip(xhat.chunks_exact(c * s)) {
            for (ch, (row, hrow)) in sample.chunks_exact(s).zip(xh.chunks_exact(s)).enumerate() {
                for (d, h) in row.iter().zip(hrow) {
                    let d = d.as_f64();
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * h.as_f64();
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += T::from_f64_lossy(sum_dy[ch]);
            self.gamma.grad[ch] += T::from_f64_lossy(sum_dy_xhat[ch]);
        }
        for (sample, xh) in dy.data_mut().chunks_exact_mut(c * s).zip(xhat.chunks_exact(c * s)) {
            for (ch, (row, hrow)) in sample.chunks_exact_mut(s).zip(xh.chunks_exact(s)).enumerate() {
                let k = self.gamma.value[ch].as_f64() * inv_std[ch] / n;
                let (mean_dy, mean_dyx) = (sum_dy[ch], sum_dy_xhat[ch]);
                for (d, h) in row.iter_mut().zip(hrow) {
                    let v = k * (n * d.as_f64() - mean_dy - h.as_f64() * mean_dyx);
                    *d = T::from_f64_lossy(v);
                }
            }
        }
        Ok(dy)
    }
}

// ---------------------------------------------------------------------------
// ReLU, pooling, flatten

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = v.max(T::zero());
        }
        y
    }

    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        for v in x.data_mut() {
            *v = v.max(T::zero());
        }
        x
    }

    pub fn backward<T: Scalar>(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::Shape("relu backward without a training forward".into()))?;
        for (d, keep) in dy.data_mut().iter_mut().zip(mask) {
            if !keep {
                *d = T::zero();
            }
        }
        Ok(dy)
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Ties route the gradient to the first element in
/// row-major order.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub factor: usize,
    pub in_shape: [usize; 3],
    argmax: Option<Vec<u32>>,
}

impl MaxPool2d {
    pub fn new(in_shape: [usize; 3], factor: usize) -> Result<Self> {
        let [_, h, w] = in_shape;
        if factor == 0 || h / factor == 0 || w / factor == 0 {
            return Err(Error::Shape(format!("cannot pool {h}x{w} by {factor}")));
        }
        Ok(Self {
            factor,
            in_shape,
            argmax: None,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.in_shape;
        [c, h / self.factor, w / self.factor]
    }

    fn pool<T: Scalar>(&self, x: &Tensor<T>, keep_argmax: bool) -> Result<(Tensor<T>, Vec<u32>)> {
        expect_rank(x, &self.in_shape, "maxpool2d")?;
        let [c, h, w] = self.in_shape;
        let [_, oh, ow] = self.out_shape();
        let f = self.factor;
        let batch = x.batch();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut arg = Vec::with_capacity(if keep_argmax { out.capacity() } else { 0 });
        for b in 0..batch {
            let xs = x.sample(b);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (ch * h + oy * f) * w + ox * f;
                        for dy in 0..f {
                            for dx in 0..f {
                                let i = (ch * h + oy * f + dy) * w + ox * f + dx;
                                if xs[i] > xs[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(xs[best]);
                        if keep_argmax {
                            arg.push(best as u32);
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(vec![batch, c, oh, ow], out)?, arg))
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.pool(x, false)?.0)
    }

    pub fn forward<T: Scalar>(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, arg) = self.pool(&x, mode == Mode::Train)?;
        if mode == Mode::Train {
            self.argmax = Some(arg);
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let arg = self
            .argmax
            .take()
            .ok_or_else(|| Error::Shape("maxpool backward without a training forward".into()))?;
        let in_len: usize = self.in_shape.iter().product();
        let out_len = dy.sample_len();
        let batch = dy.batch();
        let mut dx = vec![T::zero(); batch * in_len];
        for b in 0..batch {
            let dxs = &mut dx[b * in_len..(b + 1) * in_len];
            for (g, &i) in dy.sample(b).iter().zip(&arg[b * out_len..(b + 1) * out_len]) {
                dxs[i as usize] += *g;
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.in_shape);
        Tensor::new(shape, dx)
    }
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub units: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, units: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_dim,
            units,
            weight: init_uniform_fan_in(vec![units, in_dim], in_dim, rng),
            bias: bias.then(|| Param::filled(vec![units], T::zero())),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(x, &[self.in_dim], "linear")?;
        let batch = x.batch();
        let mut out = vec![T::zero(); batch * self.units];
        let beta = match &self.bias {
            Some(b) => {
                for row in out.chunks_exact_mut(self.units) {
                    row.copy_from_slice(&b.value);
                }
                T::one()
            }
            None => T::zero(),
        };
        matmul(batch, self.in_dim, self.units, x.data(), false, &self.weight.value, true, &mut out, beta);
        Tensor::new(vec![batch, self.units], out)
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(&x)?;
        if mode == Mode::Train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("linear backward without a training forward".into()))?;
        let batch = x.batch();
        if dy.shape() != [batch, self.units] {
            return Err(Error::Shape(format!("linear backward got gradient {:?}", dy.shape())));
        }
        matmul(self.units, batch, self.in_dim, dy.data(), true, x.data(), false, &mut self.weight.grad, T::one());
        if let Some(b) = &mut self.bias {
            for row in dy.data().chunks_exact(self.units) {
                for (g, d) in b.grad.iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); batch * self.in_dim];
        matmul(batch, self.units, self.in_dim, dy.data(), false, &self.weight.value, false, &mut dx, T::zero());
        Ok(Some(Tensor::new(vec![batch, self.in_dim], dx)?))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    MaxPool(MaxPool2d),
    Flatten { in_shape: Vec<usize> },
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(_) => Ok(Relu::infer(x)),
            Layer::MaxPool(l) => l.infer(x),
            Layer::Flatten { .. } => {
                let b = x.batch();
                x.clone().reshape(vec![b, x.sample_len()])
            }
            Layer::Linear(l) => l.infer(x),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x, mode)),
            Layer::MaxPool(l) => l.forward(x, mode),
            Layer::Flatten { .. } => {
                let b = x.batch();
                let n = x.sample_len();
                x.reshape(vec![b, n])
            }
            Layer::Linear(l) => l.forward(x, mode),
        }
    }

    /// Returns the input gradient unless `need_input_grad` is false and the
    /// layer can skip computing it.
    pub fn backward(&mut self, dy: Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv(l) => l.backward(&dy, need_input_grad),
            Layer::BatchNorm(l) => l.backward(dy).map(Some),
            Layer::Relu(l) => l.backward(dy).map(Some),
            Layer::MaxPool(l) => l.backward(&dy).map(Some),
            Layer::Flatten { in_shape } => {
                let mut shape = vec![dy.batch()];
                shape.extend_from_slice(in_shape);
                dy.reshape(shape).map(Some)
            }
            Layer::Linear(l) => l.backward(&dy, need_input_grad),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn conv_of_ones() {
        let mut conv = Conv2d::<f64>::new([1, 3, 3], 1, 2, 2, true, &mut rng()).unwrap();
        conv.weight.value.fill(1.0);
        let x = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let y = conv.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn identity_kernel() {
        let mut conv = Conv2d::<f64>::new([1, 4, 5], 1, 1, 1, false, &mut rng()).unwrap();
        conv.weight.value.fill(1.0);
        let x = Tensor::new(vec![2, 1, 4, 5], (0..40).map(f64::from).collect()).unwrap();
        assert_eq!(conv.infer(&x).unwrap().data(), x.data());
    }

    #[test]
    fn conv_shape_errors() {
        assert!(Conv2d::<f64>::new([1, 3, 3], 1, 4, 2, true, &mut rng()).is_err());
        let conv = Conv2d::<f64>::new([2, 3, 3], 1, 2, 2, true, &mut rng()).unwrap();
        assert!(matches!(conv.infer(&Tensor::zeros(vec![1, 1, 3, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_normalises() {
        use rand::Rng;
        let mut r = rng();
        let data: Vec<f64> = (0..4 * 3 * 5).map(|_| r.random_range(-3.0..7.0)).collect();
        let mut bn = BatchNorm::<f64>::new(&[3, 5]);
        let y = bn.forward(Tensor::new(vec![4, 3, 5], data).unwrap(), Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.sample(b)[ch * 5..ch * 5 + 5].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_channel() {
        let mut bn = BatchNorm::<f64>::new(&[1]);
        bn.beta.value[0] = 0.3;
        let y = bn.forward(Tensor::filled(vec![5, 1], 2.5), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(bn.running_var[0] >= 0.0);
    }

    #[test]
    fn batchnorm_single_sample_train_rejected() {
        let mut bn = BatchNorm::<f64>::new(&[2]);
        assert!(matches!(bn.forward(Tensor::zeros(vec![1, 2]), Mode::Train), Err(Error::Config(_))));
        assert!(bn.forward(Tensor::zeros(vec![1, 2]), Mode::Eval).is_ok());
    }

    #[test]
    fn pool_max_and_floor() {
        let mut p = MaxPool2d::new([1, 2, 2], 2).unwrap();
        let y = p.forward(Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Mode::Train).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = p.backward(&Tensor::filled(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
        let p = MaxPool2d::new([1, 5, 5], 2).unwrap();
        assert_eq!(p.out_shape(), [1, 2, 2]);
    }

    #[test]
    fn pool_tie_goes_to_first() {
        let mut p = MaxPool2d::new([1, 2, 2], 2).unwrap();
        p.forward(Tensor::<f64>::filled(vec![1, 1, 2, 2], 7.0), Mode::Train).unwrap();
        let dx = p.backward(&Tensor::filled(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut l = Linear::<f64>::new(3, 3, true, &mut rng());
        l.weight.value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert_eq!(l.infer(&x).unwrap().data(), x.data());
        l.weight.value.fill(0.0);
        l.bias.as_mut().unwrap().value = vec![0.5, 1.5, -1.0];
        assert_eq!(l.infer(&x).unwrap().data(), &[0.5, 1.5, -1.0, 0.5, 1.5, -1.0]);
    }
}
