use rand::Rng;

use super::{stable_sum, Tensor};
use crate::sinc::{SincFilterBank, SincParams};
use crate::{Error, Result, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const STATS_POOL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv1d,
    Sinc,
    TdnnSplice,
    StatsPool,
    LeakyRelu,
    Relu,
    LayerNorm,
    MaxPool,
    Flatten,
}

fn glorot<T: Scalar>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

/// Affine map applied to every row: `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `in x out`
    pub weight: Tensor<T>,
    /// `1 x out`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: glorot(input, output, input, output, rng),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        bias.ensure_shape((1, weight.cols()))?;
        Ok(Dense { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::domain(format!(
                "dense expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut y = Tensor::zeros(x.rows(), self.output_dim());
        for r in 0..x.rows() {
            let out = y.row_mut(r);
            out.copy_from_slice(self.bias.data());
            for (k, &a) in x.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &w) in out.iter_mut().zip(self.weight.row(k)) {
                    *o += a * w;
                }
            }
        }
        Ok(y)
    }

    fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let (dw, rest) = grads.split_at_mut(1);
        let (dw, db) = (&mut dw[0], &mut rest[0]);
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let g = dy.row(r);
            for (b, &v) in db.data_mut().iter_mut().zip(g) {
                *b += v;
            }
            for (k, &a) in x.row(r).iter().enumerate() {
                let wrow = self.weight.row(k);
                *dx.at_mut(r, k) = wrow.iter().zip(g).map(|(&w, &v)| w * v).sum();
                if a != T::zero() {
                    for (d, &v) in dw.row_mut(k).iter_mut().zip(g) {
                        *d += a * v;
                    }
                }
            }
        }
        dx
    }
}

/// Valid 1-D cross-correlation over a `C_in x T` map with per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    /// `C_out x (C_in * K)`, input channel major.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel;
        Conv1d {
            weight: glorot(out_channels, fan_in, fan_in, out_channels * kernel, rng),
            bias: Tensor::zeros(1, out_channels),
            in_channels,
            kernel,
            stride,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, in_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if weight.cols() != in_channels * kernel || kernel == 0 || stride == 0 {
            return Err(Error::domain("conv1d weight shape inconsistent with channels/kernel"));
        }
        bias.ensure_shape((1, weight.rows()))?;
        Ok(Conv1d {
            weight,
            bias,
            in_channels,
            kernel,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        if t < self.kernel {
            return Err(Error::domain(format!(
                "conv1d input length {t} is shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((t - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rows() != self.in_channels {
            return Err(Error::domain(format!(
                "conv1d expects {} channels, got {}",
                self.in_channels,
                x.rows()
            )));
        }
        let t_out = self.output_len(x.cols())?;
        let mut y = Tensor::zeros(self.out_channels(), t_out);
        for o in 0..self.out_channels() {
            let w = self.weight.row(o);
            let out = y.row_mut(o);
            out.fill(self.bias.data()[o]);
            for c in 0..self.in_channels {
                let xc = x.row(c);
                for k in 0..self.kernel {
                    let wk = w[c * self.kernel + k];
                    if self.stride == 1 {
                        for (v, &xv) in out.iter_mut().zip(&xc[k..k + t_out]) {
                            *v += wk * xv;
                        }
                    } else {
                        for (t, v) in out.iter_mut().enumerate() {
                            *v += wk * xc[t * self.stride + k];
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let (dw, rest) = grads.split_at_mut(1);
        let (dw, db) = (&mut dw[0], &mut rest[0]);
        let t_out = dy.cols();
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        for o in 0..self.out_channels() {
            let g = dy.row(o);
            db.data_mut()[o] += g.iter().copied().sum::<T>();
            for c in 0..self.in_channels {
                let xc = x.row(c);
                for k in 0..self.kernel {
                    let idx = c * self.kernel + k;
                    let wk = self.weight.at(o, idx);
                    let mut acc = T::zero();
                    let dxc = dx.row_mut(c);
                    for (t, &gt) in g.iter().enumerate().take(t_out) {
                        let p = t * self.stride + k;
                        acc += gt * xc[p];
                        dxc[p] += gt * wk;
                    }
                    *dw.at_mut(o, idx) += acc;
                }
            }
        }
        dx
    }
}

/// The band-pass front end as a layer: `1 x T` samples in, `n_filters x (T - L + 1)` out.
#[derive(Clone, Debug, PartialEq)]
pub struct SincConv<T> {
    pub raw_low: Tensor<T>,
    pub raw_band: Tensor<T>,
    pub kernel_len: usize,
    pub sample_rate_hz: u32,
}

impl<T: Scalar> SincConv<T> {
    pub fn from_params(params: &SincParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(SincConv {
            raw_low: Tensor::row_vector(params.raw_low.clone()),
            raw_band: Tensor::row_vector(params.raw_band.clone()),
            kernel_len: params.kernel_len,
            sample_rate_hz: params.sample_rate_hz,
        })
    }

    pub fn params(&self) -> SincParams<T> {
        SincParams {
            raw_low: self.raw_low.data().to_vec(),
            raw_band: self.raw_band.data().to_vec(),
            kernel_len: self.kernel_len,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn bank(&self) -> Result<SincFilterBank<T>> {
        SincFilterBank::new(self.params())
    }

    pub fn n_filters(&self) -> usize {
        self.raw_low.len()
    }
}

/// Concatenates frames at fixed time offsets: row `t'` of the output holds
/// input rows `t' - min + o` for each offset `o`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TdnnSplice {
    pub offsets: Vec<isize>,
}

impl TdnnSplice {
    pub fn new(offsets: Vec<isize>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::domain("splice needs at least one offset"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("splice offsets must be strictly increasing"));
        }
        Ok(TdnnSplice { offsets })
    }

    pub fn contiguous(left: isize, right: isize) -> Result<Self> {
        TdnnSplice::new((left..=right).collect())
    }

    /// Frames consumed beyond the output length.
    pub fn span(&self) -> usize {
        (self.offsets[self.offsets.len() - 1] - self.offsets[0]) as usize
    }

    pub fn output_shape(&self, (t, f): (usize, usize)) -> Result<(usize, usize)> {
        if t <= self.span() {
            return Err(Error::domain(format!(
                "splice over offsets {:?} needs more than {} frames, got {t}",
                self.offsets,
                self.span()
            )));
        }
        Ok((t - self.span(), f * self.offsets.len()))
    }

    fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (t_out, width) = self.output_shape(x.shape())?;
        let f = x.cols();
        let min = self.offsets[0];
        let mut y = Tensor::zeros(t_out, width);
        for t in 0..t_out {
            let row = y.row_mut(t);
            for (j, &o) in self.offsets.iter().enumerate() {
                let src = (t as isize + o - min) as usize;
                row[j * f..(j + 1) * f].copy_from_slice(x.row(src));
            }
        }
        Ok(y)
    }

    fn backward<T: Scalar>(&self, in_shape: (usize, usize), dy: &Tensor<T>) -> Tensor<T> {
        let f = in_shape.1;
        let min = self.offsets[0];
        let mut dx = Tensor::zeros(in_shape.0, f);
        for t in 0..dy.rows() {
            let g = dy.row(t);
            for (j, &o) in self.offsets.iter().enumerate() {
                let dst = (t as isize + o - min) as usize;
                for (d, &v) in dx.row_mut(dst).iter_mut().zip(&g[j * f..(j + 1) * f]) {
                    *d += v;
                }
            }
        }
        dx
    }
}

/// `T x F` frames to `1 x 2F`: per-dimension mean then population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StatsPool;

impl StatsPool {
    /// Mean and std of every column; reductions are order-independent.
    ///
    /// Inside a network a single surviving frame is accepted (std = sqrt(eps)),
    /// so that the minimum-context input still produces an output.
    pub fn statistics<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (t, f) = x.shape();
        if t == 0 {
            return Err(Error::domain("statistics pooling over zero frames"));
        }
        let n = T::lit(t as f64);
        let mut col = vec![T::zero(); t];
        let mut mean = Vec::with_capacity(f);
        let mut std = Vec::with_capacity(f);
        for d in 0..f {
            col.iter_mut().enumerate().for_each(|(r, v)| *v = x.at(r, d));
            let mu = stable_sum(&mut col) / n;
            col.iter_mut().enumerate().for_each(|(r, v)| *v = (x.at(r, d) - mu).powi(2));
            let var = stable_sum(&mut col) / n;
            mean.push(mu);
            std.push((var + T::lit(STATS_POOL_EPS)).sqrt());
        }
        Ok((mean, std))
    }

    fn backward<T: Scalar>(x: &Tensor<T>, mean: &[T], std: &[T], dy: &Tensor<T>) -> Tensor<T> {
        let (t, f) = x.shape();
        let n = T::lit(t as f64);
        let g = dy.row(0);
        let mut dx = Tensor::zeros(t, f);
        for r in 0..t {
            let xr = x.row(r);
            for (d, v) in dx.row_mut(r).iter_mut().enumerate() {
                *v = g[d] / n + g[f + d] * (xr[d] - mean[d]) / (n * std[d]);
            }
        }
        dx
    }
}

/// `max(x, slope * x)`; slope 0 is a plain ReLU.
/// Standalone pooling: concatenated per-dimension mean and std of `T >= 2` frames.
pub fn stats_pooling<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    if x.rows() < 2 {
        return Err(Error::domain(format!(
            "statistics pooling needs at least 2 frames, got {}",
            x.rows()
        )));
    }
    let (mut mean, std) = StatsPool::statistics(x)?;
    mean.extend(std);
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::domain(format!("leaky relu slope {slope} outside [0, 1)")));
        }
        Ok(LeakyRelu { slope })
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = T::lit(self.slope);
        x.map(|v| if v > T::zero() { v } else { v * s })
    }

    fn backward<T: Scalar>(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let s = T::lit(self.slope);
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= T::zero() {
                *d *= s;
            }
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Normalize each row over its columns (frames x features).
    Features,
    /// Normalize each column over the rows (channels x time maps, per time step).
    Channels,
}

/// `(x - mean) / sqrt(var + 1e-5)` then per-feature affine.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub axis: NormAxis,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(features: usize, axis: NormAxis) -> Result<Self> {
        if features < 2 {
            return Err(Error::domain("layer norm needs at least 2 features"));
        }
        let mut gain = Tensor::zeros(1, features);
        gain.fill(T::one());
        Ok(LayerNorm {
            gain,
            bias: Tensor::zeros(1, features),
            axis,
        })
    }

    pub fn features(&self) -> usize {
        self.gain.len()
    }

    fn oriented(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.axis {
            NormAxis::Features => x.clone(),
            NormAxis::Channels => x.transpose(),
        }
    }

    /// Returns output, normalized values and inverse std per normalized row.
    fn normalize(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let xr = self.oriented(x);
        if xr.cols() != self.features() {
            return Err(Error::domain(format!(
                "layer norm expects {} features, got {}",
                self.features(),
                xr.cols()
            )));
        }
        let n = T::lit(xr.cols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = xr.clone();
        let mut inv_std = Vec::with_capacity(xr.rows());
        let mut y = xr;
        for r in 0..xhat.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            for ((o, &h), (&g, &b)) in y
                .row_mut(r)
                .iter_mut()
                .zip(xhat.row(r))
                .zip(self.gain.data().iter().zip(self.bias.data()))
            {
                *o = h * g + b;
            }
        }
        let y = match self.axis {
            NormAxis::Features => y,
            NormAxis::Channels => y.transpose(),
        };
        Ok((y, xhat, inv_std))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x)?.0)
    }

    fn backward(&self, xhat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let dy = self.oriented(dy);
        let (dg, rest) = grads.split_at_mut(1);
        let (dg, db) = (&mut dg[0], &mut rest[0]);
        let n = T::lit(xhat.cols() as f64);
        let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
        let mut dxhat = vec![T::zero(); xhat.cols()];
        for (r, &inv) in inv_std.iter().enumerate().take(xhat.rows()) {
            let (g, h) = (dy.row(r), xhat.row(r));
            for j in 0..h.len() {
                dg.data_mut()[j] += g[j] * h[j];
                db.data_mut()[j] += g[j];
                dxhat[j] = g[j] * self.gain.data()[j];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
            for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                *v = inv * (dxhat[j] - mean_d - h[j] * mean_dh);
            }
        }
        match self.axis {
            NormAxis::Features => dx,
            NormAxis::Channels => dx.transpose(),
        }
    }
}

/// Non-overlapping maxima along time of a `C x T` map. Ties resolve to the first index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool1d {
    pub width: usize,
}

impl MaxPool1d {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::domain("pool width must be at least 1"));
        }
        Ok(MaxPool1d { width })
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        if t < self.width {
            return Err(Error::domain(format!(
                "max pool of width {} needs at least {} frames, got {t}",
                self.width, self.width
            )));
        }
        Ok(t / self.width)
    }

    fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let t_out = self.output_len(x.cols())?;
        let mut y = Tensor::zeros(x.rows(), t_out);
        let mut argmax = Vec::with_capacity(x.rows() * t_out);
        for c in 0..x.rows() {
            let row = x.row(c);
            for t in 0..t_out {
                let base = t * self.width;
                let mut best = base;
                for i in base + 1..base + self.width {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                *y.at_mut(c, t) = row[best];
                argmax.push(best);
            }
        }
        Ok((y, argmax))
    }

    fn backward<T: Scalar>(&self, in_shape: (usize, usize), argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(in_shape.0, in_shape.1);
        let t_out = dy.cols();
        for c in 0..dy.rows() {
            for t in 0..t_out {
                *dx.at_mut(c, argmax[c * t_out + t]) += dy.at(c, t);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv1d(Conv1d<T>),
    Sinc(SincConv<T>),
    Splice(TdnnSplice),
    StatsPool(StatsPool),
    Activation(LeakyRelu),
    LayerNorm(LayerNorm<T>),
    MaxPool(MaxPool1d),
    /// `R x C` to `1 x RC`, row-major.
    Flatten,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Empty,
    Input(Tensor<T>),
    Shape(usize, usize),
    Pool { shape: (usize, usize), argmax: Vec<usize> },
    Norm { xhat: Tensor<T>, inv_std: Vec<T> },
    Stats { input: Tensor<T>, mean: Vec<T>, std: Vec<T> },
    Sinc { input: Vec<T>, bank: Box<SincFilterBank<T>> },
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv1d(_) => LayerKind::Conv1d,
            Layer::Sinc(_) => LayerKind::Sinc,
            Layer::Splice(_) => LayerKind::TdnnSplice,
            Layer::StatsPool(_) => LayerKind::StatsPool,
            Layer::Activation(a) if a.slope == 0.0 => LayerKind::Relu,
            Layer::Activation(_) => LayerKind::LeakyRelu,
            Layer::LayerNorm(_) => LayerKind::LayerNorm,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Parameter tensors with their local names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv1d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::Sinc(s) => vec![("raw_low", &s.raw_low), ("raw_band", &s.raw_band)],
            Layer::LayerNorm(n) => vec![("gain", &n.gain), ("bias", &n.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv1d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Sinc(s) => vec![&mut s.raw_low, &mut s.raw_band],
            Layer::LayerNorm(n) => vec![&mut n.gain, &mut n.bias],
            _ => Vec::new(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Layer::Dense(_) | Layer::Conv1d(_) | Layer::Sinc(_) | Layer::LayerNorm(_) => 2,
            _ => 0,
        }
    }

    /// Shape propagation without computing values.
    pub fn output_shape(&self, (r, c): (usize, usize)) -> Result<(usize, usize)> {
        match self {
            Layer::Dense(d) => {
                if c != d.input_dim() {
                    return Err(Error::domain(format!("dense expects width {}, got {c}", d.input_dim())));
                }
                Ok((r, d.output_dim()))
            }
            Layer::Conv1d(cv) => {
                if r != cv.in_channels {
                    return Err(Error::domain(format!("conv expects {} channels, got {r}", cv.in_channels)));
                }
                Ok((cv.out_channels(), cv.output_len(c)?))
            }
            Layer::Sinc(s) => {
                if r != 1 || c < s.kernel_len {
                    return Err(Error::domain(format!(
                        "sinc layer needs a single channel of at least {} samples, got {r}x{c}",
                        s.kernel_len
                    )));
                }
                Ok((s.n_filters(), c - s.kernel_len + 1))
            }
            Layer::Splice(s) => s.output_shape((r, c)),
            Layer::StatsPool(_) => {
                if r == 0 {
                    return Err(Error::domain("statistics pooling over zero frames"));
                }
                Ok((1, 2 * c))
            }
            Layer::Activation(_) => Ok((r, c)),
            Layer::LayerNorm(n) => {
                let f = if n.axis == NormAxis::Features { c } else { r };
                if f != n.features() {
                    return Err(Error::domain(format!("layer norm expects {} features, got {f}", n.features())));
                }
                Ok((r, c))
            }
            Layer::MaxPool(p) => Ok((r, p.output_len(c)?)),
            Layer::Flatten => Ok((1, r * c)),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let keep = |t: &Tensor<T>| if record { Cache::Input(t.clone()) } else { Cache::Empty };
        Ok(match self {
            Layer::Dense(d) => (d.forward(x)?, keep(x)),
            Layer::Conv1d(c) => (c.forward(x)?, keep(x)),
            Layer::Sinc(s) => {
                if x.rows() != 1 {
                    return Err(Error::domain("sinc layer expects a single-channel 1 x T input"));
                }
                let bank = s.bank()?;
                let y = bank.forward(x.data())?;
                let cache = if record {
                    Cache::Sinc {
                        input: x.data().to_vec(),
                        bank: Box::new(bank),
                    }
                } else {
                    Cache::Empty
                };
                (y, cache)
            }
            Layer::Splice(s) => (s.forward(x)?, Cache::Shape(x.rows(), x.cols())),
            Layer::StatsPool(_) => {
                let (mean, std) = StatsPool::statistics(x)?;
                let mut out = mean.clone();
                out.extend_from_slice(&std);
                let cache = if record {
                    Cache::Stats {
                        input: x.clone(),
                        mean,
                        std,
                    }
                } else {
                    Cache::Empty
                };
                (Tensor::row_vector(out), cache)
            }
            Layer::Activation(a) => (a.apply(x), keep(x)),
            Layer::LayerNorm(n) => {
                let (y, xhat, inv_std) = n.normalize(x)?;
                (y, if record { Cache::Norm { xhat, inv_std } } else { Cache::Empty })
            }
            Layer::MaxPool(p) => {
                let (y, argmax) = p.forward(x)?;
                (y, Cache::Pool { shape: x.shape(), argmax })
            }
            Layer::Flatten => {
                let shape = x.shape();
                (x.clone().reshaped(1, shape.0 * shape.1)?, Cache::Shape(shape.0, shape.1))
            }
        })
    }

    pub(crate) fn backward(&self, cache: &Cache<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let stale = || Error::State("layer cache missing; run forward with recording first".into());
        Ok(match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                dy.ensure_shape((x.rows(), d.output_dim()))?;
                d.backward(x, dy, grads)
            }
            (Layer::Conv1d(c), Cache::Input(x)) => {
                dy.ensure_shape((c.out_channels(), c.output_len(x.cols())?))?;
                c.backward(x, dy, grads)
            }
            (Layer::Sinc(_), Cache::Sinc { input, bank }) => {
                let g = bank.backward(input, dy)?;
                for (d, v) in grads[0].data_mut().iter_mut().zip(&g.raw_low) {
                    *d += *v;
                }
                for (d, v) in grads[1].data_mut().iter_mut().zip(&g.raw_band) {
                    *d += *v;
                }
                Tensor::row_vector(g.input)
            }
            (Layer::Splice(s), Cache::Shape(r, c)) => {
                dy.ensure_shape(s.output_shape((*r, *c))?)?;
                s.backward((*r, *c), dy)
            }
            (Layer::StatsPool(_), Cache::Stats { input, mean, std }) => {
                dy.ensure_shape((1, 2 * input.cols()))?;
                StatsPool::backward(input, mean, std, dy)
            }
            (Layer::Activation(a), Cache::Input(x)) => {
                dy.ensure_shape(x.shape())?;
                a.backward(x, dy)
            }
            (Layer::LayerNorm(n), Cache::Norm { xhat, inv_std }) => {
                let expect = match n.axis {
                    NormAxis::Features => xhat.shape(),
                    NormAxis::Channels => (xhat.cols(), xhat.rows()),
                };
                dy.ensure_shape(expect)?;
                n.backward(xhat, inv_std, dy, grads)
            }
            (Layer::MaxPool(p), Cache::Pool { shape, argmax }) => {
                dy.ensure_shape((shape.0, shape.1 / p.width))?;
                p.backward(*shape, argmax, dy)
            }
            (Layer::Flatten, Cache::Shape(r, c)) => {
                dy.ensure_shape((1, r * c))?;
                dy.clone().reshaped(*r, *c)?
            }
            _ => return Err(stale()),
        })
    }
}
