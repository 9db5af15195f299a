//! Learnable sinc band-pass filter bank.
//!
//! Every filter is parameterized only by its two cutoff frequencies. The
//! impulse response is the difference of two low-pass sinc kernels,
//!
//! ```text
//! g[m] = 2 f2 sinc(2 pi f2 m) - 2 f1 sinc(2 pi f1 m),   sinc(x) = sin(x) / x
//! ```
//!
//! sampled at centered indices `m = n - (L-1)/2` and multiplied by a Hamming
//! window. Frequencies are normalized (`Hz / sample_rate`), so the valid
//! range is `[0, 0.5]`.
//!
//! The learnable quantities are unconstrained reals (`raw_low`, `raw_band`)
//! mapped to valid cutoffs by [`constrain_cutoffs`]:
//!
//! ```text
//! f1 = min(|raw_low|, 0.5)
//! f2 = min(f1 + |raw_band - raw_low|, 0.5)
//! ```

use crate::audio_io::WaveformBuffer;
use crate::dsp::{dft_magnitude, hamming_window, hz_to_mel, mel_to_hz};
use crate::nn::Tensor;
use crate::{Error, Result, Scalar};

pub const NYQUIST: f64 = 0.5;

/// Maps unconstrained parameters to cutoffs with `0 <= f1 <= f2 <= 0.5`.
pub fn constrain_cutoffs<T: Scalar>(raw_low: T, raw_band: T) -> Result<(T, T)> {
    if !raw_low.is_finite() || !raw_band.is_finite() {
        return Err(Error::domain("cutoff parameters must be finite"));
    }
    let half = T::lit(NYQUIST);
    let f1 = raw_low.abs().min(half);
    let f2 = (f1 + (raw_band - raw_low).abs()).min(half);
    Ok((f1, f2))
}

/// Subgradients of [`constrain_cutoffs`]: `[[df1/dlow, df1/dband], [df2/dlow, df2/dband]]`.
/// Saturated clamps pass zero.
pub fn constraint_jacobian<T: Scalar>(raw_low: T, raw_band: T) -> [[T; 2]; 2] {
    let half = T::lit(NYQUIST);
    let sgn = |v: T| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
    let f1_free = raw_low.abs() < half;
    let d1_low = if f1_free { sgn(raw_low) } else { T::zero() };
    let f2_unclamped = raw_low.abs().min(half) + (raw_band - raw_low).abs();
    let diff_sign = sgn(raw_band - raw_low);
    let (d2_low, d2_band) = if f2_unclamped < half {
        (d1_low - diff_sign, diff_sign)
    } else {
        (T::zero(), T::zero())
    };
    [[d1_low, T::zero()], [d2_low, d2_band]]
}

#[inline]
fn centered<T: Scalar>(n: usize, len: usize) -> T {
    T::lit(n as f64 - (len as f64 - 1.0) / 2.0)
}

/// `2 f sinc(2 pi f m)` with the removable singularity filled in.
#[inline]
fn lowpass_tap<T: Scalar>(f: T, m: T) -> T {
    if m == T::zero() {
        T::lit(2.0) * f
    } else {
        let x = T::TAU() * f * m;
        T::lit(2.0) * f * x.sin() / x
    }
}

fn check_band<T: Scalar>(f1: T, f2: T) -> Result<()> {
    if !(f1 >= T::zero() && f1 <= f2 && f2 <= T::lit(NYQUIST)) {
        return Err(Error::domain(format!(
            "cutoffs must satisfy 0 <= f1 <= f2 <= 0.5, got f1 = {f1}, f2 = {f2}"
        )));
    }
    Ok(())
}

fn check_kernel_len(len: usize) -> Result<()> {
    if len.is_multiple_of(2) {
        return Err(Error::domain(format!("kernel length {len} must be odd")));
    }
    Ok(())
}

fn windowed_filter<T: Scalar>(f1: T, f2: T, window: &[T]) -> Vec<T> {
    let len = window.len();
    window
        .iter()
        .enumerate()
        .map(|(n, &w)| {
            let m = centered::<T>(n, len);
            (lowpass_tap(f2, m) - lowpass_tap(f1, m)) * w
        })
        .collect()
}

/// Windowed band-pass impulse response of odd length `len`.
pub fn build_filter<T: Scalar>(f1: T, f2: T, len: usize) -> Result<Vec<T>> {
    check_band(f1, f2)?;
    check_kernel_len(len)?;
    Ok(windowed_filter(f1, f2, &kernel_window(len)?))
}

/// Hamming window for filter kernels: the left half up to the center tap
/// follows `hamming_window(len)`, the right half mirrors it. The plain window
/// is periodic in `len` and would make kernels slightly asymmetric.
pub fn kernel_window<T: Scalar>(len: usize) -> Result<Vec<T>> {
    let mut w = hamming_window(len)?;
    for n in len.div_ceil(2)..len {
        w[n] = w[len - 1 - n];
    }
    Ok(w)
}

/// Learnable parameters of a filter bank. Frequencies are normalized by `sample_rate_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct SincParams<T> {
    pub raw_low: Vec<T>,
    /// Upper-cutoff proxy; the band is `|raw_band - raw_low|` wide before clamping.
    pub raw_band: Vec<T>,
    pub kernel_len: usize,
    pub sample_rate_hz: u32,
}

impl<T: Scalar> SincParams<T> {
    pub fn n_filters(&self) -> usize {
        self.raw_low.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_low.is_empty() {
            return Err(Error::domain("a filter bank needs at least one filter"));
        }
        if self.raw_low.len() != self.raw_band.len() {
            return Err(Error::domain("raw_low and raw_band lengths differ"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        check_kernel_len(self.kernel_len)
    }
}

/// Mel-spaced initialization: `n_filters + 2` edges between 30 Hz and `sr/2 - 100` Hz,
/// filter `i` spanning edges `i` and `i + 2`.
pub fn init_mel_scale<T: Scalar>(n_filters: usize, sample_rate_hz: u32, kernel_len: usize) -> Result<SincParams<T>> {
    if n_filters == 0 {
        return Err(Error::domain("n_filters must be at least 1"));
    }
    check_kernel_len(kernel_len)?;
    let sr = sample_rate_hz as f64;
    let (lo_hz, hi_hz) = (30.0, sr / 2.0 - 100.0);
    if hi_hz <= lo_hz {
        return Err(Error::domain(format!(
            "sample rate {sample_rate_hz} Hz leaves no room for the 30 Hz .. sr/2-100 Hz range"
        )));
    }
    let (lo, hi) = (hz_to_mel(lo_hz), hz_to_mel(hi_hz));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64) / sr)
        .collect();
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain(format!(
            "{n_filters} filters are too many for the available frequency range"
        )));
    }
    Ok(SincParams {
        raw_low: edges[..n_filters].iter().map(|&f| T::lit(f)).collect(),
        // with raw_low >= 0, f1 + |raw_band - raw_low| reproduces raw_band
        raw_band: edges[2..].iter().map(|&f| T::lit(f)).collect(),
        kernel_len,
        sample_rate_hz,
    })
}

/// Parameters plus the materialized constrained cutoffs and windowed kernels.
#[derive(Clone, Debug)]
pub struct SincFilterBank<T> {
    pub params: SincParams<T>,
    pub constrained_low: Vec<T>,
    pub constrained_high: Vec<T>,
    /// `n_filters x kernel_len`
    pub kernels: Tensor<T>,
    window: Vec<T>,
}

/// Gradients of a loss with respect to the bank's raw parameters and its input.
#[derive(Clone, Debug, PartialEq)]
pub struct SincGradients<T> {
    pub raw_low: Vec<T>,
    pub raw_band: Vec<T>,
    pub input: Vec<T>,
}

impl<T: Scalar> SincFilterBank<T> {
    pub fn new(params: SincParams<T>) -> Result<Self> {
        params.validate()?;
        let window = kernel_window::<T>(params.kernel_len)?;
        let n = params.n_filters();
        let mut constrained_low = Vec::with_capacity(n);
        let mut constrained_high = Vec::with_capacity(n);
        let mut kernels = Tensor::zeros(n, params.kernel_len);
        for i in 0..n {
            let (f1, f2) = constrain_cutoffs(params.raw_low[i], params.raw_band[i])?;
            kernels.row_mut(i).copy_from_slice(&windowed_filter(f1, f2, &window));
            constrained_low.push(f1);
            constrained_high.push(f2);
        }
        Ok(SincFilterBank {
            params,
            constrained_low,
            constrained_high,
            kernels,
            window,
        })
    }

    pub fn mel_initialized(n_filters: usize, sample_rate_hz: u32, kernel_len: usize) -> Result<Self> {
        SincFilterBank::new(init_mel_scale(n_filters, sample_rate_hz, kernel_len)?)
    }

    pub fn n_filters(&self) -> usize {
        self.params.n_filters()
    }

    pub fn kernel_len(&self) -> usize {
        self.params.kernel_len
    }

    /// `(f1, f2)` of every filter in Hz.
    pub fn bands_hz(&self) -> Vec<(f64, f64)> {
        let sr = self.params.sample_rate_hz as f64;
        self.constrained_low
            .iter()
            .zip(&self.constrained_high)
            .map(|(&a, &b)| (a.as_f64() * sr, b.as_f64() * sr))
            .collect()
    }

    /// Output of every filter over the valid region: `n_filters x (len - L + 1)`.
    pub fn forward(&self, x: &[T]) -> Result<Tensor<T>> {
        correlate_valid(&self.kernels, x)
    }

    pub fn forward_waveform(&self, chunk: &WaveformBuffer) -> Result<Tensor<T>> {
        let x: Vec<T> = chunk.samples().iter().map(|&s| T::lit(s as f64)).collect();
        self.forward(&x)
    }

    /// Chain rule through convolution, kernel synthesis and the constraint map.
    ///
    /// With `g[m] = (sin(2 pi f2 m) - sin(2 pi f1 m)) / (pi m)` the kernel
    /// partials are `dg/df2 = 2 cos(2 pi f2 m) w` and `dg/df1 = -2 cos(2 pi f1 m) w`.
    pub fn backward(&self, x: &[T], output_grad: &Tensor<T>) -> Result<SincGradients<T>> {
        let len = self.kernel_len();
        if x.len() < len {
            return Err(Error::domain("input shorter than the kernel"));
        }
        output_grad.ensure_shape((self.n_filters(), x.len() - len + 1))?;
        let kernel_grad = correlate_kernel_grad(x, output_grad, len);
        let input = correlate_input_grad(&self.kernels, output_grad, x.len());
        let two = T::lit(2.0);
        let mut raw_low = Vec::with_capacity(self.n_filters());
        let mut raw_band = Vec::with_capacity(self.n_filters());
        for i in 0..self.n_filters() {
            let (f1, f2) = (self.constrained_low[i], self.constrained_high[i]);
            let (mut g1, mut g2) = (T::zero(), T::zero());
            for (n, (&dk, &w)) in kernel_grad.row(i).iter().zip(&self.window).enumerate() {
                let m = centered::<T>(n, len);
                g2 += dk * two * (T::TAU() * f2 * m).cos() * w;
                g1 -= dk * two * (T::TAU() * f1 * m).cos() * w;
            }
            let jac = constraint_jacobian(self.params.raw_low[i], self.params.raw_band[i]);
            raw_low.push(g1 * jac[0][0] + g2 * jac[1][0]);
            raw_band.push(g1 * jac[0][1] + g2 * jac[1][1]);
        }
        Ok(SincGradients {
            raw_low,
            raw_band,
            input,
        })
    }

    /// DFT magnitude of every zero-padded kernel: `n_filters x (n_fft/2 + 1)`.
    pub fn frequency_response(&self, n_fft: usize) -> Result<Tensor<T>> {
        if n_fft < self.kernel_len() {
            return Err(Error::domain(format!(
                "n_fft = {n_fft} is shorter than the kernel ({})",
                self.kernel_len()
            )));
        }
        let mut out = Tensor::zeros(self.n_filters(), n_fft / 2 + 1);
        for i in 0..self.n_filters() {
            out.row_mut(i)
                .copy_from_slice(&dft_magnitude(self.kernels.row(i), n_fft)?);
        }
        Ok(out)
    }
}

/// Valid cross-correlation of a single-channel signal with each kernel row.
pub fn correlate_valid<T: Scalar>(kernels: &Tensor<T>, x: &[T]) -> Result<Tensor<T>> {
    let len = kernels.cols();
    if x.len() < len {
        return Err(Error::domain(format!(
            "chunk of {} samples is shorter than the {len}-tap kernel",
            x.len()
        )));
    }
    let t_out = x.len() - len + 1;
    let mut y = Tensor::zeros(kernels.rows(), t_out);
    for i in 0..kernels.rows() {
        let out = y.row_mut(i);
        for (n, &k) in kernels.row(i).iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&x[n..n + t_out]) {
                *o += k * v;
            }
        }
    }
    Ok(y)
}

/// `dL/dK[i][n] = sum_t dY[i][t] x[t + n]`
fn correlate_kernel_grad<T: Scalar>(x: &[T], dy: &Tensor<T>, len: usize) -> Tensor<T> {
    let t_out = dy.cols();
    let mut dk = Tensor::zeros(dy.rows(), len);
    for i in 0..dy.rows() {
        let g = dy.row(i);
        for n in 0..len {
            *dk.at_mut(i, n) = g.iter().zip(&x[n..n + t_out]).map(|(&a, &b)| a * b).sum();
        }
    }
    dk
}

/// Full-correlation adjoint: `dL/dx[t + n] += dY[i][t] K[i][n]`.
fn correlate_input_grad<T: Scalar>(kernels: &Tensor<T>, dy: &Tensor<T>, x_len: usize) -> Vec<T> {
    let t_out = dy.cols();
    let mut dx = vec![T::zero(); x_len];
    for i in 0..kernels.rows() {
        let g = dy.row(i);
        for (n, &k) in kernels.row(i).iter().enumerate() {
            for (d, &v) in dx[n..n + t_out].iter_mut().zip(g) {
                *d += k * v;
            }
        }
    }
    dx
}
