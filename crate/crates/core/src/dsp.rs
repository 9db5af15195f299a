//! Windowing, radix-2 DFT magnitudes and log-mel filterbank features.

use std::fs;
use std::path::Path;

use crate::audio_io::WaveformBuffer;
use crate::nn::Tensor;
use crate::{Error, Result, Scalar};

pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;
pub const MEL_LOW_HZ: f64 = 20.0;

/// `w[n] = 0.54 - 0.46 cos(2 pi n / L)` for `n = 0..L`.
pub fn hamming_window<T: Scalar>(len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::domain("window length must be at least 1"));
    }
    let l = T::lit(len as f64);
    Ok((0..len)
        .map(|n| T::lit(0.54) - T::lit(0.46) * (T::TAU() * T::lit(n as f64) / l).cos())
        .collect())
}

/// In-place iterative radix-2 FFT over split real/imaginary buffers.
fn fft_in_place<T: Scalar>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    if n <= 1 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                // twiddles evaluated directly, not by recurrence, to keep 1e-9 agreement
                let angle = -T::TAU() * T::lit((k * stride) as f64) / T::lit(n as f64);
                let (wi, wr) = angle.sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        size *= 2;
    }
}

/// Squared DFT magnitudes at bins `0..=n_fft/2` of the zero-padded signal.
pub fn power_spectrum<T: Scalar>(signal: &[T], n_fft: usize) -> Result<Vec<T>> {
    if n_fft == 0 || !n_fft.is_power_of_two() {
        return Err(Error::domain(format!("n_fft = {n_fft} is not a power of two")));
    }
    if signal.len() > n_fft {
        return Err(Error::domain(format!(
            "signal length {} exceeds n_fft = {n_fft}",
            signal.len()
        )));
    }
    let mut re = vec![T::zero(); n_fft];
    re[..signal.len()].copy_from_slice(signal);
    let mut im = vec![T::zero(); n_fft];
    fft_in_place(&mut re, &mut im);
    Ok((0..=n_fft / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

pub fn dft_magnitude<T: Scalar>(signal: &[T], n_fft: usize) -> Result<Vec<T>> {
    Ok(power_spectrum(signal, n_fft)?.into_iter().map(|p| p.sqrt()).collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSpec {
    pub frame_length_samples: usize,
    pub hop_samples: usize,
    pub n_fft: usize,
    pub window: WindowKind,
}

impl Default for FrameSpec {
    /// 25 ms frames with a 10 ms hop at 16 kHz.
    fn default() -> Self {
        FrameSpec {
            frame_length_samples: 400,
            hop_samples: 160,
            n_fft: 512,
            window: WindowKind::Hamming,
        }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hop_samples == 0
            || self.hop_samples > self.frame_length_samples
            || self.frame_length_samples > self.n_fft
        {
            return Err(Error::domain(format!(
                "frame spec needs 0 < hop ({}) <= frame ({}) <= n_fft ({})",
                self.hop_samples, self.frame_length_samples, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::domain("n_fft must be a power of two"));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_length_samples {
            0
        } else {
            1 + (n_samples - self.frame_length_samples) / self.hop_samples
        }
    }
}

/// Triangular filters on the FFT bin grid; `n_mels + 2` mel-spaced edges from 20 Hz to Nyquist.
/// Returns the weights (`n_mels x (n_fft/2+1)`) and the center frequencies in Hz.
pub fn mel_filterbank<T: Scalar>(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Result<(Tensor<T>, Vec<f64>)> {
    if n_mels == 0 {
        return Err(Error::domain("n_mels must be at least 1"));
    }
    let nyquist = sample_rate_hz as f64 / 2.0;
    if nyquist <= MEL_LOW_HZ {
        return Err(Error::domain("sample rate too low for the mel range"));
    }
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    let mut weights = Tensor::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = weights.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            *w = T::lit(v);
        }
        // a band narrower than the bin spacing falls on its nearest bin
        if row.iter().all(|w| *w == T::zero()) {
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            row[k] = T::one();
        }
    }
    Ok((weights, edges[1..=n_mels].to_vec()))
}

/// `T x F` frame-level features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub values: Tensor<T>,
    pub frame_spec: FrameSpec,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..start+len` as a new matrix.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_frames() {
            return Err(Error::domain("feature crop out of range"));
        }
        let f = self.dim();
        let data = self.values.data()[start * f..(start + len) * f].to_vec();
        Ok(FeatureMatrix {
            values: Tensor::from_vec(len, f, data)?,
            frame_spec: self.frame_spec,
        })
    }

    /// Header line `T F`, then little-endian `f32` rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{} {}\n", self.n_frames(), self.dim()).into_bytes();
        for v in self.values.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], frame_spec: FrameSpec) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing feature header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Format(e.to_string()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [t, f] = dims[..] else {
            return Err(Error::Format(format!("bad header {header:?}")));
        };
        let body = &bytes[nl + 1..];
        if body.len() != t * f * 4 {
            return Err(Error::Integrity(format!(
                "expected {} payload bytes, found {}",
                t * f * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(FeatureMatrix {
            values: Tensor::from_vec(t, f, data)?,
            frame_spec,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Log mel filterbank energies: Hamming window, power spectrum, triangular filters, `ln(max(e, 1e-10))`.
pub fn mel_filterbank_features<T: Scalar>(
    buffer: &WaveformBuffer,
    spec: &FrameSpec,
    n_mels: usize,
) -> Result<FeatureMatrix<T>> {
    spec.validate()?;
    let samples = buffer.samples();
    let n_frames = spec.n_frames(samples.len());
    if n_frames == 0 {
        return Err(Error::domain(format!(
            "buffer of {} samples is shorter than one {}-sample frame",
            samples.len(),
            spec.frame_length_samples
        )));
    }
    let window: Vec<T> = hamming_window(spec.frame_length_samples)?;
    let (filters, _) = mel_filterbank::<T>(n_mels, spec.n_fft, buffer.sample_rate_hz())?;
    let floor = T::lit(LOG_FLOOR);
    let mut values = Tensor::zeros(n_frames, n_mels);
    let mut frame = vec![T::zero(); spec.frame_length_samples];
    for t in 0..n_frames {
        let start = t * spec.hop_samples;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = T::lit(samples[start + i] as f64) * window[i];
        }
        let power = power_spectrum(&frame, spec.n_fft)?;
        for m in 0..n_mels {
            let e: T = filters.row(m).iter().zip(&power).map(|(&w, &p)| w * p).sum();
            *values.at_mut(t, m) = e.max(floor).ln();
        }
    }
    Ok(FeatureMatrix {
        values,
        frame_spec: *spec,
    })
}

/// Per-dimension standardization with population std floored at 1e-8.
pub fn mean_variance_normalize<T: Scalar>(features: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    let (t, f) = features.values.shape();
    if t < 2 {
        return Err(Error::domain("normalization needs at least 2 frames"));
    }
    let n = T::lit(t as f64);
    let mut out = features.values.clone();
    for d in 0..f {
        let mean = (0..t).map(|r| features.values.at(r, d)).sum::<T>() / n;
        let var = (0..t)
            .map(|r| (features.values.at(r, d) - mean).powi(2))
            .sum::<T>()
            / n;
        let std = var.sqrt().max(T::lit(STD_FLOOR));
        for r in 0..t {
            *out.at_mut(r, d) = (features.values.at(r, d) - mean) / std;
        }
    }
    Ok(FeatureMatrix {
        values: out,
        frame_spec: features.frame_spec,
    })
}
