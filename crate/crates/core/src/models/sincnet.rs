use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::zero_grads_for;
use crate::audio_io::WaveformBuffer;
use crate::nn::{
    softmax_rows, Conv1d, Dense, Gradients, Layer, LayerNorm, LeakyRelu, MaxPool1d, NormAxis, Sequential, SincConv,
    Tensor, Trace,
};
use crate::sinc::init_mel_scale;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct SincNetConfig {
    pub n_filters: usize,
    pub kernel_len: usize,
    pub sample_rate_hz: u32,
    /// Output channels of the standard conv blocks after the sinc layer.
    pub conv_channels: Vec<usize>,
    pub conv_widths: Vec<usize>,
    /// One pool width for the sinc block plus one per conv block.
    pub pool_widths: Vec<usize>,
    pub dense_dim: usize,
    pub chunk_len_samples: usize,
    pub leaky_slope: f64,
}

impl Default for SincNetConfig {
    fn default() -> Self {
        SincNetConfig {
            n_filters: 80,
            kernel_len: 251,
            sample_rate_hz: 16000,
            conv_channels: vec![60, 60],
            conv_widths: vec![5, 5],
            pool_widths: vec![3, 3, 3],
            dense_dim: 512,
            chunk_len_samples: 3200,
            leaky_slope: 0.2,
        }
    }
}

impl SincNetConfig {
    fn validate_shape(&self) -> Result<()> {
        if self.conv_channels.len() != self.conv_widths.len() || self.pool_widths.len() != self.conv_channels.len() + 1 {
            return Err(Error::domain(
                "need one width per conv block and one pool width per block (sinc block included)",
            ));
        }
        if self.n_filters < 2 || self.conv_channels.iter().any(|&c| c < 2) {
            return Err(Error::domain("every block needs at least 2 channels for layer norm"));
        }
        if self.conv_widths.iter().chain(&self.pool_widths).any(|&w| w == 0) || self.dense_dim == 0 {
            return Err(Error::domain("widths must be positive"));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::domain("sinc kernel length must be odd"));
        }
        Ok(())
    }

    /// Time length after every stage (sinc, pool, conv, pool, ...) for a chunk of `len` samples.
    /// Errors name the first stage that would be empty.
    pub fn stage_lengths_for(&self, len: usize) -> Result<Vec<usize>> {
        self.validate_shape()?;
        let mut out = Vec::new();
        let too_short = |stage: &str, have: usize, need: usize| {
            Error::domain(format!(
                "chunk of {len} samples leaves {have} frames at {stage}, which needs {need}"
            ))
        };
        if len < self.kernel_len {
            return Err(too_short("the sinc layer", len, self.kernel_len));
        }
        let mut t = len - self.kernel_len + 1;
        out.push(t);
        for (i, &pool) in self.pool_widths.iter().enumerate() {
            if t < pool {
                return Err(too_short(&format!("pool {}", i + 1), t, pool));
            }
            t /= pool;
            out.push(t);
            if let Some(&w) = self.conv_widths.get(i) {
                if t < w {
                    return Err(too_short(&format!("conv {}", i + 1), t, w));
                }
                t = t - w + 1;
                out.push(t);
            }
        }
        Ok(out)
    }

    pub fn stage_lengths(&self) -> Result<Vec<usize>> {
        self.stage_lengths_for(self.chunk_len_samples)
    }

    /// Smallest chunk length for which every stage is non-empty.
    pub fn min_chunk_len(&self) -> Result<usize> {
        self.validate_shape()?;
        let mut need = 1usize;
        for (i, &pool) in self.pool_widths.iter().enumerate().rev() {
            if let Some(&w) = self.conv_widths.get(i) {
                need += w - 1;
            }
            need *= pool;
        }
        Ok(need + self.kernel_len - 1)
    }

    pub fn last_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&self.n_filters)
    }

    pub fn flatten_dim(&self) -> Result<usize> {
        let lengths = self.stage_lengths()?;
        Ok(lengths[lengths.len() - 1] * self.last_channels())
    }
}

/// Sinc filter bank and CNN producing a `dense_dim` feature vector per chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct SincNetBranch<T> {
    pub config: SincNetConfig,
    pub net: Sequential<T>,
}

impl<T: Scalar> SincNetBranch<T> {
    pub fn build(config: &SincNetConfig, seed: u64) -> Result<Self> {
        let flatten = config.flatten_dim().map_err(|e| match config.min_chunk_len() {
            Ok(min) => Error::domain(format!("{e}; minimum chunk length is {min}")),
            Err(_) => e,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = Layer::Activation(LeakyRelu::new(config.leaky_slope)?);
        let mut net = Sequential::new();
        let params = init_mel_scale::<T>(config.n_filters, config.sample_rate_hz, config.kernel_len)?;
        net.push("sinc", Layer::Sinc(SincConv::from_params(&params)?));
        net.push("sinc.norm", Layer::LayerNorm(LayerNorm::new(config.n_filters, NormAxis::Channels)?));
        net.push("sinc.act", act.clone());
        net.push("sinc.pool", Layer::MaxPool(MaxPool1d::new(config.pool_widths[0])?));
        let mut channels = config.n_filters;
        for (i, (&out, &w)) in config.conv_channels.iter().zip(&config.conv_widths).enumerate() {
            let name = format!("conv{}", i + 1);
            net.push(name.clone(), Layer::Conv1d(Conv1d::new(channels, out, w, 1, &mut rng)));
            net.push(format!("{name}.norm"), Layer::LayerNorm(LayerNorm::new(out, NormAxis::Channels)?));
            net.push(format!("{name}.act"), act.clone());
            net.push(format!("{name}.pool"), Layer::MaxPool(MaxPool1d::new(config.pool_widths[i + 1])?));
            channels = out;
        }
        net.push("flatten", Layer::Flatten);
        net.push("dense", Layer::Dense(Dense::new(flatten, config.dense_dim, &mut rng)));
        net.push("dense.act", act);
        Ok(SincNetBranch {
            config: config.clone(),
            net,
        })
    }

    pub fn sinc_layer(&self) -> &SincConv<T> {
        match &self.net.layers()[0].1 {
            Layer::Sinc(s) => s,
            _ => unreachable!("branch starts with the sinc layer"),
        }
    }

    pub fn chunk_tensor(&self, chunk: &[f32]) -> Result<Tensor<T>> {
        if chunk.len() != self.config.chunk_len_samples {
            return Err(Error::domain(format!(
                "chunk has {} samples, the branch expects {}",
                chunk.len(),
                self.config.chunk_len_samples
            )));
        }
        Ok(Tensor::row_vector(chunk.iter().map(|&v| T::lit(v as f64)).collect()))
    }

    /// Branch feature vector (after the final Leaky ReLU) for one chunk.
    pub fn forward(&self, chunk: &WaveformBuffer) -> Result<Vec<T>> {
        let x = self.chunk_tensor(chunk.samples())?;
        Ok(self.net.infer(&x)?.into_vec())
    }
}

/// Dense classifier on top of the branch (and, for fusion, the x-vector port).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// FC1, FC2, FC3 widths.
    pub fc_widths: Vec<usize>,
    pub n_classes: usize,
    /// Width of the x-vector port; 0 for the sinc-only model.
    pub xvector_dim: usize,
    /// No gradient leaves through the x-vector port when set.
    pub xvector_frozen: bool,
    pub leaky_slope: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fc_widths: vec![512, 512, 256],
            n_classes: 2,
            xvector_dim: 512,
            xvector_frozen: true,
            leaky_slope: 0.2,
        }
    }
}

/// Trace of one classifier forward pass.
#[derive(Debug)]
pub struct ClassifierTrace<T> {
    branch: Trace<T>,
    head: Trace<T>,
}

/// SincNet branch plus FC1-FC3 and a softmax output. With `xvector_dim > 0`
/// this is the fusion model: FC1 sees `[branch features, x-vector]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawWaveClassifier<T> {
    pub branch: SincNetBranch<T>,
    pub head: Sequential<T>,
    pub head_config: HeadConfig,
    embedding_layer: usize,
}

impl<T: Scalar> RawWaveClassifier<T> {
    pub fn build(sincnet: &SincNetConfig, head_config: &HeadConfig, seed: u64) -> Result<Self> {
        if head_config.fc_widths.is_empty() || head_config.fc_widths.contains(&0) || head_config.n_classes == 0 {
            return Err(Error::domain("head needs positive FC widths and at least one class"));
        }
        let branch = SincNetBranch::build(sincnet, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        let act = Layer::Activation(LeakyRelu::new(head_config.leaky_slope)?);
        let mut head = Sequential::new();
        let mut width = sincnet.dense_dim + head_config.xvector_dim;
        for (i, &out) in head_config.fc_widths.iter().enumerate() {
            head.push(format!("fc{}", i + 1), Layer::Dense(Dense::new(width, out, &mut rng)));
            head.push(format!("fc{}.act", i + 1), act.clone());
            width = out;
        }
        let embedding_layer = head.len() - 1;
        head.push("output", Layer::Dense(Dense::new(width, head_config.n_classes, &mut rng)));
        Ok(RawWaveClassifier {
            branch,
            head,
            head_config: head_config.clone(),
            embedding_layer,
        })
    }

    pub fn is_fusion(&self) -> bool {
        self.head_config.xvector_dim > 0
    }

    pub fn chunk_len(&self) -> usize {
        self.branch.config.chunk_len_samples
    }

    fn head_input(&self, features: Tensor<T>, xvec: Option<&[T]>) -> Result<Tensor<T>> {
        match (self.head_config.xvector_dim, xvec) {
            (0, None) => Ok(features),
            (0, Some(_)) => Err(Error::domain("model has no x-vector port")),
            (d, Some(x)) if x.len() == d => features.hcat(&Tensor::row_vector(x.to_vec())),
            (d, Some(x)) => Err(Error::domain(format!("x-vector has {} dims, port expects {d}", x.len()))),
            (d, None) => Err(Error::domain(format!("fusion model needs a {d}-dim x-vector"))),
        }
    }

    pub fn forward(&self, chunk: &[f32], xvec: Option<&[T]>) -> Result<(Tensor<T>, ClassifierTrace<T>)> {
        let x = self.branch.chunk_tensor(chunk)?;
        let (features, branch) = self.branch.net.forward(&x)?;
        let (logits, head) = self.head.forward(&self.head_input(features, xvec)?)?;
        Ok((logits, ClassifierTrace { branch, head }))
    }

    /// Class posteriors for one chunk; sums to 1.
    pub fn posteriors(&self, chunk: &[f32], xvec: Option<&[T]>) -> Result<Vec<T>> {
        let x = self.branch.chunk_tensor(chunk)?;
        let features = self.branch.net.infer(&x)?;
        let logits = self.head.infer(&self.head_input(features, xvec)?)?;
        Ok(softmax_rows(&logits).into_vec())
    }

    /// FC3 activations: the utterance-level representation scored in verification.
    pub fn embedding(&self, chunk: &[f32], xvec: Option<&[T]>) -> Result<Vec<T>> {
        let x = self.branch.chunk_tensor(chunk)?;
        let features = self.branch.net.infer(&x)?;
        let h = self
            .head
            .infer_range(&self.head_input(features, xvec)?, 0..self.embedding_layer + 1)?;
        Ok(h.into_vec())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.branch
            .net
            .params()
            .into_iter()
            .map(|(n, t)| (format!("sincnet.{n}"), t))
            .chain(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.branch.net.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        zero_grads_for(&self.named_params())
    }

    /// Accumulates parameter gradients (branch first, then head) and returns the
    /// gradient at the x-vector port, or `None` when frozen or absent.
    pub fn backward(
        &self,
        trace: &mut ClassifierTrace<T>,
        upstream: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Option<Vec<T>>> {
        let n_branch = self.branch.net.params().len();
        if grads.tensors.len() != n_branch + self.head.params().len() {
            return Err(Error::domain("gradient buffer does not match classifier parameters"));
        }
        let mut head_grads = Gradients {
            tensors: grads.tensors.split_off(n_branch),
        };
        let d_in = self.head.backward(&mut trace.head, upstream, &mut head_grads);
        let d_in = match d_in {
            Ok(d) => d,
            Err(e) => {
                grads.tensors.extend(head_grads.tensors);
                return Err(e);
            }
        };
        let (d_branch, d_port) = d_in.hsplit(self.branch.config.dense_dim)?;
        let result = self.branch.net.backward(&mut trace.branch, &d_branch, grads);
        grads.tensors.extend(head_grads.tensors);
        result?;
        if self.is_fusion() && !self.head_config.xvector_frozen {
            Ok(Some(d_port.into_vec()))
        } else {
            Ok(None)
        }
    }
}
