use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::FeatureMatrix;
use crate::nn::{softmax_rows, Dense, Layer, LayerNorm, LeakyRelu, NormAxis, Sequential, StatsPool, TdnnSplice, Tensor, Trace};
use crate::{Error, Result, Scalar};

/// Frame-layer contexts of the x-vector TDNN.
pub const TABLE1_CONTEXTS: [&[isize]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];
pub const TABLE1_FRAME_WIDTHS: [usize; 5] = [512, 512, 512, 512, 1500];
pub const TABLE1_SEGMENT_DIMS: [usize; 2] = [512, 512];

#[derive(Clone, Debug, PartialEq)]
pub struct XVectorConfig {
    pub feature_dim: usize,
    pub frame_contexts: Vec<Vec<isize>>,
    pub frame_widths: Vec<usize>,
    pub segment_dims: Vec<usize>,
    pub n_classes: usize,
    /// Layer normalization after every hidden ReLU.
    pub layer_norm: bool,
}

impl Default for XVectorConfig {
    fn default() -> Self {
        XVectorConfig {
            feature_dim: 24,
            frame_contexts: TABLE1_CONTEXTS.iter().map(|c| c.to_vec()).collect(),
            frame_widths: TABLE1_FRAME_WIDTHS.to_vec(),
            segment_dims: TABLE1_SEGMENT_DIMS.to_vec(),
            n_classes: 2,
            layer_norm: true,
        }
    }
}

impl XVectorConfig {
    pub fn with_classes(n_classes: usize) -> Self {
        XVectorConfig {
            n_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_contexts.len() != self.frame_widths.len() || self.frame_widths.is_empty() {
            return Err(Error::domain("one context per frame layer is required"));
        }
        if self.segment_dims.is_empty() {
            return Err(Error::domain("at least one segment layer is required"));
        }
        if self.feature_dim == 0 || self.n_classes == 0 {
            return Err(Error::domain("feature_dim and n_classes must be positive"));
        }
        if self.frame_widths.iter().chain(&self.segment_dims).any(|&w| w == 0) {
            return Err(Error::domain("layer widths must be positive"));
        }
        if self.layer_norm && self.frame_widths.iter().chain(&self.segment_dims).any(|&w| w < 2) {
            return Err(Error::domain("layer norm needs widths of at least 2"));
        }
        for c in &self.frame_contexts {
            TdnnSplice::new(c.clone())?;
        }
        Ok(())
    }

    /// Shortest input (in frames) for which one frame reaches statistics pooling.
    pub fn min_frames(&self) -> usize {
        1 + self
            .frame_contexts
            .iter()
            .map(|c| (c[c.len() - 1] - c[0]) as usize)
            .sum::<usize>()
    }

    pub fn embedding_dim(&self) -> usize {
        self.segment_dims[0]
    }
}

/// TDNN x-vector network with a softmax speaker head.
#[derive(Clone, Debug, PartialEq)]
pub struct XVectorNet<T> {
    pub config: XVectorConfig,
    pub net: Sequential<T>,
    embedding_layer: usize,
}

impl<T: Scalar> XVectorNet<T> {
    pub fn build(config: &XVectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu = Layer::Activation(LeakyRelu::new(0.0)?);
        let mut net = Sequential::new();
        let mut width = config.feature_dim;
        for (i, (ctx, &out)) in config.frame_contexts.iter().zip(&config.frame_widths).enumerate() {
            let name = format!("frame{}", i + 1);
            let splice = TdnnSplice::new(ctx.clone())?;
            let spliced = width * ctx.len();
            net.push(format!("{name}.splice"), Layer::Splice(splice));
            net.push(format!("{name}.affine"), Layer::Dense(Dense::new(spliced, out, &mut rng)));
            net.push(format!("{name}.relu"), relu.clone());
            if config.layer_norm {
                net.push(format!("{name}.norm"), Layer::LayerNorm(LayerNorm::new(out, NormAxis::Features)?));
            }
            width = out;
        }
        net.push("stats", Layer::StatsPool(StatsPool));
        width *= 2;
        let first_segment = config.frame_widths.len() + 1;
        let mut embedding_layer = 0;
        for (j, &out) in config.segment_dims.iter().enumerate() {
            let name = format!("segment{}", first_segment + j);
            net.push(format!("{name}.affine"), Layer::Dense(Dense::new(width, out, &mut rng)));
            if j == 0 {
                embedding_layer = net.len() - 1;
            }
            net.push(format!("{name}.relu"), relu.clone());
            if config.layer_norm {
                net.push(format!("{name}.norm"), Layer::LayerNorm(LayerNorm::new(out, NormAxis::Features)?));
            }
            width = out;
        }
        net.push("output.affine", Layer::Dense(Dense::new(width, config.n_classes, &mut rng)));
        Ok(XVectorNet {
            config: config.clone(),
            net,
            embedding_layer,
        })
    }

    /// `(layer, input width, output width)` of every affine layer and the pooling layer.
    /// The pooling row reports per-frame input width.
    pub fn geometry(&self) -> Vec<(String, usize, usize)> {
        self.net
            .layers()
            .iter()
            .filter_map(|(name, layer)| match layer {
                Layer::Dense(d) => Some((name.trim_end_matches(".affine").to_string(), d.input_dim(), d.output_dim())),
                Layer::StatsPool(_) => {
                    let w = *self.config.frame_widths.last().expect("validated");
                    Some((name.clone(), w, 2 * w))
                }
                _ => None,
            })
            .collect()
    }

    fn check_frames(&self, features: &Tensor<T>) -> Result<()> {
        let min = self.config.min_frames();
        if features.rows() < min {
            return Err(Error::domain(format!(
                "x-vector input needs at least {min} frames, got {}",
                features.rows()
            )));
        }
        if features.cols() != self.config.feature_dim {
            return Err(Error::domain(format!(
                "x-vector expects {}-dim features, got {}",
                self.config.feature_dim,
                features.cols()
            )));
        }
        Ok(())
    }

    /// Logits with a trace for backpropagation.
    pub fn forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_frames(features)?;
        self.net.forward(features)
    }

    /// Class posteriors for one utterance.
    pub fn posteriors(&self, features: &FeatureMatrix<T>) -> Result<Vec<T>> {
        self.check_frames(&features.values)?;
        Ok(softmax_rows(&self.net.infer(&features.values)?).into_vec())
    }

    /// Affine output of the first segment layer, before its nonlinearity.
    pub fn embedding(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        self.check_frames(features)?;
        Ok(self.net.infer_range(features, 0..self.embedding_layer + 1)?.into_vec())
    }

    /// As [`XVectorNet::embedding`] with a trace for fine-tuning through the port.
    pub fn embedding_traced(&self, features: &Tensor<T>) -> Result<(Vec<T>, Trace<T>)> {
        self.check_frames(features)?;
        let (y, trace) = self.net.forward_range(features, 0..self.embedding_layer + 1)?;
        Ok((y.into_vec(), trace))
    }

    /// Runs the layers after statistics pooling on a pooled `1 x 2F` vector.
    pub fn forward_from_pooled(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = self.net.index_of("stats").expect("built with a stats layer");
        self.net.infer_range(pooled, stats + 1..self.net.len())
    }

    /// Frame-level activations just before pooling.
    pub fn frame_activations(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames(features)?;
        let stats = self.net.index_of("stats").expect("built with a stats layer");
        self.net.infer_range(features, 0..stats)
    }

    pub fn embedding_layer(&self) -> usize {
        self.embedding_layer
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }
}
