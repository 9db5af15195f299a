//! Experiment configuration as flat `key = value` text.
//!
//! Every key has a default; unknown keys are rejected. [`ExperimentConfig::to_text`]
//! writes every key in a fixed order, so a saved config is a complete snapshot.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dsp::FrameSpec;
use crate::models::{Architecture, HeadConfig, SincNetConfig, XVectorConfig};
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Acoustic features for the x-vector branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frame: FrameSpec,
    /// Training crop length in frames.
    pub crop_frames: usize,
    /// Per-utterance mean and variance normalization.
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 24,
            frame: FrameSpec::default(),
            crop_frames: 100,
            cmvn: true,
        }
    }
}

/// Held-out split and trial list construction.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Utterances per speaker moved to the test split when a manifest has no split.
    pub holdout_per_speaker: usize,
    pub same_trials: usize,
    pub different_trials: usize,
    pub trial_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_per_speaker: 3,
            same_trials: 60,
            different_trials: 60,
            trial_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub sincnet: SincNetConfig,
    pub head: HeadConfig,
    pub xvector: XVectorConfig,
    pub features: FeatureConfig,
    pub eval: EvalConfig,
}

pub const KEYS: &[&str] = &[
    "train.arch",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.seed",
    "train.chunk_len",
    "train.chunks_per_utt",
    "train.eval_every",
    "sinc.filters",
    "sinc.kernel_len",
    "sinc.sample_rate",
    "sinc.conv_channels",
    "sinc.conv_widths",
    "sinc.pool_widths",
    "sinc.dense",
    "sinc.leaky_slope",
    "head.fc_widths",
    "head.xvector_frozen",
    "head.leaky_slope",
    "xvector.contexts",
    "xvector.frame_widths",
    "xvector.segment_dims",
    "xvector.layer_norm",
    "features.n_mels",
    "features.frame_len",
    "features.hop",
    "features.n_fft",
    "features.crop_frames",
    "features.cmvn",
    "eval.holdout",
    "eval.same_trials",
    "eval.diff_trials",
    "eval.trial_seed",
];

fn parse_one<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|v| parse_one(key, v)).collect()
}

fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// A reduced configuration that trains in minutes on one CPU core.
    pub fn small() -> Self {
        let mut c = ExperimentConfig::default();
        c.train.epochs = 8;
        c.train.batch_size = 16;
        c.train.learning_rate = 1e-3;
        c.train.chunk_len_samples = 1600;
        c.train.chunks_per_utt = 4;
        c.sincnet = SincNetConfig {
            n_filters: 20,
            kernel_len: 129,
            conv_channels: vec![16],
            conv_widths: vec![5],
            pool_widths: vec![3, 3],
            dense_dim: 64,
            chunk_len_samples: 1600,
            ..SincNetConfig::default()
        };
        c.head.fc_widths = vec![128, 128, 64];
        c.xvector.frame_widths = vec![64, 64, 64, 64, 128];
        c.xvector.segment_dims = vec![64, 64];
        c.features.crop_frames = 60;
        c.features.cmvn = false;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "train.arch" => self.train.architecture = v.parse()?,
            "train.epochs" => self.train.epochs = parse_one(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_one(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_one(key, v)?,
            "train.seed" => self.train.seed = parse_one(key, v)?,
            "train.chunk_len" => {
                self.train.chunk_len_samples = parse_one(key, v)?;
                self.sincnet.chunk_len_samples = self.train.chunk_len_samples;
            }
            "train.chunks_per_utt" => self.train.chunks_per_utt = parse_one(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_one(key, v)?,
            "sinc.filters" => self.sincnet.n_filters = parse_one(key, v)?,
            "sinc.kernel_len" => self.sincnet.kernel_len = parse_one(key, v)?,
            "sinc.sample_rate" => self.sincnet.sample_rate_hz = parse_one(key, v)?,
            "sinc.conv_channels" => self.sincnet.conv_channels = parse_list(key, v)?,
            "sinc.conv_widths" => self.sincnet.conv_widths = parse_list(key, v)?,
            "sinc.pool_widths" => self.sincnet.pool_widths = parse_list(key, v)?,
            "sinc.dense" => self.sincnet.dense_dim = parse_one(key, v)?,
            "sinc.leaky_slope" => self.sincnet.leaky_slope = parse_one(key, v)?,
            "head.fc_widths" => self.head.fc_widths = parse_list(key, v)?,
            "head.xvector_frozen" => self.head.xvector_frozen = parse_one(key, v)?,
            "head.leaky_slope" => self.head.leaky_slope = parse_one(key, v)?,
            "xvector.contexts" => {
                self.xvector.frame_contexts = v.split(';').map(|c| parse_list(key, c)).collect::<Result<_>>()?
            }
            "xvector.frame_widths" => self.xvector.frame_widths = parse_list(key, v)?,
            "xvector.segment_dims" => self.xvector.segment_dims = parse_list(key, v)?,
            "xvector.layer_norm" => self.xvector.layer_norm = parse_one(key, v)?,
            "features.n_mels" => {
                self.features.n_mels = parse_one(key, v)?;
                self.xvector.feature_dim = self.features.n_mels;
            }
            "features.frame_len" => self.features.frame.frame_length_samples = parse_one(key, v)?,
            "features.hop" => self.features.frame.hop_samples = parse_one(key, v)?,
            "features.n_fft" => self.features.frame.n_fft = parse_one(key, v)?,
            "features.crop_frames" => self.features.crop_frames = parse_one(key, v)?,
            "features.cmvn" => self.features.cmvn = parse_one(key, v)?,
            "eval.holdout" => self.eval.holdout_per_speaker = parse_one(key, v)?,
            "eval.same_trials" => self.eval.same_trials = parse_one(key, v)?,
            "eval.diff_trials" => self.eval.different_trials = parse_one(key, v)?,
            "eval.trial_seed" => self.eval.trial_seed = parse_one(key, v)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let s = &self.sincnet;
        let f = &self.features;
        Ok(match key {
            "train.arch" => t.architecture.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.chunk_len" => t.chunk_len_samples.to_string(),
            "train.chunks_per_utt" => t.chunks_per_utt.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "sinc.filters" => s.n_filters.to_string(),
            "sinc.kernel_len" => s.kernel_len.to_string(),
            "sinc.sample_rate" => s.sample_rate_hz.to_string(),
            "sinc.conv_channels" => join(&s.conv_channels),
            "sinc.conv_widths" => join(&s.conv_widths),
            "sinc.pool_widths" => join(&s.pool_widths),
            "sinc.dense" => s.dense_dim.to_string(),
            "sinc.leaky_slope" => s.leaky_slope.to_string(),
            "head.fc_widths" => join(&self.head.fc_widths),
            "head.xvector_frozen" => self.head.xvector_frozen.to_string(),
            "head.leaky_slope" => self.head.leaky_slope.to_string(),
            "xvector.contexts" => self
                .xvector
                .frame_contexts
                .iter()
                .map(|c| join(c))
                .collect::<Vec<_>>()
                .join(";"),
            "xvector.frame_widths" => join(&self.xvector.frame_widths),
            "xvector.segment_dims" => join(&self.xvector.segment_dims),
            "xvector.layer_norm" => self.xvector.layer_norm.to_string(),
            "features.n_mels" => f.n_mels.to_string(),
            "features.frame_len" => f.frame.frame_length_samples.to_string(),
            "features.hop" => f.frame.hop_samples.to_string(),
            "features.n_fft" => f.frame.n_fft.to_string(),
            "features.crop_frames" => f.crop_frames.to_string(),
            "features.cmvn" => f.cmvn.to_string(),
            "eval.holdout" => self.eval.holdout_per_speaker.to_string(),
            "eval.same_trials" => self.eval.same_trials.to_string(),
            "eval.diff_trials" => self.eval.different_trials.to_string(),
            "eval.trial_seed" => self.eval.trial_seed.to_string(),
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Validation(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on a command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Model configs for `n_classes` speakers with the shared chunk length applied.
    pub fn resolved(&self, n_classes: usize) -> (SincNetConfig, HeadConfig, XVectorConfig) {
        let mut sincnet = self.sincnet.clone();
        sincnet.chunk_len_samples = self.train.chunk_len_samples;
        let mut xvector = self.xvector.clone();
        xvector.n_classes = n_classes;
        xvector.feature_dim = self.features.n_mels;
        let mut head = self.head.clone();
        head.n_classes = n_classes;
        head.xvector_dim = match self.train.architecture {
            Architecture::Fusion => xvector.embedding_dim(),
            _ => 0,
        };
        (sincnet, head, xvector)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let (sincnet, _, xvector) = self.resolved(2);
        if self.train.architecture != Architecture::XVector {
            sincnet.stage_lengths().map_err(|e| Error::Validation(e.to_string()))?;
        }
        if self.train.architecture != Architecture::SincNet {
            xvector.validate().map_err(|e| Error::Validation(e.to_string()))?;
            self.features.frame.validate().map_err(|e| Error::Validation(e.to_string()))?;
            if self.features.crop_frames < xvector.min_frames() {
                return Err(Error::Validation(format!(
                    "features.crop_frames {} is below the network's minimum of {} frames",
                    self.features.crop_frames,
                    xvector.min_frames()
                )));
            }
        }
        Ok(())
    }
}
