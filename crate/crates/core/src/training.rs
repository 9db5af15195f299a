//! Chunk sampling, the epoch loop, per-epoch evaluation and checkpoints.
//!
//! All randomness during training flows through one ChaCha8 stream owned by
//! the [`Trainer`]; evaluation draws nothing from it. A checkpoint stores that
//! stream's position, so resuming reproduces the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, error, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{make_trials, DatasetManifest, Split, TrialList, WaveformBuffer};
use crate::config::{ExperimentConfig, FeatureConfig};
use crate::dsp::{mean_variance_normalize, mel_filterbank_features, FeatureMatrix};
use crate::evaluation::{compute_eer, score_trials};
use crate::models::{Architecture, Embedding, EmbeddingSet, RawWaveClassifier, SpeakerModel, XVectorNet};
use crate::nn::{read_records, softmax_cross_entropy, stable_sum, write_records, Adam, Gradients, Tensor};
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_VERSION: &str = "SINCXV-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub chunk_len_samples: usize,
    /// Random chunks (or feature crops) drawn from every utterance per epoch.
    pub chunks_per_utt: usize,
    pub architecture: Architecture,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            chunk_len_samples: 3200,
            chunks_per_utt: 4,
            architecture: Architecture::Fusion,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("chunk_len", self.chunk_len_samples),
            ("chunks_per_utt", self.chunks_per_utt),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Log mel features, normalized per utterance when `features.cmvn` is set.
pub fn utterance_features<T: Scalar>(audio: &WaveformBuffer, features: &FeatureConfig) -> Result<FeatureMatrix<T>> {
    let raw = mel_filterbank_features(audio, &features.frame, features.n_mels)?;
    if features.cmvn {
        mean_variance_normalize(&raw)
    } else {
        Ok(raw)
    }
}

#[derive(Clone, Debug)]
pub struct LabeledUtterance<T> {
    pub audio: WaveformBuffer,
    pub label: usize,
    pub features: Option<FeatureMatrix<T>>,
}

/// Training utterances with dense labels assigned by sorted speaker id.
#[derive(Clone, Debug)]
pub struct Corpus<T> {
    pub speakers: Vec<String>,
    pub utterances: Vec<LabeledUtterance<T>>,
}

impl<T: Scalar> Corpus<T> {
    /// `features` is computed for every utterance when given.
    pub fn from_buffers(buffers: Vec<(WaveformBuffer, String)>, features: Option<&FeatureConfig>) -> Result<Self> {
        let speakers: Vec<String> = buffers
            .iter()
            .map(|(_, s)| s.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let labels: Vec<usize> = buffers.iter().map(|(_, s)| index[s.as_str()]).collect();
        let utterances = buffers
            .into_iter()
            .zip(labels)
            .map(|((audio, _), label)| {
                let features = features.map(|f| utterance_features(&audio, f)).transpose()?;
                Ok(LabeledUtterance { audio, label, features })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { speakers, utterances })
    }

    pub fn from_manifest(manifest: &DatasetManifest, features: Option<&FeatureConfig>) -> Result<Self> {
        let audio = manifest.load_audio()?;
        let buffers = audio
            .into_iter()
            .zip(&manifest.entries)
            .map(|(a, e)| (a, e.speaker_id.clone()))
            .collect();
        Corpus::from_buffers(buffers, features)
    }

    pub fn n_classes(&self) -> usize {
        self.speakers.len()
    }
}

/// Held-out utterances plus the trials scored on them.
#[derive(Clone, Debug)]
pub struct EvalSet<T> {
    pub utterances: Vec<(WaveformBuffer, Option<FeatureMatrix<T>>)>,
    pub trials: TrialList,
}

impl<T: Scalar> EvalSet<T> {
    pub fn new(buffers: Vec<WaveformBuffer>, trials: TrialList, features: Option<&FeatureConfig>) -> Result<Self> {
        let utterances = buffers
            .into_iter()
            .map(|a| {
                let f = features.map(|fc| utterance_features(&a, fc)).transpose()?;
                Ok((a, f))
            })
            .collect::<Result<Vec<_>>>()?;
        for t in &trials.trials {
            for id in [&t.enroll, &t.test] {
                if !utterances.iter().any(|(a, _)| a.utterance_id() == id) {
                    return Err(Error::Lookup(format!("trial utterance {id} is not in the evaluation set")));
                }
            }
        }
        Ok(EvalSet { utterances, trials })
    }

    pub fn from_manifest(manifest: &DatasetManifest, trials: TrialList, features: Option<&FeatureConfig>) -> Result<Self> {
        EvalSet::new(manifest.load_audio()?, trials, features)
    }
}

/// Dev/test manifests for a run: an explicit test manifest wins; otherwise
/// the last `eval.holdout` utterances of every speaker are held out.
pub fn split_manifest(
    manifest: &DatasetManifest,
    test: Option<&DatasetManifest>,
    config: &ExperimentConfig,
) -> Result<(DatasetManifest, DatasetManifest)> {
    match (manifest.split, test) {
        (_, Some(t)) => Ok((manifest.clone(), t.clone())),
        (Split::Dev, None) => manifest.hold_out(config.eval.holdout_per_speaker),
        (Split::Test, None) => Err(Error::Validation("training needs a dev manifest".into())),
    }
}

/// Loads the training corpus, the held-out evaluation set and its trials.
pub fn prepare_data<T: Scalar>(
    manifest: &DatasetManifest,
    test: Option<&DatasetManifest>,
    config: &ExperimentConfig,
) -> Result<(Corpus<T>, EvalSet<T>)> {
    let (dev, test) = split_manifest(manifest, test, config)?;
    let features = (config.train.architecture != Architecture::SincNet).then_some(&config.features);
    let trials = make_trials(
        &test,
        config.eval.same_trials,
        config.eval.different_trials,
        config.eval.trial_seed,
    )?;
    Ok((
        Corpus::from_manifest(&dev, features)?,
        EvalSet::from_manifest(&test, trials, features)?,
    ))
}

/// One training window: `len` units (samples or frames) from `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub utterance: usize,
    pub offset: usize,
    pub label: usize,
}

/// `per_utt` uniformly placed windows per utterance, in utterance order.
/// Utterances shorter than `window` are skipped with a warning.
pub fn sample_windows(
    lengths: &[(usize, usize)],
    window: usize,
    per_utt: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::with_capacity(lengths.len() * per_utt);
    for (utterance, &(len, label)) in lengths.iter().enumerate() {
        if len < window {
            warn!("utterance {utterance} has {len} units, shorter than the {window}-unit window; skipped");
            continue;
        }
        for _ in 0..per_utt {
            out.push(WindowSample {
                utterance,
                offset: rng.random_range(0..=len - window),
                label,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no utterance holds a {window}-unit window")));
    }
    Ok(out)
}

/// Raw-waveform chunks with speaker labels, drawn from a dev manifest.
pub fn sample_chunks(
    manifest: &DatasetManifest,
    chunk_len: usize,
    per_utt: usize,
    seed: u64,
) -> Result<Vec<(Vec<f32>, usize)>> {
    let corpus = Corpus::<f32>::from_manifest(manifest, None)?;
    let lengths: Vec<(usize, usize)> = corpus.utterances.iter().map(|u| (u.audio.len(), u.label)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_windows(&lengths, chunk_len, per_utt, &mut rng)?
        .into_iter()
        .map(|w| {
            let s = corpus.utterances[w.utterance].audio.samples();
            (s[w.offset..w.offset + chunk_len].to_vec(), w.label)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub frame_error: f64,
    pub eer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,frame_error,eer";

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::State(format!(
                    "history epochs must increase: {} after {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    fn row(r: &EpochRecord) -> String {
        let eer = r.eer.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{}", r.epoch, r.train_loss, r.frame_error, eer)
    }

    /// Header plus one row per epoch; `eer` is empty when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&Self::row(r));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format(format!("history must start with {:?}", Self::CSV_HEADER)));
        }
        let mut h = TrainHistory::default();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("history row {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            h.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                frame_error: f[2].parse().map_err(|_| bad())?,
                eer: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad())?)
                },
            })?;
        }
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Evaluated epochs only.
    pub fn eer_series(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.eer.map(|e| (r.epoch, e))).collect()
    }
}

/// Where a fusion model's x-vector port reads from.
#[derive(Clone, Debug, PartialEq)]
pub enum PortSource<T> {
    /// A pretrained network run on each utterance's features.
    Network(XVectorNet<T>),
    /// Precomputed embeddings keyed by utterance id.
    Table(EmbeddingSet),
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn to_scalar<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

pub struct Trainer<T> {
    config: ExperimentConfig,
    speakers: Vec<String>,
    model: SpeakerModel<T>,
    port_table: Option<EmbeddingSet>,
    optimizer: Adam<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: TrainHistory,
}

impl<T: Scalar> Trainer<T> {
    /// Builds a fresh model for `config.train.architecture` and `speakers`
    /// classes. A fusion model without a `port` gets a randomly initialized
    /// x-vector network.
    pub fn new(config: ExperimentConfig, speakers: Vec<String>, port: Option<PortSource<T>>) -> Result<Self> {
        config.validate()?;
        if speakers.is_empty() {
            return Err(Error::EmptyDataset("no speakers".into()));
        }
        let mut config = config;
        let seed = config.train.seed;
        let (sincnet, mut head, mut xvector) = config.resolved(speakers.len());
        let mut port_table = None;
        let model = match config.train.architecture {
            Architecture::SincNet => SpeakerModel::SincNet(RawWaveClassifier::build(&sincnet, &head, seed)?),
            Architecture::XVector => SpeakerModel::XVector(XVectorNet::build(&xvector, seed ^ 0x7ec)?),
            Architecture::Fusion => {
                let net = match port {
                    Some(PortSource::Network(net)) => Some(net),
                    Some(PortSource::Table(table)) => {
                        head.xvector_dim = table.dim();
                        port_table = Some(table);
                        None
                    }
                    None => Some(XVectorNet::build(&xvector, seed ^ 0x7ec)?),
                };
                if let Some(net) = &net {
                    if net.config.feature_dim != config.features.n_mels {
                        return Err(Error::Validation(format!(
                            "x-vector network expects {} features, config extracts {}",
                            net.config.feature_dim, config.features.n_mels
                        )));
                    }
                    xvector = net.config.clone();
                    config.xvector = net.config.clone();
                    head.xvector_dim = net.embedding_dim();
                }
                SpeakerModel::Fusion {
                    classifier: RawWaveClassifier::build(&sincnet, &head, seed)?,
                    xvector: net,
                }
            }
        };
        let _ = xvector;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut trainer = Trainer {
            optimizer: Adam::new(config.train.learning_rate, &[]),
            config,
            speakers,
            model,
            port_table,
            rng,
            epoch: 0,
            history: TrainHistory::default(),
        };
        let shapes: Vec<(usize, usize)> = trainer.trainable_params().iter().map(|t| t.shape()).collect();
        trainer.optimizer = Adam::new(trainer.config.train.learning_rate, &shapes);
        Ok(trainer)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn model(&self) -> &SpeakerModel<T> {
        &self.model
    }

    pub fn port_table(&self) -> Option<&EmbeddingSet> {
        self.port_table.as_ref()
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Overrides the learning rate for subsequent steps.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.learning_rate = lr;
        self.config.train.learning_rate = lr;
    }

    /// Copies every `sincnet.*` parameter from `source` (typically a trained
    /// sinc-only checkpoint) before the first epoch. Returns the number of tensors copied.
    pub fn warm_start_branch(&mut self, source: &[(String, Tensor<T>)]) -> Result<usize> {
        if self.epoch > 0 {
            return Err(Error::State("warm start is only possible before the first epoch".into()));
        }
        if self.model.classifier().is_none() {
            return Err(Error::Validation("the x-vector model has no sinc branch to warm start".into()));
        }
        let mut copied = 0;
        let mut records = Vec::new();
        for (name, current) in self.model.named_params() {
            if !name.starts_with("sincnet.") {
                records.push((name, current.clone()));
                continue;
            }
            let (_, t) = source
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Incompatible(format!("warm-start source lacks {name}")))?;
            if t.shape() != current.shape() {
                return Err(Error::Incompatible(format!(
                    "warm-start {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    current.shape()
                )));
            }
            records.push((name, t.clone()));
            copied += 1;
        }
        self.model.load_params(&records)?;
        Ok(copied)
    }

    /// Whether utterance features must be computed for this model.
    pub fn needs_features(&self) -> bool {
        self.model.xvector().is_some()
    }

    fn port_trainable(&self) -> bool {
        matches!(&self.model, SpeakerModel::Fusion { xvector: Some(_), classifier } if !classifier.head_config.xvector_frozen)
    }

    fn trainable_params(&self) -> Vec<&Tensor<T>> {
        match &self.model {
            SpeakerModel::SincNet(c) => c.named_params().into_iter().map(|(_, t)| t).collect(),
            SpeakerModel::XVector(x) => x.net.params().into_iter().map(|(_, t)| t).collect(),
            SpeakerModel::Fusion { classifier, xvector } => {
                let mut p: Vec<&Tensor<T>> = classifier.named_params().into_iter().map(|(_, t)| t).collect();
                if self.port_trainable() {
                    p.extend(xvector.as_ref().expect("checked").net.params().into_iter().map(|(_, t)| t));
                }
                p
            }
        }
    }

    /// Frozen-port vector for an utterance.
    fn port_vector(&self, audio: &WaveformBuffer, features: Option<&FeatureMatrix<T>>) -> Result<Option<Vec<T>>> {
        match &self.model {
            SpeakerModel::Fusion { xvector: Some(net), .. } => {
                let f = features.ok_or_else(|| Error::domain("fusion port needs utterance features"))?;
                Ok(Some(net.embedding(&f.values)?))
            }
            SpeakerModel::Fusion { xvector: None, .. } => {
                let table = self.port_table.as_ref().expect("fusion without a network has a table");
                let e = table.get(audio.utterance_id()).ok_or_else(|| {
                    Error::Lookup(format!("no imported x-vector for utterance {}", audio.utterance_id()))
                })?;
                Ok(Some(to_scalar(&e.vector)))
            }
            _ => Ok(None),
        }
    }

    fn window_len(&self) -> usize {
        match self.model.architecture() {
            Architecture::XVector => self.config.features.crop_frames,
            _ => self.config.train.chunk_len_samples,
        }
    }

    fn check_corpus(&self, corpus: &Corpus<T>) -> Result<()> {
        if corpus.speakers != self.speakers {
            return Err(Error::Validation(format!(
                "corpus has {} speakers that do not match the model's {} classes",
                corpus.speakers.len(),
                self.speakers.len()
            )));
        }
        if self.needs_features() && corpus.utterances.iter().any(|u| u.features.is_none()) {
            return Err(Error::Validation("this model needs utterance features; load the corpus with them".into()));
        }
        Ok(())
    }

    /// This epoch's windows, shuffled, from the trainer's stream.
    pub fn epoch_windows(&mut self, corpus: &Corpus<T>) -> Result<Vec<WindowSample>> {
        let lengths: Vec<(usize, usize)> = corpus
            .utterances
            .iter()
            .map(|u| match self.model.architecture() {
                Architecture::XVector => (u.features.as_ref().map_or(0, |f| f.n_frames()), u.label),
                _ => (u.audio.len(), u.label),
            })
            .collect();
        let mut windows = sample_windows(&lengths, self.window_len(), self.config.train.chunks_per_utt, &mut self.rng)?;
        windows.shuffle(&mut self.rng);
        Ok(windows)
    }

    /// Forward and backward on one batch, then one optimizer step.
    /// Returns per-item losses and the number of misclassified items.
    pub fn train_batch(
        &mut self,
        corpus: &Corpus<T>,
        batch: &[WindowSample],
        ports: &[Option<Vec<T>>],
        batch_index: usize,
    ) -> Result<(Vec<T>, usize)> {
        let scale = T::one() / T::lit(batch.len() as f64);
        let window = self.window_len();
        let port_trainable = self.port_trainable();
        let mut losses = Vec::with_capacity(batch.len());
        let mut errors = 0;
        let mut grads = Gradients {
            tensors: self.trainable_params().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        };
        for w in batch {
            let utt = &corpus.utterances[w.utterance];
            let logits_grad = |logits: &Tensor<T>, losses: &mut Vec<T>, errors: &mut usize| -> Result<Tensor<T>> {
                let (loss, mut d) = softmax_cross_entropy(logits, &[w.label])?;
                if argmax(logits.row(0)) != w.label {
                    *errors += 1;
                }
                losses.push(loss);
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                Ok(d)
            };
            match &self.model {
                SpeakerModel::XVector(net) => {
                    let crop = utt.features.as_ref().expect("checked").crop(w.offset, window)?;
                    let (logits, mut trace) = net.forward(&crop.values)?;
                    let d = logits_grad(&logits, &mut losses, &mut errors)?;
                    net.net.backward(&mut trace, &d, &mut grads)?;
                }
                SpeakerModel::SincNet(c) | SpeakerModel::Fusion { classifier: c, .. } => {
                    let chunk = &utt.audio.samples()[w.offset..w.offset + window];
                    let n_cls = c.named_params().len();
                    let mut cls_grads = Gradients {
                        tensors: grads.tensors.drain(..n_cls).collect(),
                    };
                    let traced_port = match (&self.model, port_trainable) {
                        (SpeakerModel::Fusion { xvector: Some(net), .. }, true) => {
                            let f = utt.features.as_ref().expect("checked");
                            Some(net.embedding_traced(&f.values)?)
                        }
                        _ => None,
                    };
                    let port = match &traced_port {
                        Some((v, _)) => Some(v.as_slice()),
                        None => ports[w.utterance].as_deref(),
                    };
                    let (logits, mut trace) = c.forward(chunk, port)?;
                    let d = logits_grad(&logits, &mut losses, &mut errors)?;
                    let d_port = c.backward(&mut trace, &d, &mut cls_grads)?;
                    let mut rest = std::mem::take(&mut grads.tensors);
                    grads.tensors = cls_grads.tensors;
                    grads.tensors.append(&mut rest);
                    if let (Some((_, mut xtrace)), Some(dp), SpeakerModel::Fusion { xvector: Some(net), .. }) =
                        (traced_port, d_port, &self.model)
                    {
                        let mut xgrads = Gradients {
                            tensors: grads.tensors.split_off(n_cls),
                        };
                        net.net.backward(&mut xtrace, &Tensor::row_vector(dp), &mut xgrads)?;
                        grads.tensors.append(&mut xgrads.tensors);
                    }
                }
            }
        }
        let mean = stable_sum(&mut losses.clone()) * scale;
        if !mean.is_finite() {
            error!(
                "epoch {}: batch {batch_index} produced loss {mean}; aborting",
                self.epoch + 1
            );
            return Err(Error::NonFinite {
                batch: batch_index,
                loss: mean.as_f64(),
            });
        }
        let mut optimizer = std::mem::replace(&mut self.optimizer, Adam::new(0.0, &[]));
        let stepped = optimizer.step(self.trainable_params_mut(), &grads.tensors);
        self.optimizer = optimizer;
        stepped?;
        Ok((losses, errors))
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let port_trainable = self.port_trainable();
        match &mut self.model {
            SpeakerModel::SincNet(c) => c.params_mut(),
            SpeakerModel::XVector(x) => x.net.params_mut(),
            SpeakerModel::Fusion { classifier, xvector } => {
                let mut p = classifier.params_mut();
                if port_trainable {
                    p.extend(xvector.as_mut().expect("checked").net.params_mut());
                }
                p
            }
        }
    }

    /// One pass over freshly sampled windows. Returns the epoch-mean
    /// cross-entropy and the fraction of misclassified windows.
    pub fn train_epoch(&mut self, corpus: &Corpus<T>) -> Result<(f64, f64)> {
        self.check_corpus(corpus)?;
        let ports: Vec<Option<Vec<T>>> = if self.port_trainable() {
            vec![None; corpus.utterances.len()]
        } else {
            corpus
                .utterances
                .iter()
                .map(|u| self.port_vector(&u.audio, u.features.as_ref()))
                .collect::<Result<_>>()?
        };
        let windows = self.epoch_windows(corpus)?;
        let mut losses = Vec::with_capacity(windows.len());
        let mut errors = 0;
        for (i, batch) in windows.chunks(self.config.train.batch_size).enumerate() {
            let (l, e) = self.train_batch(corpus, batch, &ports, i)?;
            debug!("batch {i}: loss {}", stable_sum(&mut l.clone()).as_f64() / l.len() as f64);
            losses.extend(l);
            errors += e;
        }
        let n = losses.len() as f64;
        Ok((stable_sum(&mut losses).as_f64() / n, errors as f64 / n))
    }

    /// Utterance embedding: the x-vector for the x-vector model, otherwise FC3
    /// activations averaged over non-overlapping chunks.
    pub fn embed(&self, audio: &WaveformBuffer, features: Option<&FeatureMatrix<T>>) -> Result<Vec<T>> {
        match &self.model {
            SpeakerModel::XVector(net) => {
                let f = features.ok_or_else(|| Error::domain("x-vector embedding needs utterance features"))?;
                net.embedding(&f.values)
            }
            SpeakerModel::SincNet(c) | SpeakerModel::Fusion { classifier: c, .. } => {
                let port = self.port_vector(audio, features)?;
                let len = c.chunk_len();
                if audio.len() < len {
                    return Err(Error::domain(format!(
                        "utterance {} has {} samples, shorter than one {len}-sample chunk",
                        audio.utterance_id(),
                        audio.len()
                    )));
                }
                let rows = audio
                    .samples()
                    .chunks_exact(len)
                    .map(|chunk| c.embedding(chunk, port.as_deref()))
                    .collect::<Result<Vec<_>>>()?;
                crate::models::mean_rows(&rows)
            }
        }
    }

    /// Embeddings for a list of utterances; features are computed as needed.
    pub fn embed_all(&self, audio: &[WaveformBuffer]) -> Result<EmbeddingSet> {
        let mut set = EmbeddingSet::default();
        for a in audio {
            let f = self.features_for(a)?;
            set.push(self.embedding_record(a, f.as_ref())?)?;
        }
        Ok(set)
    }

    fn features_for(&self, audio: &WaveformBuffer) -> Result<Option<FeatureMatrix<T>>> {
        if self.needs_features() {
            Ok(Some(utterance_features(audio, &self.config.features)?))
        } else {
            Ok(None)
        }
    }

    fn embedding_record(&self, audio: &WaveformBuffer, features: Option<&FeatureMatrix<T>>) -> Result<Embedding> {
        let v = self.embed(audio, features)?;
        Ok(Embedding {
            utterance_id: audio.utterance_id().to_string(),
            vector: v.iter().map(|x| x.as_f32()).collect(),
        })
    }

    /// EER of cosine-scored trials on held-out utterances. Draws no randomness.
    pub fn evaluate(&self, eval: &EvalSet<T>) -> Result<f64> {
        let mut set = EmbeddingSet::default();
        for (audio, features) in &eval.utterances {
            let computed;
            let f = match features {
                Some(f) => Some(f),
                None if self.needs_features() => {
                    computed = utterance_features(audio, &self.config.features)?;
                    Some(&computed)
                }
                None => None,
            };
            set.push(self.embedding_record(audio, f)?)?;
        }
        Ok(compute_eer(&score_trials(&set, &eval.trials)?)?.eer)
    }

    /// Trains one epoch, evaluates on schedule, and appends to the history.
    pub fn step_epoch(&mut self, corpus: &Corpus<T>, eval: Option<&EvalSet<T>>) -> Result<EpochRecord> {
        let (train_loss, frame_error) = self.train_epoch(corpus)?;
        self.epoch += 1;
        let eer = match eval {
            Some(e) if self.epoch.is_multiple_of(self.config.train.eval_every) => Some(self.evaluate(e)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            frame_error,
            eer,
        };
        info!(
            "epoch {}: loss {:.4}, frame error {:.4}{}",
            record.epoch,
            train_loss,
            frame_error,
            eer.map(|e| format!(", EER {:.2}%", e * 100.0)).unwrap_or_default()
        );
        self.history.push(record)?;
        Ok(record)
    }

    /// Runs the remaining epochs of the configured budget.
    pub fn run(&mut self, corpus: &Corpus<T>, eval: Option<&EvalSet<T>>) -> Result<&TrainHistory> {
        while self.epoch < self.config.train.epochs {
            self.step_epoch(corpus, eval)?;
        }
        Ok(&self.history)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            speakers: self.speakers.clone(),
            epoch: self.epoch,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            optimizer: self.optimizer.clone(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            xvector_classes: self.model.xvector().map(|x| x.config.n_classes),
            port_table: self.port_table.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds the trainer exactly as it was when the checkpoint was taken.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let mut config = ckpt.config.clone();
        let port = match (&ckpt.port_table, ckpt.xvector_classes, config.train.architecture) {
            (Some(t), _, Architecture::Fusion) => Some(PortSource::Table(t.clone())),
            (None, Some(n), Architecture::Fusion) => {
                config.xvector.n_classes = n;
                config.xvector.feature_dim = config.features.n_mels;
                Some(PortSource::Network(XVectorNet::build(&config.xvector, 0)?))
            }
            (None, None, Architecture::Fusion) => {
                return Err(Error::Integrity("fusion checkpoint has no x-vector source".into()))
            }
            _ => None,
        };
        let mut trainer = Trainer::new(config, ckpt.speakers, port)?;
        trainer.model.load_params(&ckpt.params)?;
        let expected: Vec<(usize, usize)> = trainer.trainable_params().iter().map(|t| t.shape()).collect();
        let got: Vec<(usize, usize)> = ckpt.optimizer.first_moment.iter().map(|t| t.shape()).collect();
        if expected != got {
            return Err(Error::Integrity("optimizer moments do not match the model".into()));
        }
        trainer.optimizer = ckpt.optimizer;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_stream(ckpt.rng_stream);
        rng.set_word_pos(ckpt.rng_word_pos);
        trainer.rng = rng;
        trainer.epoch = ckpt.epoch;
        trainer.history = ckpt.history;
        Ok(trainer)
    }
}

/// Everything needed to resume training bit-identically. Tensors persist as
/// 32-bit floats, so the round trip is exact for `f32` training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub speakers: Vec<String>,
    pub epoch: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub optimizer: Adam<T>,
    pub params: Vec<(String, Tensor<T>)>,
    /// Output classes of the fusion model's x-vector network, when it has one.
    pub xvector_classes: Option<usize>,
    pub port_table: Option<EmbeddingSet>,
    pub history: TrainHistory,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Integrity("checkpoint header is not UTF-8".into()))
    }

    /// A line `key v1 v2 ...`, returning the values.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.line()?;
        let mut f = line.split(' ');
        if f.next() != Some(key) {
            return Err(Error::Integrity(format!("expected {key:?} line, found {line:?}")));
        }
        Ok(f.collect())
    }

    fn keyed_one<V: std::str::FromStr>(&mut self, key: &str) -> Result<V> {
        let v = self.keyed(key)?;
        match v[..] {
            [x] => x
                .parse()
                .map_err(|_| Error::Integrity(format!("bad value {x:?} for {key}"))),
            _ => Err(Error::Integrity(format!("{key} takes one value"))),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        self.pos += n;
        Ok(out)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.config.to_text();
        let history = self.history.to_csv();
        let opt = &self.optimizer;
        let mut out = Vec::new();
        let mut head = String::new();
        let _ = writeln!(head, "{CHECKPOINT_VERSION}");
        let _ = writeln!(head, "arch {}", self.config.train.architecture);
        let _ = writeln!(head, "epoch {}", self.epoch);
        let _ = writeln!(head, "speakers {}", self.speakers.len());
        for s in &self.speakers {
            let _ = writeln!(head, "{s}");
        }
        let _ = writeln!(head, "rng {} {} {}", hex(&self.rng_seed), self.rng_stream, self.rng_word_pos);
        let _ = writeln!(
            head,
            "adam {} {} {} {} {}",
            opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, opt.step
        );
        let _ = writeln!(head, "config {}", config.lines().count());
        head.push_str(&config);
        let _ = writeln!(head, "history {}", history.lines().count());
        head.push_str(&history);
        let _ = writeln!(
            head,
            "xvector_classes {}",
            self.xvector_classes.map(|n| n.to_string()).unwrap_or_else(|| "-".into())
        );
        out.extend_from_slice(head.as_bytes());
        match &self.port_table {
            Some(t) => {
                let b = t.to_binary();
                out.extend_from_slice(format!("port_table {}\n", b.len()).as_bytes());
                out.extend_from_slice(&b);
            }
            None => out.extend_from_slice(b"port_table 0\n"),
        }
        out.extend_from_slice(format!("params {}\n", self.params.len()).as_bytes());
        write_records(&mut out, &self.params.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>())?;
        let moments: Vec<(String, &Tensor<T>)> = opt
            .first_moment
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("m{i}"), t))
            .chain(opt.second_moment.iter().enumerate().map(|(i, t)| (format!("v{i}"), t)))
            .collect();
        out.extend_from_slice(format!("moments {}\n", opt.first_moment.len()).as_bytes());
        write_records(&mut out, &moments)?;
        out.extend_from_slice(b"end\n");
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let version = c.line()?;
        if version != CHECKPOINT_VERSION {
            return Err(if version.starts_with("SINCXV-CHECKPOINT ") {
                Error::Incompatible(format!("found {version:?}, this build reads {CHECKPOINT_VERSION:?}"))
            } else {
                Error::Incompatible(format!("not a checkpoint (first line {version:?})"))
            });
        }
        let arch: Architecture = c
            .keyed_one::<String>("arch")?
            .parse()
            .map_err(|e: Error| Error::Integrity(e.to_string()))?;
        let epoch = c.keyed_one("epoch")?;
        let n_speakers: usize = c.keyed_one("speakers")?;
        let speakers = (0..n_speakers)
            .map(|_| c.line().map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        let rng = c.keyed("rng")?;
        let (rng_seed, rng_stream, rng_word_pos) = match rng[..] {
            [s, st, wp] => (
                unhex(s).ok_or_else(|| Error::Integrity("bad rng seed".into()))?,
                st.parse().map_err(|_| Error::Integrity("bad rng stream".into()))?,
                wp.parse().map_err(|_| Error::Integrity("bad rng position".into()))?,
            ),
            _ => return Err(Error::Integrity("rng line takes three values".into())),
        };
        let adam = c.keyed("adam")?;
        let bad_adam = || Error::Integrity("bad adam line".into());
        if adam.len() != 5 {
            return Err(bad_adam());
        }
        let af = |i: usize| adam[i].parse::<f64>().map_err(|_| bad_adam());
        let (lr, b1, b2, eps) = (af(0)?, af(1)?, af(2)?, af(3)?);
        let step: u64 = adam[4].parse().map_err(|_| bad_adam())?;
        let n_config: usize = c.keyed_one("config")?;
        let mut config_text = String::new();
        for _ in 0..n_config {
            config_text.push_str(c.line()?);
            config_text.push('\n');
        }
        let config = ExperimentConfig::parse(&config_text).map_err(|e| Error::Integrity(e.to_string()))?;
        if config.train.architecture != arch {
            return Err(Error::Integrity("architecture line disagrees with config".into()));
        }
        let n_history: usize = c.keyed_one("history")?;
        let mut history_text = String::new();
        for _ in 0..n_history {
            history_text.push_str(c.line()?);
            history_text.push('\n');
        }
        let history = TrainHistory::parse_csv(&history_text).map_err(|e| Error::Integrity(e.to_string()))?;
        let xc: String = c.keyed_one("xvector_classes")?;
        let xvector_classes = match xc.as_str() {
            "-" => None,
            n => Some(n.parse().map_err(|_| Error::Integrity("bad xvector_classes".into()))?),
        };
        let table_len: usize = c.keyed_one("port_table")?;
        let port_table = match table_len {
            0 => None,
            n => Some(EmbeddingSet::parse_binary(c.take(n)?).map_err(|e| Error::Integrity(e.to_string()))?),
        };
        let n_params: usize = c.keyed_one("params")?;
        let params = read_records::<T>(bytes, &mut c.pos, n_params)?
            .into_iter()
            .map(|r| (r.name, r.tensor))
            .collect();
        let n_moments: usize = c.keyed_one("moments")?;
        let mut moments = read_records::<T>(bytes, &mut c.pos, 2 * n_moments)?;
        let second_moment = moments.split_off(n_moments).into_iter().map(|r| r.tensor).collect();
        let first_moment = moments.into_iter().map(|r| r.tensor).collect();
        if c.line()? != "end" || c.pos != bytes.len() {
            return Err(Error::Integrity("checkpoint has no clean end marker".into()));
        }
        Ok(Checkpoint {
            config,
            speakers,
            epoch,
            rng_seed,
            rng_stream,
            rng_word_pos,
            optimizer: Adam {
                learning_rate: lr,
                beta1: b1,
                beta2: b2,
                epsilon: eps,
                step,
                first_moment,
                second_moment,
            },
            params,
            xvector_classes,
            port_table,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
