//! Waveform files, dataset manifests, trial lists and the synthetic corpus.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Mono audio normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveformBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
    utterance_id: String,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("waveform has no samples"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::domain(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(WaveformBuffer {
            samples,
            sample_rate_hz,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of `len` samples starting at `offset`.
    pub fn slice(&self, offset: usize, len: usize) -> Result<WaveformBuffer> {
        if len == 0 || offset + len > self.samples.len() {
            return Err(Error::domain(format!(
                "slice [{offset}, {}) out of range for {} samples",
                offset + len,
                self.samples.len()
            )));
        }
        Ok(WaveformBuffer {
            samples: self.samples[offset..offset + len].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
            utterance_id: self.utterance_id.clone(),
        })
    }
}

fn map_wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM mono WAV file; samples are scaled by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveformBuffer> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| map_wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {}-bit {:?} samples, only 16-bit PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_wav_err(path, e))?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: empty data chunk", path.display())));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    WaveformBuffer::new(samples, spec.sample_rate, id)
}

/// Quantizes one sample to 16-bit PCM; `1.0` saturates to 32767.
pub fn quantize_sample(v: f32) -> i16 {
    (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(buffer: &WaveformBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_wav_err(path, e))?;
    {
        let mut w = writer.get_i16_writer(buffer.samples.len() as u32);
        for &s in &buffer.samples {
            w.write_sample(quantize_sample(s));
        }
        w.flush().map_err(|e| map_wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| map_wav_err(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative to the manifest's base directory.
    pub audio_path: String,
}

/// Utterance list of a corpus split. On disk: `utterance_id<TAB>speaker_id<TAB>relative_path`
/// per line, `#` lines are comments. A `# split: test` comment sets the split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    /// Directory that `audio_path`s are relative to.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Split, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let manifest = DatasetManifest {
            entries,
            split,
            base_dir: base_dir.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id {}",
                    e.utterance_id
                )));
            }
        }
        if self.split == Split::Dev {
            if let Some((spk, n)) = self.utterances_by_speaker().iter().find(|(_, u)| u.len() < 2).map(|(s, u)| (s.clone(), u.len())) {
                return Err(Error::Validation(format!(
                    "speaker {spk} has {n} dev utterance(s), at least 2 required"
                )));
            }
        }
        Ok(())
    }

    /// Speakers in sorted order with their utterance indices.
    pub fn utterances_by_speaker(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            map.entry(e.speaker_id.clone()).or_default().push(i);
        }
        map
    }

    /// Sorted unique speaker ids; a speaker's class label is its index here.
    pub fn speakers(&self) -> Vec<String> {
        self.utterances_by_speaker().into_keys().collect()
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.audio_path)
    }

    pub fn contains(&self, utterance_id: &str) -> bool {
        self.entries.iter().any(|e| e.utterance_id == utterance_id)
    }

    pub fn load_audio(&self) -> Result<Vec<WaveformBuffer>> {
        self.entries
            .iter()
            .map(|e| {
                let mut wav = read_wav(self.audio_path(e))?;
                wav.utterance_id = e.utterance_id.clone();
                Ok(wav)
            })
            .collect()
    }

    /// Moves the last `per_speaker` utterances of every speaker into a test manifest.
    pub fn hold_out(&self, per_speaker: usize) -> Result<(DatasetManifest, DatasetManifest)> {
        let mut test_idx = HashSet::new();
        for (spk, utts) in self.utterances_by_speaker() {
            if utts.len() < per_speaker + 2 {
                return Err(Error::Capacity(format!(
                    "speaker {spk} has {} utterances, cannot hold out {per_speaker} and keep 2",
                    utts.len()
                )));
            }
            test_idx.extend(utts[utts.len() - per_speaker..].iter().copied());
        }
        let (test, dev): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .enumerate()
            .partition(|(i, _)| test_idx.contains(i));
        let strip = |v: Vec<(usize, &ManifestEntry)>| v.into_iter().map(|(_, e)| e.clone()).collect();
        Ok((
            DatasetManifest::new(strip(dev), Split::Dev, &self.base_dir)?,
            DatasetManifest::new(strip(test), Split::Test, &self.base_dir)?,
        ))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# split: {}\n", self.split);
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.utterance_id, e.speaker_id, e.audio_path));
        }
        out
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut split = Split::Dev;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                match comment.trim().strip_prefix("split:").map(str::trim) {
                    Some("dev") => split = Split::Dev,
                    Some("test") => split = Split::Test,
                    Some(other) => {
                        return Err(Error::Format(format!("line {}: unknown split {other}", n + 1)))
                    }
                    None => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 TAB-separated fields",
                    n + 1
                )));
            }
            entries.push(ManifestEntry {
                utterance_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                audio_path: fields[2].to_string(),
            });
        }
        DatasetManifest::new(entries, split, base_dir)
    }

    /// Reads a manifest; audio paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::parse(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialLabel {
    Same,
    Different,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Same => "same",
            TrialLabel::Different => "different",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(TrialLabel::Same),
            "different" => Ok(TrialLabel::Different),
            other => Err(Error::Format(format!("unknown trial label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

/// Verification trials, `enroll_id<TAB>test_id<TAB>{same|different}` per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if let Some(t) = trials.iter().find(|t| t.enroll == t.test) {
            return Err(Error::Validation(format!(
                "trial pairs utterance {} with itself",
                t.enroll
            )));
        }
        Ok(TrialList { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn has_both_labels(&self) -> bool {
        let same = self.trials.iter().any(|t| t.label == TrialLabel::Same);
        let diff = self.trials.iter().any(|t| t.label == TrialLabel::Different);
        same && diff
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.enroll, t.test, t.label.as_str()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!(
                    "trial line {}: expected 3 TAB-separated fields",
                    n + 1
                )));
            }
            trials.push(Trial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                label: TrialLabel::parse(f[2])?,
            });
        }
        TrialList::new(trials)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrialList::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Samples `n_same` same-speaker and `n_diff` cross-speaker pairs without replacement.
pub fn make_trials(manifest: &DatasetManifest, n_same: usize, n_diff: usize, seed: u64) -> Result<TrialList> {
    let by_spk = manifest.utterances_by_speaker();
    if by_spk.len() < 2 {
        return Err(Error::Capacity("at least 2 speakers are needed".into()));
    }
    if let Some((spk, _)) = by_spk.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::Capacity(format!("speaker {spk} has fewer than 2 utterances")));
    }
    let spk_of: Vec<&str> = manifest.entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    let n = manifest.entries.len();
    for i in 0..n {
        for j in i + 1..n {
            if spk_of[i] == spk_of[j] {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    if n_same > same.len() || n_diff > diff.len() {
        return Err(Error::Capacity(format!(
            "requested {n_same} same / {n_diff} different trials, only {} / {} pairs exist",
            same.len(),
            diff.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    same.shuffle(&mut rng);
    diff.shuffle(&mut rng);
    let id = |i: usize| manifest.entries[i].utterance_id.clone();
    let mut trials: Vec<Trial> = same[..n_same]
        .iter()
        .map(|&(i, j)| Trial {
            enroll: id(i),
            test: id(j),
            label: TrialLabel::Same,
        })
        .chain(diff[..n_diff].iter().map(|&(i, j)| Trial {
            enroll: id(i),
            test: id(j),
            label: TrialLabel::Different,
        }))
        .collect();
    trials.shuffle(&mut rng);
    TrialList::new(trials)
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

const HARMONICS: usize = 10;
const SNR_DB: f64 = 20.0;
const PEAK: f64 = 0.5;

/// Fixed per-speaker voice: fundamental plus three resonant bands.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVoice {
    pub f0_hz: f64,
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
}

impl SyntheticVoice {
    pub fn for_speaker(seed: u64, speaker: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(speaker as u64);
        let f0_hz = rng.random_range(80.0..300.0);
        let formants_hz = [
            rng.random_range(300.0..900.0),
            rng.random_range(1000.0..2200.0),
            rng.random_range(2400.0..3400.0),
        ];
        let bandwidths_hz = [
            rng.random_range(80.0..200.0),
            rng.random_range(80.0..200.0),
            rng.random_range(80.0..200.0),
        ];
        SyntheticVoice {
            f0_hz,
            formants_hz,
            bandwidths_hz,
        }
    }

    /// Spectral envelope gain at `f_hz`.
    pub fn envelope(&self, f_hz: f64) -> f64 {
        let peaks: f64 = self
            .formants_hz
            .iter()
            .zip(&self.bandwidths_hz)
            .map(|(&c, &b)| (-0.5 * ((f_hz - c) / b).powi(2)).exp())
            .sum();
        peaks + 0.05
    }

    /// Harmonic series with per-utterance random phases plus white noise at 20 dB SNR,
    /// peak-normalized to 0.5.
    pub fn render(&self, n_samples: usize, sample_rate_hz: u32, rng: &mut impl Rng) -> Vec<f32> {
        let sr = sample_rate_hz as f64;
        let partials: Vec<(f64, f64, f64)> = (1..=HARMONICS)
            .map(|k| k as f64 * self.f0_hz)
            .filter(|&f| f < sr / 2.0)
            .map(|f| (f, self.envelope(f), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut signal: Vec<f64> = (0..n_samples)
            .map(|n| {
                let t = n as f64 / sr;
                partials
                    .iter()
                    .map(|&(f, a, phi)| a * (std::f64::consts::TAU * f * t + phi).sin())
                    .sum()
            })
            .collect();
        let power = signal.iter().map(|v| v * v).sum::<f64>() / n_samples as f64;
        let noise_std = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
        if noise_std > 0.0 {
            let noise = Normal::new(0.0, noise_std).expect("finite std");
            for v in &mut signal {
                *v += noise.sample(rng);
            }
        }
        let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
        signal.iter().map(|v| (v * scale) as f32).collect()
    }
}

pub fn synthetic_utterance_id(speaker: usize, utterance: usize) -> String {
    format!("spk{speaker:03}_utt{utterance:03}")
}

/// Writes a deterministic multi-speaker corpus under `out_dir` plus `manifest.tsv`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if spec.n_speakers == 0 || spec.utterances_per_speaker == 0 {
        return Err(Error::domain("speaker and utterance counts must be at least 1"));
    }
    if spec.sample_rate_hz == 0 || spec.duration_s.is_nan() || spec.duration_s <= 0.0 {
        return Err(Error::domain("duration and sample rate must be positive"));
    }
    let n_samples = (spec.duration_s * spec.sample_rate_hz as f64).round() as usize;
    if n_samples == 0 {
        return Err(Error::domain("duration shorter than one sample"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for spk in 0..spec.n_speakers {
        let voice = SyntheticVoice::for_speaker(spec.seed, spk);
        let speaker_id = format!("spk{spk:03}");
        fs::create_dir_all(out_dir.join(&speaker_id))?;
        for utt in 0..spec.utterances_per_speaker {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05ee_d0fa_0d10);
            rng.set_stream((spk * spec.utterances_per_speaker + utt) as u64);
            let utterance_id = synthetic_utterance_id(spk, utt);
            let samples = voice.render(n_samples, spec.sample_rate_hz, &mut rng);
            let rel = format!("{speaker_id}/utt{utt:03}.wav");
            let buffer = WaveformBuffer::new(samples, spec.sample_rate_hz, utterance_id.clone())?;
            write_wav(&buffer, out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                utterance_id,
                speaker_id: speaker_id.clone(),
                audio_path: rel,
            });
        }
    }
    // Single-utterance speakers are allowed here; only training rejects them.
    let manifest = DatasetManifest {
        entries,
        split: Split::Dev,
        base_dir: out_dir.to_path_buf(),
    };
    let mut f = fs::File::create(out_dir.join("manifest.tsv"))?;
    f.write_all(manifest.to_text().as_bytes())?;
    Ok(manifest)
}
