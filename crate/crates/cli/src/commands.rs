use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sincxv::audio_io::{generate_synthetic_corpus, DatasetManifest, SyntheticCorpusSpec, TrialList};
use sincxv::config::ExperimentConfig;
use sincxv::evaluation::{compute_eer, det_points, score_trials, ScoreSet};
use sincxv::models::{Architecture, EmbeddingSet};
use sincxv::training::{prepare_data, Checkpoint, PortSource, Trainer};
use sincxv::{Error, Result};

use crate::lock::DirLock;
use crate::{EerArgs, EmbedArgs, EmbeddingFormat, ImportArgs, InspectArgs, Preset, ScoreArgs, SynthArgs, TrainArgs};

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const HISTORY_FILE: &str = "history.csv";
const CONFIG_FILE: &str = "config.txt";
const TRIALS_FILE: &str = "trials.tsv";

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Prefixes I/O errors with the path involved.
fn at<V>(path: &Path, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn infer_format(path: &Path, explicit: Option<EmbeddingFormat>) -> EmbeddingFormat {
    explicit.unwrap_or(if path.extension().is_some_and(|e| e == "bin") {
        EmbeddingFormat::Binary
    } else {
        EmbeddingFormat::Text
    })
}

fn read_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let bytes = at(path, fs::read(path).map_err(Error::from))?;
    match format {
        EmbeddingFormat::Binary => EmbeddingSet::parse_binary(&bytes),
        EmbeddingFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("embedding text is not UTF-8".into()))?;
            EmbeddingSet::parse_text(&text)
        }
    }
}

fn write_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let bytes = match format {
        EmbeddingFormat::Binary => set.to_binary(),
        EmbeddingFormat::Text => set.to_text().into_bytes(),
    };
    write_atomic(path, &bytes)
}

fn load_trainer(path: &Path) -> Result<Trainer<f32>> {
    Trainer::from_checkpoint(at(path, Checkpoint::load(path))?)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let _lock = DirLock::acquire(&a.out)?;
    let spec = SyntheticCorpusSpec {
        n_speakers: a.speakers as usize,
        utterances_per_speaker: a.utts as usize,
        duration_s: a.duration,
        sample_rate_hz: a.sample_rate,
        seed: a.seed,
    };
    let manifest = generate_synthetic_corpus(&spec, &a.out)?;
    println!(
        "speakers {} utterances {} manifest {}",
        manifest.utterances_by_speaker().len(),
        manifest.entries.len(),
        a.out.join("manifest.tsv").display()
    );
    Ok(())
}

fn build_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match a.preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Small => ExperimentConfig::small(),
    };
    if let Some(path) = &a.config {
        cfg.apply_text(&at(path, fs::read_to_string(path).map_err(Error::from))?)?;
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(arch) = a.arch {
        cfg.train.architecture = arch;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn port_source(a: &TrainArgs, arch: Architecture) -> Result<Option<PortSource<f32>>> {
    let wants_port = a.xvector.is_some() || a.port_embeddings.is_some();
    if arch != Architecture::Fusion {
        if wants_port || a.warm_start.is_some() {
            return Err(Error::Validation(format!(
                "--xvector, --port-embeddings and --warm-start apply to fusion only, not {arch}"
            )));
        }
        return Ok(None);
    }
    if let Some(path) = &a.xvector {
        let source = load_trainer(path)?;
        let net = source
            .model()
            .xvector()
            .filter(|_| source.config().train.architecture == Architecture::XVector)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("{} is not an x-vector checkpoint", path.display())))?;
        return Ok(Some(PortSource::Network(net)));
    }
    if let Some(path) = &a.port_embeddings {
        let set = read_embeddings(path, infer_format(path, None))?;
        return Ok(Some(PortSource::Table(set)));
    }
    warn!("fusion without --xvector or --port-embeddings: the x-vector branch starts untrained");
    Ok(None)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let manifest = at(&a.manifest, DatasetManifest::load(&a.manifest))?;
    let test = a
        .test_manifest
        .as_ref()
        .map(|p| at(p, DatasetManifest::load(p)))
        .transpose()?;
    let _lock = DirLock::acquire(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);

    let (mut trainer, corpus, eval) = if a.resume {
        let mut ckpt = at(&ckpt_path, Checkpoint::load(&ckpt_path))?;
        if let Some(e) = a.epochs {
            ckpt.config.train.epochs = e;
        }
        let t = Trainer::from_checkpoint(ckpt)?;
        info!("resuming {} at epoch {}", t.config().train.architecture, t.epoch());
        let (corpus, eval) = prepare_data::<f32>(&manifest, test.as_ref(), t.config())?;
        if corpus.speakers != t.speakers() {
            return Err(Error::Validation(
                "manifest speakers differ from the checkpoint's speakers".into(),
            ));
        }
        (t, corpus, eval)
    } else {
        let cfg = build_config(&a)?;
        let port = port_source(&a, cfg.train.architecture)?;
        let (corpus, eval) = prepare_data::<f32>(&manifest, test.as_ref(), &cfg)?;
        let mut t = Trainer::new(cfg, corpus.speakers.clone(), port)?;
        if let Some(path) = &a.warm_start {
            let source = at(path, Checkpoint::<f32>::load(path))?;
            let n = t.warm_start_branch(&source.params)?;
            info!("warm start: copied {n} sinc-branch tensors from {}", path.display());
        }
        (t, corpus, eval)
    };
    let config = trainer.config().clone();
    write_atomic(&a.out.join(CONFIG_FILE), config.to_text().as_bytes())?;
    write_atomic(&a.out.join(TRIALS_FILE), eval.trials.to_text().as_bytes())?;

    info!(
        "training {} on {} utterances of {} speakers, {} trials",
        config.train.architecture,
        corpus.utterances.len(),
        corpus.speakers.len(),
        eval.trials.len()
    );
    while trainer.epoch() < config.train.epochs {
        let rec = trainer.step_epoch(&corpus, Some(&eval))?;
        let eer = rec.eer.map(|e| format!("{:.2}%", 100.0 * e)).unwrap_or_else(|| "-".into());
        println!(
            "epoch {} loss {:.4} frame_error {:.4} eer {eer}",
            rec.epoch, rec.train_loss, rec.frame_error
        );
        write_atomic(&ckpt_path, &trainer.checkpoint().to_bytes()?)?;
        write_atomic(&a.out.join(HISTORY_FILE), trainer.history().to_csv().as_bytes())?;
    }
    if trainer.history().records.is_empty() {
        write_atomic(&ckpt_path, &trainer.checkpoint().to_bytes()?)?;
        write_atomic(&a.out.join(HISTORY_FILE), trainer.history().to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let manifest = at(&a.manifest, DatasetManifest::load(&a.manifest))?;
    let set = trainer.embed_all(&manifest.load_audio()?)?;
    write_embeddings(&set, &a.out, infer_format(&a.out, a.format))?;
    println!("embeddings {} dim {} -> {}", set.len(), set.dim(), a.out.display());
    Ok(())
}

pub fn import_embeddings(a: ImportArgs) -> Result<()> {
    let set = read_embeddings(&a.input, infer_format(&a.input, a.format))?;
    if set.is_empty() {
        return Err(Error::Validation(format!("{} holds no embeddings", a.input.display())));
    }
    write_embeddings(&set, &a.out, infer_format(&a.out, None))?;
    println!("imported {} embeddings of dimension {}", set.len(), set.dim());
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let set = read_embeddings(&a.embeddings, infer_format(&a.embeddings, None))?;
    let trials = at(&a.trials, TrialList::load(&a.trials))?;
    let scores = score_trials(&set, &trials)?;
    write_atomic(&a.out, scores.to_text().as_bytes())?;
    println!("scored {} trials -> {}", scores.scores.len(), a.out.display());
    Ok(())
}

pub fn eer(a: EerArgs) -> Result<()> {
    let scores = at(&a.scores, ScoreSet::load(&a.scores))?;
    let result = compute_eer(&scores)?;
    let curve = det_points(&scores)?;
    let det = a.det.unwrap_or_else(|| a.scores.with_extension("det.csv"));
    write_atomic(&det, curve.to_csv().as_bytes())?;
    println!("EER {:.2}%", 100.0 * result.eer);
    println!("threshold {}", result.threshold);
    println!("det {}", det.display());
    Ok(())
}

pub fn inspect_filters(a: InspectArgs) -> Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let classifier = trainer.model().classifier().ok_or_else(|| {
        Error::Validation(format!(
            "{} is a {} checkpoint with no sinc layer",
            a.checkpoint.display(),
            trainer.config().train.architecture
        ))
    })?;
    let bank = classifier.branch.sinc_layer().bank()?;
    let response = bank.frequency_response(a.n_fft)?;
    let sr = bank.params.sample_rate_hz as f64;

    let mut csv = String::from("bin,freq_hz");
    for i in 0..bank.n_filters() {
        let _ = write!(csv, ",filter_{i}");
    }
    csv.push('\n');
    for k in 0..response.cols() {
        let _ = write!(csv, "{k},{}", k as f64 * sr / a.n_fft as f64);
        for i in 0..bank.n_filters() {
            let _ = write!(csv, ",{}", response.at(i, k));
        }
        csv.push('\n');
    }
    write_atomic(&a.response, csv.as_bytes())?;

    let mut table = String::from("filter\tf1_hz\tf2_hz\n");
    for (i, (lo, hi)) in bank.bands_hz().iter().enumerate() {
        let _ = writeln!(table, "{i}\t{lo:.1}\t{hi:.1}");
    }
    // A closed pipe (e.g. `| head`) is not a failure.
    let _ = std::io::stdout().write_all(table.as_bytes());
    Ok(())
}
