use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sincxv::audio_io::DatasetManifest;
use sincxv::config::ExperimentConfig;
use sincxv::models::{Embedding, EmbeddingSet};
use sincxv::training::{Checkpoint, Trainer};

fn sincxv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sincxv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--preset",
    "small",
    "--set",
    "sinc.filters=4",
    "--set",
    "sinc.kernel_len=31",
    "--set",
    "sinc.conv_channels=4",
    "--set",
    "sinc.conv_widths=3",
    "--set",
    "sinc.pool_widths=2,2",
    "--set",
    "sinc.dense=8",
    "--set",
    "train.chunk_len=200",
    "--set",
    "head.fc_widths=8,8,6",
    "--set",
    "features.n_mels=8",
    "--set",
    "features.crop_frames=16",
    "--set",
    "xvector.frame_widths=8,8,8,8,10",
    "--set",
    "xvector.segment_dims=6,6",
    "--set",
    "eval.same_trials=3",
    "--set",
    "eval.diff_trials=3",
];

fn synth(dir: &Path, speakers: &str, utts: &str) -> PathBuf {
    let o = sincxv(&[
        "synth", "--speakers", speakers, "--utts", utts, "--duration", "0.5", "--seed", "1", "--out", s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("manifest.tsv")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    sincxv(&args)
}

fn train_ok(manifest: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let o = train(manifest, out, extra);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("checkpoint.ckpt")
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_documents_formats_and_exit_codes() {
    let o = sincxv(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for needle in ["FILE FORMATS", "manifest.tsv", "det.csv", "history.csv", "EXIT CODES", "SINCXV-CHECKPOINT 1"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    for cmd in ["synth", "train", "embed", "import-embeddings", "score", "eer", "inspect-filters"] {
        assert_eq!(code(&sincxv(&[cmd, "--help"])), 0, "{cmd}");
    }
    assert_eq!(code(&sincxv(&["frobnicate"])), 1);
    assert_eq!(code(&sincxv(&[])), 1);
}

#[test]
fn synth_writes_a_reproducible_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let o = sincxv(&["synth", "--speakers", "20", "--utts", "10", "--duration", "0.1", "--seed", "1", "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("speakers 20 utterances 200 "));
    let files = files_under(&a);
    assert_eq!(files.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "wav")).count(), 200);
    let manifest = String::from_utf8(fs::read(a.join("manifest.tsv")).unwrap()).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 200);

    let b = tmp.path().join("b");
    sincxv(&["synth", "--speakers", "20", "--utts", "10", "--duration", "0.1", "--seed", "1", "--out", s(&b)]);
    assert_eq!(files, files_under(&b));
    assert!(!a.join(".sincxv.lock").exists());

    let o = sincxv(&["synth", "--speakers", "0", "--utts", "10", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn train_writes_history_checkpoint_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");

    let xv = tmp.path().join("xv");
    let ckpt = train_ok(&manifest, &xv, &["--arch", "xvector", "--epochs", "1"]);
    let c = Checkpoint::<f32>::load(&ckpt).unwrap();
    assert!(!c.params.is_empty());
    assert!(c.params.iter().all(|(n, _)| !n.starts_with("sincnet.")));

    let fu = tmp.path().join("fu");
    train_ok(&manifest, &fu, &["--arch", "fusion", "--epochs", "1", "--xvector", s(&ckpt)]);
    let history = fs::read_to_string(fu.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.starts_with("epoch,train_loss,frame_error,eer\n1,"));
    let config = fs::read_to_string(fu.join("config.txt")).unwrap();
    assert!(config.contains("train.arch = fusion\n"));
    assert!(config.contains("sinc.filters = 4\n"));
    let c = Checkpoint::<f32>::load(fu.join("checkpoint.ckpt")).unwrap();
    assert!(c.params.iter().any(|(n, _)| n.starts_with("sincnet.")));
    assert!(c.params.iter().any(|(n, _)| n.starts_with("xvector.")));

    // a sincnet checkpoint cannot stand in for the x-vector port
    let sn = tmp.path().join("sn");
    let sn_ckpt = train_ok(&manifest, &sn, &["--arch", "sincnet", "--epochs", "1"]);
    let o = train(&manifest, &tmp.path().join("bad"), &["--arch", "fusion", "--xvector", s(&sn_ckpt)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not an x-vector checkpoint"));
}

#[test]
fn config_file_and_override_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "# experiment\ntrain.arch = xvector\ntrain.epochs = 3\ntrain.seed = 9\n").unwrap();
    let out = tmp.path().join("run");
    train_ok(&manifest, &out, &["--config", s(&cfg), "--set", "train.epochs=2", "--set", "train.seed=4"]);
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("train.arch = xvector\n"));
    assert!(config.contains("train.epochs = 2\n"));
    assert!(config.contains("train.seed = 4\n"));
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 3);

    let o = train(&manifest, &tmp.path().join("typo"), &["--set", "train.epoch=2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown config key"));
    fs::write(&cfg, "train.epohcs = 3\n").unwrap();
    let o = train(&manifest, &tmp.path().join("typo2"), &["--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");

    let o = train(&manifest, &tmp.path().join("a"), &["--arch", "transformer"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("sincnet") && err.contains("xvector") && err.contains("fusion"), "{err}");

    let o = train(&tmp.path().join("missing.tsv"), &tmp.path().join("b"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.tsv"));

    let o = train(
        &manifest,
        &tmp.path().join("c"),
        &["--arch", "sincnet", "--epochs", "3", "--set", "train.learning_rate=1e30"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"));

    let locked = tmp.path().join("d");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".sincxv.lock"), "1\n").unwrap();
    let o = train(&manifest, &locked, &["--arch", "xvector", "--epochs", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn resumed_training_matches_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");
    let full = tmp.path().join("full");
    train_ok(&manifest, &full, &["--arch", "sincnet", "--epochs", "2"]);
    let split = tmp.path().join("split");
    train_ok(&manifest, &split, &["--arch", "sincnet", "--epochs", "1"]);
    let o = sincxv(&["train", "--manifest", s(&manifest), "--out", s(&split), "--resume", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["history.csv", "checkpoint.ckpt", "config.txt", "trials.tsv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }

    let again = tmp.path().join("again");
    train_ok(&manifest, &again, &["--arch", "sincnet", "--epochs", "2"]);
    assert_eq!(files_under(&full), files_under(&again));
}

#[test]
fn warm_start_applies_to_fusion_only() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");
    let sn = train_ok(&manifest, &tmp.path().join("sn"), &["--arch", "sincnet", "--epochs", "1"]);
    // a negligible learning rate keeps the copied tensors where the warm start put them
    let still = ["--arch", "fusion", "--epochs", "1", "--set", "train.learning_rate=1e-12"];
    let cold = train_ok(&manifest, &tmp.path().join("cold"), &still);
    let mut warm_args = still.to_vec();
    warm_args.extend(["--warm-start", s(&sn)]);
    let warm = train_ok(&manifest, &tmp.path().join("warm"), &warm_args);
    let source = Checkpoint::<f32>::load(&sn).unwrap();
    let [cold, warm] = [cold, warm].map(|p| Checkpoint::<f32>::load(p).unwrap());
    let mut copied = 0;
    for (name, t) in source.params.iter().filter(|(n, _)| n.starts_with("sincnet.")) {
        let find = |c: &Checkpoint<f32>| c.params.iter().find(|(n, _)| n == name).unwrap().1.clone();
        let (w, c) = (find(&warm), find(&cold));
        assert!(t.data().iter().zip(w.data()).all(|(a, b)| (a - b).abs() < 1e-6), "{name}");
        if t.data().iter().zip(c.data()).any(|(a, b)| (a - b).abs() > 1e-4) {
            copied += 1;
        }
    }
    assert!(copied > 0);
    let o = train(&manifest, &tmp.path().join("xv"), &["--arch", "xvector", "--warm-start", s(&sn)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn embed_text_and_binary_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");
    let ckpt = train_ok(&manifest, &tmp.path().join("sn"), &["--arch", "sincnet", "--epochs", "1"]);
    let text = tmp.path().join("emb.txt");
    let bin = tmp.path().join("emb.bin");
    for out in [&text, &bin] {
        let o = sincxv(&["embed", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).starts_with("embeddings 15 dim 6 "));
    }
    let a = EmbeddingSet::load(&text).unwrap();
    let b = EmbeddingSet::load(&bin).unwrap();
    assert_eq!(a.len(), 15);
    assert_eq!(a, b);

    let forced = tmp.path().join("forced.dat");
    let o = sincxv(&[
        "embed", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&forced), "--format", "binary",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&forced).unwrap(), fs::read(&bin).unwrap());

    let o = sincxv(&[
        "embed",
        "--checkpoint",
        s(&tmp.path().join("nope.ckpt")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&text),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn import_validates_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.txt");
    let text: String = (0..10)
        .map(|i| {
            let vals: Vec<String> = (0..512).map(|j| format!("{}", (i * 512 + j) as f32 / 1000.0)).collect();
            format!("utt{i} {}\n", vals.join(" "))
        })
        .collect();
    fs::write(&good, &text).unwrap();
    let store = tmp.path().join("store.bin");
    let o = sincxv(&["import-embeddings", "--input", s(&good), "--out", s(&store)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "imported 10 embeddings of dimension 512\n");
    let set = EmbeddingSet::load(&store).unwrap();
    assert_eq!((set.len(), set.dim()), (10, 512));
    assert_eq!(set, EmbeddingSet::parse_text(&text).unwrap());

    let ragged = tmp.path().join("ragged.txt");
    fs::write(&ragged, "a 1 2 3\nb 1 2\n").unwrap();
    let o = sincxv(&["import-embeddings", "--input", s(&ragged), "--out", s(&store)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let nan = tmp.path().join("nan.txt");
    fs::write(&nan, "a 1 2 3\nb 1 NaN 3\n").unwrap();
    let o = sincxv(&["import-embeddings", "--input", s(&nan), "--out", s(&store)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));

    let o = sincxv(&["import-embeddings", "--input", s(&good), "--format", "binary", "--out", s(&store)]);
    assert_eq!(code(&o), 2);
}

/// Enroll vector (1, 0) against test vectors whose cosine with it is each score.
fn fixture(dir: &Path, same: &[f64], diff: &[f64]) -> (PathBuf, PathBuf) {
    let mut entries = vec![Embedding {
        utterance_id: "enroll".into(),
        vector: vec![1.0, 0.0],
    }];
    let mut trials = String::new();
    for (label, scores) in [("same", same), ("different", diff)] {
        for (i, &c) in scores.iter().enumerate() {
            let id = format!("{label}{i}");
            entries.push(Embedding {
                utterance_id: id.clone(),
                vector: vec![c as f32, (1.0 - c * c).sqrt() as f32],
            });
            trials.push_str(&format!("enroll\t{id}\t{label}\n"));
        }
    }
    let emb = dir.join("fixture.txt");
    EmbeddingSet::new(entries).unwrap().save(&emb).unwrap();
    let tr = dir.join("trials.tsv");
    fs::write(&tr, trials).unwrap();
    (emb, tr)
}

fn score_and_eer(dir: &Path, same: &[f64], diff: &[f64]) -> (Output, PathBuf) {
    let (emb, trials) = fixture(dir, same, diff);
    let scores = dir.join("scores.tsv");
    let o = sincxv(&["score", "--embeddings", s(&emb), "--trials", s(&trials), "--out", s(&scores)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (sincxv(&["eer", "--scores", s(&scores)]), scores)
}

#[test]
fn eer_reports_percentages() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, scores) = score_and_eer(tmp.path(), &[0.9, 0.8], &[0.1, 0.2]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("EER 0.00%\n"));
    let det = fs::read_to_string(scores.with_extension("det.csv")).unwrap();
    assert!(det.starts_with("threshold,far,frr\n"));
    assert!(det.lines().any(|l| l.ends_with(",0,0")));

    let (o, _) = score_and_eer(tmp.path(), &[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]);
    assert!(stdout(&o).starts_with("EER 33.33%\n"), "{}", stdout(&o));

    let text = fs::read_to_string(tmp.path().join("scores.tsv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("enroll\tsame0\tsame\t"));

    let (o, _) = score_and_eer(tmp.path(), &[0.8, 0.6], &[]);
    assert_eq!(code(&o), 2);

    let det = tmp.path().join("curve.csv");
    let (emb, trials) = fixture(tmp.path(), &[0.7], &[0.2]);
    let o = sincxv(&["score", "--embeddings", s(&emb), "--trials", s(&trials), "--out", s(&tmp.path().join("x.tsv"))]);
    assert_eq!(code(&o), 0);
    let o = sincxv(&["eer", "--scores", s(&tmp.path().join("x.tsv")), "--det", s(&det)]);
    assert_eq!(code(&o), 0);
    assert!(det.exists());

    fs::write(&trials, "enroll\tghost\tsame\nenroll\tsame0\tdifferent\n").unwrap();
    let o = sincxv(&["score", "--embeddings", s(&emb), "--trials", s(&trials), "--out", s(&tmp.path().join("y.tsv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ghost"));
}

/// Checkpoint of a freshly initialized model with the tiny geometry.
fn untrained(manifest: &Path, arch: &str, path: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::small();
    for pair in TINY.chunks(2).filter(|p| p[0] == "--set") {
        cfg.apply_override(pair[1]).unwrap();
    }
    cfg.apply_override(&format!("train.arch={arch}")).unwrap();
    let speakers = DatasetManifest::load(manifest)
        .unwrap()
        .utterances_by_speaker().into_keys()
        .collect();
    Trainer::<f32>::new(cfg, speakers, None).unwrap().checkpoint().save(path).unwrap();
    path.to_path_buf()
}

fn band_table(out: &str) -> Vec<(f64, f64)> {
    out.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn inspect_filters_reports_bands() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("corpus"), "3", "5");
    let fresh = untrained(&manifest, "sincnet", &tmp.path().join("fresh.ckpt"));
    let trained = train_ok(
        &manifest,
        &tmp.path().join("trained"),
        &["--arch", "sincnet", "--epochs", "2", "--set", "train.learning_rate=0.01"],
    );
    let resp = tmp.path().join("resp.csv");

    let o = sincxv(&["inspect-filters", "--checkpoint", s(&fresh), "--response", s(&resp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("filter\tf1_hz\tf2_hz\n"));
    let bands = band_table(&stdout(&o));
    assert_eq!(bands.len(), 4);
    for w in bands.windows(2) {
        assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "{bands:?}");
    }
    let csv = fs::read_to_string(&resp).unwrap();
    assert!(csv.starts_with("bin,freq_hz,filter_0,filter_1,filter_2,filter_3\n"));
    assert_eq!(csv.lines().count(), 1 + 513);
    assert!(csv.lines().last().unwrap().starts_with("512,8000,"));

    let o = sincxv(&["inspect-filters", "--checkpoint", s(&trained), "--response", s(&resp)]);
    assert_eq!(code(&o), 0);
    for (lo, hi) in band_table(&stdout(&o)) {
        assert!((0.0..=8000.0).contains(&lo) && lo <= hi && hi <= 8000.0);
    }

    let xv = untrained(&manifest, "xvector", &tmp.path().join("xv.ckpt"));
    let o = sincxv(&["inspect-filters", "--checkpoint", s(&xv), "--response", s(&resp)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no sinc layer"));
}
