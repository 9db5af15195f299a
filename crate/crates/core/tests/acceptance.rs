//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sincxv::audio_io::{generate_synthetic_corpus, DatasetManifest, SyntheticCorpusSpec};
use sincxv::config::ExperimentConfig;
use sincxv::evaluation::{compute_eer, det_points, ScoreSet};
use sincxv::models::{Architecture, HeadConfig, RawWaveClassifier, SincNetConfig, XVectorConfig, XVectorNet};
use sincxv::nn::{
    finite_difference_check, softmax_cross_entropy, Conv1d, Dense, Differentiable, FdOptions, FdReport, Layer,
    LayerNorm, LeakyRelu, MaxPool1d, NormAxis, Sequential, SequentialProbe, StatsPool, TdnnSplice, Tensor,
};
use sincxv::sinc::{constrain_cutoffs, SincFilterBank, SincParams};
use sincxv::training::{prepare_data, PortSource, Trainer};
use sincxv::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------- 1

struct ClassifierProbe {
    model: RawWaveClassifier<f64>,
    port: Tensor<f64>,
    chunk: Vec<f32>,
    target: usize,
}

impl Differentiable<f64> for ClassifierProbe {
    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        n.push("port".into());
        n
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut p = self.model.params_mut();
        p.push(&mut self.port);
        p
    }
    fn loss(&self) -> Result<f64> {
        let (logits, _) = self.model.forward(&self.chunk, Some(self.port.data()))?;
        Ok(softmax_cross_entropy(&logits, &[self.target])?.0)
    }
    fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let (logits, mut trace) = self.model.forward(&self.chunk, Some(self.port.data()))?;
        let (_, dlogits) = softmax_cross_entropy(&logits, &[self.target])?;
        let mut g = self.model.zero_gradients();
        let port = self.model.backward(&mut trace, &dlogits, &mut g)?;
        let mut out = g.tensors;
        out.push(Tensor::row_vector(port.unwrap_or_else(|| vec![0.0; self.port.len()])));
        Ok(out)
    }
}

fn fd_reports() -> Vec<(&'static str, FdReport)> {
    let opts = FdOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();

    // sinc front end, conv, layer norm over channels, pooling, dense head and the embedding port
    let sinc = SincNetConfig {
        n_filters: 4,
        kernel_len: 31,
        conv_channels: vec![4],
        conv_widths: vec![3],
        pool_widths: vec![2, 2],
        dense_dim: 8,
        chunk_len_samples: 90,
        ..SincNetConfig::default()
    };
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 3,
        xvector_dim: 5,
        xvector_frozen: false,
        leaky_slope: 0.2,
    };
    let mut probe = ClassifierProbe {
        model: RawWaveClassifier::build(&sinc, &head, 5).unwrap(),
        port: random(1, 5, &mut rng),
        chunk: (0..90).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
        target: 2,
    };
    out.push(("fusion classifier", finite_difference_check(&mut probe, &opts).unwrap()));

    // frame-level TDNN: dense, splice, layer norm over features, statistics pooling
    let mut tdnn = Sequential::new();
    tdnn.push("in", Layer::Dense(Dense::new(3, 4, &mut rng)))
        .push("splice", Layer::Splice(TdnnSplice::new(vec![-2, 0, 2]).unwrap()))
        .push("frame", Layer::Dense(Dense::new(12, 5, &mut rng)))
        .push("norm", Layer::LayerNorm(LayerNorm::new(5, NormAxis::Features).unwrap()))
        .push("act", Layer::Activation(LeakyRelu::new(0.1).unwrap()))
        .push("stats", Layer::StatsPool(StatsPool))
        .push("segment", Layer::Dense(Dense::new(10, 3, &mut rng)));
    let mut probe = SequentialProbe::new(tdnn, random(9, 3, &mut rng), 7).unwrap();
    out.push(("tdnn", finite_difference_check(&mut probe, &opts).unwrap()));

    // strided conv stack with max pooling
    let mut conv = Sequential::new();
    conv.push("conv1", Layer::Conv1d(Conv1d::new(2, 3, 3, 1, &mut rng)))
        .push("norm", Layer::LayerNorm(LayerNorm::new(3, NormAxis::Channels).unwrap()))
        .push("act", Layer::Activation(LeakyRelu::new(0.2).unwrap()))
        .push("conv2", Layer::Conv1d(Conv1d::new(3, 2, 2, 2, &mut rng)))
        .push("pool", Layer::MaxPool(MaxPool1d::new(2).unwrap()))
        .push("flat", Layer::Flatten)
        .push("fc", Layer::Dense(Dense::new(8, 3, &mut rng)));
    let mut probe = SequentialProbe::new(conv, random(2, 20, &mut rng), 9).unwrap();
    out.push(("conv stack", finite_difference_check(&mut probe, &opts).unwrap()));
    out
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let reports = fd_reports();
    let elapsed = t0.elapsed();
    let names: Vec<String> = reports
        .iter()
        .flat_map(|(_, r)| r.entries.iter().map(|e| e.name.clone()))
        .collect();
    let covered = |needle: &str| names.iter().any(|n| n.contains(needle));
    let required = [
        "raw_low", "raw_band", "conv1", "conv2", "splice", "stats", "norm", "frame", "segment", "port",
    ];
    // parameter-free layers are covered through the gradients of what precedes them
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !covered(r) && !matches!(*r, "splice" | "stats"))
        .collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let excluded: usize = reports.iter().flat_map(|(_, r)| &r.entries).map(|e| e.excluded).sum();
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|(p, r)| r.entries.iter().filter(|e| !e.passed).map(move |e| format!("{p}/{}", e.name)))
        .collect();
    let pass = failed.is_empty() && missing.is_empty() && worst < 1e-4 && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{} tensors, max rel error {worst:.2e}, {excluded} kink coords excluded, failed {failed:?}, missing {missing:?}, {:.1}s",
            names.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_tap(f1: f64, f2: f64, n: usize, len: usize) -> f64 {
    let m = n as f64 - (len as f64 - 1.0) / 2.0;
    let low = |f: f64| if m == 0.0 { 2.0 * f } else { (TAU * f * m).sin() / (PI * m) };
    let k = if n <= (len - 1) / 2 { n } else { len - 1 - n };
    let w = 0.54 - 0.46 * (TAU * k as f64 / len as f64).cos();
    (low(f2) - low(f1)) * w
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let filters = rng.random_range(1..5);
        let len = 2 * rng.random_range(1..20) + 1;
        let n = len + rng.random_range(0..60);
        let raw_low: Vec<f64> = (0..filters).map(|_| rng.random_range(-0.6..0.6)).collect();
        let raw_band: Vec<f64> = (0..filters).map(|_| rng.random_range(-0.6..0.6)).collect();
        let bank = SincFilterBank::new(SincParams {
            raw_low: raw_low.clone(),
            raw_band: raw_band.clone(),
            kernel_len: len,
            sample_rate_hz: 16000,
        })
        .unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = bank.forward(&x).unwrap();
        for i in 0..filters {
            let f1 = raw_low[i].abs().min(0.5);
            let f2 = (f1 + (raw_band[i] - raw_low[i]).abs()).min(0.5);
            for t in 0..n - len + 1 {
                let mut acc = 0.0;
                for k in 0..len {
                    acc += oracle_tap(f1, f2, k, len) * x[t + k];
                }
                worst = worst.max((y.at(i, t) - acc).abs());
            }
        }

        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let (k, stride) = (rng.random_range(1..6), rng.random_range(1..4));
        let t_in = k + rng.random_range(0..30);
        let w = random(cout, cin * k, &mut rng);
        let b = random(1, cout, &mut rng);
        let xin = random(cin, t_in, &mut rng);
        let y = Conv1d::from_parts(w.clone(), b.clone(), cin, k, stride).unwrap().forward(&xin).unwrap();
        let t_out = (t_in - k) / stride + 1;
        assert_eq!(y.shape(), (cout, t_out));
        for o in 0..cout {
            for t in 0..t_out {
                let mut acc = b.at(0, o);
                for c in 0..cin {
                    for j in 0..k {
                        acc += w.at(o, c * k + j) * xin.at(c, t * stride + j);
                    }
                }
                worst = worst.max((y.at(o, t) - acc).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        worst < 1e-10 && elapsed < Duration::from_secs(10),
        format!("100 cases, max abs deviation {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let len = 251;
    let n_fft = 4096;
    let (mut min_db, mut worst_sym) = (f64::INFINITY, 0.0f64);
    for _ in 0..50 {
        // both guard regions must be non-empty and wider than the window's transition band
        let f1: f64 = rng.random_range(0.02..0.2);
        let f2 = rng.random_range(f1 + 0.03..(f1 + 0.15).min(0.32));
        let bank = SincFilterBank::<f64>::new(SincParams {
            raw_low: vec![f1],
            raw_band: vec![f2],
            kernel_len: len,
            sample_rate_hz: 16000,
        })
        .unwrap();
        let kernel = bank.kernels.row(0);
        for n in 0..len {
            worst_sym = worst_sym.max((kernel[n] - kernel[len - 1 - n]).abs());
        }
        let resp = bank.frequency_response(n_fft).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (k, &m) in resp.row(0).iter().enumerate() {
            let f = k as f64 / n_fft as f64;
            if f > f1 && f < f2 {
                inside += m;
                n_in += 1;
            } else if f < f1 / 1.5 || f > 1.5 * f2 {
                outside += m;
                n_out += 1;
            }
        }
        let db = 20.0 * ((inside / n_in as f64) / (outside / n_out as f64)).log10();
        min_db = min_db.min(db);
    }
    let elapsed = t0.elapsed();
    outcome(
        min_db >= 20.0 && worst_sym <= 1e-12 && elapsed < Duration::from_secs(10),
        format!(
            "50 bands, worst in/out ratio {min_db:.1} dB, worst asymmetry {worst_sym:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn extreme(rng: &mut ChaCha8Rng) -> f64 {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    sign * match rng.random_range(0..8) {
        0 => rng.random_range(0.0..1.0),
        1 => rng.random_range(0.0..1e3),
        2 => 10f64.powf(rng.random_range(-300.0..300.0)),
        3 => f64::MAX * rng.random_range(0.0..1.0),
        4 => f64::MIN_POSITIVE * rng.random_range(0.0..1.0),
        5 => 0.0,
        6 => 0.5 + rng.random_range(-1e-15..1e-15),
        _ => [0.5, 0.25, 1.0, f64::MAX, f64::EPSILON][rng.random_range(0..5)],
    }
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut violations = 0usize;
    for _ in 0..100_000 {
        let (a, b) = (extreme(&mut rng), extreme(&mut rng));
        let (f1, f2) = constrain_cutoffs(a, b).unwrap();
        if !(0.0 <= f1 && f1 <= f2 && f2 <= 0.5) {
            violations += 1;
        }
        let narrow = |v: f64| (v as f32).clamp(f32::MIN, f32::MAX);
        let (g1, g2) = constrain_cutoffs(narrow(a), narrow(b)).unwrap();
        if !(0.0 <= g1 && g1 <= g2 && g2 <= 0.5) {
            violations += 1;
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        violations == 0 && elapsed < Duration::from_secs(5),
        format!("1e5 pairs at f64 and f32, {violations} violations, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let expected = [
        (120, 512),
        (1536, 512),
        (1536, 512),
        (512, 512),
        (512, 1500),
        (1500, 3000),
        (3000, 512),
        (512, 512),
        (512, 10),
    ];
    let net = XVectorNet::<f32>::build(&XVectorConfig::with_classes(10), 0).unwrap();
    let got: Vec<(usize, usize)> = net.geometry().iter().map(|&(_, i, o)| (i, o)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let dims: Vec<(usize, usize)> = [15, 50, 300]
        .iter()
        .map(|&t| {
            let x = random(t, 24, &mut rng).cast::<f32>();
            let post = net.forward(&x).unwrap().0;
            let emb = net.embedding(&x).unwrap();
            (post.cols(), emb.len())
        })
        .collect();
    let invariant = dims.iter().all(|&d| d == (10, 512));
    outcome(
        got == expected && invariant,
        format!("layers {got:?}, (posterior, embedding) dims for T=15,50,300: {dims:?}"),
    )
}

// ---------------------------------------------------------------- 6

fn brute_force(same: &[f64], diff: &[f64]) -> Vec<(f64, f64)> {
    let mut distinct: Vec<f64> = same.iter().chain(diff).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0]];
    thresholds.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&t| {
            let far = diff.iter().filter(|&&s| s >= t).count() as f64 / diff.len() as f64;
            let frr = same.iter().filter(|&&s| s < t).count() as f64 / same.len() as f64;
            (far, frr)
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng, n: usize, shift: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(0..8) as f64 / 4.0
                    } else {
                        rng.random_range(-1.0..1.0) + shift
                    }
                })
                .collect()
        };
        let n_same = rng.random_range(1..200);
        let n_diff = rng.random_range(1..200);
        let shift = rng.random_range(0.0..2.0);
        let same = draw(&mut rng, n_same, shift);
        let diff = draw(&mut rng, n_diff, 0.0);
        let set = ScoreSet::from_labeled(&same, &diff);
        let grid = brute_force(&same, &diff);
        let curve = det_points(&set).unwrap();
        let on_grid = curve.points.len() == grid.len()
            && curve.points.iter().zip(&grid).all(|(p, &(far, frr))| p.far == far && p.frr == frr);
        let eer = compute_eer(&set).unwrap().eer;
        let lower = grid.iter().map(|&(a, r)| a.min(r)).fold(0.0, f64::max);
        let upper = grid.iter().map(|&(a, r)| a.max(r)).fold(1.0, f64::min);
        let exact = grid.iter().find(|&&(a, r)| a == r).is_none_or(|&(a, _)| eer == a);
        if !(on_grid && exact && eer >= lower && eer <= upper) {
            mismatches += 1;
        }
    }
    let eer = |s: &[f64], d: &[f64]| compute_eer(&ScoreSet::from_labeled(s, d)).unwrap().eer;
    let fixtures = [
        eer(&[0.9, 0.8], &[0.1, 0.2]),
        eer(&[0.1, 0.5, 0.9], &[0.9, 0.1, 0.5]),
        eer(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]),
    ];
    let fixtures_ok = fixtures[0] == 0.0 && fixtures[1] == 0.5 && (fixtures[2] - 1.0 / 3.0).abs() < 1e-15;
    outcome(
        mismatches == 0 && fixtures_ok,
        format!("200 random sets, {mismatches} mismatches, fixtures {fixtures:?}"),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

struct ArchRun {
    arch: Architecture,
    final_eer: f64,
    random_eer: f64,
    history_csv: String,
    checkpoint: Vec<u8>,
    elapsed: Duration,
}

fn arch_config(arch: Architecture) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::small();
    cfg.train.architecture = arch;
    cfg
}

fn train_arch(manifest: &DatasetManifest, arch: Architecture, port: Option<&XVectorNet<f32>>) -> (ArchRun, Trainer<f32>) {
    let cfg = arch_config(arch);
    let (corpus, eval) = prepare_data::<f32>(manifest, None, &cfg).unwrap();
    let random = Trainer::<f32>::new(cfg.clone(), corpus.speakers.clone(), None).unwrap();
    let random_eer = random.evaluate(&eval).unwrap();
    let t0 = Instant::now();
    let source = port.map(|n| PortSource::Network(n.clone()));
    let mut trainer = Trainer::new(cfg, corpus.speakers.clone(), source).unwrap();
    trainer.run(&corpus, Some(&eval)).unwrap();
    let elapsed = t0.elapsed();
    let run = ArchRun {
        arch,
        final_eer: trainer.evaluate(&eval).unwrap(),
        random_eer,
        history_csv: trainer.history().to_csv(),
        checkpoint: trainer.checkpoint().to_bytes().unwrap(),
        elapsed,
    };
    (run, trainer)
}

fn experiment(dir: &Path) -> Vec<ArchRun> {
    let spec = SyntheticCorpusSpec {
        n_speakers: 20,
        utterances_per_speaker: 10,
        duration_s: 2.0,
        sample_rate_hz: 16000,
        seed: 1,
    };
    let manifest = generate_synthetic_corpus(&spec, dir).unwrap();
    let (xv, xv_trainer) = train_arch(&manifest, Architecture::XVector, None);
    let xnet = xv_trainer.model().xvector().cloned().unwrap();
    let (sn, _) = train_arch(&manifest, Architecture::SincNet, None);
    let (fu, _) = train_arch(&manifest, Architecture::Fusion, Some(&xnet));
    vec![sn, xv, fu]
}

fn criterion_7(runs: &[ArchRun]) -> Outcome {
    let eer = |a: Architecture| runs.iter().find(|r| r.arch == a).unwrap().final_eer;
    let fusion = eer(Architecture::Fusion);
    let ordering = fusion <= eer(Architecture::SincNet) && fusion <= eer(Architecture::XVector);
    let trained = runs.iter().all(|r| r.final_eer < 0.15);
    let random = runs.iter().all(|r| (r.random_eer - 0.5).abs() <= 0.15);
    let budget = runs.iter().all(|r| r.elapsed <= Duration::from_secs(600));
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{}: eer {:.4} (random init {:.4}, {:.0}s)",
                r.arch,
                r.final_eer,
                r.random_eer,
                r.elapsed.as_secs_f64()
            )
        })
        .collect();
    outcome(
        ordering && trained && random && budget,
        format!(
            "{}; fusion <= both {ordering}, all < 0.15 {trained}, random init in 0.5 +- 0.15 {random}",
            detail.join(", ")
        ),
    )
}

fn criterion_8(runs: &[ArchRun]) -> Outcome {
    let csv = &runs.iter().find(|r| r.arch == Architecture::Fusion).unwrap().history_csv;
    let history = sincxv::training::TrainHistory::parse_csv(csv).unwrap();
    let eers: Vec<f64> = history.eer_series().into_iter().map(|(_, e)| e).collect();
    let averages: Vec<f64> = eers.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let pass = !averages.is_empty() && averages.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        pass,
        format!("fusion eer per epoch {eers:.3?}, 5-epoch moving average {averages:.4?}"),
    )
}

fn criterion_9(a: &[ArchRun], b: &[ArchRun]) -> Outcome {
    let same: Vec<String> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            format!(
                "{} history {} checkpoint {}",
                x.arch,
                x.history_csv == y.history_csv,
                x.checkpoint == y.checkpoint
            )
        })
        .collect();
    let pass = a
        .iter()
        .zip(b)
        .all(|(x, y)| x.history_csv == y.history_csv && x.checkpoint == y.checkpoint);
    outcome(pass, same.join(", "))
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());

    let first_dir = tempfile::tempdir().unwrap();
    let second_dir = tempfile::tempdir().unwrap();
    let first = experiment(first_dir.path());
    report(7, criterion_7(&first));
    report(8, criterion_8(&first));
    let second = experiment(second_dir.path());
    report(9, criterion_9(&first, &second));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
