use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sincxv::audio_io::WaveformBuffer;
use sincxv::dsp::{FeatureMatrix, FrameSpec};
use sincxv::models::{
    Architecture, Embedding, EmbeddingSet, HeadConfig, RawWaveClassifier, SincNetBranch, SincNetConfig, SpeakerModel,
    XVectorConfig, XVectorNet,
};
use sincxv::nn::{
    finite_difference_check, softmax_cross_entropy, softmax_rows, stats_pooling, Differentiable, FdOptions, Layer,
    Tensor,
};
use sincxv::{Error, Result};

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn chunk(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn tiny_sincnet(chunk_len: usize) -> SincNetConfig {
    SincNetConfig {
        n_filters: 4,
        kernel_len: 31,
        conv_channels: vec![4],
        conv_widths: vec![3],
        pool_widths: vec![2, 2],
        dense_dim: 8,
        chunk_len_samples: chunk_len,
        ..SincNetConfig::default()
    }
}

fn tiny_xvector(n_classes: usize) -> XVectorConfig {
    XVectorConfig {
        feature_dim: 6,
        frame_widths: vec![8, 8, 8, 8, 12],
        segment_dims: vec![5, 5],
        n_classes,
        ..XVectorConfig::default()
    }
}

#[test]
fn xvector_geometry_matches_table() {
    let net = XVectorNet::<f64>::build(&XVectorConfig::with_classes(7), 0).unwrap();
    let expected: Vec<(&str, usize, usize)> = vec![
        ("frame1", 120, 512),
        ("frame2", 1536, 512),
        ("frame3", 1536, 512),
        ("frame4", 512, 512),
        ("frame5", 512, 1500),
        ("stats", 1500, 3000),
        ("segment6", 3000, 512),
        ("segment7", 512, 512),
        ("output", 512, 7),
    ];
    let got = net.geometry();
    assert_eq!(got.len(), expected.len());
    for ((name, i, o), (en, ei, eo)) in got.iter().zip(&expected) {
        assert_eq!((name.as_str(), *i, *o), (*en, *ei, *eo));
    }
    assert_eq!(net.config.min_frames(), 15);
    assert_eq!(net.embedding_dim(), 512);
}

#[test]
fn xvector_accepts_any_length_from_fifteen() {
    let net = XVectorNet::<f64>::build(&XVectorConfig::with_classes(5), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [15, 50, 299, 300] {
        let x = random(t, 24, &mut rng);
        let fm = FeatureMatrix { values: x.clone(), frame_spec: FrameSpec::default() };
        let p = net.posteriors(&fm).unwrap();
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(net.embedding(&x).unwrap().len(), 512);
    }
    // 15 - 4 - 4 - 6 frames survive the splices
    let acts = net.frame_activations(&random(15, 24, &mut rng)).unwrap();
    assert_eq!(acts.shape(), (1, 1500));

    let err = net.embedding(&random(14, 24, &mut rng)).unwrap_err();
    assert!(matches!(&err, Error::Domain(m) if m.contains("15")), "{err}");
    assert!(net.embedding(&random(20, 23, &mut rng)).is_err());
}

#[test]
fn pooling_boundary_permutation_leaves_posteriors() {
    let net = XVectorNet::<f64>::build(&tiny_xvector(4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(40, 6, &mut rng);
    let acts = net.frame_activations(&x).unwrap();
    let direct = net.net.infer(&x).unwrap();

    let mut rows: Vec<Vec<f64>> = (0..acts.rows()).map(|r| acts.row(r).to_vec()).collect();
    rows.reverse();
    rows.swap(0, 7);
    let pooled = stats_pooling(&Tensor::from_rows(&rows).unwrap()).unwrap();
    let logits = net.forward_from_pooled(&Tensor::row_vector(pooled)).unwrap();
    assert_eq!(logits, direct);
}

#[test]
fn xvector_build_is_deterministic_and_embedding_ignores_head() {
    let cfg = tiny_xvector(3);
    let a = XVectorNet::<f64>::build(&cfg, 9).unwrap();
    let b = XVectorNet::<f64>::build(&cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.net.parameter_count(), b.net.parameter_count());
    let c = XVectorNet::<f64>::build(&cfg, 10).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.net.parameter_count(), c.net.parameter_count());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(30, 6, &mut rng);
    let e1 = a.embedding(&x).unwrap();
    assert_eq!(e1, a.embedding(&x).unwrap());
    assert_eq!(e1.len(), 5);

    let mut perturbed = a.clone();
    let out = perturbed.net.index_of("output.affine").unwrap();
    for p in perturbed.net.layers_mut()[out].1.params_mut() {
        *p = p.map(|v| v + 0.5);
    }
    assert_eq!(perturbed.embedding(&x).unwrap(), e1);
    assert_ne!(perturbed.net.infer(&x).unwrap(), a.net.infer(&x).unwrap());

    // the embedding is the pre-activation segment output, so it can be negative
    assert!(e1.iter().any(|&v| v < 0.0));
}

#[test]
fn xvector_config_errors() {
    let mut cfg = XVectorConfig::with_classes(2);
    cfg.frame_widths.pop();
    assert!(matches!(XVectorNet::<f64>::build(&cfg, 0), Err(Error::Domain(_))));
    let mut cfg = XVectorConfig::with_classes(0);
    assert!(XVectorNet::<f64>::build(&cfg, 0).is_err());
    cfg.n_classes = 2;
    cfg.frame_contexts[1] = vec![2, -2];
    assert!(XVectorNet::<f64>::build(&cfg, 0).is_err());
}

#[test]
fn sincnet_default_stage_arithmetic() {
    let cfg = SincNetConfig::default();
    assert_eq!(cfg.stage_lengths().unwrap(), vec![2950, 983, 979, 326, 322, 107]);
    assert_eq!(cfg.flatten_dim().unwrap(), 6420);

    // oracle: the stage recursion run by hand
    let mut t = 3200 - 251 + 1;
    let mut lens = vec![t];
    for (i, pool) in [3, 3, 3].iter().enumerate() {
        t /= pool;
        lens.push(t);
        if i < 2 {
            t -= 4;
            lens.push(t);
        }
    }
    assert_eq!(cfg.stage_lengths().unwrap(), lens);
}

#[test]
fn sincnet_short_chunks_fail_at_build() {
    let mut cfg = SincNetConfig::default();
    let min = cfg.min_chunk_len().unwrap();
    assert_eq!(min, 325);
    assert!(cfg.stage_lengths_for(min).is_ok());
    assert!(cfg.stage_lengths_for(min - 1).is_err());

    cfg.chunk_len_samples = 260;
    let err = SincNetBranch::<f32>::build(&cfg, 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("conv 1") && msg.contains("325"), "{msg}");

    cfg.chunk_len_samples = 300;
    let msg = SincNetBranch::<f32>::build(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("conv 2") && msg.contains("325"), "{msg}");

    cfg.chunk_len_samples = 200;
    let msg = cfg.stage_lengths().unwrap_err().to_string();
    assert!(msg.contains("sinc"), "{msg}");
}

#[test]
fn sincnet_branch_defaults() {
    let cfg = SincNetConfig::default();
    let branch = SincNetBranch::<f64>::build(&cfg, 0).unwrap();
    let shapes = branch.net.shapes((1, 3200)).unwrap();
    assert_eq!(shapes[0], (80, 2950));
    assert_eq!(*shapes.last().unwrap(), (1, 512));

    let zero = WaveformBuffer::new(vec![0.0; 3200], 16000, "u").unwrap();
    let a = branch.forward(&zero).unwrap();
    assert_eq!(a.len(), 512);
    assert_eq!(a, branch.forward(&zero).unwrap());
    assert!(a.iter().all(|v| v.is_finite()));

    let c = WaveformBuffer::new(chunk(3200, 1), 16000, "u").unwrap();
    assert_eq!(branch.forward(&c).unwrap(), branch.forward(&c.clone()).unwrap());

    let short = WaveformBuffer::new(vec![0.0; 3199], 16000, "u").unwrap();
    assert!(matches!(branch.forward(&short), Err(Error::Domain(_))));
}

#[test]
fn fusion_defaults() {
    let head = HeadConfig {
        n_classes: 20,
        ..HeadConfig::default()
    };
    let fusion = RawWaveClassifier::<f64>::build(&SincNetConfig::default(), &head, 0).unwrap();
    assert!(fusion.is_fusion());
    match &fusion.head.layers()[0].1 {
        Layer::Dense(d) => assert_eq!((d.input_dim(), d.output_dim()), (1024, 512)),
        other => panic!("unexpected first head layer {other:?}"),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = fusion.posteriors(&chunk(3200, 2), Some(&xv)).unwrap();
    assert_eq!(p.len(), 20);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    assert!(matches!(fusion.posteriors(&chunk(3200, 2), None), Err(Error::Domain(_))));
    assert!(matches!(fusion.posteriors(&chunk(3200, 2), Some(&xv[..511])), Err(Error::Domain(_))));
    assert_eq!(fusion.embedding(&chunk(3200, 2), Some(&xv)).unwrap().len(), 256);
}

#[test]
fn zero_port_reduces_to_chunk_only_model() {
    let sinc = tiny_sincnet(80);
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 3,
        xvector_dim: 5,
        xvector_frozen: true,
        leaky_slope: 0.2,
    };
    let fusion = RawWaveClassifier::<f64>::build(&sinc, &head, 4).unwrap();
    let solo_head = HeadConfig {
        xvector_dim: 0,
        ..head.clone()
    };
    let mut solo = RawWaveClassifier::<f64>::build(&sinc, &solo_head, 4).unwrap();
    solo.head = fusion.head.clone();
    if let Layer::Dense(d) = &mut solo.head.layers_mut()[0].1 {
        let w = d.weight.clone();
        let kept: Vec<Vec<f64>> = (0..8).map(|r| w.row(r).to_vec()).collect();
        d.weight = Tensor::from_rows(&kept).unwrap();
    }
    let c = chunk(80, 3);
    let a = fusion.posteriors(&c, Some(&[0.0; 5])).unwrap();
    let b = solo.posteriors(&c, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(solo.posteriors(&c, Some(&[0.0; 5])), Err(Error::Domain(_))));
}

/// Cross-entropy of one chunk through the classifier; the port is an extra parameter.
struct FusionProbe {
    model: RawWaveClassifier<f64>,
    port: Tensor<f64>,
    chunk: Vec<f32>,
    target: usize,
}

impl Differentiable<f64> for FusionProbe {
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
        let port = port.unwrap_or_else(|| vec![0.0; self.port.len()]);
        let mut out = g.tensors;
        out.push(Tensor::row_vector(port));
        Ok(out)
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 3,
        xvector_dim: 5,
        xvector_frozen: false,
        leaky_slope: 0.2,
    };
    let model = RawWaveClassifier::<f64>::build(&tiny_sincnet(80), &head, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut probe = FusionProbe {
        model,
        port: random(1, 5, &mut rng),
        chunk: chunk(80, 9),
        target: 1,
    };
    let report = finite_difference_check(&mut probe, &FdOptions::default()).unwrap();
    assert!(report.passed(), "{report:#?}");
    assert_eq!(report.entries.len(), probe.param_names().len());

    let grads = probe.gradients().unwrap();
    let names = probe.param_names();
    let low = names.iter().position(|n| n == "sincnet.sinc.raw_low").unwrap();
    assert!(grads[low].data().iter().any(|&v| v.abs() > 1e-12));
    let port = grads.last().unwrap();
    assert!(port.data().iter().any(|&v| v != 0.0));
}

#[test]
fn frozen_port_returns_no_gradient() {
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 3,
        xvector_dim: 5,
        xvector_frozen: true,
        leaky_slope: 0.2,
    };
    let model = RawWaveClassifier::<f64>::build(&tiny_sincnet(80), &head, 7).unwrap();
    let xv = [0.3, -0.2, 0.1, 0.0, 0.5];
    let (logits, mut trace) = model.forward(&chunk(80, 1), Some(&xv)).unwrap();
    let (_, d) = softmax_cross_entropy(&logits, &[0]).unwrap();
    let mut g = model.zero_gradients();
    assert!(model.backward(&mut trace, &d, &mut g).unwrap().is_none());
    assert!(!g.is_zero());
}

#[test]
fn speaker_model_params_and_loading() {
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 3,
        xvector_dim: 5,
        xvector_frozen: true,
        leaky_slope: 0.2,
    };
    let classifier = RawWaveClassifier::<f32>::build(&tiny_sincnet(80), &head, 1).unwrap();
    let xvector = XVectorNet::<f32>::build(&tiny_xvector(3), 2).unwrap();
    let model = SpeakerModel::Fusion {
        classifier,
        xvector: Some(xvector),
    };
    assert_eq!(model.architecture(), Architecture::Fusion);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n.starts_with("sincnet.")));
    assert!(names.iter().any(|n| n.starts_with("head.")));
    assert!(names.iter().any(|n| n.starts_with("xvector.")));
    let mut uniq = names.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());

    let records: Vec<(String, Tensor<f32>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.map(|v| v + 1.0)))
        .collect();
    let mut other = model.clone();
    other.load_params(&records).unwrap();
    assert_eq!(
        other.named_params().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
        records.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
    );
    assert!(matches!(other.load_params(&records[1..]), Err(Error::Lookup(_))));
    let mut bad = records.clone();
    bad[0].1 = Tensor::zeros(1, 1);
    assert!(matches!(other.load_params(&bad), Err(Error::Integrity(_))));
}

#[test]
fn architecture_names() {
    for a in Architecture::ALL {
        assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
    }
    assert_eq!("sincnet_only".parse::<Architecture>().unwrap(), Architecture::SincNet);
    let err = "resnet".parse::<Architecture>().unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Validation(_)));
    for name in ["sincnet", "xvector", "fusion"] {
        assert!(msg.contains(name), "{msg}");
    }
}

fn sample_set() -> EmbeddingSet {
    EmbeddingSet::new(vec![
        Embedding {
            utterance_id: "spk1/a".into(),
            vector: vec![0.5, -1.25, 3.0e-7],
        },
        Embedding {
            utterance_id: "spk2/b".into(),
            vector: vec![1.0, 2.0, f32::MAX],
        },
    ])
    .unwrap()
}

#[test]
fn embedding_set_text_and_binary_round_trip() {
    let set = sample_set();
    assert_eq!(set.dim(), 3);
    assert_eq!(EmbeddingSet::parse_text(&set.to_text()).unwrap(), set);
    let bin = set.to_binary();
    assert!(bin.starts_with(b"2 3\n"));
    assert_eq!(EmbeddingSet::parse_binary(&bin).unwrap(), set);
    assert_eq!(set.get("spk2/b").unwrap().vector[1], 2.0);
    assert!(set.get("nobody").is_none());

    let dir = tempfile::tempdir().unwrap();
    for name in ["e.txt", "e.bin"] {
        let path = dir.path().join(name);
        set.save(&path).unwrap();
        assert_eq!(EmbeddingSet::load(&path).unwrap(), set);
    }
}

#[test]
fn embedding_set_errors() {
    assert!(matches!(EmbeddingSet::parse_text("a 1 2\nb 1\n"), Err(Error::Validation(_))));
    assert!(matches!(EmbeddingSet::parse_text("a 1 x\n"), Err(Error::Validation(_))));
    assert!(matches!(EmbeddingSet::parse_text("a 1 NaN\n"), Err(Error::Validation(_))));
    assert!(matches!(EmbeddingSet::parse_text("a 1\na 2\n"), Err(Error::Validation(_))));
    let bin = sample_set().to_binary();
    assert!(matches!(
        EmbeddingSet::parse_binary(&bin[..bin.len() - 2]),
        Err(Error::Integrity(_))
    ));
    assert!(matches!(EmbeddingSet::parse_binary(b"x y\n"), Err(Error::Format(_))));
}

#[test]
fn softmax_of_fusion_logits_is_normalized() {
    let head = HeadConfig {
        fc_widths: vec![6, 6, 4],
        n_classes: 4,
        xvector_dim: 0,
        xvector_frozen: true,
        leaky_slope: 0.2,
    };
    let model = RawWaveClassifier::<f64>::build(&tiny_sincnet(80), &head, 3).unwrap();
    let (logits, _) = model.forward(&chunk(80, 5), None).unwrap();
    let p = softmax_rows(&logits);
    assert_eq!(p.data(), &model.posteriors(&chunk(80, 5), None).unwrap()[..]);
}
