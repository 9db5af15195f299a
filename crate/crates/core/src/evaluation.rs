//! Trial scoring and the equal error rate.
//!
//! Acceptance convention: a trial is accepted at threshold `t` when its
//! score is `>= t`. The sweep visits the minimum score, every midpoint
//! between consecutive distinct scores, and one point above the maximum.

use std::fs;
use std::path::Path;

use crate::audio_io::{Trial, TrialLabel, TrialList};
use crate::models::{mean_rows, EmbeddingSet, RawWaveClassifier};
use crate::{Error, Result, Scalar};

/// Cosine of the angle between two embeddings.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine score of a zero vector"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn from_labeled(same: &[f64], diff: &[f64]) -> Self {
        let mk = |label, (i, &score): (usize, &f64)| ScoredTrial {
            trial: Trial {
                enroll: format!("e{i}"),
                test: format!("t{i}"),
                label,
            },
            score,
        };
        ScoreSet {
            scores: same
                .iter()
                .enumerate()
                .map(|p| mk(TrialLabel::Same, p))
                .chain(diff.iter().enumerate().map(|p| mk(TrialLabel::Different, p)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for s in &self.scores {
            if !s.score.is_finite() {
                return Err(Error::domain("non-finite score"));
            }
            match s.trial.label {
                TrialLabel::Same => same.push(s.score),
                TrialLabel::Different => diff.push(s.score),
            }
        }
        if same.is_empty() || diff.is_empty() {
            return Err(Error::domain("EER needs both same-speaker and different-speaker trials"));
        }
        Ok((same, diff))
    }

    /// `enroll<TAB>test<TAB>label<TAB>score` per line.
    pub fn to_text(&self) -> String {
        self.scores
            .iter()
            .map(|s| format!("{}\t{}\t{}\t{}\n", s.trial.enroll, s.trial.test, s.trial.label.as_str(), s.score))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("score line {}: expected 4 fields", n + 1)));
            }
            let score = f[3]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("score line {}: bad score {:?}", n + 1, f[3])))?;
            scores.push(ScoredTrial {
                trial: Trial {
                    enroll: f[0].into(),
                    test: f[1].into(),
                    label: TrialLabel::parse(f[2])?,
                },
                score,
            });
        }
        Ok(ScoreSet { scores })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ScoreSet::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Cosine score for every trial, in trial order.
pub fn score_trials(embeddings: &EmbeddingSet, trials: &TrialList) -> Result<ScoreSet> {
    let lookup = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no embedding for utterance {id}")))
    };
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let score = cosine_score(&lookup(&t.enroll)?.vector, &lookup(&t.test)?.vector)?;
            Ok(ScoredTrial { trial: t.clone(), score })
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSet { scores })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR sweep in increasing threshold order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
        }
        out
    }
}

/// Counts-based sweep: `(threshold, far, frr)` per grid point.
fn sweep(same: &[f64], diff: &[f64]) -> Vec<DetPoint> {
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&s| (s, true))
        .chain(diff.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ns, nd) = (same.len() as f64, diff.len() as f64);
    let lo = all[0].0;
    let hi = all[all.len() - 1].0;
    let mut points = vec![DetPoint {
        threshold: lo,
        far: 1.0,
        frr: 0.0,
    }];
    // counts of scores strictly below the current threshold
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
        let threshold = match all.get(i) {
            Some(&(next, _)) => v + (next - v) / 2.0,
            None => hi + (hi - lo).max(1.0),
        };
        points.push(DetPoint {
            threshold,
            far: (diff.len() - diff_below) as f64 / nd,
            frr: same_below as f64 / ns,
        });
    }
    points
}

pub fn det_points(scores: &ScoreSet) -> Result<DetCurve> {
    let (same, diff) = scores.split()?;
    Ok(DetCurve {
        points: sweep(&same, &diff),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
}

/// Where FAR and FRR cross on the sweep, linearly interpolated between the
/// two adjacent grid points when they do not meet exactly.
pub fn eer_from_curve(curve: &DetCurve) -> EerResult {
    let pts = &curve.points;
    let j = pts
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("the last sweep point has FRR 1 and FAR 0");
    let p1 = pts[j];
    if p1.frr == p1.far || j == 0 {
        return EerResult {
            eer: p1.far,
            threshold: p1.threshold,
        };
    }
    let p0 = pts[j - 1];
    let d0 = p0.far - p0.frr;
    let d1 = p1.far - p1.frr;
    let alpha = d0 / (d0 - d1);
    EerResult {
        eer: p0.frr + alpha * (p1.frr - p0.frr),
        threshold: p0.threshold + alpha * (p1.threshold - p0.threshold),
    }
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    Ok(eer_from_curve(&det_points(scores)?))
}

/// Posteriors of every non-overlapping chunk of an utterance.
pub fn chunk_posteriors<T: Scalar>(
    classifier: &RawWaveClassifier<T>,
    samples: &[f32],
    xvec: Option<&[T]>,
) -> Result<Vec<Vec<T>>> {
    let len = classifier.chunk_len();
    if samples.len() < len {
        return Err(Error::domain(format!(
            "utterance of {} samples is shorter than one {len}-sample chunk",
            samples.len()
        )));
    }
    samples
        .chunks_exact(len)
        .map(|c| classifier.posteriors(c, xvec))
        .collect()
}

/// Averages chunk posteriors; the decision is the argmax, lowest index on ties.
pub fn posterior_decision<T: Scalar>(posteriors: &[Vec<T>]) -> Result<(usize, Vec<T>)> {
    let mean = mean_rows(posteriors)?;
    let mut best = 0;
    for (i, &p) in mean.iter().enumerate() {
        if p > mean[best] {
            best = i;
        }
    }
    Ok((best, mean))
}

pub fn utterance_posterior_decision<T: Scalar>(
    classifier: &RawWaveClassifier<T>,
    samples: &[f32],
    xvec: Option<&[T]>,
) -> Result<(usize, Vec<T>)> {
    posterior_decision(&chunk_posteriors(classifier, samples, xvec)?)
}
