use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Sequential, Tensor};
use crate::{Result, Scalar};

/// Something with parameters, a scalar loss and analytic gradients of that loss.
pub trait Differentiable<T: Scalar> {
    fn param_names(&self) -> Vec<String>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn loss(&self) -> Result<T>;
    /// Aligned with [`Differentiable::param_names`].
    fn gradients(&self) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    pub max_coords: usize,
    /// `|a - n| / max(|a| + |n|, denom_floor)`
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-6,
            tolerance: 1e-4,
            max_coords: 200,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub name: String,
    /// Prefix of `name` before its last `.`.
    pub layer: String,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree enough to explain the mismatch (kinks).
    pub excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&FdEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// `(layer, passed)` per layer in first-seen order.
    pub fn by_layer(&self) -> Vec<(String, bool)> {
        let mut out: Vec<(String, bool)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(l, _)| *l == e.layer) {
                Some((_, ok)) => *ok &= e.passed,
                None => out.push((e.layer.clone(), e.passed)),
            }
        }
        out
    }
}

/// Central differences on a random subsample of each parameter tensor.
///
/// A coordinate is a kink (excluded, counted in `excluded`) when it fails
/// the tolerance and the gap between its forward and backward one-sided
/// slopes is at least the analytic/numeric discrepancy.
pub fn finite_difference_check<T: Scalar, D: Differentiable<T>>(model: &mut D, opts: &FdOptions) -> Result<FdReport> {
    let names = model.param_names();
    let analytic = model.gradients()?;
    let base = model.loss()?.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut entries = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let len = analytic[pi].len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut max_err, mut excluded) = (0.0f64, 0usize);
        for &i in &coords {
            let orig = model.params_mut()[pi].data()[i];
            model.params_mut()[pi].data_mut()[i] = T::lit(orig.as_f64() + h);
            let plus = model.loss()?.as_f64();
            model.params_mut()[pi].data_mut()[i] = T::lit(orig.as_f64() - h);
            let minus = model.loss()?.as_f64();
            model.params_mut()[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[i].as_f64();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(opts.denom_floor);
            if err > opts.tolerance {
                let slope_gap = ((plus - base) / h - (base - minus) / h).abs();
                if slope_gap >= (a - numeric).abs() {
                    excluded += 1;
                    continue;
                }
            }
            max_err = max_err.max(err);
        }
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string();
        entries.push(FdEntry {
            name: name.clone(),
            layer,
            checked: coords.len() - excluded,
            excluded,
            max_rel_error: max_err,
            passed: max_err <= opts.tolerance,
        });
    }
    Ok(FdReport { entries })
}

/// A network, a fixed input and a fixed random linear read-out `sum(y * R)`.
/// The input is exposed as an extra parameter named `input`.
#[derive(Clone, Debug)]
pub struct SequentialProbe<T> {
    pub net: Sequential<T>,
    pub input: Tensor<T>,
    pub readout: Tensor<T>,
}

impl<T: Scalar> SequentialProbe<T> {
    pub fn new(net: Sequential<T>, input: Tensor<T>, seed: u64) -> Result<Self> {
        let shape = *net
            .shapes(input.shape())?
            .last()
            .unwrap_or(&input.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.0 * shape.1)
            .map(|_| T::lit(rng.random_range(-1.0..1.0)))
            .collect();
        Ok(SequentialProbe {
            net,
            input,
            readout: Tensor::from_vec(shape.0, shape.1, data)?,
        })
    }
}

impl<T: Scalar> Differentiable<T> for SequentialProbe<T> {
    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.net.params().into_iter().map(|(n, _)| n).collect();
        names.push("input".into());
        names
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.net.params_mut();
        p.push(&mut self.input);
        p
    }

    fn loss(&self) -> Result<T> {
        let y = self.net.infer(&self.input)?;
        Ok(y.data().iter().zip(self.readout.data()).map(|(&a, &b)| a * b).sum())
    }

    fn gradients(&self) -> Result<Vec<Tensor<T>>> {
        let (_, mut trace) = self.net.forward(&self.input)?;
        let mut grads: Gradients<T> = self.net.zero_gradients();
        let dx = self.net.backward(&mut trace, &self.readout, &mut grads)?;
        let mut out = grads.tensors;
        out.push(dx);
        Ok(out)
    }
}
