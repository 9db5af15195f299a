use std::ops::Range;

use super::layers::{Cache, Layer};
use super::Tensor;
use crate::{Error, Result, Scalar};

/// Gradient buffers aligned with [`Sequential::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn add(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::domain("gradient sets differ in length"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, T::one())?;
        }
        Ok(())
    }

    pub fn concat(mut self, other: Gradients<T>) -> Gradients<T> {
        self.tensors.extend(other.tensors);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| *v == T::zero()))
    }
}

/// Activations recorded by one forward pass; consumed by exactly one backward pass.
#[derive(Debug)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
    range: Range<usize>,
    consumed: bool,
}

impl<T> Trace<T> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Ordered layer list with named layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential<T> {
    layers: Vec<(String, Layer<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[(String, Layer<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer<T>)] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|(n, _)| n == name)
    }

    /// Shape after each layer for an input of the given shape.
    pub fn shapes(&self, mut shape: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for (name, layer) in &self.layers {
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::domain(format!("layer {name}: {e}")))?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Parameter tensors as `layer.param` names.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|(name, l)| {
                l.params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{name}.{p}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    fn run(&self, x: &Tensor<T>, range: Range<usize>, record: bool) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        if range.end > self.layers.len() || range.start > range.end {
            return Err(Error::domain("layer range out of bounds"));
        }
        let mut caches = Vec::with_capacity(range.len());
        let mut h = x.clone();
        for (name, layer) in &self.layers[range] {
            let (y, cache) = layer
                .forward(&h, record)
                .map_err(|e| Error::domain(format!("layer {name}: {e}")))?;
            if record {
                caches.push(cache);
            }
            h = y;
        }
        Ok((h, caches))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.forward_range(x, 0..self.layers.len())
    }

    /// Runs layers `range` only, recording a trace for them.
    pub fn forward_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<(Tensor<T>, Trace<T>)> {
        let (y, caches) = self.run(x, range.clone(), true)?;
        Ok((
            y,
            Trace {
                caches,
                range,
                consumed: false,
            },
        ))
    }

    /// Forward without recording.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, 0..self.layers.len(), false)?.0)
    }

    pub fn infer_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        Ok(self.run(x, range, false)?.0)
    }

    /// Reverse-mode pass over the traced layers. Parameter gradients are
    /// added into `grads`; the gradient with respect to the traced input is returned.
    pub fn backward(&self, trace: &mut Trace<T>, upstream: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>> {
        if trace.consumed {
            return Err(Error::State(
                "backward already ran for this forward trace; run forward again".into(),
            ));
        }
        if grads.tensors.len() != self.params().len() {
            return Err(Error::domain("gradient buffer does not match network parameters"));
        }
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, (_, l)| {
                let o = *acc;
                *acc += l.n_params();
                Some(o)
            })
            .collect();
        let mut g = upstream.clone();
        for (i, cache) in trace.range.clone().zip(&trace.caches).rev() {
            let (name, layer) = &self.layers[i];
            let slot = &mut grads.tensors[offsets[i]..offsets[i] + layer.n_params()];
            g = layer
                .backward(cache, &g, slot)
                .map_err(|e| match e {
                    Error::Domain(m) => Error::domain(format!("layer {name} backward: {m}")),
                    other => other,
                })?;
        }
        trace.consumed = true;
        trace.caches.clear();
        Ok(g)
    }
}
