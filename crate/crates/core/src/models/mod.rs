//! The three speaker-recognition architectures and their embeddings.
//!
//! * [`XVectorNet`]: TDNN frame layers, statistics pooling, two segment
//!   layers and a softmax head over log-mel features.
//! * [`RawWaveClassifier`] without an x-vector port: the sinc front end and
//!   CNN ([`SincNetBranch`]) followed by three dense layers.
//! * [`RawWaveClassifier`] with an x-vector port: the fusion model. The
//!   branch output is concatenated with an utterance x-vector before FC1.

mod embedding;
mod sincnet;
mod xvector;

pub use embedding::{Embedding, EmbeddingSet};
pub use sincnet::{ClassifierTrace, HeadConfig, RawWaveClassifier, SincNetBranch, SincNetConfig};
pub use xvector::{XVectorConfig, XVectorNet, TABLE1_CONTEXTS, TABLE1_FRAME_WIDTHS, TABLE1_SEGMENT_DIMS};

use std::fmt;
use std::str::FromStr;

use crate::nn::{Gradients, Tensor};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    SincNet,
    XVector,
    Fusion,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::SincNet, Architecture::XVector, Architecture::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::SincNet => "sincnet",
            Architecture::XVector => "xvector",
            Architecture::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sincnet" | "sincnet_only" => Ok(Architecture::SincNet),
            "xvector" | "xvector_only" => Ok(Architecture::XVector),
            "fusion" => Ok(Architecture::Fusion),
            other => Err(Error::Validation(format!(
                "unknown architecture {other:?}; expected one of sincnet, xvector, fusion"
            ))),
        }
    }
}

/// A trained or trainable model of one of the three architectures.
#[derive(Clone, Debug, PartialEq)]
pub enum SpeakerModel<T> {
    SincNet(RawWaveClassifier<T>),
    XVector(XVectorNet<T>),
    Fusion {
        classifier: RawWaveClassifier<T>,
        /// Source of the x-vector port; absent when embeddings are imported.
        xvector: Option<XVectorNet<T>>,
    },
}

impl<T: Scalar> SpeakerModel<T> {
    pub fn architecture(&self) -> Architecture {
        match self {
            SpeakerModel::SincNet(_) => Architecture::SincNet,
            SpeakerModel::XVector(_) => Architecture::XVector,
            SpeakerModel::Fusion { .. } => Architecture::Fusion,
        }
    }

    pub fn classifier(&self) -> Option<&RawWaveClassifier<T>> {
        match self {
            SpeakerModel::SincNet(c) | SpeakerModel::Fusion { classifier: c, .. } => Some(c),
            SpeakerModel::XVector(_) => None,
        }
    }

    pub fn xvector(&self) -> Option<&XVectorNet<T>> {
        match self {
            SpeakerModel::XVector(x) => Some(x),
            SpeakerModel::Fusion { xvector, .. } => xvector.as_ref(),
            SpeakerModel::SincNet(_) => None,
        }
    }

    /// Every parameter with a globally unique name (`sincnet.*`, `head.*`, `xvector.*`).
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(c) = self.classifier() {
            out.extend(c.named_params());
        }
        if let Some(x) = self.xvector() {
            out.extend(x.net.params().into_iter().map(|(n, t)| (format!("xvector.{n}"), t)));
        }
        out
    }

    /// Mutable parameters in [`SpeakerModel::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            SpeakerModel::SincNet(c) => c.params_mut(),
            SpeakerModel::XVector(x) => x.net.params_mut(),
            SpeakerModel::Fusion { classifier, xvector } => {
                let mut p = classifier.params_mut();
                if let Some(x) = xvector {
                    p.extend(x.net.params_mut());
                }
                p
            }
        }
    }

    /// Overwrites parameters by name; every parameter must be present with its shape.
    pub fn load_params(&mut self, records: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let mut targets = self.params_mut();
        for (name, target) in names.iter().zip(targets.iter_mut()) {
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Lookup(format!("parameter {name} missing")))?;
            if t.shape() != target.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            **target = t.clone();
        }
        Ok(())
    }
}

/// Element-wise mean of equally sized vectors.
pub(crate) fn mean_rows<T: Scalar>(rows: &[Vec<T>]) -> Result<Vec<T>> {
    let first = rows.first().ok_or_else(|| Error::domain("nothing to average"))?;
    let mut acc = vec![T::zero(); first.len()];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = T::lit(rows.len() as f64);
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

pub(crate) fn zero_grads_for<T: Scalar>(params: &[(String, &Tensor<T>)]) -> Gradients<T> {
    Gradients {
        tensors: params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect(),
    }
}
