use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenSourceTag {
    Toy,
    File,
}

/// Per-layer token vectors, `depth × len × dim`, layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    states: Tensor,
    token_ids: Vec<usize>,
    source: HiddenSourceTag,
}

impl HiddenStates {
    pub fn new(states: Tensor, token_ids: Vec<usize>, source: HiddenSourceTag) -> Result<Self> {
        if states.shape().len() != 3 {
            return Err(Error::dim(format!("hidden states must be h×n×d, got {:?}", states.shape())));
        }
        if !token_ids.is_empty() && token_ids.len() != states.shape()[1] {
            return Err(Error::dim(format!("{} token ids for {} positions", token_ids.len(), states.shape()[1])));
        }
        Ok(Self { states, token_ids, source })
    }

    /// Stacks per-layer `n×d` matrices.
    pub fn from_layers(layers: &[Tensor], token_ids: Vec<usize>, source: HiddenSourceTag) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Empty("no layers".into()))?;
        let (n, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(layers.len() * n * d);
        for l in layers {
            if l.rows() != n || l.cols() != d {
                return Err(Error::dim("layers differ in shape"));
            }
            data.extend_from_slice(l.data());
        }
        Self::new(Tensor::new(vec![layers.len(), n, d], data)?, token_ids, source)
    }

    pub fn depth(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.states
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn source(&self) -> HiddenSourceTag {
        self.source
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f64] {
        let (n, d) = (self.len(), self.dim());
        let start = (layer * n + token) * d;
        &self.states.data()[start..start + d]
    }

    pub fn layer(&self, layer: usize) -> Tensor {
        let (n, d) = (self.len(), self.dim());
        let start = layer * n * d;
        Tensor::from_parts(vec![n, d], self.states.data()[start..start + n * d].to_vec())
    }

    /// All layers viewed as one `(h·n)×d` matrix (row `l·n + t`).
    pub fn flat(&self) -> Tensor {
        Tensor::from_parts(vec![self.depth() * self.len(), self.dim()], self.states.data().to_vec())
    }
}
