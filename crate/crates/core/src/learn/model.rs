use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPTMMODL";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Fully connected layer, `weight` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T g`.
    pub(crate) fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &gi) in self.weight.chunks_exact(self.inputs).zip(g) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }

    /// Accumulates `g x^T` into the weight and `g` into the bias.
    pub(crate) fn accumulate_outer(&mut self, g: &[f64], x: &[f64]) {
        for (row, &gi) in self.weight.chunks_exact_mut(self.inputs).zip(g) {
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += gi * xi;
            }
        }
        for (b, &gi) in self.bias.iter_mut().zip(g) {
            *b += gi;
        }
    }
}

/// `input -> relu(hidden) -> embedding -> logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub hidden: Dense,
    pub embed: Dense,
    pub classifier: Dense,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

impl EmbeddingModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize, embedding_dim: usize, classes: usize) -> Self {
        Self {
            hidden: Dense::zeros(input_dim, hidden_dim),
            embed: Dense::zeros(hidden_dim, embedding_dim),
            classifier: Dense::zeros(embedding_dim, classes),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        embedding_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::uniform(input_dim, hidden_dim, &mut rng),
            embed: Dense::uniform(hidden_dim, embedding_dim, &mut rng),
            classifier: Dense::uniform(embedding_dim, classes, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (i, h, d, c) = self.dims();
        Self::zeros(i, h, d, c)
    }

    /// `(input, hidden, embedding, classes)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.hidden.inputs,
            self.hidden.outputs,
            self.embed.outputs,
            self.classifier.outputs,
        )
    }

    pub fn activations(&self, x: &[f64]) -> Result<Activations> {
        if x.len() != self.hidden.inputs {
            return Err(Error::Dimension(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.hidden.inputs
            )));
        }
        let pre_hidden = self.hidden.apply(x);
        let hidden: Vec<f64> = pre_hidden.iter().map(|&v| v.max(0.0)).collect();
        let embedding = self.embed.apply(&hidden);
        let logits = self.classifier.apply(&embedding);
        Ok(Activations {
            pre_hidden,
            hidden,
            embedding,
            logits,
        })
    }

    /// Parameter tensors in declaration order: W1, b1, W2, b2, Wc, bc.
    pub fn params(&self) -> [&[f64]; 6] {
        [
            &self.hidden.weight,
            &self.hidden.bias,
            &self.embed.weight,
            &self.embed.bias,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.embed.weight,
            &mut self.embed.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (i, h, d, c) = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [i, h, d, c] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for p in self.params() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 2 + 16;
        if bytes.len() < HEADER || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[10 + 4 * k..14 + 4 * k].try_into().unwrap()) as usize;
        let mut model = Self::zeros(dim(0), dim(1), dim(2), dim(3));
        let total: usize = model.params().iter().map(|p| p.len()).sum();
        if bytes.len() != HEADER + total * 8 {
            return Err(Error::Corrupt(format!(
                "checkpoint payload is {} bytes, expected {}",
                bytes.len() - HEADER,
                total * 8
            )));
        }
        let mut values = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in model.params_mut() {
            for v in p.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !model.is_finite() {
            return Err(Error::Corrupt("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Embedding and logits for one input.
pub fn forward(model: &EmbeddingModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = model.activations(x)?;
    Ok((a.embedding, a.logits))
}
