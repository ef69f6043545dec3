use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Scalar;
use crate::error::{format_err, Error, Result};

const MODEL_MAGIC: &str = "polyprompt-model v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Desk-scale default: d=64, four layers, four heads, MLP width 4d.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size,
            max_len: 256,
            d_ff: 256,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.d_model == 0 || c.n_layers == 0 || c.n_heads == 0 || c.vocab_size == 0 || c.max_len == 0 || c.d_ff == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {c:?}")));
        }
        if c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                c.d_model, c.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w_up: Array2<T>,
    pub b_up: Array1<T>,
    pub w_down: Array2<T>,
    pub b_down: Array1<T>,
}

/// Mutable parameter tensors. Also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub config: ModelConfig,
    /// vocab_size × d
    pub token_embedding: Array2<T>,
    /// max_len × d
    pub positional_embedding: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Array1<T>,
    pub lnf_bias: Array1<T>,
    /// d × vocab_size
    pub unembedding: Array2<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn filled(c: &ModelConfig, matrix: &mut impl FnMut(usize, usize) -> Array2<T>, gain: T) -> Self {
        let d = c.d_model;
        LayerWeights {
            ln1_gain: Array1::from_elem(d, gain),
            ln1_bias: Array1::zeros(d),
            w_q: matrix(d, d),
            w_k: matrix(d, d),
            w_v: matrix(d, d),
            w_o: matrix(d, d),
            ln2_gain: Array1::from_elem(d, gain),
            ln2_bias: Array1::zeros(d),
            w_up: matrix(d, c.d_ff),
            b_up: Array1::zeros(c.d_ff),
            w_down: matrix(c.d_ff, d),
            b_down: Array1::zeros(d),
        }
    }
}

impl<T: Scalar> Weights<T> {
    /// Gaussian(0, std²) matrices, unit layer-norm gains, zero biases.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Weights<T>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut matrix = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || T::from_f64(normal.sample(&mut rng)));
        Ok(Self::build(config, &mut matrix, T::one()))
    }

    /// All-zero tensors with the shapes of `config` (a gradient buffer).
    pub fn zeros(config: ModelConfig) -> Weights<T> {
        Self::build(config, &mut |r, c| Array2::zeros((r, c)), T::zero())
    }

    fn build(config: ModelConfig, matrix: &mut impl FnMut(usize, usize) -> Array2<T>, gain: T) -> Weights<T> {
        let d = config.d_model;
        let token_embedding = matrix(config.vocab_size, d);
        let positional_embedding = matrix(config.max_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::filled(&config, matrix, gain))
            .collect();
        Weights {
            config,
            token_embedding,
            positional_embedding,
            layers,
            lnf_gain: Array1::from_elem(d, gain),
            lnf_bias: Array1::zeros(d),
            unembedding: matrix(d, config.vocab_size),
        }
    }

    /// Every tensor as a flat slice, in serialisation order: token and
    /// positional embeddings, each layer's twelve tensors, final norm, unembedding.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            self.token_embedding.as_slice().expect("standard layout"),
            self.positional_embedding.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.extend([
                l.ln1_gain.as_slice().unwrap(),
                l.ln1_bias.as_slice().unwrap(),
                l.w_q.as_slice().unwrap(),
                l.w_k.as_slice().unwrap(),
                l.w_v.as_slice().unwrap(),
                l.w_o.as_slice().unwrap(),
                l.ln2_gain.as_slice().unwrap(),
                l.ln2_bias.as_slice().unwrap(),
                l.w_up.as_slice().unwrap(),
                l.b_up.as_slice().unwrap(),
                l.w_down.as_slice().unwrap(),
                l.b_down.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_gain.as_slice().unwrap(),
            self.lnf_bias.as_slice().unwrap(),
            self.unembedding.as_slice().unwrap(),
        ]);
        out
    }

    /// Mutable counterpart of [`Weights::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.token_embedding.as_slice_mut().expect("standard layout"),
            self.positional_embedding.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.extend([
                l.ln1_gain.as_slice_mut().unwrap(),
                l.ln1_bias.as_slice_mut().unwrap(),
                l.w_q.as_slice_mut().unwrap(),
                l.w_k.as_slice_mut().unwrap(),
                l.w_v.as_slice_mut().unwrap(),
                l.w_o.as_slice_mut().unwrap(),
                l.ln2_gain.as_slice_mut().unwrap(),
                l.ln2_bias.as_slice_mut().unwrap(),
                l.w_up.as_slice_mut().unwrap(),
                l.b_up.as_slice_mut().unwrap(),
                l.w_down.as_slice_mut().unwrap(),
                l.b_down.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_gain.as_slice_mut().unwrap(),
            self.lnf_bias.as_slice_mut().unwrap(),
            self.unembedding.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over every value widened to little-endian f64, in tensor order.
    /// A model and its f64 cast therefore share a checksum.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let m = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.as_f64()));
        let v = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.as_f64()));
        Weights {
            config: self.config,
            token_embedding: m(&self.token_embedding),
            positional_embedding: m(&self.positional_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: v(&l.ln1_gain),
                    ln1_bias: v(&l.ln1_bias),
                    w_q: m(&l.w_q),
                    w_k: m(&l.w_k),
                    w_v: m(&l.w_v),
                    w_o: m(&l.w_o),
                    ln2_gain: v(&l.ln2_gain),
                    ln2_bias: v(&l.ln2_bias),
                    w_up: m(&l.w_up),
                    b_up: v(&l.b_up),
                    w_down: m(&l.w_down),
                    b_down: v(&l.b_down),
                })
                .collect(),
            lnf_gain: v(&self.lnf_gain),
            lnf_bias: v(&self.lnf_bias),
            unembedding: m(&self.unembedding),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let bad = |what: &str| Err(Error::Shape(format!("{what} does not match {c:?}")));
        if self.token_embedding.dim() != (c.vocab_size, d) {
            return bad("token_embedding");
        }
        if self.positional_embedding.dim() != (c.max_len, d) {
            return bad("positional_embedding");
        }
        if self.unembedding.dim() != (d, c.vocab_size) {
            return bad("unembedding");
        }
        if self.layers.len() != c.n_layers {
            return bad("layer count");
        }
        for l in &self.layers {
            if l.w_q.dim() != (d, d) || l.w_k.dim() != (d, d) || l.w_v.dim() != (d, d) || l.w_o.dim() != (d, d) {
                return bad("attention projection");
            }
            if l.w_up.dim() != (d, c.d_ff) || l.w_down.dim() != (c.d_ff, d) || l.b_up.len() != c.d_ff || l.b_down.len() != d {
                return bad("mlp");
            }
            if [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias].iter().any(|v| v.len() != d) {
                return bad("layer norm");
            }
        }
        if self.lnf_gain.len() != d || self.lnf_bias.len() != d {
            return bad("final layer norm");
        }
        Ok(())
    }
}

/// Frozen model parameters. Content never changes after construction; the
/// checksum taken at construction is the model fingerprint.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    weights: Weights<T>,
    checksum: [u8; 32],
}

impl<T: Scalar> ModelParams<T> {
    pub fn freeze(weights: Weights<T>) -> Result<ModelParams<T>> {
        weights.check_shapes()?;
        let checksum = weights.checksum();
        Ok(ModelParams { weights, checksum })
    }

    /// Randomly initialised frozen model, see [`Weights::random`].
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<ModelParams<T>> {
        Self::freeze(Weights::random(config, seed, std)?)
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// Checksum recorded when the model was frozen.
    pub fn checksum(&self) -> [u8; 32] {
        self.checksum
    }

    /// Hex form of [`ModelParams::checksum`], used to bind trigger banks.
    pub fn fingerprint(&self) -> String {
        hex::encode(self.checksum)
    }

    /// Recomputes the checksum from the current tensor contents.
    pub fn recompute_checksum(&self) -> [u8; 32] {
        self.weights.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let weights = self.weights.cast();
        let checksum = weights.checksum();
        ModelParams { weights, checksum }
    }
}

impl ModelParams<f32> {
    /// Writes the checkpoint: magic line, dimension/checksum line, then every
    /// tensor as row-major little-endian f32 in [`Weights::tensors`] order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let c = &self.weights.config;
        let header = format!(
            "{MODEL_MAGIC}\nd_model={} n_layers={} n_heads={} vocab_size={} max_len={} d_ff={} checksum={}\n",
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.vocab_size,
            c.max_len,
            c.d_ff,
            self.fingerprint()
        );
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::new();
        for t in self.weights.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(mut r: impl BufRead) -> Result<ModelParams<f32>> {
        let err = |m: String| format_err("model", m);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MODEL_MAGIC {
            return Err(err("bad magic line".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let mut fields = std::collections::HashMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("bad header field `{kv}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let dim = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(format!("missing or bad `{k}`")))
        };
        let config = ModelConfig {
            d_model: dim("d_model")?,
            n_layers: dim("n_layers")?,
            n_heads: dim("n_heads")?,
            vocab_size: dim("vocab_size")?,
            max_len: dim("max_len")?,
            d_ff: dim("d_ff")?,
        };
        config.validate()?;
        let declared = fields.get("checksum").cloned().ok_or_else(|| err("missing checksum".into()))?;
        let mut weights = Weights::<f32>::zeros(config);
        for t in weights.tensors_mut() {
            let mut bytes = vec![0u8; t.len() * 4];
            r.read_exact(&mut bytes)
                .map_err(|e| err(format!("truncated tensor data: {e}")))?;
            for (v, chunk) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(err("trailing bytes after tensor data".into()));
        }
        let params = ModelParams::freeze(weights)?;
        if params.fingerprint() != declared {
            return Err(err(format!(
                "checksum mismatch: header says {declared}, data hashes to {}",
                params.fingerprint()
            )));
        }
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
