use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{ModelParams, Scalar, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSequence};

/// Input rows for the model: token embeddings, with trigger vectors spliced in
/// at the placeholder positions. Positional embeddings are not yet added.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInput<T> {
    pub ids: Vec<TokenId>,
    /// n × d
    pub rows: Array2<T>,
    pub trigger_positions: Vec<usize>,
}

/// Which positions get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    All,
    Last,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub ln1: LayerNormCache<T>,
    pub a: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// one n × n matrix per head
    pub probs: Vec<Array2<T>>,
    pub attn_concat: Array2<T>,
    pub ln2: LayerNormCache<T>,
    pub b: Array2<T>,
    pub up: Array2<T>,
    pub act: Array2<T>,
}

/// Output logits plus the activations the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// rows × vocab_size, rows starting at `logit_row_offset`
    pub logits: Array2<T>,
    pub logit_row_offset: usize,
    pub trigger_positions: Vec<usize>,
    pub(crate) ids: Vec<TokenId>,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) lnf: LayerNormCache<T>,
    pub(crate) hidden: Array2<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    /// Logits at the last position.
    pub fn last_logits(&self) -> ndarray::ArrayView1<'_, T> {
        self.logits.row(self.logits.nrows() - 1)
    }
}

/// Looks up token embeddings for `seq` and overwrites the placeholder rows
/// with `triggers` (k × d, one row per placeholder, in order).
pub fn splice<T: Scalar>(
    params: &ModelParams<T>,
    seq: &TokenSequence,
    triggers: ArrayView2<'_, T>,
) -> Result<EmbeddedInput<T>> {
    let c = params.config();
    if triggers.nrows() != seq.trigger_positions.len() {
        return Err(Error::Shape(format!(
            "{} trigger rows for {} placeholders",
            triggers.nrows(),
            seq.trigger_positions.len()
        )));
    }
    if triggers.nrows() > 0 && triggers.ncols() != c.d_model {
        return Err(Error::Shape(format!(
            "trigger width {} but d_model is {}",
            triggers.ncols(),
            c.d_model
        )));
    }
    let emb = &params.weights().token_embedding;
    let mut rows = Array2::zeros((seq.ids.len(), c.d_model));
    for (i, &id) in seq.ids.iter().enumerate() {
        if id as usize >= c.vocab_size {
            return Err(Error::Shape(format!("token id {id} outside vocabulary of {}", c.vocab_size)));
        }
        rows.row_mut(i).assign(&emb.row(id as usize));
    }
    for (j, &p) in seq.trigger_positions.iter().enumerate() {
        if p >= seq.ids.len() {
            return Err(Error::Shape(format!("trigger position {p} past sequence end")));
        }
        rows.row_mut(p).assign(&triggers.row(j));
    }
    Ok(EmbeddedInput {
        ids: seq.ids.clone(),
        rows,
        trigger_positions: seq.trigger_positions.clone(),
    })
}

pub(crate) fn layer_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LayerNormCache<T>) {
    let d = T::from_f64(x.ncols() as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_C) * (u + T::from_f64(GELU_A) * u * u * u);
    half * u * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * u * u)
}

pub(crate) fn softmax_rows_causal<T: Scalar>(scores: &mut Array2<T>) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.iter().take(i + 1).fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum = sum + *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Runs the model over `input`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &EmbeddedInput<T>, readout: Readout) -> Result<ForwardTrace<T>> {
    let w = params.weights();
    let c = &w.config;
    let n = input.rows.nrows();
    if n == 0 {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if n > c.max_len {
        return Err(Error::Shape(format!("sequence of {n} exceeds max_len {}", c.max_len)));
    }
    if input.rows.ncols() != c.d_model || input.ids.len() != n {
        return Err(Error::Shape(format!(
            "input is {:?} with {} ids, expected n × {}",
            input.rows.dim(),
            input.ids.len(),
            c.d_model
        )));
    }
    let hd = c.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = &input.rows + &w.positional_embedding.slice(s![..n, ..]);
    let mut blocks = Vec::with_capacity(c.n_layers);
    for l in &w.layers {
        let (a, ln1) = layer_norm(&x, &l.ln1_gain, &l.ln1_bias);
        let q = a.dot(&l.w_q);
        let k = a.dot(&l.w_k);
        let v = a.dot(&l.w_v);
        let mut attn_concat = Array2::zeros((n, c.d_model));
        let mut probs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_causal(&mut scores);
            attn_concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        x = x + attn_concat.dot(&l.w_o);
        let (b, ln2) = layer_norm(&x, &l.ln2_gain, &l.ln2_bias);
        let up = b.dot(&l.w_up) + &l.b_up;
        let act = up.mapv(gelu);
        x = x + act.dot(&l.w_down) + &l.b_down;
        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn_concat,
            ln2,
            b,
            up,
            act,
        });
    }
    let (hidden, lnf) = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
    let offset = match readout {
        Readout::All => 0,
        Readout::Last => n - 1,
    };
    let logits = hidden.slice(s![offset.., ..]).dot(&w.unembedding);
    Ok(ForwardTrace {
        logits,
        logit_row_offset: offset,
        trigger_positions: input.trigger_positions.clone(),
        ids: input.ids.clone(),
        blocks,
        lnf,
        hidden,
    })
}
