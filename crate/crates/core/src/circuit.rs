//! Hand-wired frozen model for the planted task.
//!
//! The weights are set analytically. The residual stream is split into
//! orthonormal feature directions (all orthogonal to the all-ones vector, so
//! layer norm only rescales them).
//!
//! Layer 1, head 0 copies the letter two positions back, so every choice item
//! carries its letter. Head 1 averages the item codes found in the instruction
//! slots (positions `1..=slots`) into an instruction feature.
//!
//! Layer 2, head 0 lets each position attend to earlier item tokens whose code
//! matches the instruction and read their letter. With no instruction it rests
//! on `<bos>`, and a small unembedding bias makes the answer `A`.
//!
//! MLPs and the remaining heads are zero. A trigger can only steer the model
//! by looking like an item code to the slot-fetch head.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::ITEM_POOL;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Weights};
use crate::slot_task::{item_token_ids, planted_vocabulary, PLANTED_VOCAB_BUDGET};
use crate::tokenizer::Vocabulary;

pub const D_MODEL: usize = 128;
pub const N_HEADS: usize = 4;
pub const MAX_LEN: usize = 256;
pub const D_FF: usize = 32;
/// Instruction slots after `<bos>`; equals the default trigger count.
pub const SLOTS: usize = 5;
const BASIS_SEED: u64 = 0x91a7;

const N_ITEMS: usize = ITEM_POOL.len();
const POS_FREQS: usize = 8;
const POS_AMP: f64 = 0.5;
const POS_PERIOD: f64 = 512.0;

// attention score targets
const PREV_SHARPNESS: f64 = 11.0;
const FETCH_SCORE: f64 = 12.0;
const MATCH_SCORE: f64 = 40.0;
const SINK_SCORE: f64 = 8.0;
const SLOT_PENALTY: f64 = 40.0;
// logit targets
const LETTER_LOGIT: f64 = 10.0;
const DEFAULT_A_LOGIT: f64 = 3.0;

// feature directions
const CODE: usize = 0;
const LETTER: usize = CODE + N_ITEMS;
const OTHER: usize = LETTER + 4;
const BOS: usize = OTHER + 1;
const CONST: usize = BOS + 1;
const SLOT: usize = CONST + 1;
const POS: usize = SLOT + 1;
const LETTER_COPY: usize = POS + 2 * POS_FREQS;
const INSTR: usize = LETTER_COPY + 4;
const LETTER_OUT: usize = INSTR + N_ITEMS;
const N_FEATURES: usize = LETTER_OUT + 4;

/// `n` orthonormal vectors in R^d, all orthogonal to the all-ones vector.
fn basis(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut done: Vec<Vec<f64>> = vec![ones];
    while done.len() <= n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &done {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        done.push(v);
    }
    done.remove(0);
    done
}

fn freq(j: usize) -> f64 {
    2.0 * std::f64::consts::PI * (1u64 << j) as f64 / POS_PERIOD
}

/// Layer-norm scale for a row of raw norm `n`.
fn ln_scale(n: f64) -> f64 {
    (D_MODEL as f64).sqrt() / n
}

/// Builds the planted model for `vocab`. Deterministic.
#[allow(clippy::needless_range_loop)]
pub fn planted_model(vocab: &Vocabulary) -> Result<ModelParams<f32>> {
    let items = item_token_ids(vocab)?;
    let letters = vocab.choice_ids();
    let config = ModelConfig {
        d_model: D_MODEL,
        n_layers: 2,
        n_heads: N_HEADS,
        vocab_size: vocab.len(),
        max_len: MAX_LEN,
        d_ff: D_FF,
    };
    config.validate()?;
    let hd = config.head_dim();
    if hd < N_ITEMS + 1 {
        return Err(Error::Config(format!("head dimension {hd} too small for {N_ITEMS} item codes")));
    }
    let e = basis(D_MODEL, N_FEATURES, BASIS_SEED);
    let rt = (hd as f64).sqrt();
    let mut w = Weights::<f64>::zeros(config);

    // embeddings
    for id in 0..vocab.len() {
        let id32 = id as u32;
        let feature = if let Some(i) = items.iter().position(|&t| t == id32) {
            CODE + i
        } else if let Some(l) = letters.iter().position(|&t| t == id32) {
            LETTER + l
        } else if id32 == vocab.bos_id() {
            BOS
        } else {
            OTHER
        };
        let mut row = w.token_embedding.row_mut(id);
        for k in 0..D_MODEL {
            row[k] = e[feature][k] + e[CONST][k];
        }
    }
    for p in 0..MAX_LEN {
        let mut row = w.positional_embedding.row_mut(p);
        for j in 0..POS_FREQS {
            let (s, c) = (freq(j) * p as f64).sin_cos();
            for k in 0..D_MODEL {
                row[k] += POS_AMP * (c * e[POS + 2 * j][k] + s * e[POS + 2 * j + 1][k]);
            }
        }
        if (1..=SLOTS).contains(&p) {
            for k in 0..D_MODEL {
                row[k] += e[SLOT][k];
            }
        }
    }

    // nominal raw norms: feature + const + positions (+ slot, + written features)
    let pos_sq = POS_FREQS as f64 * POS_AMP * POS_AMP;
    let plain = ln_scale((2.0 + pos_sq).sqrt());
    let slot = ln_scale((3.0 + pos_sq).sqrt());
    let last = ln_scale((3.0 + pos_sq).sqrt());
    let choice = ln_scale((4.0 + pos_sq).sqrt());
    let head = |h: usize, c: usize| h * hd + c;

    for l in &mut w.layers {
        l.ln1_gain.fill(1.0);
        l.ln2_gain.fill(1.0);
    }
    w.lnf_gain = Array1::ones(D_MODEL);

    {
        let l = &mut w.layers[0];
        // head 0: previous-but-one token
        let g = (PREV_SHARPNESS * rt / (plain * plain * POS_AMP * POS_AMP)).sqrt();
        for j in 0..POS_FREQS {
            let (s2, c2) = (2.0 * freq(j)).sin_cos();
            let (ec, es) = (&e[POS + 2 * j], &e[POS + 2 * j + 1]);
            for k in 0..D_MODEL {
                l.w_q[[k, head(0, 2 * j)]] = g * (c2 * ec[k] + s2 * es[k]);
                l.w_q[[k, head(0, 2 * j + 1)]] = g * (c2 * es[k] - s2 * ec[k]);
                l.w_k[[k, head(0, 2 * j)]] = g * ec[k];
                l.w_k[[k, head(0, 2 * j + 1)]] = g * es[k];
            }
        }
        for c in 0..4 {
            for k in 0..D_MODEL {
                l.w_v[[k, head(0, c)]] = e[LETTER + c][k];
                l.w_o[[head(0, c), k]] = e[LETTER_COPY + c][k] / plain;
            }
        }
        // head 1: fetch the slot contents
        let g = FETCH_SCORE * rt / (plain * slot);
        for k in 0..D_MODEL {
            l.w_q[[k, head(1, 0)]] = g * e[CONST][k];
            l.w_k[[k, head(1, 0)]] = e[SLOT][k];
        }
        for i in 0..N_ITEMS {
            for k in 0..D_MODEL {
                l.w_v[[k, head(1, i)]] = e[CODE + i][k];
                l.w_o[[head(1, i), k]] = e[INSTR + i][k] / slot;
            }
        }
    }
    {
        let l = &mut w.layers[1];
        // head 0: find the choice named by the instruction
        let g = (MATCH_SCORE * rt / (last * choice)).sqrt();
        for i in 0..N_ITEMS {
            for k in 0..D_MODEL {
                l.w_q[[k, head(0, i)]] = g * e[INSTR + i][k];
                l.w_k[[k, head(0, i)]] = g * e[CODE + i][k];
            }
        }
        let c = head(0, N_ITEMS);
        let sink = SINK_SCORE * rt / (last * plain);
        let penalty = SLOT_PENALTY * rt / (last * slot);
        for k in 0..D_MODEL {
            l.w_q[[k, c]] = e[CONST][k];
            l.w_k[[k, c]] = sink * e[BOS][k] - penalty * e[SLOT][k];
        }
        for c in 0..4 {
            for k in 0..D_MODEL {
                l.w_v[[k, head(0, c)]] = e[LETTER_COPY + c][k];
                l.w_o[[head(0, c), k]] = e[LETTER_OUT + c][k] / choice;
            }
        }
    }
    let out = ln_scale((4.0 + pos_sq).sqrt());
    for (c, &id) in letters.iter().enumerate() {
        for k in 0..D_MODEL {
            w.unembedding[[k, id as usize]] = LETTER_LOGIT / out * e[LETTER_OUT + c][k];
        }
    }
    for k in 0..D_MODEL {
        w.unembedding[[k, letters[0] as usize]] += DEFAULT_A_LOGIT / out * e[CONST][k];
    }
    ModelParams::freeze(w.cast())
}

/// The vocabulary the bundled model is built against.
pub fn bundled_vocabulary() -> Result<Vocabulary> {
    planted_vocabulary(PLANTED_VOCAB_BUDGET)
}

/// The bundled frozen model: [`planted_model`] over [`bundled_vocabulary`].
pub fn bundled_model() -> Result<ModelParams<f32>> {
    planted_model(&bundled_vocabulary()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slot_task::slot_task_accuracy;

    #[test]
    fn basis_is_orthonormal_and_zero_mean() {
        let e = basis(32, 20, 1);
        for (i, a) in e.iter().enumerate() {
            assert!(a.iter().sum::<f64>().abs() < 1e-12);
            for (j, b) in e.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_code_separates_offsets() {
        for delta in 1..MAX_LEN {
            let s: f64 = (0..POS_FREQS).map(|j| (freq(j) * delta as f64).cos()).sum();
            assert!(POS_FREQS as f64 - s > 1.3, "{delta}");
        }
    }

    #[test]
    fn follows_slot_instructions_and_defaults_to_a() {
        let vocab = planted_vocabulary(PLANTED_VOCAB_BUDGET).unwrap();
        let model = planted_model(&vocab).unwrap();
        let a = planted_model(&vocab).unwrap();
        assert_eq!(a.checksum(), model.checksum());
        let (instructed, default_a) = slot_task_accuracy(&model, &vocab, SLOTS, 300, 4).unwrap();
        assert!(instructed > 0.99, "{instructed}");
        assert!(default_a > 0.99, "{default_a}");
    }
}
