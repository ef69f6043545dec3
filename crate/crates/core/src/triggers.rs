//! Per-language trigger matrices, their Adam state, and the bank file format.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::language::Language;

const BANK_MAGIC: &str = "polyprompt-bank v1";

/// Standard deviation of the Gaussian trigger initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// k trigger vectors for one language plus their optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub language: Language,
    /// k × d
    pub embeddings: Array2<f32>,
    pub adam_m: Array2<f32>,
    pub adam_v: Array2<f32>,
    pub step: u64,
}

impl TriggerSet {
    pub fn new(language: Language, embeddings: Array2<f32>) -> TriggerSet {
        let dim = embeddings.raw_dim();
        TriggerSet {
            language,
            embeddings,
            adam_m: Array2::zeros(dim),
            adam_v: Array2::zeros(dim),
            step: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.embeddings.nrows()
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves the set untouched.
    pub fn adam_step(&mut self, grad: &Array2<f32>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grad.dim() != self.embeddings.dim() {
            return Err(Error::Shape(format!(
                "gradient {:?} for triggers {:?}",
                grad.dim(),
                self.embeddings.dim()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite trigger gradient for {}", self.language)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((e, m), v), &g) in self
            .embeddings
            .iter_mut()
            .zip(self.adam_m.iter_mut())
            .zip(self.adam_v.iter_mut())
            .zip(grad.iter())
        {
            let g = g as f64;
            let m1 = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
            let v1 = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
            *e = (*e as f64 - update) as f32;
        }
        Ok(())
    }
}

/// Trigger sets for every language, bound to one frozen model by fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerBank {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Hex checksum of the model the triggers were trained against.
    pub fingerprint: String,
    sets: BTreeMap<Language, TriggerSet>,
}

impl TriggerBank {
    /// Draws each language's triggers from N(0, 0.02²) using a ChaCha8 stream
    /// keyed by the language, so adding a language never changes the others.
    pub fn init(languages: &[Language], k: usize, d: usize, seed: u64, fingerprint: impl Into<String>) -> Result<TriggerBank> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sets = BTreeMap::new();
        for &lang in languages {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(lang.index() as u64);
            let emb = Array2::from_shape_simple_fn((k, d), || normal.sample(&mut rng) as f32);
            if sets.insert(lang, TriggerSet::new(lang, emb)).is_some() {
                return Err(Error::Config(format!("language {lang} listed twice")));
            }
        }
        Ok(TriggerBank {
            k,
            d,
            seed,
            adam: AdamConfig::default(),
            fingerprint: fingerprint.into(),
            sets,
        })
    }

    pub fn get(&self, lang: Language) -> Option<&TriggerSet> {
        self.sets.get(&lang)
    }

    pub fn get_mut(&mut self, lang: Language) -> Option<&mut TriggerSet> {
        self.sets.get_mut(&lang)
    }

    pub fn contains(&self, lang: Language) -> bool {
        self.sets.contains_key(&lang)
    }

    pub fn languages(&self) -> impl Iterator<Item = Language> + '_ {
        self.sets.keys().copied()
    }

    pub fn sets(&self) -> impl Iterator<Item = &TriggerSet> {
        self.sets.values()
    }

    /// Errors unless the bank was trained against a model with this fingerprint.
    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.fingerprint != model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                actual: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Exchanges the trigger sets of two languages (embeddings and optimiser state).
    pub fn swap_languages(&mut self, a: Language, b: Language) -> Result<()> {
        let missing: Vec<_> = [a, b].into_iter().filter(|l| !self.contains(*l)).collect();
        if !missing.is_empty() {
            return Err(Error::MissingLanguages(missing));
        }
        let mut sa = self.sets.remove(&a).unwrap();
        let mut sb = self.sets.remove(&b).unwrap();
        std::mem::swap(&mut sa.language, &mut sb.language);
        self.sets.insert(b, sa);
        self.sets.insert(a, sb);
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let langs: Vec<&str> = self.sets.keys().map(|l| l.code()).collect();
        writeln!(w, "{BANK_MAGIC}")?;
        writeln!(
            w,
            "k={} d={} seed={} beta1={} beta2={} eps={} fingerprint={} languages={}",
            self.k,
            self.d,
            self.seed,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.fingerprint,
            langs.join(",")
        )?;
        for set in self.sets.values() {
            writeln!(w, "language={} step={}", set.language.code(), set.step)?;
            let mut buf = Vec::with_capacity(12 * self.k * self.d);
            for t in [&set.embeddings, &set.adam_m, &set.adam_v] {
                for v in t.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(mut r: impl BufRead) -> Result<TriggerBank> {
        let err = |m: String| format_err("trigger bank", m);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != BANK_MAGIC {
            return Err(err("bad magic line".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let fields = parse_fields(&line).map_err(err)?;
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| err(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| err(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| err(format!("bad `{k}`"))) };
        let k = int("k")? as usize;
        let d = int("d")? as usize;
        if k == 0 || d == 0 {
            return Err(err("k and d must be positive".into()));
        }
        let seed = int("seed")?;
        let adam = AdamConfig {
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
        };
        let fingerprint = get("fingerprint")?;
        let langs_field = get("languages")?;
        let langs = if langs_field.is_empty() {
            Vec::new()
        } else {
            Language::parse_list(&langs_field)?
        };
        let mut sets = BTreeMap::new();
        for &lang in &langs {
            line.clear();
            r.read_line(&mut line)?;
            let f = parse_fields(&line).map_err(err)?;
            if f.get("language").map(String::as_str) != Some(lang.code()) {
                return Err(err(format!("expected section for {lang}")));
            }
            let step: u64 = f
                .get("step")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(format!("bad step for {lang}")))?;
            let mut bytes = vec![0u8; 12 * k * d];
            r.read_exact(&mut bytes)
                .map_err(|e| err(format!("truncated data for {lang}: {e}")))?;
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let part = |i: usize| Array2::from_shape_vec((k, d), vals[i * k * d..(i + 1) * k * d].to_vec()).unwrap();
            let set = TriggerSet {
                language: lang,
                embeddings: part(0),
                adam_m: part(1),
                adam_v: part(2),
                step,
            };
            if sets.insert(lang, set).is_some() {
                return Err(err(format!("language {lang} listed twice")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(err("trailing bytes".into()));
        }
        Ok(TriggerBank {
            k,
            d,
            seed,
            adam,
            fingerprint,
            sets,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TriggerBank> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn parse_fields(line: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("bad field `{kv}`"))
        })
        .collect()
}
