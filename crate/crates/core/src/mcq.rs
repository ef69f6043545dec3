//! Prompt rendering, answer-letter readout and the four-way cross-entropy.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Language;
use crate::model::{ForwardTrace, Scalar};
use crate::tokenizer::Vocabulary;

pub const IN_MODEL_TRANSLATION_PREFIX: &str = "Translate the following question to English and then answer it: ";
pub const FIXED_AUTOPROMPT_PREFIX: &str = "Answer the following question: ";
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// One four-way multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqExample {
    pub id: String,
    pub language: Language,
    pub question: String,
    pub choices: [String; 4],
    #[serde(rename = "answer")]
    pub answer_index: usize,
}

impl McqExample {
    pub fn validate(&self) -> Result<()> {
        if self.answer_index > 3 {
            return Err(Error::Config(format!(
                "example {}: answer index {} out of range",
                self.id, self.answer_index
            )));
        }
        Ok(())
    }
}

/// How a question is presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Native,
    InModelTranslation,
    FixedAutoprompt,
    PolyPrompt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Native,
        Strategy::InModelTranslation,
        Strategy::FixedAutoprompt,
        Strategy::PolyPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Native => "native",
            Strategy::InModelTranslation => "in_model_translation",
            Strategy::FixedAutoprompt => "fixed_autoprompt",
            Strategy::PolyPrompt => "polyprompt",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Strategy::InModelTranslation => IN_MODEL_TRANSLATION_PREFIX,
            Strategy::FixedAutoprompt => FIXED_AUTOPROMPT_PREFIX,
            Strategy::Native | Strategy::PolyPrompt => "",
        }
    }

    pub fn uses_triggers(self) -> bool {
        self == Strategy::PolyPrompt
    }

    /// Parses a comma-separated list such as `native,polyprompt`.
    pub fn parse_list(s: &str) -> Result<Vec<Strategy>> {
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// `{prefix}{question}\n\nA. ..\nB. ..\nC. ..\nD. ..\nAnswer:`
pub fn render_prompt(example: &McqExample, strategy: Strategy) -> String {
    let mut out = String::with_capacity(example.question.len() + 64);
    out.push_str(strategy.prefix());
    out.push_str(&example.question);
    out.push('\n');
    for (letter, choice) in LETTERS.iter().zip(&example.choices) {
        out.push('\n');
        out.push(*letter);
        out.push_str(". ");
        out.push_str(choice);
    }
    out.push_str("\nAnswer:");
    out
}

/// Logits of the answer letters A–D at the readout position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceLogits {
    pub values: [f64; 4],
}

impl ChoiceLogits {
    pub fn new(values: [f64; 4]) -> Result<ChoiceLogits> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite choice logits {values:?}")));
        }
        Ok(ChoiceLogits { values })
    }

    /// Index of the largest logit; the lower index wins ties.
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for i in 1..4 {
            if self.values[i] > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn softmax(&self) -> [f64; 4] {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.values.map(|v| (v - max).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }
}

/// Reads the choice-letter logits from the final position of `trace`.
pub fn mcq_logits<T: Scalar>(trace: &ForwardTrace<T>, vocab: &Vocabulary) -> Result<ChoiceLogits> {
    let row = trace.last_logits();
    let mut values = [0.0; 4];
    for (v, &id) in values.iter_mut().zip(vocab.choice_ids().iter()) {
        *v = row
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("choice id {id} outside the model's {} logits", row.len())))?
            .as_f64();
    }
    ChoiceLogits::new(values)
}

/// Cross-entropy over the four choices and its gradient with respect to them.
pub fn mcq_loss(logits: &ChoiceLogits, answer_index: usize) -> (f64, [f64; 4]) {
    let p = logits.softmax();
    let max = logits.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = (lse - logits.values[answer_index]).max(0.0);
    let mut grad = p;
    grad[answer_index] -= 1.0;
    (loss, grad)
}

/// Places a gradient over the four choice logits into an upstream gradient
/// shaped like `trace.logits` (zero everywhere else).
pub fn choice_grad_to_logits<T: Scalar>(trace: &ForwardTrace<T>, vocab: &Vocabulary, grad: &[f64; 4], scale: f64) -> Array2<T> {
    let mut up = Array2::zeros(trace.logits.raw_dim());
    let last = up.nrows() - 1;
    for (&g, &id) in grad.iter().zip(vocab.choice_ids().iter()) {
        up[[last, id as usize]] = T::from_f64(g * scale);
    }
    up
}
