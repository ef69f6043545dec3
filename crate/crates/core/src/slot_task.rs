//! The slot-instruction task behind the planted experiments.
//!
//! The `k` positions right after `<bos>` (exactly where trigger placeholders
//! sit later) either all hold the token of the item that answers the question,
//! or hold random filler words. A model with the skill picks the choice named
//! by the slots and answers `A` when they name nothing. Trigger training then
//! has to discover slot vectors that name the right item for each language.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus;
use crate::dataset::ITEM_POOL;
use crate::error::{Error, Result};
use crate::language::Language;
use crate::mcq::{mcq_logits, render_prompt, McqExample, Strategy};
use crate::model::{forward, splice, ModelParams, Readout};
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary};

/// Vocabulary size used for planted runs.
pub const PLANTED_VOCAB_BUDGET: usize = 4096;

/// Vocabulary over the bundled corpus plus the planted prompt scaffolding, so
/// every item, the strategy prefixes and `Answer:` are single tokens.
pub fn planted_vocabulary(budget: usize) -> Result<Vocabulary> {
    let mut texts: Vec<String> = corpus::labeled().into_iter().map(|(t, _)| t).collect();
    for _ in 0..64 {
        for item in ITEM_POOL {
            texts.push(format!("A. {item}\nAnswer:"));
        }
        texts.push(Strategy::InModelTranslation.prefix().to_string());
        texts.push(Strategy::FixedAutoprompt.prefix().to_string());
    }
    let vocab = Vocabulary::build(&texts, budget)?;
    item_token_ids(&vocab)?;
    Ok(vocab)
}

/// Token id of ` item` for every pool item, in pool order.
pub fn item_token_ids(vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    ITEM_POOL
        .iter()
        .map(|item| {
            vocab
                .id_of(&format!(" {item}"))
                .ok_or_else(|| Error::Config(format!("item ` {item}` is not a single token")))
        })
        .collect()
}

/// One slot-task sequence with its target choice.
#[derive(Debug, Clone)]
pub struct SlotExample {
    pub seq: TokenSequence,
    pub target: usize,
    /// Whether the slots name the target item.
    pub instructed: bool,
}

/// Draws random instruction-following examples.
pub struct SlotTaskSampler<'a> {
    vocab: &'a Vocabulary,
    items: Vec<TokenId>,
    fillers: Vec<TokenId>,
    sentences: Vec<Vec<&'static str>>,
    slots: usize,
    max_len: usize,
    no_instruction_rate: f64,
}

impl<'a> SlotTaskSampler<'a> {
    pub fn new(vocab: &'a Vocabulary, slots: usize, max_len: usize, no_instruction_rate: f64) -> Result<Self> {
        let items = item_token_ids(vocab)?;
        let fillers: Vec<TokenId> = (0..vocab.len() as TokenId)
            .filter(|&id| vocab.is_word_token(id) && !items.contains(&id))
            .collect();
        if fillers.is_empty() {
            return Err(Error::Config("vocabulary has no filler words".into()));
        }
        Ok(SlotTaskSampler {
            vocab,
            items,
            fillers,
            sentences: Language::ALL.iter().map(|&l| corpus::sentences(l)).collect(),
            slots,
            max_len,
            no_instruction_rate,
        })
    }

    /// Draws one example.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<SlotExample> {
        let lang = Language::ALL[rng.gen_range(0..Language::ALL.len())];
        let pool = &self.sentences[lang.index()];
        let n_sent = if rng.gen_bool(0.8) { 1 } else { 2 };
        let joiner = if corpus::is_unsegmented(lang) { "" } else { " " };
        let question = (0..n_sent)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect::<Vec<&str>>()
            .join(joiner);
        let picked: Vec<usize> = rand::seq::index::sample(rng, ITEM_POOL.len(), 4).into_vec();
        let example = McqExample {
            id: String::new(),
            language: lang,
            question,
            choices: std::array::from_fn(|i| ITEM_POOL[picked[i]].to_string()),
            answer_index: 0,
        };
        let strategy = *[
            Strategy::Native,
            Strategy::Native,
            Strategy::InModelTranslation,
            Strategy::FixedAutoprompt,
        ]
        .choose(rng)
        .unwrap();
        let mut seq = self
            .vocab
            .encode_with_triggers(&render_prompt(&example, strategy), self.slots, self.max_len)?;
        for &p in &seq.trigger_positions {
            seq.ids[p] = self.fillers[rng.gen_range(0..self.fillers.len())];
        }
        let (target, instructed) = if self.slots > 0 && !rng.gen_bool(self.no_instruction_rate) {
            let target = rng.gen_range(0..4);
            for &p in &seq.trigger_positions {
                seq.ids[p] = self.items[picked[target]];
            }
            (target, true)
        } else {
            (0, false)
        };
        seq.trigger_positions.clear();
        Ok(SlotExample { seq, target, instructed })
    }
}

/// Accuracy of `params` on fresh slot-task examples, split into instructed
/// examples and the rate at which uninstructed ones answer `A`.
pub fn slot_task_accuracy(params: &ModelParams<f32>, vocab: &Vocabulary, slots: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    let sampler = SlotTaskSampler::new(vocab, slots, params.config().max_len, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ndarray::Array2::<f32>::zeros((0, params.config().d_model));
    let (mut hit, mut inst, mut a, mut bare) = (0, 0, 0, 0);
    for _ in 0..n {
        let ex = sampler.sample(&mut rng)?;
        let trace = forward(params, &splice(params, &ex.seq, empty.view())?, Readout::Last)?;
        let pred = mcq_logits(&trace, vocab)?.prediction();
        if ex.instructed {
            inst += 1;
            hit += (pred == ex.target) as usize;
        } else {
            bare += 1;
            a += (pred == 0) as usize;
        }
    }
    Ok((hit as f64 / inst.max(1) as f64, a as f64 / bare.max(1) as f64))
}
