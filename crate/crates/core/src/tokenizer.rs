//! Byte-fallback word vocabulary with a reserved trigger placeholder.
//!
//! Text is NFC-normalised and cut into pieces: a run of word characters
//! (optionally carrying one leading space), or any other single character.
//! Frequent pieces become tokens. A piece missing from the vocabulary is
//! covered by greedy longest-match over shorter tokens, then by single
//! characters, then by raw UTF-8 byte tokens, so every input encodes.
//!
//! Ids `0..4` are `<trigger_tok>`, `<pad>`, `<unk>`, `<bos>`; ids `4..8` are
//! the answer letters `A`–`D`. Plain text never encodes to the placeholder:
//! placeholders only come from [`Vocabulary::encode_with_triggers`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{format_err, Error, Result};

pub type TokenId = u32;

pub const TRIGGER_TOKEN: &str = "<trigger_tok>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const CHOICE_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Maximum sequence length when none is configured.
pub const DEFAULT_MAX_LEN: usize = 2048;

const RESERVED: [&str; 4] = [TRIGGER_TOKEN, PAD_TOKEN, UNK_TOKEN, BOS_TOKEN];
/// Reserved tokens plus the four answer letters.
pub const MANDATORY_TOKENS: usize = RESERVED.len() + CHOICE_LETTERS.len();

const VOCAB_MAGIC: &str = "polyprompt-vocab v1";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Special,
    Text(String),
    Byte(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    entries: Vec<Entry>,
    index: HashMap<String, TokenId>,
    byte_ids: Vec<Option<TokenId>>,
    max_piece_chars: usize,
}

/// Token ids of one encoded query, with the placeholder positions marked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub trigger_positions: Vec<usize>,
}

impl TokenSequence {
    /// Builds a sequence, deriving the placeholder positions from `ids`.
    pub fn from_ids(ids: Vec<TokenId>, trigger_id: TokenId) -> Self {
        let trigger_positions = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == trigger_id)
            .map(|(i, _)| i)
            .collect();
        TokenSequence {
            ids,
            trigger_positions,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn is_word_char(c: char) -> bool {
    // ZWNJ/ZWJ sit inside Persian and Indic words.
    c.is_alphanumeric() || is_combining_mark(c) || c == '\u{200c}' || c == '\u{200d}'
}

/// Splits text into vocabulary pieces. Concatenating the pieces gives back the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut j = i;
        if chars[i].1 == ' ' && i + 1 < chars.len() && is_word_char(chars[i + 1].1) {
            j += 1;
        }
        if is_word_char(chars[j].1) {
            j += 1;
            while j < chars.len() && is_word_char(chars[j].1) {
                j += 1;
            }
        } else {
            j = i + 1;
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        pieces.push(&text[start..end]);
        i = j;
    }
    pieces
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Vocabulary {
    /// Builds a vocabulary of at most `size_budget` tokens from `corpus`.
    ///
    /// After the mandatory tokens come the 256 byte tokens (as many as fit),
    /// then every character seen in the corpus by descending frequency, then
    /// multi-character pieces by descending frequency. Ties break on the
    /// token string so the result is deterministic.
    pub fn build<S: AsRef<str>>(corpus: &[S], size_budget: usize) -> Result<Vocabulary> {
        if corpus.is_empty() {
            return Err(Error::Config("vocabulary corpus is empty".into()));
        }
        if size_budget < MANDATORY_TOKENS {
            return Err(Error::Config(format!(
                "vocabulary budget {size_budget} is below the {MANDATORY_TOKENS} mandatory tokens"
            )));
        }
        let mut char_counts: HashMap<String, usize> = HashMap::new();
        let mut piece_counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            let text: String = text.as_ref().nfc().collect();
            for c in text.chars() {
                *char_counts.entry(c.to_string()).or_default() += 1;
            }
            for piece in pre_tokenize(&text) {
                if piece.chars().count() > 1 {
                    *piece_counts.entry(piece.to_string()).or_default() += 1;
                }
            }
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut entries = vec![Entry::Special; RESERVED.len()];
        for letter in CHOICE_LETTERS {
            tokens.push(letter.to_string());
            entries.push(Entry::Text(letter.to_string()));
        }
        for b in 0..=255u8 {
            if tokens.len() >= size_budget {
                break;
            }
            tokens.push(byte_token(b));
            entries.push(Entry::Byte(b));
        }
        let by_frequency = |counts: HashMap<String, usize>| {
            let mut v: Vec<(String, usize)> = counts.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v.into_iter().map(|(s, _)| s)
        };
        let mut seen: std::collections::HashSet<String> = CHOICE_LETTERS.iter().map(|s| s.to_string()).collect();
        for text in by_frequency(char_counts).chain(by_frequency(piece_counts)) {
            if tokens.len() >= size_budget {
                break;
            }
            if seen.insert(text.clone()) {
                tokens.push(text.clone());
                entries.push(Entry::Text(text));
            }
        }
        Ok(Self::from_parts(tokens, entries))
    }

    fn from_parts(tokens: Vec<String>, entries: Vec<Entry>) -> Vocabulary {
        let mut index = HashMap::new();
        let mut byte_ids = vec![None; 256];
        let mut max_piece_chars = 1;
        for (id, entry) in entries.iter().enumerate() {
            match entry {
                Entry::Text(s) => {
                    index.insert(s.clone(), id as TokenId);
                    max_piece_chars = max_piece_chars.max(s.chars().count());
                }
                Entry::Byte(b) => byte_ids[*b as usize] = Some(id as TokenId),
                Entry::Special => {}
            }
        }
        Vocabulary {
            tokens,
            entries,
            index,
            byte_ids,
            max_piece_chars,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn trigger_id(&self) -> TokenId {
        0
    }

    pub fn pad_id(&self) -> TokenId {
        1
    }

    pub fn unk_id(&self) -> TokenId {
        2
    }

    pub fn bos_id(&self) -> TokenId {
        3
    }

    /// Ids of `A`, `B`, `C`, `D`, in that order.
    pub fn choice_ids(&self) -> [TokenId; 4] {
        [4, 5, 6, 7]
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a text token (not a byte or reserved token).
    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    /// True for ids that stand for ordinary text, i.e. not reserved, not a
    /// byte and not an answer letter.
    pub fn is_word_token(&self, id: TokenId) -> bool {
        id as usize >= MANDATORY_TOKENS && matches!(self.entries.get(id as usize), Some(Entry::Text(_)))
    }

    /// Encodes text without any special tokens.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let text: String = text.nfc().collect();
        let mut ids = Vec::new();
        for piece in pre_tokenize(&text) {
            if let Some(&id) = self.index.get(piece) {
                ids.push(id);
                continue;
            }
            let chars: Vec<(usize, char)> = piece.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let longest = self.max_piece_chars.min(chars.len() - i);
                let mut matched = None;
                for len in (1..=longest).rev() {
                    let start = chars[i].0;
                    let end = chars.get(i + len).map_or(piece.len(), |c| c.0);
                    if let Some(&id) = self.index.get(&piece[start..end]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                match matched {
                    Some((id, len)) => {
                        ids.push(id);
                        i += len;
                    }
                    None => {
                        let mut buf = [0u8; 4];
                        for &b in chars[i].1.encode_utf8(&mut buf).as_bytes() {
                            ids.push(self.byte_ids[b as usize].unwrap_or(self.unk_id()));
                        }
                        i += 1;
                    }
                }
            }
        }
        ids
    }

    /// `<bos>`, then `k` placeholders, then the encoding of `text`.
    ///
    /// When the total would exceed `max_len`, text tokens are dropped from the
    /// end; the placeholders are never truncated.
    pub fn encode_with_triggers(&self, text: &str, k: usize, max_len: usize) -> Result<TokenSequence> {
        if k >= max_len {
            return Err(Error::Config(format!(
                "{k} trigger tokens do not fit in a maximum length of {max_len}"
            )));
        }
        let mut ids = Vec::with_capacity(max_len.min(1 + k + text.len()));
        ids.push(self.bos_id());
        ids.extend(std::iter::repeat_n(self.trigger_id(), k));
        let mut text_ids = self.encode(text);
        text_ids.truncate(max_len - 1 - k);
        ids.extend(text_ids);
        Ok(TokenSequence {
            ids,
            trigger_positions: (1..=k).collect(),
        })
    }

    /// Decodes ids back to text. Reserved tokens other than `<unk>` decode to
    /// nothing; `<unk>` and invalid byte runs decode to U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            match self.entries.get(id as usize) {
                Some(Entry::Byte(b)) => bytes.push(*b),
                Some(Entry::Text(s)) => {
                    flush(&mut bytes, &mut out);
                    out.push_str(s);
                }
                Some(Entry::Special) if id == self.unk_id() => {
                    flush(&mut bytes, &mut out);
                    out.push('\u{FFFD}');
                }
                Some(Entry::Special) => {}
                None => {
                    flush(&mut bytes, &mut out);
                    out.push('\u{FFFD}');
                }
            }
        }
        flush(&mut bytes, &mut out);
        out
    }

    /// Fraction of `<unk>` ids in the encoding of `texts`.
    pub fn unk_rate<S: AsRef<str>>(&self, texts: &[S]) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for t in texts {
            let ids = self.encode(t.as_ref());
            total += ids.len();
            unk += ids.iter().filter(|&&id| id == self.unk_id()).count();
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// Serialises the vocabulary: magic line, reserved and choice id lines, a
    /// token count, then one escaped token per line in id order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{VOCAB_MAGIC}").unwrap();
        writeln!(
            s,
            "reserved trigger={} pad={} unk={} bos={}",
            self.trigger_id(),
            self.pad_id(),
            self.unk_id(),
            self.bos_id()
        )
        .unwrap();
        let [a, b, c, d] = self.choice_ids();
        writeln!(s, "choices A={a} B={b} C={c} D={d}").unwrap();
        writeln!(s, "tokens {}", self.tokens.len()).unwrap();
        for t in &self.tokens {
            writeln!(s, "{}", escape(t)).unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(r: impl BufRead) -> Result<Vocabulary> {
        let err = |m: String| format_err("vocabulary", m);
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| err(format!("missing {what}")))?
                .map_err(Error::from)
        };
        if next("header")? != VOCAB_MAGIC {
            return Err(err("bad magic line".into()));
        }
        let expect_fields = |line: String, prefix: &str, names: &[&str], want: &[u32]| -> Result<()> {
            let rest = line
                .strip_prefix(prefix)
                .ok_or_else(|| err(format!("expected `{prefix}` line")))?;
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != names.len() {
                return Err(err(format!("`{prefix}` line has {} fields", fields.len())));
            }
            for ((field, name), want) in fields.iter().zip(names).zip(want) {
                let value = field
                    .strip_prefix(name)
                    .and_then(|v| v.strip_prefix('='))
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| err(format!("bad field `{field}`")))?;
                if value != *want {
                    return Err(err(format!("{name} must be id {want}, found {value}")));
                }
            }
            Ok(())
        };
        expect_fields(next("reserved ids")?, "reserved ", &["trigger", "pad", "unk", "bos"], &[0, 1, 2, 3])?;
        expect_fields(next("choice ids")?, "choices ", &["A", "B", "C", "D"], &[4, 5, 6, 7])?;
        let count: usize = next("token count")?
            .strip_prefix("tokens ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| err("bad token count line".into()))?;
        let mut tokens = Vec::with_capacity(count);
        let mut entries = Vec::with_capacity(count);
        for id in 0..count {
            let tok = unescape(&next("token")?).map_err(err)?;
            let entry = if id < RESERVED.len() {
                if tok != RESERVED[id] {
                    return Err(err(format!("id {id} must be {}", RESERVED[id])));
                }
                Entry::Special
            } else if let Some(b) = parse_byte_token(&tok) {
                Entry::Byte(b)
            } else {
                Entry::Text(tok.clone())
            };
            tokens.push(tok);
            entries.push(entry);
        }
        for (i, letter) in CHOICE_LETTERS.iter().enumerate() {
            if tokens.get(RESERVED.len() + i).map(String::as_str) != Some(*letter) {
                return Err(err(format!("choice letter {letter} missing")));
            }
        }
        Ok(Self::from_parts(tokens, entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}
