//! The fifteen supported languages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Supported query languages, ordered by their two-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Language {
    Am,
    Ar,
    Cs,
    De,
    En,
    Es,
    Fa,
    Fr,
    Hi,
    It,
    Ja,
    Ko,
    Nl,
    Sw,
    Zh,
}

impl Language {
    pub const ALL: [Language; 15] = [
        Language::Am,
        Language::Ar,
        Language::Cs,
        Language::De,
        Language::En,
        Language::Es,
        Language::Fa,
        Language::Fr,
        Language::Hi,
        Language::It,
        Language::Ja,
        Language::Ko,
        Language::Nl,
        Language::Sw,
        Language::Zh,
    ];

    /// Language used whenever detection is ambiguous or unsupported.
    pub const FALLBACK: Language = Language::En;

    pub fn code(self) -> &'static str {
        match self {
            Language::Am => "am",
            Language::Ar => "ar",
            Language::Cs => "cs",
            Language::De => "de",
            Language::En => "en",
            Language::Es => "es",
            Language::Fa => "fa",
            Language::Fr => "fr",
            Language::Hi => "hi",
            Language::It => "it",
            Language::Ja => "ja",
            Language::Ko => "ko",
            Language::Nl => "nl",
            Language::Sw => "sw",
            Language::Zh => "zh",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::Am => "Amharic",
            Language::Ar => "Arabic",
            Language::Cs => "Czech",
            Language::De => "German",
            Language::En => "English",
            Language::Es => "Spanish",
            Language::Fa => "Persian (Farsi)",
            Language::Fr => "French",
            Language::Hi => "Hindi",
            Language::It => "Italian",
            Language::Ja => "Japanese",
            Language::Ko => "Korean",
            Language::Nl => "Dutch",
            Language::Sw => "Swahili",
            Language::Zh => "Chinese",
        }
    }

    /// Position in [`Language::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Parses a comma-separated list such as `en,es`.
    pub fn parse_list(s: &str) -> Result<Vec<Language>, Error> {
        s.split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Language::ALL
            .iter()
            .copied()
            .find(|l| l.code() == s)
            .ok_or_else(|| Error::UnknownLanguage(s.to_string()))
    }
}

impl Serialize for Language {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Language {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        code.parse().map_err(serde::de::Error::custom)
    }
}
