use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manner {
    Stop,
    Fricative,
    Affricate,
    Nasal,
    Liquid,
    Vowel,
    Glide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Place {
    Labial,
    Coronal,
    Velar,
    Other,
}

impl Manner {
    pub const ALL: [Manner; 7] = [
        Manner::Stop,
        Manner::Fricative,
        Manner::Affricate,
        Manner::Nasal,
        Manner::Liquid,
        Manner::Vowel,
        Manner::Glide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Manner::Stop => "stop",
            Manner::Fricative => "fricative",
            Manner::Affricate => "affricate",
            Manner::Nasal => "nasal",
            Manner::Liquid => "liquid",
            Manner::Vowel => "vowel",
            Manner::Glide => "glide",
        }
    }
}

impl Place {
    pub const ALL: [Place; 4] = [Place::Labial, Place::Coronal, Place::Velar, Place::Other];

    pub fn name(self) -> &'static str {
        match self {
            Place::Labial => "labial",
            Place::Coronal => "coronal",
            Place::Velar => "velar",
            Place::Other => "other",
        }
    }
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Manner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Manner::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown manner class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phoneme {
    pub symbol: String,
    pub manner: Manner,
    pub place: Place,
    pub voiced: bool,
}

/// Phoneme set with articulatory classes. Label `i + 1` is phoneme `i`;
/// label 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Phoneme>", into = "Vec<Phoneme>")]
pub struct PhonemeInventory {
    phonemes: Vec<Phoneme>,
}

impl TryFrom<Vec<Phoneme>> for PhonemeInventory {
    type Error = Error;

    fn try_from(phonemes: Vec<Phoneme>) -> Result<Self> {
        Self::new(phonemes)
    }
}

impl From<PhonemeInventory> for Vec<Phoneme> {
    fn from(inv: PhonemeInventory) -> Self {
        inv.phonemes
    }
}

impl Default for PhonemeInventory {
    /// Twenty symbols covering all seven manners and four places:
    ///
    /// | manner    | symbols (place)                                   |
    /// |-----------|---------------------------------------------------|
    /// | stop      | p b (labial), t d (coronal), k g (velar)          |
    /// | fricative | f (labial), s z (coronal)                         |
    /// | affricate | ch jh (coronal)                                   |
    /// | nasal     | m (labial), n (coronal)                           |
    /// | liquid    | l r (coronal)                                     |
    /// | glide     | w (labial), y (other)                             |
    /// | vowel     | iy aa uw (other)                                  |
    fn default() -> Self {
        use Manner::*;
        use Place::*;
        let table = [
            ("p", Stop, Labial, false),
            ("b", Stop, Labial, true),
            ("t", Stop, Coronal, false),
            ("d", Stop, Coronal, true),
            ("k", Stop, Velar, false),
            ("g", Stop, Velar, true),
            ("f", Fricative, Labial, false),
            ("s", Fricative, Coronal, false),
            ("z", Fricative, Coronal, true),
            ("ch", Affricate, Coronal, false),
            ("jh", Affricate, Coronal, true),
            ("m", Nasal, Labial, true),
            ("n", Nasal, Coronal, true),
            ("l", Liquid, Coronal, true),
            ("r", Liquid, Coronal, true),
            ("w", Glide, Labial, true),
            ("y", Glide, Other, true),
            ("iy", Vowel, Other, true),
            ("aa", Vowel, Other, true),
            ("uw", Vowel, Other, true),
        ];
        let phonemes = table
            .into_iter()
            .map(|(symbol, manner, place, voiced)| Phoneme {
                symbol: symbol.to_string(),
                manner,
                place,
                voiced,
            })
            .collect();
        Self { phonemes }
    }
}

impl PhonemeInventory {
    pub fn new(phonemes: Vec<Phoneme>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::Config("empty phoneme inventory".into()));
        }
        for (i, p) in phonemes.iter().enumerate() {
            if p.symbol.is_empty() || p.symbol.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid phoneme symbol {:?}", p.symbol)));
            }
            if phonemes[..i].iter().any(|q| q.symbol == p.symbol) {
                return Err(Error::Config(format!("duplicate phoneme symbol {:?}", p.symbol)));
            }
        }
        Ok(Self { phonemes })
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Output classes of a recognizer over this inventory (phonemes + blank).
    pub fn num_classes(&self) -> usize {
        self.phonemes.len() + 1
    }

    pub fn phonemes(&self) -> &[Phoneme] {
        &self.phonemes
    }

    pub fn get(&self, symbol: &str) -> Option<&Phoneme> {
        self.phonemes.iter().find(|p| p.symbol == symbol)
    }

    pub fn label(&self, symbol: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p.symbol == symbol).map(|i| i + 1)
    }

    pub fn require_label(&self, symbol: &str) -> Result<usize> {
        self.label(symbol)
            .ok_or_else(|| Error::Alignment(format!("symbol {symbol:?} is not in the inventory")))
    }

    pub fn by_label(&self, label: usize) -> Option<&Phoneme> {
        label.checked_sub(1).and_then(|i| self.phonemes.get(i))
    }

    pub fn symbols(&self) -> Vec<String> {
        self.phonemes.iter().map(|p| p.symbol.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_covers_every_class() {
        let inv = PhonemeInventory::default();
        assert_eq!(inv.len(), 20);
        for m in Manner::ALL {
            assert!(inv.phonemes().iter().any(|p| p.manner == m), "{m}");
        }
        for pl in Place::ALL {
            assert!(inv.phonemes().iter().any(|p| p.place == pl), "{pl}");
        }
        assert_eq!(inv.label("p"), Some(1));
        assert_eq!(inv.by_label(1).unwrap().symbol, "p");
        assert!(inv.by_label(0).is_none());
    }

    #[test]
    fn duplicates_rejected() {
        let mut ph = PhonemeInventory::default().phonemes().to_vec();
        ph.push(ph[0].clone());
        assert!(PhonemeInventory::new(ph).is_err());
        let json = r#"[{"symbol":"a","manner":"vowel","place":"other","voiced":true},
                       {"symbol":"a","manner":"vowel","place":"other","voiced":true}]"#;
        assert!(serde_json::from_str::<PhonemeInventory>(json).is_err());
    }
}
