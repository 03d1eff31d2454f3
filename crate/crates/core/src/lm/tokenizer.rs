use serde::{Deserialize, Serialize};

use super::LmError;

/// Byte-level tokenizer over the alphabet observed in a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Alphabet", into = "Alphabet")]
pub struct TokenizerSpec {
    alphabet: Vec<u8>,
    lookup: Vec<Option<u16>>,
}

#[derive(Serialize, Deserialize)]
struct Alphabet {
    alphabet: Vec<u8>,
}

impl From<Alphabet> for TokenizerSpec {
    fn from(a: Alphabet) -> Self {
        Self::from_alphabet(a.alphabet)
    }
}

impl From<TokenizerSpec> for Alphabet {
    fn from(t: TokenizerSpec) -> Self {
        Alphabet { alphabet: t.alphabet }
    }
}

impl TokenizerSpec {
    /// Builds the table from every distinct byte of `text`, in byte order.
    pub fn from_corpus(text: &str) -> Self {
        let mut seen = [false; 256];
        for &b in text.as_bytes() {
            seen[b as usize] = true;
        }
        Self::from_alphabet((0..=255u8).filter(|&b| seen[b as usize]).collect())
    }

    pub fn from_alphabet(mut alphabet: Vec<u8>) -> Self {
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut lookup = vec![None; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            lookup[b as usize] = Some(i as u16);
        }
        Self { alphabet, lookup }
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, LmError> {
        let mut ids = Vec::with_capacity(text.len());
        for (pos, ch) in text.char_indices() {
            let mut buf = [0u8; 4];
            for &b in ch.encode_utf8(&mut buf).as_bytes() {
                match self.lookup[b as usize] {
                    Some(id) => ids.push(id as usize),
                    None => return Err(LmError::Untokenizable { ch, position: pos }),
                }
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| self.alphabet.get(i).copied()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
