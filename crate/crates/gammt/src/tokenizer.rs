//! Character-level vocabulary and corpus ingestion.
//!
//! The vocabulary is the sorted set of distinct characters of a corpus plus a
//! reserved end-of-sequence token appended last, so `eos` always has the
//! highest id. Token ids are dense in `[0, vocab_size)`.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Literal spelled in vocabulary files for the end-of-sequence token.
pub const EOS_LABEL: &str = "<eos>";

/// Immutable bijective token <-> id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Vocabulary {
    /// Build from a corpus: distinct characters (newlines excluded) sorted by
    /// code point, with the eos token appended. Deterministic for a given
    /// corpus.
    pub fn from_corpus(corpus: &str) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("corpus is empty".to_string()));
        }
        let set: BTreeSet<char> = corpus
            .chars()
            .filter(|c| *c != '\n' && *c != '\r')
            .collect();
        if set.is_empty() {
            return Err(Error::Config(
                "corpus contains no tokenizable characters".to_string(),
            ));
        }
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocabulary { chars, ids }
    }

    /// Total number of ids, eos included.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn eos_id(&self) -> usize {
        self.chars.len()
    }

    /// Printable label for an id (`<eos>` for the eos token).
    pub fn label(&self, id: usize) -> Result<String> {
        if id == self.eos_id() {
            Ok(EOS_LABEL.to_string())
        } else if id < self.chars.len() {
            Ok(self.chars[id].to_string())
        } else {
            Err(Error::IdOutOfRange {
                id,
                vocab: self.size(),
            })
        }
    }

    /// Encode text to ids. Never emits the eos id; unknown characters are an
    /// error naming the character and its offset.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(offset, token)| {
                self.ids
                    .get(&token)
                    .copied()
                    .ok_or(Error::UnknownToken { token, offset })
            })
            .collect()
    }

    /// Decode ids to text. The eos token decodes to the empty string, so a
    /// generated sequence prints as plain text.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size() {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: self.size(),
                });
            }
            if id != self.eos_id() {
                out.push(self.chars[id]);
            }
        }
        Ok(out)
    }

    /// Serialize as the vocabulary file format: one token per line in id
    /// order, final line the eos literal.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for c in &self.chars {
            s.push(*c);
            s.push('\n');
        }
        s.push_str(EOS_LABEL);
        s.push('\n');
        s
    }

    /// Parse the vocabulary file format written by [`Self::to_file_string`].
    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.is_empty() {
            return Err(Error::Config("vocabulary file is empty".to_string()));
        }
        let (last, rest) = lines.split_last().unwrap();
        if *last != EOS_LABEL {
            return Err(Error::Config(format!(
                "vocabulary file must end with the line {EOS_LABEL:?}, found {last:?}"
            )));
        }
        let mut chars = Vec::with_capacity(rest.len());
        for (i, line) in rest.iter().enumerate() {
            let mut it = line.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(Error::Config(format!(
                    "vocabulary line {} is not a single character: {line:?}",
                    i + 1
                )));
            };
            chars.push(c);
        }
        let vocab = Self::from_chars(chars);
        if vocab.ids.len() != vocab.chars.len() {
            return Err(Error::Config(
                "vocabulary file contains duplicate tokens".to_string(),
            ));
        }
        Ok(vocab)
    }

    /// Atomic write (temp file then rename), like checkpoints.
    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_file_string().as_bytes())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_string(&text)
    }
}

/// Encode each non-empty corpus line and terminate it with eos. Lines longer
/// than `max_len - 1` tokens are rejected, so every sequence fits the model's
/// maximum input length with its eos terminator.
pub fn encode_corpus_lines(
    corpus: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut sequences = Vec::new();
    for (lineno, line) in corpus.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut ids = vocab.encode(line)?;
        if ids.len() + 1 > max_len {
            return Err(Error::Config(format!(
                "corpus line {}: sequence length {} exceeds maximum {max_len}",
                lineno + 1,
                ids.len() + 1,
            )));
        }
        ids.push(vocab.eos_id());
        sequences.push(ids);
    }
    if sequences.is_empty() {
        return Err(Error::Config(
            "corpus contains no non-empty lines".to_string(),
        ));
    }
    Ok(sequences)
}
