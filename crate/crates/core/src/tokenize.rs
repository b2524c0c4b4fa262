//! Tokenization schemes and the shared vocabulary.
//!
//! Two analyzers are supported: lowercase whitespace splitting for
//! space-delimited text, and overlapping character n-grams for scripts
//! without word delimiters (CJK). Vocabulary ids 0..3 are reserved for
//! `[PAD]`, `[MASK]` and `[UNK]` and are never produced from raw text.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UNK: TokenId = 2;
pub const NUM_SPECIAL: usize = 3;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["[PAD]", "[MASK]", "[UNK]"];
const VOCAB_MAGIC: &str = "#msret-vocab v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TokenizerScheme {
    #[default]
    WhitespaceLower,
    CharNgram(usize),
}

impl fmt::Display for TokenizerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerScheme::WhitespaceLower => f.write_str("whitespace_lower"),
            TokenizerScheme::CharNgram(n) => write!(f, "char_ngram({n})"),
        }
    }
}

impl FromStr for TokenizerScheme {
    type Err = Error;

    /// Accepts `whitespace_lower`, `char_ngram(N)` and the shell-friendly `char_ngram:N`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "whitespace_lower" {
            return Ok(TokenizerScheme::WhitespaceLower);
        }
        let n = s
            .strip_prefix("char_ngram(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("char_ngram:"))
            .and_then(|n| n.parse::<usize>().ok());
        match n {
            Some(n) if n >= 1 => Ok(TokenizerScheme::CharNgram(n)),
            _ => Err(Error::InvalidConfig(format!("unknown tokenizer scheme `{s}`"))),
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Splits `text` into tokens under `scheme`.
///
/// `char_ngram(n)` emits every overlapping n-gram of the text with all
/// whitespace removed; a non-empty stream shorter than `n` yields itself as
/// a single token so short inputs stay searchable.
pub fn tokenize(text: &str, scheme: TokenizerScheme) -> Vec<String> {
    match scheme {
        TokenizerScheme::WhitespaceLower => text
            .split_whitespace()
            .map(|w| w.trim_matches(is_punctuation).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect(),
        TokenizerScheme::CharNgram(n) => {
            let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
            if chars.is_empty() {
                Vec::new()
            } else if chars.len() < n {
                vec![chars.iter().collect()]
            } else {
                chars.windows(n).map(|w| w.iter().collect()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    scheme: TokenizerScheme,
    id_to_token: Vec<String>,
    // Content tokens only; specials are addressed by id.
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_content(scheme: TokenizerScheme, content: Vec<String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::with_capacity(content.len());
        for tok in content {
            let id = id_to_token.len() as TokenId;
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::DuplicateId(tok));
            }
            id_to_token.push(tok);
        }
        Ok(Vocabulary {
            scheme,
            id_to_token,
            token_to_id,
        })
    }

    pub fn scheme(&self) -> TokenizerScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// True when only the special tokens are present.
    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Tokenizes with this vocabulary's scheme; unknown tokens map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, self.scheme)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Short stable checksum over the scheme and the id assignment.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scheme.to_string().as_bytes());
        for tok in &self.id_to_token {
            h.update(b"\n");
            h.update(tok.as_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_MAGIC} scheme={}", self.scheme)?;
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::parse(source, 1, e.to_string()))?
            .ok_or_else(|| Error::parse(source, 1, "missing vocabulary header"))?;
        let scheme = header
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|r| r.trim().strip_prefix("scheme="))
            .ok_or_else(|| Error::parse(source, 1, format!("bad vocabulary header `{header}`")))?
            .parse()?;
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            tokens.push(line.map_err(|e| Error::parse(source, i + 2, e.to_string()))?);
        }
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_NAMES {
            return Err(Error::parse(source, 2, "vocabulary must start with the special tokens"));
        }
        Vocabulary::from_content(scheme, tokens.split_off(NUM_SPECIAL))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::read(BufReader::new(file), &path.display().to_string())
    }
}

/// Builds a vocabulary from corpus token frequencies.
///
/// Tokens with frequency `>= min_count` get ids in descending frequency
/// order, ties broken by token text, so the result depends only on the
/// corpus multiset. `min_count` of 0 behaves like 1.
pub fn build_vocabulary(docs: &[Document], scheme: TokenizerScheme, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for tok in tokenize(&doc.text, scheme) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let min_count = min_count.max(1);
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_content(scheme, kept.into_iter().map(|(t, _)| t).collect())
        .expect("counted tokens are distinct")
}

/// Encodes `text` after checking that `scheme` matches the vocabulary.
pub fn encode_ids(text: &str, scheme: TokenizerScheme, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    if scheme != vocab.scheme() {
        return Err(Error::SchemeMismatch {
            expected: vocab.scheme().to_string(),
            found: scheme.to_string(),
        });
    }
    Ok(vocab.encode(text))
}
