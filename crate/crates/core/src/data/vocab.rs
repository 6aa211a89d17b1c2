use std::collections::HashMap;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const SOS: &str = "sos";
pub const EOS: &str = "eos";
pub const PAD: &str = "pad";

const CROHME_TOKENS: &str = include_str!("../../resources/crohme_vocab.txt");

/// Bijective token ↔ id map. Ids follow list order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    sos_id: usize,
    eos_id: usize,
    pad_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list containing `sos`,
    /// `eos` and `pad`.
    pub fn new<S: AsRef<str>>(token_list: &[S]) -> Result<Self> {
        if token_list.is_empty() {
            return Err(Error::InvalidInput("empty token list".into()));
        }
        let mut id_of = HashMap::with_capacity(token_list.len());
        let mut tokens = Vec::with_capacity(token_list.len());
        for (id, t) in token_list.iter().enumerate() {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("token {t:?} is empty or contains whitespace")));
            }
            if id_of.insert(t.to_string(), id).is_some() {
                return Err(Error::DuplicateToken(t.to_string()));
            }
            tokens.push(t.to_string());
        }
        let special = |name: &'static str| id_of.get(name).copied().ok_or(Error::MissingSpecialToken(name));
        Ok(Vocabulary { sos_id: special(SOS)?, eos_id: special(EOS)?, pad_id: special(PAD)?, tokens, id_of })
    }

    /// The 111-class CROHME symbol set (specials included).
    pub fn crohme() -> Self {
        Self::from_lines(CROHME_TOKENS).expect("bundled vocabulary is valid")
    }

    /// One token per line; line number is the id.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_lines(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(io_err(path))
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Number of classes `C`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sos(&self) -> usize {
        self.sos_id
    }

    pub fn eos(&self) -> usize {
        self.eos_id
    }

    pub fn pad(&self) -> usize {
        self.pad_id
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.sos_id || id == self.eos_id || id == self.pad_id
    }

    /// Space-separated token string → ids (no terminator appended).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect()
    }

    /// Ids → space-separated tokens; unknown ids render as `<id>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).map_or_else(|| format!("<{i}>"), str::to_string))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
