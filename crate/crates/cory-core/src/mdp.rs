//! Token-level sequential decision process: vocabulary, padded token
//! sequences, deterministic concatenation transitions.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub type TokenId = usize;

pub const PAD_SYMBOL: &str = "<pad>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const SEP_SYMBOL: &str = "<sep>";

pub const MIN_VOCAB: usize = 4;
pub const MAX_VOCAB: usize = 512;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("sequence is full (capacity {max_len})")]
    CapacityExceeded { max_len: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Symbol table. Token ids are 0..V-1 in file order; the reserved symbols
/// `<pad>`, `<eos>` and `<sep>` must all be present and distinct.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    pad_id: TokenId,
    eos_id: TokenId,
    sep_id: TokenId,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self, MdpError> {
        let v = symbols.len();
        if !(MIN_VOCAB..=MAX_VOCAB).contains(&v) {
            return Err(MdpError::InvalidVocab(format!(
                "size {v} outside {MIN_VOCAB}..={MAX_VOCAB}"
            )));
        }
        let mut index = HashMap::with_capacity(v);
        for (id, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(MdpError::InvalidVocab(format!(
                    "symbol {id:?} is empty or contains whitespace: {s:?}"
                )));
            }
            if index.insert(s.clone(), id).is_some() {
                return Err(MdpError::InvalidVocab(format!("duplicate symbol {s:?}")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| MdpError::InvalidVocab(format!("missing reserved symbol {name}")))
        };
        let pad_id = special(PAD_SYMBOL)?;
        let eos_id = special(EOS_SYMBOL)?;
        let sep_id = special(SEP_SYMBOL)?;
        // distinctness is implied by the duplicate check above
        Ok(Self {
            symbols,
            index,
            pad_id,
            eos_id,
            sep_id,
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn sep_id(&self) -> TokenId {
        self.sep_id
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// One symbol per line, line index = token id.
    pub fn load(path: &Path) -> Result<Self, MdpError> {
        let file = std::fs::File::open(path)?;
        let mut symbols = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            symbols.push(line?.trim().to_string());
        }
        Self::new(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<(), MdpError> {
        let mut f = std::fs::File::create(path)?;
        for s in &self.symbols {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

/// A fixed-capacity token sequence. The first `real_len` positions hold real
/// tokens; every position at or past `real_len` holds the pad id. An eos, if
/// present, is the last real token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    real_len: usize,
    pad_id: TokenId,
    eos_id: TokenId,
}

impl TokenSeq {
    pub fn empty(vocab: &Vocab, max_len: usize) -> Self {
        Self {
            ids: vec![vocab.pad_id(); max_len],
            real_len: 0,
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        }
    }

    /// Empty sequence sharing `other`'s pad/eos ids, with its own capacity.
    pub fn empty_like(other: &TokenSeq, max_len: usize) -> Self {
        Self {
            ids: vec![other.pad_id; max_len],
            real_len: 0,
            pad_id: other.pad_id,
            eos_id: other.eos_id,
        }
    }

    pub fn from_tokens(
        vocab: &Vocab,
        tokens: &[TokenId],
        max_len: usize,
    ) -> Result<Self, MdpError> {
        if tokens.len() > max_len {
            return Err(MdpError::CapacityExceeded { max_len });
        }
        debug_assert!(tokens.iter().all(|&t| t != vocab.pad_id()));
        let mut ids = vec![vocab.pad_id(); max_len];
        ids[..tokens.len()].copy_from_slice(tokens);
        Ok(Self {
            ids,
            real_len: tokens.len(),
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        })
    }

    pub fn real_len(&self) -> usize {
        self.real_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The real-token prefix, pads excluded.
    pub fn real_tokens(&self) -> &[TokenId] {
        &self.ids[..self.real_len]
    }

    /// The full padded buffer.
    pub fn padded(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn last_real(&self) -> Option<TokenId> {
        self.real_len.checked_sub(1).map(|i| self.ids[i])
    }

    pub fn is_empty(&self) -> bool {
        self.real_len == 0
    }

    /// Returns a new sequence with `token` appended; the input is unchanged.
    pub fn append(&self, token: TokenId) -> Result<TokenSeq, MdpError> {
        if self.real_len == self.ids.len() {
            return Err(MdpError::CapacityExceeded {
                max_len: self.ids.len(),
            });
        }
        debug_assert!(
            token != self.pad_id,
            "pad is a storage convention, not a decision"
        );
        debug_assert!(self.last_real() != Some(self.eos_id), "append past eos");
        let mut next = self.clone();
        next.ids[next.real_len] = token;
        next.real_len += 1;
        Ok(next)
    }

    /// True iff the last real token is eos or the sequence is at capacity.
    pub fn is_complete(&self) -> bool {
        self.real_len == self.ids.len() || self.last_real() == Some(self.eos_id)
    }

    /// The real tokens with a trailing eos removed, if any.
    pub fn real_tokens_without_eos(&self) -> &[TokenId] {
        let toks = self.real_tokens();
        match toks.last() {
            Some(&t) if t == self.eos_id => &toks[..toks.len() - 1],
            _ => toks,
        }
    }

    /// Real tokens of `self` followed by the real tokens of `other`, in a
    /// sequence whose capacity is exactly the combined length.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = Vec::with_capacity(self.real_len + other.real_len);
        ids.extend_from_slice(self.real_tokens());
        ids.extend_from_slice(other.real_tokens());
        let real_len = ids.len();
        Self {
            ids,
            real_len,
            pad_id: self.pad_id,
            eos_id: self.eos_id,
        }
    }

    /// Copy of this sequence with a larger capacity (extra pads on the right).
    pub fn with_capacity(&self, max_len: usize) -> Result<TokenSeq, MdpError> {
        if self.real_len > max_len {
            return Err(MdpError::CapacityExceeded { max_len });
        }
        let mut ids = vec![self.pad_id; max_len];
        ids[..self.real_len].copy_from_slice(self.real_tokens());
        Ok(Self {
            ids,
            real_len: self.real_len,
            pad_id: self.pad_id,
            eos_id: self.eos_id,
        })
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.real_tokens().iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

/// One step of the deterministic concatenation dynamics.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: TokenSeq,
    pub token: TokenId,
    pub reward: f64,
    pub next_state: TokenSeq,
    pub is_terminal: bool,
}

/// Materializes the transition chain of an episode: starting from `state0`,
/// each action token is appended in turn and paired with its reward. The
/// final transition is terminal.
pub fn episode_transitions(
    state0: &TokenSeq,
    action_tokens: &[TokenId],
    rewards: &[f64],
) -> Result<Vec<Transition>, MdpError> {
    assert_eq!(action_tokens.len(), rewards.len());
    let mut out = Vec::with_capacity(action_tokens.len());
    let mut state = state0.clone();
    for (i, (&tok, &r)) in action_tokens.iter().zip(rewards).enumerate() {
        let next = state.append(tok)?;
        out.push(Transition {
            state: state.clone(),
            token: tok,
            reward: r,
            next_state: next.clone(),
            is_terminal: i + 1 == action_tokens.len(),
        });
        state = next;
    }
    Ok(out)
}
