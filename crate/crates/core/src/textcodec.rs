//! Word-level tokenizer and prompt rendering.
//!
//! A dialogue renders as
//!
//! ```text
//! BOS Q <question> [STU <s0> END_TURN] (STU <s_k> END_TURN TUT <t_k> END_TURN)*
//! ```
//!
//! The example for turn pair `k` is the prefix ending with `t_k`'s
//! END_TURN, with the target mask set on `t_k` and that END_TURN. Because
//! each example is a prefix of the full rendering, one causal forward pass
//! over the whole dialogue scores every turn at once.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use crate::corpus::{Corpus, Dialogue, Role, Split};
use crate::error::{Error, Result};
use crate::records;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const Q: TokenId = 4;
pub const STU: TokenId = 5;
pub const TUT: TokenId = 6;
pub const END_TURN: TokenId = 7;

const SPECIALS: [&str; 8] = ["<pad>", "<unk>", "<bos>", "<eos>", "<q>", "<stu>", "<tut>", "<end_turn>"];
pub const N_SPECIAL: usize = SPECIALS.len();

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < N_SPECIAL
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    fn from_words(words: Vec<String>) -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index.get(&w).copied().unwrap_or(UNK)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary of {}", self.vocab_size())))?;
            if !is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// `<id>\t<token>` per line, specials first.
    pub fn to_vocab_file(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        records::write_file(path, self.to_vocab_file().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = records::read_file(path)?;
        let mut words = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let fail = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| fail("expected `<id>\\t<token>`".into()))?;
            let id: usize = id.parse().map_err(|_| fail(format!("bad id {id:?}")))?;
            if id != idx {
                return Err(fail(format!("ids must be dense; expected {idx}, found {id}")));
            }
            if idx < N_SPECIAL {
                if tok != SPECIALS[idx] {
                    return Err(fail(format!("expected special {}, found {tok}", SPECIALS[idx])));
                }
            } else {
                words.push(tok.to_string());
            }
        }
        if words.len() + N_SPECIAL != text.lines().count() || text.lines().count() < N_SPECIAL {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "vocabulary file is missing special tokens".into(),
            });
        }
        Ok(Tokenizer::from_words(words))
    }
}

/// Frequency-ranked word vocabulary from the train split, at most
/// `max_size` entries including specials. Ties break lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Tokenizer> {
    if max_size < N_SPECIAL + 1 {
        return Err(Error::Config(format!(
            "max vocabulary size {max_size} leaves no room beyond {N_SPECIAL} special tokens"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in corpus.split(Split::Train) {
        let texts = std::iter::once(d.question.text.as_str()).chain(d.turns.iter().map(|t| t.text.as_str()));
        for text in texts {
            for w in text.split_whitespace() {
                let w = w.to_lowercase();
                if SPECIALS.contains(&w.as_str()) {
                    continue;
                }
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - N_SPECIAL);
    Ok(Tokenizer::from_words(ranked.into_iter().map(|(w, _)| w).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub tokens: Vec<TokenId>,
    pub target_mask: Vec<bool>,
}

impl RenderedExample {
    /// Range of mask-true positions; the mask is always a contiguous suffix.
    pub fn target_span(&self) -> Range<usize> {
        let start = self.target_mask.iter().position(|&m| m).unwrap_or(self.tokens.len());
        start..self.tokens.len()
    }

    /// Tokens up to and including the TUT marker that opens the target.
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.target_span().start]
    }
}

/// A whole dialogue rendered once, with the target span of every turn pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullRender {
    pub tokens: Vec<TokenId>,
    /// `spans[k - 1]` covers `t_k` and its END_TURN.
    pub spans: Vec<Range<usize>>,
}

pub fn render_dialogue(tok: &Tokenizer, dialogue: &Dialogue) -> FullRender {
    let mut tokens = vec![BOS, Q];
    tokens.extend(tok.encode(&dialogue.question.text));
    let mut spans = Vec::new();
    for turn in &dialogue.turns {
        match turn.role {
            Role::Student => {
                tokens.push(STU);
                tokens.extend(tok.encode(&turn.text));
                tokens.push(END_TURN);
            }
            Role::Tutor => {
                tokens.push(TUT);
                let start = tokens.len();
                tokens.extend(tok.encode(&turn.text));
                tokens.push(END_TURN);
                spans.push(start..tokens.len());
            }
        }
    }
    FullRender { tokens, spans }
}

/// The training example for turn pair `k` (1-based).
pub fn render_context(
    tok: &Tokenizer,
    dialogue: &Dialogue,
    k: usize,
    context_len: usize,
) -> Result<RenderedExample> {
    let full = render_dialogue(tok, dialogue);
    if k == 0 || k > full.spans.len() {
        return Err(Error::Invalid(format!(
            "dialogue {}: turn pair {k} out of range 1..={}",
            dialogue.dialogue_id,
            full.spans.len()
        )));
    }
    let span = full.spans[k - 1].clone();
    if span.end > context_len {
        return Err(Error::Invalid(format!(
            "dialogue {} turn {k} renders to {} tokens, over the context length {context_len}",
            dialogue.dialogue_id, span.end
        )));
    }
    let mut tokens = full.tokens;
    tokens.truncate(span.end);
    let target_mask = (0..span.end).map(|i| span.contains(&i)).collect();
    Ok(RenderedExample { tokens, target_mask })
}
