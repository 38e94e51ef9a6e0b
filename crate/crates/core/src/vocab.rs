//! Character vocabulary shared by the recognizer and the language model.
//!
//! Id layout for `n` symbols: `0` is the CTC blank, `1..=n` are symbols,
//! `n + 1` is end-of-sentence and `n + 2` is start-of-sentence. This makes
//! CTC classes equal to ids (`V ∪ {blank}`), decoder classes equal to
//! `id - 1` (`V ∪ {eos}`), and input-embedding rows equal to ids with the
//! start symbol on row 0.

use crate::error::{Error, Result};

pub type Token = usize;

pub const BLANK: Token = 0;

/// Literal spellings used in text files.
pub const BOS_LITERAL: &str = "⟨s⟩";
pub const EOS_LITERAL: &str = "⟨/s⟩";

/// Default symbol inventory: ASR text uses the lowercase letters and space;
/// the remaining symbols are needed by prompts.
pub const DEFAULT_SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ.,'\"|";

/// Symbol separating prompt segments.
pub const SEPARATOR: char = '|';
pub const QUOTE: char = '"';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_SYMBOLS).expect("default symbols are distinct")
    }
}

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::invalid(format!("duplicate symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        Ok(Vocabulary { symbols })
    }

    /// |V|, the number of non-special symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> Token {
        BLANK
    }

    pub fn eos(&self) -> Token {
        self.symbols.len() + 1
    }

    pub fn bos(&self) -> Token {
        self.symbols.len() + 2
    }

    pub fn is_symbol(&self, t: Token) -> bool {
        (1..=self.symbols.len()).contains(&t)
    }

    /// Output width of CTC and decoder heads: |V| + 1.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Rows of an input embedding table (start symbol plus every symbol).
    pub fn embed_rows(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Decoder-head class of a symbol or end-of-sentence.
    pub fn dec_class(&self, t: Token) -> usize {
        debug_assert!(t >= 1 && t <= self.eos());
        t - 1
    }

    pub fn dec_token(&self, class: usize) -> Token {
        class + 1
    }

    /// Embedding row of a decoder / LM input token.
    pub fn embed_row(&self, t: Token) -> usize {
        if t == self.bos() {
            0
        } else {
            t
        }
    }

    pub fn symbol(&self, c: char) -> Option<Token> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    pub fn char_of(&self, t: Token) -> Option<char> {
        self.is_symbol(t).then(|| self.symbols[t - 1])
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.chars()
            .map(|c| self.symbol(c).ok_or(Error::Unencodable(c)))
            .collect()
    }

    /// Symbols only; specials render as their literals.
    pub fn decode(&self, tokens: &[Token]) -> String {
        let mut s = String::new();
        for &t in tokens {
            if let Some(c) = self.char_of(t) {
                s.push(c);
            } else if t == self.bos() {
                s.push_str(BOS_LITERAL);
            } else if t == self.eos() {
                s.push_str(EOS_LITERAL);
            } else {
                s.push_str("⟨b⟩");
            }
        }
        s
    }

    /// Inverse of [`decode`](Self::decode) for sequences containing
    /// start/end literals.
    pub fn encode_with_specials(&self, text: &str) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix(BOS_LITERAL) {
                out.push(self.bos());
                rest = r;
            } else if let Some(r) = rest.strip_prefix(EOS_LITERAL) {
                out.push(self.eos());
                rest = r;
            } else {
                let c = rest.chars().next().expect("non-empty");
                out.push(self.symbol(c).ok_or(Error::Unencodable(c))?);
                rest = &rest[c.len_utf8()..];
            }
        }
        Ok(out)
    }

    /// Number of adjacent equal pairs, which CTC must separate with blanks.
    pub fn adjacent_repeats(tokens: &[Token]) -> usize {
        tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames a CTC alignment of `tokens` needs.
    pub fn min_ctc_frames(tokens: &[Token]) -> usize {
        tokens.len() + Self::adjacent_repeats(tokens)
    }
}
