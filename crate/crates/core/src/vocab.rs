//! Fixed whitespace tokenizer over the synthetic vocabulary with a byte
//! fallback for anything else.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::synth::catalog;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Sentinel whose hidden state becomes the user embedding.
pub const USER_EMB: u32 = 3;
/// Separator between the hierarchical user tokens and the query text.
pub const NEWLINE: u32 = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<USER_EMB>", "<nl>"];
const BYTE_BASE: u32 = SPECIALS.len() as u32;
const WORD_BASE: u32 = BYTE_BASE + 256;

#[derive(Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// The process-wide tokenizer. Its id assignment never changes.
    pub fn get() -> &'static Tokenizer {
        static TOK: OnceLock<Tokenizer> = OnceLock::new();
        TOK.get_or_init(Tokenizer::build)
    }

    fn build() -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let all = catalog::event_words()
            .into_iter()
            .chain(catalog::TEMPLATE_WORDS.iter().map(|s| s.to_string()))
            .chain(catalog::PUNCTUATION.iter().map(|s| s.to_string()));
        for w in all {
            if !index.contains_key(&w) {
                index.insert(w.clone(), WORD_BASE + words.len() as u32);
                words.push(w);
            }
        }
        Self { words, index }
    }

    /// Number of ids in use; a model's vocabulary must be at least this big.
    pub fn len(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        id.checked_sub(WORD_BASE)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut piece = lower.as_str();
            let mut trailing = Vec::new();
            while let Some(c) = piece.chars().last() {
                if piece.len() > 1 && catalog::PUNCTUATION.contains(&c.to_string().as_str()) {
                    trailing.push(c.to_string());
                    piece = &piece[..piece.len() - c.len_utf8()];
                } else {
                    break;
                }
            }
            self.push_piece(piece, &mut out);
            for p in trailing.iter().rev() {
                self.push_piece(p, &mut out);
            }
        }
        out
    }

    fn push_piece(&self, piece: &str, out: &mut Vec<u32>) {
        match self.index.get(piece) {
            Some(&id) => out.push(id),
            None => out.extend(piece.bytes().map(|b| BYTE_BASE + b as u32)),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !bytes.is_empty() {
                pieces.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut pieces);
            if let Some(w) = self.word(id) {
                pieces.push(w.to_string());
            } else if let Some(s) = SPECIALS.get(id as usize) {
                pieces.push(s.to_string());
            }
        }
        flush(&mut bytes, &mut pieces);
        pieces.join(" ")
    }
}

/// Tokens of the query segment: the newline separator followed by the query
/// text. Its length is the query length `L_q` used by cost accounting.
pub fn query_segment(query: &str) -> Vec<u32> {
    let mut ids = vec![NEWLINE];
    ids.extend(Tokenizer::get().encode(query));
    ids
}
