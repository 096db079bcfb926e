use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use crate::error::{Error, Result};

use super::Dialogue;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const BLANK: u32 = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BLANK]"];

/// Lowercased split into alphanumeric runs and single punctuation marks.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens first, then every word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Integrity(
                "vocabulary is missing the reserved token prefix".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate vocabulary token `{t}`"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Special = 0,
    User = 1,
    System = 2,
}

/// `[CLS] Q₁ R₁ … Q_t R_t [SEP] [BLANK]` with per-token turn and segment ids.
///
/// `[CLS]` carries turn id 0, `[SEP]` turn `t` and `[BLANK]` the sentinel `t + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputSequence {
    pub turn: usize,
    pub ids: Vec<u32>,
    pub turn_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Token span of turn `i` at index `i − 1`; empty for truncated turns.
    pub turn_spans: Vec<Range<usize>>,
    pub blank_pos: usize,
    /// Number of oldest turns dropped to respect the length limit.
    pub truncated_turns: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Spans of every turn followed by the one-token BLANK span.
    pub fn slices(&self) -> Vec<Range<usize>> {
        let mut s = self.turn_spans.clone();
        s.push(self.blank_pos..self.blank_pos + 1);
        s
    }
}

pub fn build_input_sequence(
    dialogue: &Dialogue,
    t: usize,
    vocab: &Vocab,
    max_len: usize,
) -> Result<InputSequence> {
    if t == 0 || t > dialogue.num_turns() {
        return Err(Error::Input(format!(
            "turn {t} out of range for dialogue `{}` with {} turns",
            dialogue.id,
            dialogue.num_turns()
        )));
    }
    let encoded: Vec<(Vec<u32>, Vec<u32>)> = (1..=t)
        .map(|i| {
            let turn = dialogue.turn(i);
            (vocab.tokenize(&turn.user), vocab.tokenize(&turn.system))
        })
        .collect();
    let mut first = 0;
    let mut total: usize = encoded
        .iter()
        .map(|(q, r)| q.len() + r.len())
        .sum::<usize>()
        + 3;
    while total > max_len {
        if first + 1 == t {
            return Err(Error::Input(format!(
                "turn {t} of dialogue `{}` alone needs {total} tokens, limit is {max_len}",
                dialogue.id
            )));
        }
        total -= encoded[first].0.len() + encoded[first].1.len();
        first += 1;
    }
    let mut ids = Vec::with_capacity(total);
    let mut turn_ids = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(total);
    let mut turn_spans = vec![0..0; t];
    ids.push(CLS);
    turn_ids.push(0);
    segments.push(Segment::Special);
    for (k, (q, r)) in encoded.iter().enumerate().skip(first) {
        let start = ids.len();
        for (toks, seg) in [(q, Segment::User), (r, Segment::System)] {
            ids.extend_from_slice(toks);
            turn_ids.extend(std::iter::repeat_n(k + 1, toks.len()));
            segments.extend(std::iter::repeat_n(seg, toks.len()));
        }
        turn_spans[k] = start..ids.len();
    }
    ids.push(SEP);
    turn_ids.push(t);
    segments.push(Segment::Special);
    let blank_pos = ids.len();
    ids.push(BLANK);
    turn_ids.push(t + 1);
    segments.push(Segment::Special);
    Ok(InputSequence {
        turn: t,
        ids,
        turn_ids,
        segments,
        turn_spans,
        blank_pos,
        truncated_turns: first,
    })
}
