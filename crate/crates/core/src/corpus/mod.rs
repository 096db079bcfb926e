//! Dialogue data model, corpus ingestion, synthetic generation and label derivation.

mod labels;
mod multiwoz;
mod synthetic;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

pub use labels::{derive_alignment_labels, order_slots, AlignPolicy};
pub use multiwoz::{
    corpus_to_json, load_multiwoz, ontology_to_json, parse_corpus, parse_ontology, save_corpus,
    CORPUS_FILE, ONTOLOGY_FILE,
};
pub use synthetic::{
    generate_synthetic_corpus, has_confusion_pair, DomainSpec, OntologySpec, SlotSpec,
};
pub use vocab::{
    build_input_sequence, split_words, InputSequence, Segment, Vocab, BLANK, CLS, PAD, SEP, UNK,
};

pub const NONE_VALUE: &str = "none";
pub const DONTCARE_VALUE: &str = "dontcare";

/// One exchange: the system utterance and the user query of turn `index`,
/// plus the cumulative gold state after it. Slots absent from `state` are "none".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub index: usize,
    pub system: String,
    pub user: String,
    pub state: BTreeMap<String, String>,
}

impl Turn {
    pub fn value(&self, slot: &str) -> &str {
        self.state.get(slot).map_or(NONE_VALUE, String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub domains: BTreeSet<String>,
}

impl Dialogue {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// Turn `t` (1-based).
    pub fn turn(&self, t: usize) -> &Turn {
        &self.turns[t - 1]
    }

    /// Gold values of every ontology slot at turn `t` (`t = 0` is the empty state).
    pub fn state_vector<'a>(&'a self, t: usize, ontology: &Ontology) -> Vec<&'a str> {
        ontology
            .slots()
            .iter()
            .map(|s| {
                if t == 0 {
                    NONE_VALUE
                } else {
                    self.turn(t).value(s)
                }
            })
            .collect()
    }
}

/// Domain prefix of a `domain-slot` name.
pub fn slot_domain(slot: &str) -> &str {
    slot.split('-').next().unwrap_or(slot)
}

/// Lexicographically ordered slot catalogue with per-slot candidate values.
///
/// Every candidate list starts with "none" and contains "dontcare".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    slots: Vec<String>,
    values: Vec<Vec<String>>,
}

impl Ontology {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Schema("ontology defines no slots".into()));
        }
        let mut slots = Vec::with_capacity(map.len());
        let mut values = Vec::with_capacity(map.len());
        for (slot, vals) in map {
            if slot.trim().is_empty() {
                return Err(Error::Schema("empty slot name".into()));
            }
            let mut list = vec![NONE_VALUE.to_string()];
            let mut seen: BTreeSet<String> = BTreeSet::from([NONE_VALUE.to_string()]);
            for v in vals.into_iter().chain([DONTCARE_VALUE.to_string()]) {
                let v = v.trim().to_string();
                if v.is_empty() {
                    return Err(Error::Schema(format!(
                        "slot `{slot}` has an empty candidate value"
                    )));
                }
                if seen.insert(v.clone()) {
                    list.push(v);
                }
            }
            slots.push(slot);
            values.push(list);
        }
        Ok(Ontology { slots, values })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn slot_index(&self, slot: &str) -> Option<usize> {
        self.slots.binary_search_by(|s| s.as_str().cmp(slot)).ok()
    }

    pub fn candidates(&self, slot: usize) -> &[String] {
        &self.values[slot]
    }

    pub fn value_index(&self, slot: usize, value: &str) -> Option<usize> {
        self.values[slot].iter().position(|v| v == value)
    }

    pub fn to_map(&self) -> BTreeMap<String, Vec<String>> {
        self.slots
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Every distinct candidate string, sorted.
    pub fn unique_values(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.values.iter().flatten().collect();
        set.into_iter().cloned().collect()
    }
}

/// Gold alignment of one slot: the turn whose utterance carries its value, or BLANK.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlignTarget {
    Turn(usize),
    Blank,
}

impl AlignTarget {
    /// Row index in a `t + 1` alignment frame (turns first, BLANK last).
    pub fn row(self, t: usize) -> usize {
        match self {
            AlignTarget::Turn(i) => i - 1,
            AlignTarget::Blank => t,
        }
    }

    pub fn from_row(row: usize, t: usize) -> Self {
        if row >= t {
            AlignTarget::Blank
        } else {
            AlignTarget::Turn(row + 1)
        }
    }
}

impl Serialize for AlignTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlignTarget::Turn(i) => s.serialize_u64(*i as u64),
            AlignTarget::Blank => s.serialize_str("BLANK"),
        }
    }
}

/// Alignment targets of every slot when predicting at `turn`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentLabel {
    pub turn: usize,
    pub targets: Vec<AlignTarget>,
}

/// Permutation of slot indices: gold ranking order for the auxiliary task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotOrder(pub Vec<usize>);
