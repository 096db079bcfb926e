//! Utterance and schema encoders: small from-scratch transformer stacks.

use std::ops::Range;

use rand::Rng;

use crate::autograd::{AttentionMask, Graph, Var};
use crate::corpus::Ontology;
use crate::corpus::{InputSequence, Vocab, CLS};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Builder, Embedding, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Contextual token states of one input sequence.
#[derive(Clone, Debug)]
pub struct UtteranceEncoding {
    /// `[L × d]`.
    pub states: Var,
    /// Token span per turn, BLANK span last. Truncated turns have empty spans.
    pub slices: Vec<Range<usize>>,
}

#[derive(Clone, Debug)]
pub struct UtteranceEncoder {
    /// Shared with the schema encoder.
    pub token: Embedding,
    pub position: Embedding,
    pub segment: Embedding,
    pub turn: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub max_len: usize,
    pub max_turns: usize,
}

impl UtteranceEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        vocab_size: usize,
        cfg: AttentionConfig,
        layers: usize,
        max_len: usize,
        max_turns: usize,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(UtteranceEncoder {
            token: Embedding::new(b, "utterance.token", vocab_size, d)?,
            position: Embedding::new(b, "utterance.position", max_len, d)?,
            segment: Embedding::new(b, "utterance.segment", 3, d)?,
            // turn ids run 0..=max_turns + 1: [CLS] sentinel, turns, BLANK sentinel
            turn: Embedding::new(b, "utterance.turn", max_turns + 2, d)?,
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(b, &format!("utterance.layer{l}"), cfg))
                .collect::<Result<_>>()?,
            max_len,
            max_turns,
        })
    }

    /// Sum of token, position, segment and turn embeddings, before any block.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, seq: &InputSequence) -> Result<Var> {
        if seq.len() > self.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the encoder limit {}",
                seq.len(),
                self.max_len
            )));
        }
        if seq.turn > self.max_turns {
            return Err(Error::Input(format!(
                "turn {} exceeds the encoder limit of {} turns",
                seq.turn, self.max_turns
            )));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let segments: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        let tok = self.token.forward(g, store, &ids)?;
        let pos = self.position.forward(g, store, &positions)?;
        let seg = self.segment.forward(g, store, &segments)?;
        let turn = self.turn.forward(g, store, &seq.turn_ids)?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        g.add(x, turn)
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &InputSequence,
    ) -> Result<UtteranceEncoding> {
        let mut x = self.embed(g, store, seq)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, None)?;
        }
        Ok(UtteranceEncoding {
            states: x,
            slices: seq.slices(),
        })
    }
}

/// Every slot name and distinct candidate value packed into one token matrix.
#[derive(Clone, Debug)]
pub struct SchemaLayout {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// Sequence index of each token; tokens only attend within their sequence.
    pub groups: Vec<u32>,
    /// Row of each sequence's [CLS] token.
    pub cls_rows: Vec<usize>,
    pub num_slots: usize,
    /// Per slot, the sequence index of each candidate value.
    pub value_seqs: Vec<Vec<usize>>,
}

impl SchemaLayout {
    pub fn new(ontology: &Ontology, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let unique = ontology.unique_values();
        let mut layout = SchemaLayout {
            ids: Vec::new(),
            positions: Vec::new(),
            groups: Vec::new(),
            cls_rows: Vec::new(),
            num_slots: ontology.num_slots(),
            value_seqs: Vec::new(),
        };
        for text in ontology.slots().iter().chain(&unique) {
            let toks = schema_tokens(vocab, text, max_len)?;
            let seq = layout.cls_rows.len() as u32;
            layout.cls_rows.push(layout.ids.len());
            for (p, id) in toks.into_iter().enumerate() {
                layout.ids.push(id);
                layout.positions.push(p);
                layout.groups.push(seq);
            }
        }
        let j = ontology.num_slots();
        for s in 0..j {
            let seqs = ontology
                .candidates(s)
                .iter()
                .map(|v| {
                    j + unique
                        .binary_search(v)
                        .expect("candidate listed in unique values")
                })
                .collect();
            layout.value_seqs.push(seqs);
        }
        Ok(layout)
    }

    pub fn num_sequences(&self) -> usize {
        self.cls_rows.len()
    }
}

/// `[CLS]` followed by the tokens of `text`.
pub fn schema_tokens(vocab: &Vocab, text: &str, max_len: usize) -> Result<Vec<usize>> {
    let toks = vocab.tokenize(text);
    if toks.is_empty() {
        return Err(Error::Input(format!(
            "schema string `{text}` has no tokens"
        )));
    }
    if toks.len() + 1 > max_len {
        return Err(Error::Input(format!(
            "schema string `{text}` needs {} tokens, limit is {max_len}",
            toks.len() + 1
        )));
    }
    let mut ids = vec![CLS as usize];
    ids.extend(toks.iter().map(|&t| t as usize));
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct SchemaEncoder {
    pub position: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub max_len: usize,
}

impl SchemaEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        cfg: AttentionConfig,
        layers: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(SchemaEncoder {
            position: Embedding::new(b, "schema.position", max_len, cfg.model_dim)?,
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(b, &format!("schema.layer{l}"), cfg))
                .collect::<Result<_>>()?,
            max_len,
        })
    }

    /// Encodes packed sequences and returns their `[CLS]` rows, one per sequence.
    pub fn encode_packed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token: &Embedding,
        ids: &[usize],
        positions: &[usize],
        groups: &[u32],
        cls_rows: &[usize],
    ) -> Result<Var> {
        let tok = token.forward(g, store, ids)?;
        let pos = self.position.forward(g, store, positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = AttentionMask::groups(groups.to_vec(), groups.to_vec());
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(&mask))?;
        }
        g.gather_rows(x, cls_rows)
    }

    pub fn encode_layout(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token: &Embedding,
        layout: &SchemaLayout,
    ) -> Result<Var> {
        self.encode_packed(
            g,
            store,
            token,
            &layout.ids,
            &layout.positions,
            &layout.groups,
            &layout.cls_rows,
        )
    }

    /// Single-string encoding: the `[CLS]` row of `text` as a `[1 × d]` tensor.
    pub fn encode_text(
        &self,
        store: &ParamStore,
        token: &Embedding,
        vocab: &Vocab,
        text: &str,
    ) -> Result<Tensor> {
        let ids = schema_tokens(vocab, text, self.max_len)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let groups = vec![0; ids.len()];
        let mut g = Graph::new();
        let v = self.encode_packed(&mut g, store, token, &ids, &positions, &groups, &[0])?;
        Ok(g.value(v).clone())
    }
}

/// Slot vectors and per-slot candidate value vectors inside a graph.
#[derive(Clone, Debug)]
pub struct SchemaEncoding {
    /// `[J × d]`.
    pub slots: Var,
    /// `[|V_j| × d]` per slot.
    pub values: Vec<Var>,
}

impl SchemaEncoding {
    pub fn from_cls(g: &mut Graph, cls: Var, layout: &SchemaLayout) -> Result<Self> {
        let slot_rows: Vec<usize> = (0..layout.num_slots).collect();
        let slots = g.gather_rows(cls, &slot_rows)?;
        let values = layout
            .value_seqs
            .iter()
            .map(|seqs| g.gather_rows(cls, seqs))
            .collect::<Result<_>>()?;
        Ok(SchemaEncoding { slots, values })
    }
}

/// Schema `[CLS]` rows computed outside any training graph.
///
/// Stamped with the optimizer step it was computed at, so callers can tell
/// whether parameters have moved since.
#[derive(Clone, Debug)]
pub struct SchemaCache {
    pub cls: Tensor,
    pub step: u64,
}

impl SchemaCache {
    pub fn is_stale(&self, step: u64) -> bool {
        self.step != step
    }
}
