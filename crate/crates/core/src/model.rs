//! The full tracker: encoders, alignment network and value head wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_flags, argmax, AlignmentNetwork};
use crate::autograd::{softmax_in_place, Graph, Var};
use crate::corpus::{AlignTarget, Ontology};
use crate::corpus::{InputSequence, Vocab};
use crate::encoders::{SchemaCache, SchemaEncoder, SchemaEncoding, SchemaLayout, UtteranceEncoder};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Builder};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::value::{value_distribution, value_loss, SelectionMode, ValueMatcher};

/// Architecture switches used by the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Predict values straight from the turn-to-slot vectors; only the value loss remains.
    pub no_alignment_module: bool,
    pub no_overall_slot_to_turn: bool,
    pub no_ranking_task: bool,
    /// Mix turn rows by the alignment distribution instead of picking one.
    pub soft_alignment: bool,
}

impl Ablation {
    pub fn selection_mode(&self) -> SelectionMode {
        if self.soft_alignment {
            SelectionMode::Soft
        } else {
            SelectionMode::Hard
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub schema_layers: usize,
    pub slot_sa_layers: usize,
    pub turn_sa_layers: usize,
    pub max_seq_len: usize,
    pub max_turns: usize,
    pub schema_max_len: usize,
    pub freeze_schema_encoders: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            encoder_layers: 2,
            schema_layers: 2,
            slot_sa_layers: 4,
            turn_sa_layers: 2,
            max_seq_len: 256,
            max_turns: 16,
            schema_max_len: 16,
            freeze_schema_encoders: false,
            ablation: Ablation::default(),
        }
    }
}

/// Where the value head takes its turn representation from.
#[derive(Clone, Copy, Debug)]
pub enum AlignSource<'a> {
    /// Gold rows (teacher forcing); soft mode still mixes by the predicted distribution.
    Gold(&'a [usize]),
    Predicted,
    /// Externally fixed rows; soft mode mixes with the matching one-hot weights.
    Injected(&'a [usize]),
}

/// Graph handles and decoded quantities of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub turn: usize,
    pub frames: usize,
    pub tokens: Var,
    /// Turn-to-slot attention node (`J` queries over all tokens).
    pub slot_attention: Var,
    /// Single slot-to-turn attention node (`J·(t+1)` queries).
    pub turn_attention: Option<Var>,
    /// Slot vectors after slot self-attention, `[J × d]`.
    pub slot_states: Option<Var>,
    pub scores: Option<Var>,
    /// `[J × (t+1)]`.
    pub align_logits: Option<Var>,
    /// Row-major alignment distribution matching `align_logits`.
    pub align_probs: Vec<f64>,
    /// Row per slot fed to the value head (hard) or the argmax row (soft).
    pub selected: Vec<usize>,
    pub value_logits: Vec<Var>,
}

/// Per-example supervision.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub align_rows: &'a [usize],
    pub order: &'a [usize],
    pub values: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub order: Option<Var>,
    pub align: Option<Var>,
    pub value: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlotPrediction {
    /// Index into the slot's candidate list.
    pub value: usize,
    pub aligned: Option<AlignTarget>,
    pub p_align: Vec<f64>,
    pub p_value: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Luna {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub store: ParamStore,
    pub utterance: UtteranceEncoder,
    pub schema: SchemaEncoder,
    pub layout: SchemaLayout,
    pub align: AlignmentNetwork,
    pub value: ValueMatcher,
}

impl Luna {
    pub fn new(config: ModelConfig, vocab: Vocab, ontology: Ontology, seed: u64) -> Result<Self> {
        let cfg = AttentionConfig::new(config.d, config.heads)?;
        if config.max_seq_len < 4 || config.max_turns == 0 || config.schema_max_len < 2 {
            return Err(Error::Config("sequence limits too small".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Encoder,
        };
        let utterance = UtteranceEncoder::new(
            &mut b,
            vocab.len(),
            cfg,
            config.encoder_layers,
            config.max_seq_len,
            config.max_turns,
        )?;
        let schema = SchemaEncoder::new(&mut b, cfg, config.schema_layers, config.schema_max_len)?;
        b.group = ParamGroup::Rest;
        let align =
            AlignmentNetwork::new(&mut b, cfg, config.slot_sa_layers, config.turn_sa_layers)?;
        let value = ValueMatcher::new(&mut b, config.d)?;
        if config.freeze_schema_encoders {
            store.set_frozen("schema.", true);
        }
        let layout = SchemaLayout::new(&ontology, &vocab, config.schema_max_len)?;
        Ok(Luna {
            config,
            vocab,
            ontology,
            store,
            utterance,
            schema,
            layout,
            align,
            value,
        })
    }

    /// Schema `[CLS]` rows computed in `g`, so gradients reach the schema encoder.
    pub fn schema_cls(&self, g: &mut Graph) -> Result<Var> {
        self.schema
            .encode_layout(g, &self.store, &self.utterance.token, &self.layout)
    }

    pub fn precompute_schema(&self, step: u64) -> Result<SchemaCache> {
        let mut g = Graph::new();
        let cls = self.schema_cls(&mut g)?;
        Ok(SchemaCache {
            cls: g.value(cls).clone(),
            step,
        })
    }

    /// Slot and value vectors for `g`, from `cache` when given (as constants).
    pub fn schema_encoding(
        &self,
        g: &mut Graph,
        cache: Option<&SchemaCache>,
    ) -> Result<SchemaEncoding> {
        let cls = match cache {
            Some(c) => g.constant(c.cls.clone())?,
            None => self.schema_cls(g)?,
        };
        SchemaEncoding::from_cls(g, cls, &self.layout)
    }

    pub fn encode_slot(&self, slot: &str) -> Result<Tensor> {
        self.schema
            .encode_text(&self.store, &self.utterance.token, &self.vocab, slot)
    }

    pub fn encode_value(&self, value: &str) -> Result<Tensor> {
        self.schema
            .encode_text(&self.store, &self.utterance.token, &self.vocab, value)
    }

    /// One prediction step at the turn of `seq`.
    ///
    /// `previous` holds each slot's alignment at the previous turn (`None` at turn 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        schema: &SchemaEncoding,
        seq: &InputSequence,
        previous: &[Option<AlignTarget>],
        source: AlignSource,
    ) -> Result<Forward> {
        let store = &self.store;
        let ab = self.config.ablation;
        let j = self.ontology.num_slots();
        if previous.len() != j {
            return Err(Error::contract(format!(
                "{} previous alignments for {j} slots",
                previous.len()
            )));
        }
        let t = seq.turn;
        let frames = t + 1;
        let enc = self.utterance.encode(g, store, seq)?;
        let t2s = self
            .align
            .turn_to_slot(g, store, enc.states, schema.slots)?;
        let mut fwd = Forward {
            turn: t,
            frames,
            tokens: enc.states,
            slot_attention: t2s.core,
            turn_attention: None,
            slot_states: None,
            scores: None,
            align_logits: None,
            align_probs: Vec::new(),
            selected: Vec::new(),
            value_logits: Vec::new(),
        };
        let d_star = if ab.no_alignment_module {
            t2s.out
        } else {
            let hs = self.align.slot_self_attention(g, store, t2s.out)?;
            fwd.slot_states = Some(hs);
            if !ab.no_ranking_task {
                fwd.scores = Some(self.align.ranking_scores(g, store, hs)?);
            }
            let single =
                self.align
                    .single_slot_to_turn(g, store, enc.states, schema.slots, &enc.slices)?;
            fwd.turn_attention = Some(single.core);
            let flags = alignment_flags(previous, t)?;
            let u = self
                .align
                .add_alignment_embedding(g, store, single.out, &flags)?;
            let u = if ab.no_overall_slot_to_turn {
                u
            } else {
                self.align.overall_slot_to_turn(g, store, u, hs)?.out
            };
            let d = self.align.turn_self_attention(g, store, u, frames)?;
            let logits = self.align.alignment_logits(g, store, d, frames)?;
            let mut probs = g.value(logits).data().to_vec();
            probs.chunks_mut(frames).for_each(softmax_in_place);
            let predicted: Vec<usize> = probs.chunks(frames).map(argmax).collect();
            fwd.align_logits = Some(logits);
            fwd.align_probs = probs;
            let rows = match source {
                AlignSource::Gold(r) | AlignSource::Injected(r) => {
                    if r.len() != j || r.iter().any(|&x| x >= frames) {
                        return Err(Error::contract(
                            "alignment rows must give one frame per slot",
                        ));
                    }
                    r.to_vec()
                }
                AlignSource::Predicted => predicted.clone(),
            };
            match (ab.selection_mode(), source) {
                (SelectionMode::Hard, _) => {
                    let idx: Vec<usize> = rows
                        .iter()
                        .enumerate()
                        .map(|(s, &r)| s * frames + r)
                        .collect();
                    fwd.selected = rows;
                    g.gather_rows(d, &idx)?
                }
                (SelectionMode::Soft, AlignSource::Injected(_)) => {
                    let mut w = vec![0.0; j * frames];
                    for (s, &r) in rows.iter().enumerate() {
                        w[s * frames + r] = 1.0;
                    }
                    let w = g.constant(Tensor::matrix(j, frames, w)?)?;
                    fwd.selected = rows;
                    g.mix_rows(w, d)?
                }
                (SelectionMode::Soft, _) => {
                    let w = g.softmax_rows(logits)?;
                    fwd.selected = predicted;
                    g.mix_rows(w, d)?
                }
            }
        };
        let o = self.value.project(g, store, d_star)?;
        fwd.value_logits = self.value.value_logits(g, o, &schema.values)?;
        Ok(fwd)
    }

    /// Loss components of one example; components disabled by the ablation are `None`.
    pub fn losses(&self, g: &mut Graph, fwd: &Forward, targets: Targets) -> Result<LossVars> {
        let order = match fwd.scores {
            Some(s) => Some(g.listmle(s, targets.order)?),
            None => None,
        };
        let align = match fwd.align_logits {
            Some(l) => Some(g.cross_entropy(l, targets.align_rows)?),
            None => None,
        };
        let value = value_loss(g, &fwd.value_logits, targets.values)?;
        Ok(LossVars {
            order,
            align,
            value,
        })
    }

    /// Decoded per-slot predictions. A slot aligned to BLANK predicts "none".
    pub fn predict(&self, g: &Graph, fwd: &Forward) -> Vec<SlotPrediction> {
        let frames = fwd.frames;
        fwd.value_logits
            .iter()
            .enumerate()
            .map(|(s, &logits)| {
                let p_value = value_distribution(g, logits);
                let (aligned, p_align) = if fwd.selected.is_empty() {
                    (None, Vec::new())
                } else {
                    let row = fwd.selected[s];
                    (
                        Some(AlignTarget::from_row(row, fwd.turn)),
                        fwd.align_probs[s * frames..(s + 1) * frames].to_vec(),
                    )
                };
                let value = match aligned {
                    Some(AlignTarget::Blank) => 0,
                    _ => argmax(&p_value),
                };
                SlotPrediction {
                    value,
                    aligned,
                    p_align,
                    p_value,
                }
            })
            .collect()
    }
}
