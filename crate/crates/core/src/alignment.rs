//! Bi-directional slot-turn alignment: turn-to-slot fusion, slot
//! self-attention, the hierarchical slot-to-turn stack and the ranking head.
//!
//! Cross-attention outputs are combined with their queries through a residual
//! connection and layer norm, like the sublayers of a transformer block.

use std::ops::Range;

use rand::Rng;

use crate::autograd::{AttentionMask, Graph, Var};
use crate::corpus::AlignTarget;
use crate::error::{Error, Result};
use crate::nn::{
    AttentionConfig, Builder, Embedding, LayerNorm, Linear, MultiHeadAttention, TransformerBlock,
};
use crate::params::ParamStore;

pub const NOT_ALIGNED: usize = 0;
pub const ALIGNED: usize = 1;

/// Output of a cross-attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `LN(query + MHA(query, ·, ·))`.
    pub out: Var,
    /// Projected attention output before the residual.
    pub raw: Var,
    /// Raw attention node, carrying the per-head weights.
    pub core: Var,
}

#[derive(Clone, Debug)]
pub struct AlignmentNetwork {
    pub cfg: AttentionConfig,
    pub turn_to_slot: MultiHeadAttention,
    pub turn_to_slot_norm: LayerNorm,
    pub slot_blocks: Vec<TransformerBlock>,
    pub rank: Linear,
    pub single_s2t: MultiHeadAttention,
    pub single_s2t_norm: LayerNorm,
    pub ae: Embedding,
    pub overall_s2t: MultiHeadAttention,
    pub overall_s2t_norm: LayerNorm,
    pub turn_blocks: Vec<TransformerBlock>,
    pub out: Linear,
}

impl AlignmentNetwork {
    pub fn new<R: Rng>(
        b: &mut Builder<R>,
        cfg: AttentionConfig,
        slot_layers: usize,
        turn_layers: usize,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(AlignmentNetwork {
            cfg,
            turn_to_slot: MultiHeadAttention::new(b, "align.turn_to_slot", cfg)?,
            turn_to_slot_norm: LayerNorm::new(b, "align.turn_to_slot_norm", d)?,
            slot_blocks: (0..slot_layers)
                .map(|l| TransformerBlock::new(b, &format!("align.slot_sa{l}"), cfg))
                .collect::<Result<_>>()?,
            rank: Linear::new(b, "align.rank", d, 1)?,
            single_s2t: MultiHeadAttention::new(b, "align.single_s2t", cfg)?,
            single_s2t_norm: LayerNorm::new(b, "align.single_s2t_norm", d)?,
            ae: Embedding::new(b, "align.ae", 2, d)?,
            overall_s2t: MultiHeadAttention::new(b, "align.overall_s2t", cfg)?,
            overall_s2t_norm: LayerNorm::new(b, "align.overall_s2t_norm", d)?,
            turn_blocks: (0..turn_layers)
                .map(|l| TransformerBlock::new(b, &format!("align.turn_sa{l}"), cfg))
                .collect::<Result<_>>()?,
            out: Linear::new(b, "align.out", d, 1)?,
        })
    }

    fn fuse(
        g: &mut Graph,
        store: &ParamStore,
        mha: &MultiHeadAttention,
        norm: &LayerNorm,
        query: Var,
        kv: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Fused> {
        let a = mha.forward(g, store, query, kv, kv, mask)?;
        let raw = g.dropout(a.out)?;
        let sum = g.add(query, raw)?;
        let out = norm.forward(g, store, sum)?;
        Ok(Fused {
            out,
            raw: a.out,
            core: a.core,
        })
    }

    /// Each slot vector queries every token of the utterance. `[J × d]`.
    pub fn turn_to_slot(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        slots: Var,
    ) -> Result<Fused> {
        Self::fuse(
            g,
            store,
            &self.turn_to_slot,
            &self.turn_to_slot_norm,
            slots,
            tokens,
            None,
        )
    }

    pub fn slot_self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slots: Var,
    ) -> Result<Var> {
        let mut x = slots;
        for block in &self.slot_blocks {
            x = block.forward(g, store, x, None)?;
        }
        Ok(x)
    }

    /// `sigmoid(W_s h + b_s)` per slot, `[J × 1]`.
    pub fn ranking_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot_states: Var,
    ) -> Result<Var> {
        let s = self.rank.forward(g, store, slot_states)?;
        g.sigmoid(s)
    }

    /// Row `j·(t+1) + i` is slot `j` attending over the tokens of turn `i` only.
    ///
    /// `slices` holds `t + 1` token spans (BLANK last). A turn dropped by
    /// truncation has an empty span and attends to the `[CLS]` token instead.
    pub fn single_slot_to_turn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        slots: Var,
        slices: &[Range<usize>],
    ) -> Result<Fused> {
        let j = g.value(slots).rows();
        let n_tok = g.value(tokens).rows();
        let frames = slices.len();
        let rows: Vec<usize> = (0..j)
            .flat_map(|s| std::iter::repeat_n(s, frames))
            .collect();
        let queries = g.gather_rows(slots, &rows)?;
        let mask = slice_mask(j, slices, n_tok)?;
        Self::fuse(
            g,
            store,
            &self.single_s2t,
            &self.single_s2t_norm,
            queries,
            tokens,
            Some(&mask),
        )
    }

    /// `Û = Ū + AE(flag)`, flags from [`alignment_flags`].
    pub fn add_alignment_embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: Var,
        flags: &[usize],
    ) -> Result<Var> {
        let ae = self.ae.forward(g, store, flags)?;
        g.add(u, ae)
    }

    /// Each turn row queries the `J` slot states.
    pub fn overall_slot_to_turn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: Var,
        slot_states: Var,
    ) -> Result<Fused> {
        Self::fuse(
            g,
            store,
            &self.overall_s2t,
            &self.overall_s2t_norm,
            u,
            slot_states,
            None,
        )
    }

    /// Self-attention among the `t + 1` rows of each slot, slots kept apart.
    pub fn turn_self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: Var,
        frames: usize,
    ) -> Result<Var> {
        let n = g.value(u).rows();
        let groups: Vec<u32> = (0..n).map(|r| (r / frames) as u32).collect();
        let mask = AttentionMask::groups(groups.clone(), groups);
        let mut x = u;
        for block in &self.turn_blocks {
            x = block.forward(g, store, x, Some(&mask))?;
        }
        Ok(x)
    }

    /// `W_o D + b_o` reshaped to `[J × (t+1)]`.
    pub fn alignment_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        d: Var,
        frames: usize,
    ) -> Result<Var> {
        let s = self.out.forward(g, store, d)?;
        let n = g.value(s).rows();
        g.reshape(s, n / frames, frames)
    }
}

/// Dense mask letting row `j·F + i` see only the tokens of `slices[i]`.
pub fn slice_mask(
    num_slots: usize,
    slices: &[Range<usize>],
    num_tokens: usize,
) -> Result<AttentionMask> {
    let frames = slices.len();
    let mut allowed = vec![false; num_slots * frames * num_tokens];
    for s in 0..num_slots {
        for (i, span) in slices.iter().enumerate() {
            if span.end > num_tokens {
                return Err(Error::contract(format!(
                    "turn span {span:?} outside {num_tokens} tokens"
                )));
            }
            let row =
                &mut allowed[(s * frames + i) * num_tokens..(s * frames + i + 1) * num_tokens];
            if span.is_empty() {
                row[0] = true;
            } else {
                row[span.clone()].iter_mut().for_each(|a| *a = true);
            }
        }
    }
    AttentionMask::dense(num_slots * frames, num_tokens, allowed)
}

/// Alignment-embedding row per `(slot, frame)`: [`ALIGNED`] at each slot's
/// previous alignment, [`NOT_ALIGNED`] elsewhere. `None` means no previous
/// turn; a previous BLANK alignment marks the BLANK frame.
pub fn alignment_flags(previous: &[Option<AlignTarget>], t: usize) -> Result<Vec<usize>> {
    let frames = t + 1;
    let mut flags = vec![NOT_ALIGNED; previous.len() * frames];
    for (s, p) in previous.iter().enumerate() {
        let row = match p {
            None => continue,
            Some(AlignTarget::Turn(i)) if *i == 0 || *i > t => {
                return Err(Error::contract(format!(
                    "previous alignment {i} outside turns 1..={t}"
                )))
            }
            Some(target) => target.row(t),
        };
        flags[s * frames + row] = ALIGNED;
    }
    Ok(flags)
}

/// Hard selection: highest probability, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
