//! Value matching: pick the aligned turn, project it, and score candidates by
//! negative Euclidean distance.

use rand::Rng;

use crate::alignment::argmax;
use crate::autograd::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::params::ParamStore;

/// How the turn representation fed to the value head is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// One turn row per slot.
    Hard,
    /// Rows mixed by the alignment distribution.
    Soft,
}

/// Hard mode returns the argmax index (lowest on ties); soft mode returns the
/// distribution itself as mixing weights.
pub fn select_aligned_turn(distribution: &[f64], mode: SelectionMode) -> (usize, Vec<f64>) {
    let best = argmax(distribution);
    let weights = match mode {
        SelectionMode::Hard => {
            let mut w = vec![0.0; distribution.len()];
            w[best] = 1.0;
            w
        }
        SelectionMode::Soft => distribution.to_vec(),
    };
    (best, weights)
}

#[derive(Clone, Debug)]
pub struct ValueMatcher {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl ValueMatcher {
    pub fn new<R: Rng>(b: &mut Builder<R>, d: usize) -> Result<Self> {
        Ok(ValueMatcher {
            proj: Linear::new(b, "value.proj", d, d)?,
            norm: LayerNorm::new(b, "value.norm", d)?,
        })
    }

    /// `LayerNorm(Linear(D*))`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, d_star: Var) -> Result<Var> {
        let x = self.proj.forward(g, store, d_star)?;
        self.norm.forward(g, store, x)
    }

    /// Negative distances from row `j` of `o` to slot `j`'s candidates, `[1 × |V_j|]` each.
    pub fn value_logits(&self, g: &mut Graph, o: Var, candidates: &[Var]) -> Result<Vec<Var>> {
        let rows = g.value(o).rows();
        if rows != candidates.len() {
            return Err(Error::contract(format!(
                "{rows} projected slots but {} candidate sets",
                candidates.len()
            )));
        }
        (0..rows)
            .map(|j| {
                let x = g.gather_rows(o, &[j])?;
                g.neg_distances(x, candidates[j])
            })
            .collect()
    }
}

/// Summed negative log-likelihood of each slot's gold candidate.
pub fn value_loss(g: &mut Graph, logits: &[Var], gold: &[usize]) -> Result<Var> {
    if logits.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} slots but {} gold values",
            logits.len(),
            gold.len()
        )));
    }
    let terms = logits
        .iter()
        .zip(gold)
        .map(|(&l, &v)| Ok((g.cross_entropy(l, &[v])?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

/// Softmax over a `[1 × C]` logit row.
pub fn value_distribution(g: &Graph, logits: Var) -> Vec<f64> {
    let mut p = g.value(logits).data().to_vec();
    softmax_in_place(&mut p);
    p
}
