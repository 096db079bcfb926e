//! Finite-difference check of every training loss on a tiny hand-made instance.

use std::collections::BTreeMap;

use crate::autograd::Graph;
use crate::corpus::{Dialogue, Ontology, Turn};
use crate::error::Result;
use crate::gradcheck::{collect_grads, finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::model::Luna;
use crate::trainer::{build_examples, build_vocab, joint_loss, Example, TrainConfig};

pub const LOSS_LABELS: [&str; 4] = ["order", "align", "value", "joint"];

#[derive(Clone, Debug)]
pub struct ModelCheckOptions {
    /// Model dimensions and loss weights; dropout is ignored.
    pub config: TrainConfig,
    /// Coordinates sampled per parameter tensor.
    pub samples: usize,
    pub seed: u64,
    /// Test hook: inflate analytic gradients by 10% so the check must fail.
    pub corrupt_grad: bool,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        ModelCheckOptions {
            config: small_config(),
            samples: 24,
            seed: 0,
            corrupt_grad: false,
        }
    }
}

/// d = 16 with two heads and shallow stacks.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        d: 16,
        heads: 2,
        encoder_layers: 1,
        schema_layers: 1,
        slot_sa_layers: 2,
        turn_sa_layers: 1,
        max_seq_len: 64,
        max_turns: 4,
        schema_max_len: 8,
        ..TrainConfig::default()
    }
}

fn turn(index: usize, user: &str, system: &str, state: &[(&str, &str)]) -> Turn {
    Turn {
        index,
        user: user.into(),
        system: system.into(),
        state: state
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

/// Three slots over two domains and a two-turn dialogue that updates all of them.
pub fn fixture() -> Result<(Ontology, Dialogue)> {
    let onto = Ontology::new(BTreeMap::from([
        (
            "hotel-area".to_string(),
            vec!["north".to_string(), "south".to_string()],
        ),
        (
            "hotel-stars".to_string(),
            vec!["3".to_string(), "4".to_string()],
        ),
        (
            "train-day".to_string(),
            vec!["monday".to_string(), "friday".to_string()],
        ),
    ]))?;
    let dialogue = Dialogue {
        id: "gradcheck".into(),
        turns: vec![
            turn(
                1,
                "a hotel in the north with 4 stars",
                "ok , any day ?",
                &[("hotel-area", "north"), ("hotel-stars", "4")],
            ),
            turn(
                2,
                "also a train on friday",
                "sure .",
                &[
                    ("hotel-area", "north"),
                    ("hotel-stars", "4"),
                    ("train-day", "friday"),
                ],
            ),
        ],
        domains: ["hotel".to_string(), "train".to_string()].into(),
    };
    Ok((onto, dialogue))
}

fn loss_values(model: &Luna, batch: &[&Example], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let c = joint_loss(model, &mut g, None, batch, cfg)?.components;
    Ok(vec![c.order, c.align, c.value, c.joint])
}

/// One report per entry of [`LOSS_LABELS`].
pub fn check_model_gradients(opts: &ModelCheckOptions) -> Result<Vec<GradCheckReport>> {
    let cfg = TrainConfig {
        dropout: 0.0,
        ..opts.config.clone()
    };
    cfg.validate()?;
    let (onto, dialogue) = fixture()?;
    let dialogues = [dialogue];
    let vocab = build_vocab(&dialogues, &onto);
    let mut model = Luna::new(cfg.model_config(), vocab, onto, opts.seed)?;
    let examples = build_examples(
        &dialogues,
        &model.ontology,
        &model.vocab,
        cfg.max_seq_len,
        cfg.align_policy,
    )?;
    let batch: Vec<&Example> = examples.iter().collect();

    let mut analytic = Vec::with_capacity(LOSS_LABELS.len());
    {
        let mut g = Graph::new();
        let loss = joint_loss(&model, &mut g, None, &batch, &cfg)?;
        let vars = [
            loss.parts.order,
            loss.parts.align,
            Some(loss.parts.value),
            Some(loss.joint),
        ];
        for v in vars {
            model.store.zero_grad();
            if let Some(v) = v {
                g.backward(v, &mut model.store)?;
            }
            let mut grads = collect_grads(&model.store);
            if opts.corrupt_grad {
                grads.iter_mut().flatten().for_each(|x| *x *= 1.1);
            }
            analytic.push(grads);
        }
        model.store.zero_grad();
    }

    let gopts = GradCheckOptions {
        max_coords_per_param: opts.samples,
        seed: opts.seed,
        ..GradCheckOptions::default()
    };
    let mut store = std::mem::take(&mut model.store);
    let reports = finite_diff_check(
        &mut store,
        &LOSS_LABELS,
        &analytic,
        |s| {
            model.store.clone_from(s);
            loss_values(&model, &batch, &cfg)
        },
        &gopts,
    );
    model.store = store;
    reports
}
