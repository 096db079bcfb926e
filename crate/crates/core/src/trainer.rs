//! Joint multi-task training: configuration, per-turn examples, the loss, and
//! the epoch loop with early stopping, checkpoints and a loss log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint, TrainerState};
use crate::corpus::{
    build_input_sequence, derive_alignment_labels, order_slots, AlignPolicy, AlignTarget, Dialogue,
    InputSequence, Ontology, Vocab,
};
use crate::encoders::SchemaCache;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_file, EvalOptions, EvalReport};
use crate::model::{Ablation, AlignSource, LossVars, Luna, ModelConfig, Targets};
use crate::optim::{adam_step, AdamConfig, AdamState, GroupRates, WarmupLinearSchedule};

/// Training run configuration, read from JSON.
///
/// Learning rates default to 1e-3 for both groups, well above the values used
/// when fine-tuning a pretrained encoder; [`TrainConfig::pretrained_hparams`]
/// restores 3e-5 (encoder) and 1e-4 (rest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr_encoder: f64,
    pub peak_lr_rest: f64,
    pub warmup_proportion: f64,
    pub max_seq_len: usize,
    pub max_turns: usize,
    pub schema_max_len: usize,
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub schema_layers: usize,
    pub slot_sa_layers: usize,
    pub turn_sa_layers: usize,
    pub dropout: f64,
    pub freeze_schema_encoders: bool,
    pub no_alignment_module: bool,
    pub no_overall_slot_to_turn: bool,
    pub no_ranking_task: bool,
    pub soft_alignment: bool,
    pub align_policy: AlignPolicy,
    pub weight_order: f64,
    pub weight_align: f64,
    pub weight_value: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Stop once dev joint accuracy reaches this value.
    pub target_dev_joint: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            seed: 1,
            epochs: 30,
            batch_size: 8,
            peak_lr_encoder: 1e-3,
            peak_lr_rest: 1e-3,
            warmup_proportion: 0.1,
            max_seq_len: m.max_seq_len,
            max_turns: m.max_turns,
            schema_max_len: m.schema_max_len,
            d: m.d,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            schema_layers: m.schema_layers,
            slot_sa_layers: m.slot_sa_layers,
            turn_sa_layers: m.turn_sa_layers,
            dropout: 0.0,
            freeze_schema_encoders: false,
            no_alignment_module: false,
            no_overall_slot_to_turn: false,
            no_ranking_task: false,
            soft_alignment: false,
            align_policy: AlignPolicy::LastChange,
            weight_order: 1.0,
            weight_align: 1.0,
            weight_value: 1.0,
            patience: 5,
            target_dev_joint: None,
        }
    }
}

impl TrainConfig {
    /// Learning rates and frozen schema encoders as used with a pretrained encoder.
    pub fn pretrained_hparams() -> Self {
        TrainConfig {
            peak_lr_encoder: 3e-5,
            peak_lr_rest: 1e-4,
            freeze_schema_encoders: true,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field; the error names the offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field `{field}` {why}")));
        for (field, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
            ("max_turns", self.max_turns),
            ("schema_max_len", self.schema_max_len),
            ("d", self.d),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad("heads", "must divide `d`");
        }
        if self.max_seq_len < 4 {
            return bad("max_seq_len", "must be at least 4");
        }
        if self.schema_max_len < 2 {
            return bad("schema_max_len", "must be at least 2");
        }
        for (field, v) in [
            ("peak_lr_encoder", self.peak_lr_encoder),
            ("peak_lr_rest", self.peak_lr_rest),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "must be a positive finite number");
            }
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        for (field, v) in [
            ("weight_order", self.weight_order),
            ("weight_align", self.weight_align),
            ("weight_value", self.weight_value),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be a non-negative finite number");
            }
        }
        if let Some(t) = self.target_dev_joint {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_dev_joint", "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_alignment_module: self.no_alignment_module,
            no_overall_slot_to_turn: self.no_overall_slot_to_turn,
            no_ranking_task: self.no_ranking_task,
            soft_alignment: self.soft_alignment,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            schema_layers: self.schema_layers,
            slot_sa_layers: self.slot_sa_layers,
            turn_sa_layers: self.turn_sa_layers,
            max_seq_len: self.max_seq_len,
            max_turns: self.max_turns,
            schema_max_len: self.schema_max_len,
            freeze_schema_encoders: self.freeze_schema_encoders,
            ablation: self.ablation(),
        }
    }
}

/// One `(dialogue, turn)` training example with all derived supervision.
#[derive(Clone, Debug)]
pub struct Example {
    pub dialogue: usize,
    pub seq: InputSequence,
    /// Gold alignment at the previous turn (teacher forcing), `None` at turn 1.
    pub previous: Vec<Option<AlignTarget>>,
    pub align_rows: Vec<usize>,
    pub order: Vec<usize>,
    pub values: Vec<usize>,
}

impl Example {
    pub fn targets(&self) -> Targets<'_> {
        Targets {
            align_rows: &self.align_rows,
            order: &self.order,
            values: &self.values,
        }
    }
}

pub fn build_examples(
    dialogues: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocab,
    max_len: usize,
    policy: AlignPolicy,
) -> Result<Vec<Example>> {
    let j = ontology.num_slots();
    let mut out = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        let labels = derive_alignment_labels(d, ontology, policy);
        for t in 1..=d.num_turns() {
            let label = &labels[t - 1];
            let values = d
                .state_vector(t, ontology)
                .iter()
                .enumerate()
                .map(|(s, v)| {
                    ontology.value_index(s, v).ok_or_else(|| {
                        Error::Data(format!(
                            "dialogue `{}` turn {t}: value `{v}` not a candidate",
                            d.id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let previous = if t == 1 {
                vec![None; j]
            } else {
                labels[t - 2].targets.iter().map(|&x| Some(x)).collect()
            };
            out.push(Example {
                dialogue: di,
                seq: build_input_sequence(d, t, vocab, max_len)?,
                previous,
                align_rows: label.targets.iter().map(|x| x.row(t)).collect(),
                order: order_slots(label, ontology).0,
                values,
            });
        }
    }
    Ok(out)
}

/// Vocabulary over the training utterances plus every slot name and value.
pub fn build_vocab(dialogues: &[Dialogue], ontology: &Ontology) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for d in dialogues {
        for t in &d.turns {
            texts.push(&t.user);
            texts.push(&t.system);
        }
    }
    let values = ontology.unique_values();
    texts.extend(ontology.slots().iter().map(String::as_str));
    texts.extend(values.iter().map(String::as_str));
    Vocab::build(texts)
}

/// Batch-mean loss components (disabled components are 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub order: f64,
    pub align: f64,
    pub value: f64,
    pub joint: f64,
}

/// Loss graph of one batch.
pub struct JointLoss {
    /// `w_o·L_order + w_a·L_align + w_v·L_value`, averaged over the batch.
    pub joint: Var,
    /// Unweighted batch means of each component.
    pub parts: LossVars,
    pub components: LossComponents,
}

pub fn joint_loss(
    model: &Luna,
    g: &mut Graph,
    schema: Option<&SchemaCache>,
    batch: &[&Example],
    cfg: &TrainConfig,
) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let enc = model.schema_encoding(g, schema)?;
    let scale = 1.0 / batch.len() as f64;
    let mut terms = Vec::new();
    let (mut order, mut align, mut value) = (Vec::new(), Vec::new(), Vec::new());
    for ex in batch {
        let fwd = model.forward(
            g,
            &enc,
            &ex.seq,
            &ex.previous,
            AlignSource::Gold(&ex.align_rows),
        )?;
        let l = model.losses(g, &fwd, ex.targets())?;
        if let Some(o) = l.order {
            order.push((o, scale));
            terms.push((o, scale * cfg.weight_order));
        }
        if let Some(a) = l.align {
            align.push((a, scale));
            terms.push((a, scale * cfg.weight_align));
        }
        value.push((l.value, scale));
        terms.push((l.value, scale * cfg.weight_value));
    }
    let joint = g.weighted_sum(&terms)?;
    let mean = |g: &mut Graph, t: &[(Var, f64)]| -> Result<Option<Var>> {
        if t.is_empty() {
            Ok(None)
        } else {
            g.weighted_sum(t).map(Some)
        }
    };
    let parts = LossVars {
        order: mean(g, &order)?,
        align: mean(g, &align)?,
        value: g.weighted_sum(&value)?,
    };
    let item = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let components = LossComponents {
        order: item(parts.order),
        align: item(parts.align),
        value: g.value(parts.value).item(),
        joint: g.value(joint).item(),
    };
    Ok(JointLoss {
        joint,
        parts,
        components,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_joint_loss: f64,
    pub dev_joint_accuracy: Option<f64>,
    pub dev_alignment_accuracy: Option<f64>,
}

pub struct TrainSummary {
    /// Parameters of the best dev epoch (last epoch without a dev set).
    pub model: Luna,
    pub state: TrainerState,
    pub best_dev: Option<EvalReport>,
}

pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a [Dialogue],
    pub dev: &'a [Dialogue],
    pub ontology: &'a Ontology,
    /// Where checkpoints and logs go; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    pub resume: bool,
    /// Stop after this many epochs in this call; the run stays resumable.
    pub epoch_budget: Option<usize>,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
const LOSS_HEADER: &str = "step,l_order,l_align,l_value,l_joint,lr,lr_encoder\n";

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Example order for `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
    idx
}

fn epochs_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,steps,train_joint_loss,dev_joint_acc,dev_align_acc\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{:.17e},{},{}",
            r.epoch,
            r.steps,
            r.train_joint_loss,
            opt(r.dev_joint_accuracy),
            opt(r.dev_alignment_accuracy)
        );
    }
    s
}

/// Keeps the header and the rows up to `step`, so a resumed run appends cleanly.
fn truncate_loss_log(path: &Path, step: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LOSS_HEADER.to_string()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = LOSS_HEADER.to_string();
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}: malformed loss log row `{line}`",
                    path.display()
                ))
            })?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn train(run: TrainRun) -> Result<TrainSummary> {
    let cfg = run.config;
    cfg.validate()?;
    let out = run.out_dir.map(Path::to_path_buf);
    let path = |name: &str| -> Option<PathBuf> { out.as_ref().map(|d| d.join(name)) };

    let resumed = match (run.resume, path(LAST_CKPT)) {
        (true, Some(p)) if p.exists() => Some(checkpoint::load(&p)?),
        _ => None,
    };
    let (mut model, mut adam, mut state) = match resumed {
        Some(ck) => {
            if &ck.config != cfg {
                return Err(Error::Config(
                    "resume config differs from the one stored in the checkpoint".into(),
                ));
            }
            let (model, adam, state) = ck.into_parts()?;
            log::info!("resuming at epoch {} step {}", state.epoch, state.step);
            (model, adam, state)
        }
        None => {
            let vocab = build_vocab(run.train, run.ontology);
            let model = Luna::new(cfg.model_config(), vocab, run.ontology.clone(), cfg.seed)?;
            let adam = AdamState::new(&model.store);
            (model, adam, TrainerState::default())
        }
    };
    let examples = build_examples(
        run.train,
        run.ontology,
        &model.vocab,
        cfg.max_seq_len,
        cfg.align_policy,
    )?;
    if examples.is_empty() {
        return Err(Error::Data("training corpus yields no examples".into()));
    }
    let per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let schedule = WarmupLinearSchedule::new(per_epoch * cfg.epochs as u64, cfg.warmup_proportion);
    let peaks = GroupRates {
        encoder: cfg.peak_lr_encoder,
        rest: cfg.peak_lr_rest,
    };
    let adam_cfg = AdamConfig::default();
    let mut loss_log = match path(LOSS_CSV) {
        Some(p) => truncate_loss_log(&p, state.step)?,
        None => LOSS_HEADER.to_string(),
    };
    let mut best_store = model.store.clone();
    let mut best_report = None;
    if let Some(p) = path(BEST_CKPT).filter(|p| p.exists() && state.epoch > 0) {
        best_store = checkpoint::load(&p)?.into_parts()?.0.store;
    }
    let eval_opts = EvalOptions {
        threads: 1,
        collect_attention: false,
        policy: cfg.align_policy,
    };

    let mut budget = run.epoch_budget.unwrap_or(usize::MAX);
    while !state.finished && state.epoch < cfg.epochs && budget > 0 {
        budget -= 1;
        let order = epoch_order(cfg.seed, state.epoch, examples.len());
        // a frozen schema encoder is encoded once per epoch
        let cache = if cfg.freeze_schema_encoders {
            Some(model.precompute_schema(state.step)?)
        } else {
            None
        };
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = if cfg.dropout > 0.0 {
                Graph::with_dropout(cfg.dropout, mix_seed(cfg.seed ^ 0xD0, state.step))
            } else {
                Graph::new()
            };
            let JointLoss {
                joint: loss,
                components: comp,
                ..
            } = joint_loss(&model, &mut g, cache.as_ref(), &batch, cfg).map_err(|e| match e {
                Error::NonFinite(op) => Error::Numeric(format!(
                    "training diverged at step {}: non-finite {op}",
                    state.step
                )),
                other => other,
            })?;
            if !comp.joint.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at step {}: order {} align {} value {}",
                    state.step, comp.order, comp.align, comp.value
                )));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            let rates = adam_step(
                &mut model.store,
                &mut adam,
                &adam_cfg,
                peaks,
                &schedule,
                state.step,
            )?;
            state.step += 1;
            epoch_loss += comp.joint * batch.len() as f64;
            let _ = writeln!(
                loss_log,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                state.step,
                comp.order,
                comp.align,
                comp.value,
                comp.joint,
                rates.rest,
                rates.encoder
            );
        }
        state.epoch += 1;
        let mut record = EpochRecord {
            epoch: state.epoch,
            steps: state.step,
            train_joint_loss: epoch_loss / examples.len() as f64,
            dev_joint_accuracy: None,
            dev_alignment_accuracy: None,
        };
        let mut improved = run.dev.is_empty();
        if !run.dev.is_empty() {
            let (rep, _) = evaluate(&model, run.dev, &eval_opts)?;
            record.dev_joint_accuracy = Some(rep.joint_accuracy);
            record.dev_alignment_accuracy = rep.alignment_accuracy;
            if rep.joint_accuracy > state.best_dev_joint {
                state.best_dev_joint = rep.joint_accuracy;
                state.best_epoch = state.epoch;
                state.bad_epochs = 0;
                improved = true;
                best_report = Some(rep.clone());
            } else {
                state.bad_epochs += 1;
            }
            if cfg
                .target_dev_joint
                .is_some_and(|t| rep.joint_accuracy >= t)
            {
                log::info!(
                    "dev joint accuracy {:.4} reached the target",
                    rep.joint_accuracy
                );
                state.finished = true;
            }
            if state.bad_epochs >= cfg.patience {
                log::info!("no dev improvement for {} epochs, stopping", cfg.patience);
                state.finished = true;
            }
        } else {
            state.best_epoch = state.epoch;
        }
        log::info!(
            "epoch {} step {} loss {:.5} dev joint {:?} align {:?}",
            record.epoch,
            record.steps,
            record.train_joint_loss,
            record.dev_joint_accuracy,
            record.dev_alignment_accuracy
        );
        state.history.push(record);
        if state.epoch >= cfg.epochs {
            state.finished = true;
        }
        if improved {
            best_store = model.store.clone();
        }
        if let Some(dir) = &out {
            if improved {
                Checkpoint::capture(cfg, &model, &adam, &state)?.save(&dir.join(BEST_CKPT))?;
            }
            Checkpoint::capture(cfg, &model, &adam, &state)?.save(&dir.join(LAST_CKPT))?;
            write_file(&dir.join(LOSS_CSV), &loss_log)?;
            write_file(&dir.join(EPOCHS_CSV), &epochs_csv(&state.history))?;
        }
    }
    model.store = best_store;
    Ok(TrainSummary {
        model,
        state,
        best_dev: best_report,
    })
}
