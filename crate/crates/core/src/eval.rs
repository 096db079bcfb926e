//! Metrics, per-turn curves, prediction/attention dumps and the ablation study.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Graph;
use crate::corpus::{
    build_input_sequence, derive_alignment_labels, has_confusion_pair, AlignPolicy, AlignTarget,
    Dialogue,
};
use crate::encoders::SchemaCache;
use crate::error::{Error, Result};
use crate::model::{AlignSource, Luna};

/// Fraction of turns whose every slot matches gold.
pub fn joint_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_cover(pred, gold)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Fraction of `(turn, slot)` pairs that match gold.
pub fn slot_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_cover(pred, gold)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

/// Pair-level alignment accuracy: `(turn, slot)` pairs whose predicted target
/// equals the label, BLANK included.
pub fn alignment_accuracy(pred: &[Vec<AlignTarget>], gold: &[Vec<AlignTarget>]) -> Result<f64> {
    check_cover(pred, gold)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

fn check_cover<T>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted turns for {} gold turns",
            pred.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(format!(
                "turn {i}: {} predicted slots for {} gold slots",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStat {
    pub n: usize,
    pub joint_accuracy: f64,
}

/// Joint accuracy bucketed by turn depth.
pub fn per_turn_curve(
    depths: &[usize],
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
) -> Result<BTreeMap<usize, DepthStat>> {
    check_cover(pred, gold)?;
    if depths.len() != pred.len() {
        return Err(Error::contract("one depth per turn required"));
    }
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((&d, p), g) in depths.iter().zip(pred).zip(gold) {
        let e = acc.entry(d).or_default();
        e.0 += 1;
        e.1 += usize::from(p == g);
    }
    Ok(acc
        .into_iter()
        .map(|(d, (n, c))| {
            (
                d,
                DepthStat {
                    n,
                    joint_accuracy: c as f64 / n as f64,
                },
            )
        })
        .collect())
}

pub fn per_turn_csv(curve: &BTreeMap<usize, DepthStat>) -> String {
    let mut s = String::from("depth,n,joint_acc\n");
    for (d, st) in curve {
        s.push_str(&format!("{d},{},{:.6}\n", st.n, st.joint_accuracy));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_accuracy: f64,
    pub slot_accuracy: f64,
    /// Pair-level; `None` when the model has no alignment module.
    pub alignment_accuracy: Option<f64>,
    /// Fraction of dialogues with every slot of every turn aligned correctly.
    pub dialogue_alignment_accuracy: Option<f64>,
    /// Pair-level alignment accuracy restricted to dialogues with a cross-domain confusion pair.
    pub confusion_alignment_accuracy: Option<f64>,
    pub confusion_joint_accuracy: Option<f64>,
    pub per_turn_joint: BTreeMap<usize, DepthStat>,
    pub dialogues: usize,
    pub turns: usize,
    pub slots: usize,
    pub confusion_dialogues: usize,
}

/// Predictions of one dialogue turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub turn: usize,
    pub values: Vec<usize>,
    pub gold_values: Vec<usize>,
    pub aligned: Option<Vec<AlignTarget>>,
    pub gold_aligned: Vec<AlignTarget>,
    pub p_align: Vec<Vec<f64>>,
    pub p_value: Vec<Vec<f64>>,
    /// Figure-style attention data, filled only when requested.
    pub attention: Option<Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialoguePrediction {
    pub id: String,
    pub confusion: bool,
    pub turns: Vec<TurnPrediction>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub threads: usize,
    pub collect_attention: bool,
    pub policy: AlignPolicy,
}

/// Runs the tracker turn by turn; each turn's alignment embedding uses the
/// model's own alignment predictions from the previous turn.
pub fn predict_dialogue(
    model: &Luna,
    schema: &SchemaCache,
    dialogue: &Dialogue,
    opts: &EvalOptions,
) -> Result<DialoguePrediction> {
    let onto = &model.ontology;
    let j = onto.num_slots();
    let labels = derive_alignment_labels(dialogue, onto, opts.policy);
    let mut previous: Vec<Option<AlignTarget>> = vec![None; j];
    let mut turns = Vec::with_capacity(dialogue.num_turns());
    for t in 1..=dialogue.num_turns() {
        let seq = build_input_sequence(dialogue, t, &model.vocab, model.config.max_seq_len)?;
        let mut g = Graph::new();
        let enc = model.schema_encoding(&mut g, Some(schema))?;
        let fwd = model.forward(&mut g, &enc, &seq, &previous, AlignSource::Predicted)?;
        let preds = model.predict(&g, &fwd);
        let gold_values = dialogue
            .state_vector(t, onto)
            .iter()
            .enumerate()
            .map(|(s, v)| {
                onto.value_index(s, v).ok_or_else(|| {
                    Error::Data(format!(
                        "dialogue `{}` turn {t}: value `{v}` not a candidate",
                        dialogue.id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let aligned: Option<Vec<AlignTarget>> = preds.iter().map(|p| p.aligned).collect();
        if let Some(a) = &aligned {
            previous = a.iter().map(|&x| Some(x)).collect();
        }
        let attention = if opts.collect_attention {
            Some(attention_dump(model, &g, &fwd, &seq)?)
        } else {
            None
        };
        turns.push(TurnPrediction {
            turn: t,
            values: preds.iter().map(|p| p.value).collect(),
            gold_values,
            aligned,
            gold_aligned: labels[t - 1].targets.clone(),
            p_align: preds.iter().map(|p| p.p_align.clone()).collect(),
            p_value: preds.into_iter().map(|p| p.p_value).collect(),
            attention,
        });
    }
    Ok(DialoguePrediction {
        id: dialogue.id.clone(),
        confusion: has_confusion_pair(dialogue, onto),
        turns,
    })
}

fn attention_dump(
    model: &Luna,
    g: &Graph,
    fwd: &crate::model::Forward,
    seq: &crate::corpus::InputSequence,
) -> Result<Value> {
    let tokens: Vec<&str> = seq.ids.iter().map(|&i| model.vocab.token(i)).collect();
    let reshape = |heads: usize, nq: usize, nk: usize, w: &[f64], q: usize| -> Vec<Vec<f64>> {
        (0..heads)
            .map(|h| w[(h * nq + q) * nk..(h * nq + q + 1) * nk].to_vec())
            .collect()
    };
    let (h1, nq1, nk1, w1) = g
        .attention_weights(fwd.slot_attention)
        .ok_or_else(|| Error::contract("missing turn-to-slot attention weights"))?;
    let second = fwd.turn_attention.and_then(|v| g.attention_weights(v));
    let mut slots = serde_json::Map::new();
    for (s, name) in model.ontology.slots().iter().enumerate() {
        let mut entry = serde_json::Map::new();
        entry.insert("turn_to_slot".into(), json!(reshape(h1, nq1, nk1, w1, s)));
        if let Some((h2, nq2, nk2, w2)) = second {
            let per_turn: Vec<Vec<Vec<f64>>> = (0..fwd.frames)
                .map(|i| reshape(h2, nq2, nk2, w2, s * fwd.frames + i))
                .collect();
            entry.insert("slot_to_turn".into(), json!(per_turn));
            entry.insert(
                "p_align".into(),
                json!(fwd.align_probs[s * fwd.frames..(s + 1) * fwd.frames].to_vec()),
            );
        }
        slots.insert(name.clone(), Value::Object(entry));
    }
    Ok(json!({ "tokens": tokens, "slots": slots }))
}

/// Predicts every dialogue, fanning out over `opts.threads` workers.
/// Results come back in corpus order regardless of the thread count.
pub fn predict_corpus(
    model: &Luna,
    dialogues: &[Dialogue],
    opts: &EvalOptions,
) -> Result<Vec<DialoguePrediction>> {
    let schema = model.precompute_schema(0)?;
    let threads = opts.threads.max(1).min(dialogues.len().max(1));
    if threads == 1 {
        return dialogues
            .iter()
            .map(|d| predict_dialogue(model, &schema, d, opts))
            .collect();
    }
    let chunk = dialogues.len().div_ceil(threads);
    let parts: Vec<Result<Vec<DialoguePrediction>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dialogues
            .chunks(chunk)
            .map(|part| {
                let schema = &schema;
                scope.spawn(move || {
                    part.iter()
                        .map(|d| predict_dialogue(model, schema, d, opts))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::contract("evaluation worker panicked")))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(dialogues.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn report(predictions: &[DialoguePrediction], num_slots: usize) -> Result<EvalReport> {
    let flat = |f: &dyn Fn(&DialoguePrediction) -> bool| -> Vec<&TurnPrediction> {
        predictions
            .iter()
            .filter(|d| f(d))
            .flat_map(|d| &d.turns)
            .collect()
    };
    let all = flat(&|_| true);
    let pred: Vec<Vec<usize>> = all.iter().map(|t| t.values.clone()).collect();
    let gold: Vec<Vec<usize>> = all.iter().map(|t| t.gold_values.clone()).collect();
    let depths: Vec<usize> = all.iter().map(|t| t.turn).collect();
    let has_align = all.iter().all(|t| t.aligned.is_some());
    let align_acc = |turns: &[&TurnPrediction]| -> Result<Option<f64>> {
        if !has_align || turns.is_empty() {
            return Ok(None);
        }
        let p: Vec<Vec<AlignTarget>> = turns
            .iter()
            .map(|t| t.aligned.clone().unwrap_or_default())
            .collect();
        let g: Vec<Vec<AlignTarget>> = turns.iter().map(|t| t.gold_aligned.clone()).collect();
        alignment_accuracy(&p, &g).map(Some)
    };
    let confusion = flat(&|d| d.confusion);
    let confusion_joint = if confusion.is_empty() {
        None
    } else {
        let p: Vec<Vec<usize>> = confusion.iter().map(|t| t.values.clone()).collect();
        let g: Vec<Vec<usize>> = confusion.iter().map(|t| t.gold_values.clone()).collect();
        Some(joint_accuracy(&p, &g)?)
    };
    let dialogue_align = if has_align && !predictions.is_empty() {
        let ok = predictions
            .iter()
            .filter(|d| {
                d.turns
                    .iter()
                    .all(|t| t.aligned.as_ref() == Some(&t.gold_aligned))
            })
            .count();
        Some(ok as f64 / predictions.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        joint_accuracy: joint_accuracy(&pred, &gold)?,
        slot_accuracy: slot_accuracy(&pred, &gold)?,
        alignment_accuracy: align_acc(&all)?,
        dialogue_alignment_accuracy: dialogue_align,
        confusion_alignment_accuracy: align_acc(&confusion)?,
        confusion_joint_accuracy: confusion_joint,
        per_turn_joint: per_turn_curve(&depths, &pred, &gold)?,
        dialogues: predictions.len(),
        turns: all.len(),
        slots: num_slots,
        confusion_dialogues: predictions.iter().filter(|d| d.confusion).count(),
    })
}

pub fn evaluate(
    model: &Luna,
    dialogues: &[Dialogue],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<DialoguePrediction>)> {
    let preds = predict_corpus(model, dialogues, opts)?;
    let rep = report(&preds, model.ontology.num_slots())?;
    Ok((rep, preds))
}

/// One JSON object per dialogue turn: `{slot: {value, aligned_turn, p_align, p_value}}`.
pub fn predictions_jsonl(model: &Luna, preds: &[DialoguePrediction]) -> String {
    let onto = &model.ontology;
    let mut out = String::new();
    for d in preds {
        for t in &d.turns {
            let mut slots = serde_json::Map::new();
            for (s, name) in onto.slots().iter().enumerate() {
                let aligned = t.aligned.as_ref().map(|a| a[s]);
                slots.insert(
                    name.clone(),
                    json!({
                        "value": onto.candidates(s)[t.values[s]],
                        "gold": onto.candidates(s)[t.gold_values[s]],
                        "aligned_turn": aligned,
                        "gold_turn": t.gold_aligned[s],
                        "p_align": t.p_align[s],
                        "p_value": t.p_value[s],
                    }),
                );
            }
            let line = json!({ "dialogue": d.id, "turn": t.turn, "slots": slots });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn attention_jsonl(preds: &[DialoguePrediction]) -> String {
    let mut out = String::new();
    for d in preds {
        for t in &d.turns {
            if let Some(a) = &t.attention {
                let line = json!({ "dialogue": d.id, "turn": t.turn, "attention": a });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
