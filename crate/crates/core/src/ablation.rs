//! Component ablations over several seeds.
//!
//! Each (variant, seed) cell writes `<out>/<variant>/seed-<s>/report.json`;
//! cells whose report already exists are loaded instead of retrained, so an
//! interrupted sweep picks up where it stopped.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::corpus::{Dialogue, Ontology};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_std, write_file, EvalOptions, EvalReport};
use crate::trainer::{train, TrainConfig, TrainRun};

pub const REPORT_FILE: &str = "report.json";
pub const TABLE_CSV: &str = "ablation.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAuxiliaryTask,
    NoOverallSlotToTurn,
    NoAlignmentModule,
    SoftAlignment,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAuxiliaryTask,
        Variant::NoOverallSlotToTurn,
        Variant::NoAlignmentModule,
        Variant::SoftAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAuxiliaryTask => "no_auxiliary_task",
            Variant::NoOverallSlotToTurn => "no_overall_slot_to_turn",
            Variant::NoAlignmentModule => "no_alignment_module",
            Variant::SoftAlignment => "soft_alignment",
        }
    }

    /// `base` with this variant's switch turned on (and the others off).
    pub fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            seed,
            no_alignment_module: false,
            no_overall_slot_to_turn: false,
            no_ranking_task: false,
            soft_alignment: false,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::NoAuxiliaryTask => c.no_ranking_task = true,
            Variant::NoOverallSlotToTurn => c.no_overall_slot_to_turn = true,
            Variant::NoAlignmentModule => c.no_alignment_module = true,
            Variant::SoftAlignment => c.soft_alignment = true,
        }
        c
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub joint: Vec<f64>,
    pub joint_mean: f64,
    pub joint_std: f64,
    pub alignment_mean: Option<f64>,
    pub alignment_std: Option<f64>,
    pub confusion_alignment_mean: Option<f64>,
}

pub struct AblationRun<'a> {
    pub base: &'a TrainConfig,
    pub train: &'a [Dialogue],
    pub dev: &'a [Dialogue],
    pub eval: &'a [Dialogue],
    pub ontology: &'a Ontology,
    pub seeds: &'a [u64],
    pub variants: &'a [Variant],
    pub out_dir: Option<&'a Path>,
    pub eval_options: EvalOptions,
}

fn run_cell(run: &AblationRun, variant: Variant, seed: u64) -> Result<EvalReport> {
    let dir = run
        .out_dir
        .map(|d| d.join(variant.name()).join(format!("seed-{seed}")));
    if let Some(dir) = &dir {
        let path = dir.join(REPORT_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::json(path.display().to_string(), &e));
        }
    }
    let cfg = variant.config(run.base, seed);
    log::info!("ablation {} seed {seed}: training", variant.name());
    let summary = train(TrainRun {
        config: &cfg,
        train: run.train,
        dev: run.dev,
        ontology: run.ontology,
        out_dir: dir.as_deref(),
        resume: dir.is_some(),
        epoch_budget: None,
    })?;
    let (report, _) = evaluate(&summary.model, run.eval, &run.eval_options)?;
    if let Some(dir) = &dir {
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| Error::json(REPORT_FILE, &e))?;
        write_file(&dir.join(REPORT_FILE), &text)?;
    }
    Ok(report)
}

fn optional_stats(xs: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    if vals.is_empty() || vals.len() != xs.len() {
        return (None, None);
    }
    let (m, s) = mean_std(&vals);
    (Some(m), Some(s))
}

pub fn run_ablations(run: &AblationRun) -> Result<Vec<AblationRow>> {
    if run.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(run.variants.len());
    for &variant in run.variants {
        let reports = run
            .seeds
            .iter()
            .map(|&s| run_cell(run, variant, s))
            .collect::<Result<Vec<_>>>()?;
        let joint: Vec<f64> = reports.iter().map(|r| r.joint_accuracy).collect();
        let (joint_mean, joint_std) = mean_std(&joint);
        let (alignment_mean, alignment_std) = optional_stats(
            &reports
                .iter()
                .map(|r| r.alignment_accuracy)
                .collect::<Vec<_>>(),
        );
        let (confusion_alignment_mean, _) = optional_stats(
            &reports
                .iter()
                .map(|r| r.confusion_alignment_accuracy)
                .collect::<Vec<_>>(),
        );
        rows.push(AblationRow {
            variant,
            seeds: run.seeds.to_vec(),
            joint,
            joint_mean,
            joint_std,
            alignment_mean,
            alignment_std,
            confusion_alignment_mean,
        });
    }
    if let Some(dir) = run.out_dir {
        write_file(&dir.join(TABLE_CSV), &table_csv(&rows))?;
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.4}"))
}

/// One line per variant: means with sample standard deviations over seeds.
pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant,seeds,joint_mean,joint_std,align_mean,align_std,confusion_align_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{},{},{}",
            r.variant.name(),
            r.seeds.len(),
            r.joint_mean,
            r.joint_std,
            opt(r.alignment_mean),
            opt(r.alignment_std),
            opt(r.confusion_alignment_mean)
        );
    }
    s
}
