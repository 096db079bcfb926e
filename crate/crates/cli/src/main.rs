//! `luna`: corpus generation, training, evaluation, gradient checks and ablations.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or format, 3 numeric failure.

mod manifest;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use luna_core::ablation::{run_ablations, table_csv, AblationRun, Variant, TABLE_CSV};
use luna_core::checkpoint;
use luna_core::corpus::{
    generate_synthetic_corpus, has_confusion_pair, load_multiwoz, save_corpus, Dialogue, Ontology,
    OntologySpec, CORPUS_FILE, ONTOLOGY_FILE,
};
use luna_core::eval::{
    attention_jsonl, evaluate, per_turn_csv, predictions_jsonl, write_file, EvalOptions,
};
use luna_core::model_check::{check_model_gradients, small_config, ModelCheckOptions, LOSS_LABELS};
use luna_core::trainer::{
    train, TrainConfig, TrainRun, BEST_CKPT, EPOCHS_CSV, LAST_CKPT, LOSS_CSV,
};
use luna_core::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "luna",
    version,
    about = "Slot-turn alignment dialogue state tracker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (corpus.json + ontology.json).
    GenCorpus(GenCorpusArgs),
    /// Train a model and write checkpoints and loss logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus; prints the report as JSON.
    Eval(EvalArgs),
    /// Finite-difference check of every loss on a tiny instance.
    GradCheck(GradCheckArgs),
    /// Train and evaluate every ablation variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of dialogues.
    #[arg(long, default_value_t = 275)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON ontology spec; the built-in three-domain spec otherwise.
    #[arg(long)]
    ontology_spec: Option<PathBuf>,
    /// Also write `train/`, `dev/` and `test/` sub-corpora of these sizes (e.g. 200,25,50).
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    /// Overwrite existing corpus files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding corpus.json and ontology.json.
    #[arg(long)]
    corpus: PathBuf,
    /// Dev corpus for model selection and early stopping.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Start from the pretrained-encoder hyperparameters (small learning rates, frozen schema encoder).
    #[arg(long)]
    pretrained_hparams: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many epochs; continue later with --resume.
    #[arg(long)]
    epoch_budget: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for report.json, per_turn.csv and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL file with one record per turn.
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// JSONL file with attention maps per turn.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Select values with the soft alignment mixture instead of the argmax turn.
    #[arg(long)]
    soft: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Config JSON for model dimensions; d = 16 with shallow stacks otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 24)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_grad: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Evaluation corpus directory.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 1,
            Failure::Core(Error::Numeric(_) | Error::NonFinite(_)) | Failure::Check(_) => 3,
            Failure::Core(_) => 2,
        }
    }
}

/// Stdout write that tolerates a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Core(Error::io(path, e)))
}

fn load_corpus(dir: &Path) -> CliResult<(Vec<Dialogue>, Ontology)> {
    Ok(load_multiwoz(
        &dir.join(CORPUS_FILE),
        &dir.join(ONTOLOGY_FILE),
    )?)
}

fn load_with_ontology(dir: &Path, onto: &Ontology) -> CliResult<Vec<Dialogue>> {
    let (dialogues, other) = load_corpus(dir)?;
    if &other != onto {
        return Err(Error::Schema(format!("{} uses a different ontology", dir.display())).into());
    }
    Ok(dialogues)
}

/// Fields of `path` laid over `base`; unknown fields are rejected.
fn load_config(path: Option<&Path>, base: TrainConfig) -> CliResult<TrainConfig> {
    let Some(path) = path else {
        base.validate()?;
        return Ok(base);
    };
    let context = path.display().to_string();
    let text = read_text(path)?;
    let overlay: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(&context, &e))?;
    let serde_json::Value::Object(fields) = overlay else {
        return Err(Error::Config(format!("{context}: config must be a JSON object")).into());
    };
    let mut merged = serde_json::to_value(&base).expect("config serializes");
    let target = merged.as_object_mut().expect("config is an object");
    for (k, v) in fields {
        if !target.contains_key(&k) {
            return Err(Error::Config(format!("{context}: unknown field `{k}`")).into());
        }
        target.insert(k, v);
    }
    let cfg: TrainConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("{context}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &TrainConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

fn gen_corpus(a: GenCorpusArgs) -> CliResult<()> {
    let spec = match &a.ontology_spec {
        Some(p) => {
            let ctx = p.display().to_string();
            serde_json::from_str::<OntologySpec>(&read_text(p)?)
                .map_err(|e| Error::json(&ctx, &e))?
        }
        None => OntologySpec::default(),
    };
    let split = a.split.clone().unwrap_or_default();
    if !split.is_empty() && split.len() != 3 {
        return Err(Failure::Usage(
            "--split takes three sizes: train,dev,test".into(),
        ));
    }
    if split.iter().sum::<usize>() > a.n {
        return Err(Failure::Usage(format!(
            "--split sums to more than --n {}",
            a.n
        )));
    }
    let mut dirs = vec![a.out.clone()];
    dirs.extend(
        ["train", "dev", "test"]
            .iter()
            .take(split.len())
            .map(|s| a.out.join(s)),
    );
    if !a.force {
        if let Some(d) = dirs
            .iter()
            .find(|d| d.join(CORPUS_FILE).exists() || d.join(ONTOLOGY_FILE).exists())
        {
            return Err(Failure::Usage(format!(
                "{} already holds a corpus; pass --force to overwrite",
                d.display()
            )));
        }
    }
    let manifest = RunManifest::start(
        "gen-corpus",
        &serde_json::to_string(&spec).expect("spec serializes"),
        a.seed,
    );
    let (dialogues, onto) = generate_synthetic_corpus(a.seed, a.n, &spec)?;
    save_corpus(&a.out, &dialogues, &onto)?;
    let mut start = 0;
    for (dir, &n) in dirs[1..].iter().zip(&split) {
        save_corpus(dir, &dialogues[start..start + n], &onto)?;
        start += n;
    }
    let confusion = dialogues
        .iter()
        .filter(|d| has_confusion_pair(d, &onto))
        .count();
    log::info!(
        "{} dialogues, {confusion} with a cross-domain confusion pair",
        dialogues.len()
    );
    manifest.finish(&a.out, dirs.iter().map(|d| d.join(CORPUS_FILE)).collect())?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let base = if a.pretrained_hparams {
        TrainConfig::pretrained_hparams()
    } else {
        TrainConfig::default()
    };
    let mut cfg = load_config(a.config.as_deref(), base)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train_set, onto) = load_corpus(&a.corpus)?;
    let dev = match &a.dev {
        Some(d) => load_with_ontology(d, &onto)?,
        None => Vec::new(),
    };
    let manifest = RunManifest::start("train", &config_json(&cfg), cfg.seed);
    let summary = train(TrainRun {
        config: &cfg,
        train: &train_set,
        dev: &dev,
        ontology: &onto,
        out_dir: Some(&a.out),
        resume: a.resume,
        epoch_budget: a.epoch_budget,
    })?;
    let mut outputs: Vec<PathBuf> = [LAST_CKPT, BEST_CKPT, LOSS_CSV, EPOCHS_CSV]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    if let Some(rep) = &summary.best_dev {
        let p = a.out.join("dev_report.json");
        write_file(
            &p,
            &serde_json::to_string_pretty(rep).expect("report serializes"),
        )?;
        outputs.push(p);
    }
    let line = serde_json::json!({
        "epochs": summary.state.epoch,
        "steps": summary.state.step,
        "best_epoch": summary.state.best_epoch,
        "best_dev_joint": summary.best_dev.as_ref().map(|r| r.joint_accuracy),
    });
    emit(&line.to_string());
    manifest.finish(&a.out, outputs)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let (mut model, cfg) = checkpoint::load_model(&a.checkpoint)?;
    if a.soft {
        model.config.ablation.soft_alignment = true;
    }
    let dialogues = load_with_ontology(&a.corpus, &model.ontology)?;
    let opts = EvalOptions {
        threads: a.threads.max(1),
        collect_attention: a.dump_attention.is_some(),
        policy: cfg.align_policy,
    };
    let manifest = RunManifest::start("eval", &config_json(&cfg), cfg.seed);
    let (report, preds) = evaluate(&model, &dialogues, &opts)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let mut outputs = Vec::new();
    if let Some(p) = &a.dump_predictions {
        write_file(p, &predictions_jsonl(&model, &preds))?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.dump_attention {
        write_file(p, &attention_jsonl(&preds))?;
        outputs.push(p.clone());
    }
    if let Some(dir) = &a.out {
        write_file(&dir.join("report.json"), &json)?;
        write_file(
            &dir.join("per_turn.csv"),
            &per_turn_csv(&report.per_turn_joint),
        )?;
        outputs.extend([dir.join("report.json"), dir.join("per_turn.csv")]);
        manifest.finish(dir, outputs)?;
    }
    emit(&json);
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> CliResult<()> {
    let config = load_config(a.config.as_deref(), small_config())?;
    let reports = check_model_gradients(&ModelCheckOptions {
        config,
        samples: a.samples,
        seed: a.seed,
        corrupt_grad: a.corrupt_grad,
    })?;
    let mut failed = Vec::new();
    for r in &reports {
        let worst = r.worst.as_ref().map_or("-".to_string(), |w| {
            format!(
                "{}[{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )
        });
        emit(&format!(
            "{:<6} {} checked {:>5} skipped {:>3} max_rel_err {:.3e} worst {}",
            r.label,
            if r.passed { "PASS" } else { "FAIL" },
            r.checked,
            r.skipped,
            r.max_rel_err,
            worst
        ));
        if !r.passed {
            failed.push(r.label.clone());
        }
    }
    debug_assert_eq!(reports.len(), LOSS_LABELS.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref(), TrainConfig::default())?;
    let (train_set, onto) = load_corpus(&a.corpus)?;
    let dev = match &a.dev {
        Some(d) => load_with_ontology(d, &onto)?,
        None => Vec::new(),
    };
    let eval_set = load_with_ontology(&a.eval, &onto)?;
    let manifest = RunManifest::start(
        "ablate",
        &config_json(&cfg),
        a.seeds.first().copied().unwrap_or(0),
    );
    let rows = run_ablations(&AblationRun {
        base: &cfg,
        train: &train_set,
        dev: &dev,
        eval: &eval_set,
        ontology: &onto,
        seeds: &a.seeds,
        variants: &Variant::ALL,
        out_dir: Some(&a.out),
        eval_options: EvalOptions {
            threads: a.threads.max(1),
            collect_attention: false,
            policy: cfg.align_policy,
        },
    })?;
    emit(table_csv(&rows).trim_end());
    manifest.finish(&a.out, vec![a.out.join(TABLE_CSV)])?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LUNA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Check(m) => m.clone(),
                Failure::Core(e) => e.to_string(),
            };
            eprintln!("luna: {msg}");
            ExitCode::from(f.code())
        }
    }
}
