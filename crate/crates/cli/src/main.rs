//! `nsad` command line: simulate cohorts, run the two-stage training
//! pipeline, evaluate checkpoints, and emit per-patient explanatory reports.
//!
//! Exit codes are a stable contract: 0 on success, 1 for domain errors
//! (invalid rules, stage mismatches, unknown patient ids, ...), 2 for I/O or
//! configuration problems (unreadable paths, missing flags, bad config keys).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nsad_core::autodiff::StoreError;
use nsad_core::data::{
    load_cohort, simulate_cohort, write_manifest, write_records_csv, write_schema, Cohort,
    DataError, SimManifest, SimSpec,
};
use nsad_core::dsl::{parse_ruleset, validate_ruleset, DiagnosticKind};
use nsad_core::perception::{MlpModel, PatientSample};
use nsad_core::reasoner::{adjust, register_balance, BALANCE_PARAM};
use nsad_core::report::{build_report, narrate, render_text, ExternalProseConfig, RenderStyle};
use nsad_core::stats::{
    paired_comparisons, render_table, seed_aggregate, EvalSummary, SeedMetrics, StatsError,
    METRIC_NAMES,
};
use nsad_core::trainer::{
    evaluate_samples, outcome_metrics, pretrain, seed_family_comparison, train_joint, Checkpoint,
    TrainConfig, TrainError,
};
use nsad_core::{FeatureSchema, ParameterStore, RuleSet};

#[derive(Parser)]
#[command(
    name = "nsad",
    version,
    about = "Trainable symbolic refinement of classifier logits: simulate, train, evaluate, explain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a rule file against a feature schema.
    CheckRules(CheckRulesArgs),
    /// Generate a synthetic labeled cohort with a known ground truth.
    Simulate(SimulateArgs),
    /// Stage 1: train the perception network alone.
    Pretrain(PretrainArgs),
    /// Stage 2: jointly fine-tune the network, rule parameters, and balance.
    Train(TrainArgs),
    /// Seed-family pipeline comparison, or scoring of explicit checkpoints.
    Eval(EvalArgs),
    /// Write the explanatory diagnosis report for one patient.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct CheckRulesArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rule file to check.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Feature schema the rules must conform to.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort description TOML (defaults to the built-in cohort).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Rule file whose effects shape the ground-truth risk (defaults to the
    /// spec's `truth_rules`, then to the built-in ruleset).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for records.csv, schema.txt, and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort records CSV.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Feature schema file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Optional precomputed perception logits CSV to attach.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Random seed for initialization and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the stage-1 checkpoint is written as stage1.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort records CSV.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Feature schema file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Rule file to train jointly with the network.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Optional precomputed perception logits CSV to attach.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Stage-1 checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Random seed for batch shuffling (use the pretraining seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the balance weight fixed at its initial value.
    #[arg(long)]
    freeze_w: bool,
    /// Output directory; the stage-2 checkpoint is written as stage2.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort description TOML for seed-family runs (defaults to built-in).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Rule file (seed-family runs default as in `simulate`).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Score this records CSV with explicit checkpoints instead of running
    /// the simulated seed-family pipeline.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Feature schema file (checkpoint mode).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Optional precomputed perception logits CSV to attach.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Checkpoint to score (checkpoint mode).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Second checkpoint to score side by side (checkpoint mode).
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    /// First seed of the family (seed-family mode).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run (seed-family mode).
    #[arg(long)]
    seeds: Option<u64>,
    /// Keep the balance weight fixed during stage 2.
    #[arg(long)]
    freeze_w: bool,
    /// Output directory for metrics.json (and metrics.txt in family mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort records CSV containing the patient.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Feature schema file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Rule file the checkpoint was trained with.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Optional precomputed perception logits CSV to attach.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Stage-2 checkpoint holding network, rule, and balance parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Patient id to report on.
    #[arg(long)]
    id: Option<String>,
    /// Fetch report prose from the service named by NSAD_LLM_ENDPOINT.
    #[arg(long)]
    external_prose: bool,
    /// Output directory for report_<id>.json and report_<id>.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    /// Invalid inputs within a well-formed invocation; exit code 1.
    Domain(String),
    /// I/O failures and configuration mistakes; exit code 2.
    Config(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Io(_) => CliError::Config(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Io(_) | TrainError::Data(DataError::Io(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Domain(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

/// Keys accepted in `--config` files; each mirrors the flag of the same name.
const CONFIG_KEYS: &[&str] = &[
    "schema",
    "rules",
    "records",
    "logits",
    "checkpoint",
    "base_checkpoint",
    "out",
    "seed",
    "seeds",
    "spec",
    "id",
    "freeze_w",
    "external_prose",
    "epochs",
    "batch_size",
    "lr_stage1",
    "lr_stage2",
    "lr_decay",
    "lr_step_epochs",
    "class_weighting",
];

/// Config-file values; flags always take precedence on lookup.
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Config(format!(
                        "{}:{}: expected `key = value`",
                        path.display(),
                        idx + 1
                    )));
                };
                let key = key.trim().to_string();
                if !CONFIG_KEYS.contains(&key.as_str()) {
                    return Err(CliError::Config(format!(
                        "{}:{}: unknown config key `{key}`",
                        path.display(),
                        idx + 1
                    )));
                }
                values.insert(key, value.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    fn path(&self, key: &str, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or_else(|| self.values.get(key).map(PathBuf::from))
    }

    fn require_path(&self, key: &str, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, flag).ok_or_else(|| {
            CliError::Config(format!("missing required `--{}`", key.replace('_', "-")))
        })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }

    fn flag(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        if flag {
            return Ok(true);
        }
        Ok(self.parsed::<bool>(key, None)?.unwrap_or(false))
    }

    fn train_config(&self, freeze_w: bool) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::default();
        if let Some(v) = self.parsed::<usize>("epochs", None)? {
            c.epochs = v;
        }
        if let Some(v) = self.parsed::<usize>("batch_size", None)? {
            c.batch_size = v;
        }
        if let Some(v) = self.parsed::<f64>("lr_stage1", None)? {
            c.lr_stage1 = v;
        }
        if let Some(v) = self.parsed::<f64>("lr_stage2", None)? {
            c.lr_stage2 = v;
        }
        if let Some(v) = self.parsed::<f64>("lr_decay", None)? {
            c.lr_decay = v;
        }
        if let Some(v) = self.parsed::<usize>("lr_step_epochs", None)? {
            c.lr_step_epochs = v;
        }
        if let Some(v) = self.parsed::<bool>("class_weighting", None)? {
            c.class_weighting = v;
        }
        c.freeze_balance = self.flag("freeze_w", freeze_w)?;
        Ok(c)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn load_schema(path: &Path) -> Result<FeatureSchema, CliError> {
    FeatureSchema::parse(&read_text(path)?)
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn load_rules(path: &Path, schema: &FeatureSchema) -> Result<RuleSet, CliError> {
    parse_ruleset(&read_text(path)?, schema)
        .map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn load_spec(path: Option<&Path>) -> Result<SimSpec, CliError> {
    match path {
        Some(p) => {
            SimSpec::parse(&read_text(p)?).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))
        }
        None => Ok(SimSpec::default_spec()),
    }
}

/// Rules used for simulation ground truth and joint training: `--rules`
/// wins, then the spec's `truth_rules` path (resolved relative to the spec
/// file), then the built-in ruleset.
fn load_sim_rules(
    spec: &SimSpec,
    spec_path: Option<&Path>,
    rules_flag: Option<&Path>,
) -> Result<RuleSet, CliError> {
    let schema = spec.schema();
    if let Some(p) = rules_flag {
        return load_rules(p, &schema);
    }
    if let Some(rel) = &spec.truth_rules {
        let p = match spec_path.and_then(Path::parent) {
            Some(dir) => dir.join(rel),
            None => PathBuf::from(rel),
        };
        return load_rules(&p, &schema);
    }
    parse_ruleset(nsad_core::assets::EXAMPLE_RULES, &schema)
        .map_err(|e| CliError::Domain(format!("built-in rules: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn report_losses(stage: u8, losses: &[f64]) {
    match (losses.first(), losses.last()) {
        (Some(first), Some(last)) => {
            println!("stage {stage}: {} epochs, loss {first:.6} -> {last:.6}", losses.len());
        }
        _ => println!("stage {stage}: no training epochs"),
    }
}

fn main() -> ExitCode {
    // Die quietly when the reader closes the pipe, like any line-oriented tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::CheckRules(a) => cmd_check_rules(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

fn cmd_check_rules(a: CheckRulesArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    let schema = load_schema(&s.require_path("schema", &a.schema)?)?;
    let rules_path = s.require_path("rules", &a.rules)?;
    let rules = load_rules(&rules_path, &schema)?;

    let mut errors = 0;
    for d in validate_ruleset(&rules, &schema) {
        let scope = d.rule.as_deref().map(|r| format!("rule `{r}`: ")).unwrap_or_default();
        match d.kind {
            DiagnosticKind::Error => {
                errors += 1;
                eprintln!("error: {scope}{}", d.message);
            }
            DiagnosticKind::Warning => eprintln!("warning: {scope}{}", d.message),
        }
    }
    if errors > 0 {
        return Err(CliError::Domain(format!(
            "{errors} validation error(s) in {}",
            rules_path.display()
        )));
    }

    let n_params: usize = rules.rules.iter().map(|r| r.params.len()).sum();
    let frozen = rules.rules.iter().flat_map(|r| &r.params).filter(|p| p.frozen).count();
    println!(
        "ok: {} rules, {} parameters ({} trainable, {} frozen)",
        rules.rules.len(),
        n_params,
        n_params - frozen,
        frozen
    );
    for r in &rules.rules {
        println!("  {} ({} parameters)", r.id, r.params.len());
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    let spec_path = s.path("spec", &a.spec);
    let spec = load_spec(spec_path.as_deref())?;
    let rules = load_sim_rules(&spec, spec_path.as_deref(), s.path("rules", &a.rules).as_deref())?;
    let seed = s.parsed::<u64>("seed", a.seed)?.unwrap_or(0);
    let out = s.require_path("out", &a.out)?;
    ensure_dir(&out)?;

    let (cohort, manifest) = simulate_cohort(&spec, &rules, seed)?;
    write_records_csv(&cohort, &out.join("records.csv"))?;
    write_schema(&cohort.schema, &out.join("schema.txt"))?;
    write_manifest(&manifest, &out.join("manifest.json"))?;
    println!(
        "wrote {} records to {} (seed {seed}, AD prevalence {:.4})",
        cohort.samples.len(),
        out.display(),
        manifest.prior_empirical
    );
    println!(
        "reference accuracy: full {:.4}, imaging-only {:.4} (gap {:.4})",
        manifest.ref_acc_full, manifest.ref_acc_imaging, manifest.bayes_gap
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    let schema = load_schema(&s.require_path("schema", &a.schema)?)?;
    let records = s.require_path("records", &a.records)?;
    let logits = s.path("logits", &a.logits);
    let cohort = load_cohort(&records, &schema, logits.as_deref())?;
    let config = s.train_config(false)?;
    let seed = s.parsed::<u64>("seed", a.seed)?.unwrap_or(0);
    let out = s.require_path("out", &a.out)?;
    ensure_dir(&out)?;

    let run = pretrain(&cohort, &config, seed)?;
    let path = out.join("stage1.ckpt");
    run.checkpoint.save(&path)?;
    report_losses(1, &run.epoch_losses);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    let schema = load_schema(&s.require_path("schema", &a.schema)?)?;
    let records = s.require_path("records", &a.records)?;
    let logits = s.path("logits", &a.logits);
    let cohort = load_cohort(&records, &schema, logits.as_deref())?;
    let rules = load_rules(&s.require_path("rules", &a.rules)?, &schema)?;
    let base = Checkpoint::load(&s.require_path("checkpoint", &a.checkpoint)?)?;
    let config = s.train_config(a.freeze_w)?;
    let seed = s.parsed::<u64>("seed", a.seed)?.unwrap_or(0);
    let out = s.require_path("out", &a.out)?;
    ensure_dir(&out)?;

    let run = train_joint(&cohort, &rules, &config, seed, &base)?;
    let path = out.join("stage2.ckpt");
    run.checkpoint.save(&path)?;
    report_losses(2, &run.epoch_losses);
    println!("balance w = {:.6}", run.store.value(BALANCE_PARAM));
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    match s.path("records", &a.records) {
        Some(records) => eval_checkpoints(&s, &a, &records),
        None => eval_seed_family(&s, &a),
    }
}

#[derive(Serialize)]
struct SeedFamilyReport {
    seeds: Vec<u64>,
    base: EvalSummary,
    ours: EvalSummary,
    cohorts: Vec<SimManifest>,
}

fn eval_seed_family(s: &Settings, a: &EvalArgs) -> Result<(), CliError> {
    let spec_path = s.path("spec", &a.spec);
    let spec = load_spec(spec_path.as_deref())?;
    let rules = load_sim_rules(&spec, spec_path.as_deref(), s.path("rules", &a.rules).as_deref())?;
    let config = s.train_config(a.freeze_w)?;
    let first = s.parsed::<u64>("seed", a.seed)?.unwrap_or(0);
    let count = s.parsed::<u64>("seeds", a.seeds)?.unwrap_or(10);
    let seeds: Vec<u64> = (0..count).map(|i| first + i).collect();

    let runs = seed_family_comparison(&spec, &rules, &config, &seeds)?;
    let base: Vec<SeedMetrics> = runs.iter().map(|r| r.base).collect();
    let ours: Vec<SeedMetrics> = runs.iter().map(|r| r.ours).collect();
    let base_summary = seed_aggregate(&base)?;
    let mut ours_summary = seed_aggregate(&ours)?;
    ours_summary.paired_vs_base = Some(paired_comparisons(&ours, &base)?);

    let table = render_table(&[("base", &base_summary), ("ours", &ours_summary)]);
    print!("{table}");

    if let Some(out) = s.path("out", &a.out) {
        ensure_dir(&out)?;
        let report = SeedFamilyReport {
            seeds,
            base: base_summary,
            ours: ours_summary,
            cohorts: runs.iter().map(|r| r.manifest.clone()).collect(),
        };
        write_json(&out.join("metrics.json"), &report)?;
        let txt = out.join("metrics.txt");
        fs::write(&txt, &table).map_err(io_err(&txt))?;
        println!("wrote {} and {}", out.join("metrics.json").display(), txt.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckpointEvalReport {
    ours: SeedMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    base: Option<SeedMetrics>,
}

fn eval_checkpoints(s: &Settings, a: &EvalArgs, records: &Path) -> Result<(), CliError> {
    let schema = load_schema(&s.require_path("schema", &a.schema)?)?;
    let logits = s.path("logits", &a.logits);
    let cohort = load_cohort(records, &schema, logits.as_deref())?;
    let rules = match s.path("rules", &a.rules) {
        Some(p) => Some(load_rules(&p, &schema)?),
        None => None,
    };
    let samples: Vec<&PatientSample> = cohort.samples.iter().collect();

    let ours_ck = Checkpoint::load(&s.require_path("checkpoint", &a.checkpoint)?)?;
    let ours = score_checkpoint(&ours_ck, &cohort, &samples, rules.as_ref())?;
    let base = match s.path("base_checkpoint", &a.base_checkpoint) {
        Some(p) => {
            Some(score_checkpoint(&Checkpoint::load(&p)?, &cohort, &samples, rules.as_ref())?)
        }
        None => None,
    };

    match &base {
        Some(b) => {
            println!("{:<10} {:>10} {:>10}", "metric", "base", "ours");
            for m in METRIC_NAMES {
                println!("{:<10} {:>10.4} {:>10.4}", m, b.get(m), ours.get(m));
            }
        }
        None => {
            println!("{:<10} {:>10}", "metric", "value");
            for m in METRIC_NAMES {
                println!("{:<10} {:>10.4}", m, ours.get(m));
            }
        }
    }

    if let Some(out) = s.path("out", &a.out) {
        ensure_dir(&out)?;
        write_json(&out.join("metrics.json"), &CheckpointEvalReport { ours, base })?;
        println!("wrote {}", out.join("metrics.json").display());
    }
    Ok(())
}

/// Rebuild the model a checkpoint describes and score `samples` with it.
/// Stage-2 checkpoints carry rule and balance parameters, so they need the
/// ruleset they were trained with.
fn score_checkpoint(
    ck: &Checkpoint,
    cohort: &Cohort,
    samples: &[&PatientSample],
    rules: Option<&RuleSet>,
) -> Result<SeedMetrics, CliError> {
    let (model, store, eval_rules) = restore_model(ck, cohort, rules)?;
    let outcome = evaluate_samples(&model, eval_rules, samples, &store)?;
    Ok(outcome_metrics(ck.seed, &outcome)?)
}

fn restore_model<'r>(
    ck: &Checkpoint,
    cohort: &Cohort,
    rules: Option<&'r RuleSet>,
) -> Result<(MlpModel, ParameterStore, Option<&'r RuleSet>), CliError> {
    let model = MlpModel::default_for_input(cohort.imaging_dim());
    let mut store = ParameterStore::new();
    model.register_params(&mut store, ck.seed)?;
    let eval_rules = if ck.stage >= 2 {
        let rs = rules.ok_or_else(|| {
            CliError::Config("a stage-2 checkpoint needs --rules to rebuild its parameters".into())
        })?;
        store.register_rule_params(rs)?;
        register_balance(&mut store, false)?;
        Some(rs)
    } else {
        None
    };
    ck.restore(&mut store)?;
    Ok((model, store, eval_rules))
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    let s = Settings::load(a.config.as_deref())?;
    let schema = load_schema(&s.require_path("schema", &a.schema)?)?;
    let records = s.require_path("records", &a.records)?;
    let logits = s.path("logits", &a.logits);
    let cohort = load_cohort(&records, &schema, logits.as_deref())?;
    let rules = load_rules(&s.require_path("rules", &a.rules)?, &schema)?;
    let ck = Checkpoint::load(&s.require_path("checkpoint", &a.checkpoint)?)?;
    if ck.stage != 2 {
        return Err(CliError::Domain(format!(
            "diagnose needs a stage-2 checkpoint (got stage {})",
            ck.stage
        )));
    }
    let id = s
        .parsed::<String>("id", a.id.clone())?
        .ok_or_else(|| CliError::Config("missing required `--id`".into()))?;
    let out = s.require_path("out", &a.out)?;
    ensure_dir(&out)?;

    let sample = cohort
        .samples
        .iter()
        .find(|p| p.record.id == id)
        .ok_or_else(|| CliError::Domain(format!("unknown patient id `{id}`")))?;

    let (model, store, _) = restore_model(&ck, &cohort, Some(&rules))?;
    let y = match sample.external_logits {
        Some(y) => y,
        None => model.forward(&sample.imaging_features, &store),
    };
    let adj = adjust(&rules, &sample.record, y, &store);
    let mut report = build_report(&adj, &rules, &sample.record);

    if s.flag("external_prose", a.external_prose)? {
        match ExternalProseConfig::from_env() {
            None => eprintln!(
                "warning: --external-prose set but NSAD_LLM_ENDPOINT is not configured; \
                 using template text"
            ),
            Some(cfg) => {
                if let Err(e) = narrate(&mut report, &cfg) {
                    eprintln!("warning: external prose unavailable ({e}); using template text");
                }
            }
        }
    }

    let text = render_text(&report, RenderStyle::Template);
    let json_path = out.join(format!("report_{id}.json"));
    let text_path = out.join(format!("report_{id}.txt"));
    write_json(&json_path, &report)?;
    fs::write(&text_path, &text).map_err(io_err(&text_path))?;
    print!("{text}");
    println!("wrote {} and {}", json_path.display(), text_path.display());
    Ok(())
}
