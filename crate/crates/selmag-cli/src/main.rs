//! `selmag` command-line driver: synthetic suite generation, source/probe
//! pretraining, selector meta-training with target adaptation, evaluation,
//! and baseline/ablation sweeps. Every command takes a JSON config with flag
//! overrides, echoes the effective values into `run_config_resolved.json`,
//! and is bit-for-bit reproducible given identical inputs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use selmag_core::checkpoint::Checkpoint;
use selmag_core::error::{Result, SelmagError};
use selmag_core::eval::{
    adapt_stage, evaluate_hypothesis, experiment_config_hash, meta_stage_observed, pretrain_stage,
    run_baseline, run_variant_with_artifacts, selector_analysis, selector_analysis_csv,
    train_stage, AblationSpec, ExperimentConfig, PretrainArtifacts, REPORT_CSV_HEADER,
};
use selmag_core::graph::{ensure_dir, load_suite, load_target_eval_labels, DomainSet, Graph};
use selmag_core::meta::{
    adaptation_loss, bind_episode_with, build_adaptation_problem, hypothesis_to_constants,
    pairwise_transfer_scores, MetaEpochRecord, PairwiseScores,
};
use selmag_core::models::{train_source_models, Hypothesis, SourceModels};
use selmag_core::synth::{
    default_base_params, default_schedule, generate_suite, write_suite, ShiftSchedule,
    SuiteBaseParams,
};
use selmag_core::tensor::{Matrix, Tape};
use selmag_core::transfer::{
    pretrain_all, SelectorParams, SslArtifacts, SslHeads, SslModules, TransferScores, NUM_TASKS,
    TASK_NAMES,
};

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

const SOURCE_MODELS_FILE: &str = "source_models.json";
const SSL_FILE: &str = "ssl_modules.json";
const PAIRWISE_FILE: &str = "transfer_scores_pairs.csv";
const SELECTORS_FILE: &str = "selectors.json";
const TARGET_MODEL_FILE: &str = "target_model.json";
const TRAIN_LOG_FILE: &str = "training_log.csv";
const TARGET_SCORES_FILE: &str = "transfer_scores_target.csv";
const PLAN_FILE: &str = "transport_plan.csv";
const RESOLVED_FILE: &str = "run_config_resolved.json";
const REPORT_FILE: &str = "eval_report.csv";
const ANALYSIS_FILE: &str = "selector_analysis.csv";
const SWEEP_FILE: &str = "sweep.csv";

/// Blend values swept by `evaluate --sweep`.
const LAMBDA_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.5, 0.6, 0.8];
/// Entropic-regularization values swept by `evaluate --sweep`.
const EPSILON_GRID: [f64; 5] = [0.0001, 0.001, 0.01, 0.1, 0.2];

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "selmag",
    about = "Selective multi-source domain adaptation for node classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain suite on disk.
    Generate(GenerateArgs),
    /// Train source models and probe modules; write checkpoints and the
    /// pairwise transfer-score table.
    Pretrain(PretrainArgs),
    /// Meta-train the selectors and adapt the target model.
    Train(TrainArgs),
    /// Score an adapted model against held-out target labels.
    Evaluate(EvaluateArgs),
    /// Run baselines and ablation variants end to end on one suite.
    Ablate(AblateArgs),
}

/// Experiment configuration: a JSON file plus explicit flag overrides
/// (flags win).
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// JSON experiment config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Blend between alignment and distillation losses.
    #[arg(long)]
    lambda: Option<f64>,
    /// Entropic regularization strength of the transport solver.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Adaptation steps per episode and per cycle.
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Meta-training epoch cap.
    #[arg(long)]
    max_outer_epochs: Option<usize>,
    /// Supervised source-training epoch cap.
    #[arg(long)]
    source_epochs: Option<usize>,
    /// Probe-pretraining epoch cap.
    #[arg(long)]
    ssl_epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.epsilon {
            cfg.train.epsilon = v;
        }
        if let Some(v) = self.inner_steps {
            cfg.train.inner_steps = v;
        }
        if let Some(v) = self.max_outer_epochs {
            cfg.train.max_outer_epochs = v;
        }
        if let Some(v) = self.source_epochs {
            cfg.source.max_epochs = v;
        }
        if let Some(v) = self.ssl_epochs {
            cfg.ssl.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Suite description JSON with `base` and `schedule` keys; the built-in
    /// five-source schedule is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generative seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output suite directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Input suite directory.
    #[arg(long)]
    suite: PathBuf,
    /// Output artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Skip stages whose artifact files already exist.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Input suite directory.
    #[arg(long)]
    suite: PathBuf,
    /// Pretraining artifact directory.
    #[arg(long)]
    artifacts: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Variant to train: `full`, or `+`-joined switches among
    /// `no_global`, `no_local`, `no_kd`.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Dump the transport plan at the adapted parameters as CSV.
    #[arg(long)]
    dump_plan: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Input suite directory (provides the held-out target labels).
    #[arg(long)]
    suite: PathBuf,
    /// Pretraining artifact directory (needed for the selector analysis).
    #[arg(long)]
    pretrain: PathBuf,
    /// Training run directory (selectors + target model).
    #[arg(long)]
    run: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Run label for the report rows.
    #[arg(long, default_value = "run")]
    run_id: String,
    /// Variant label for the report rows.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Re-train across the blend and regularization grids and emit a
    /// per-point sweep CSV.
    #[arg(long)]
    sweep: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Input suite directory.
    #[arg(long)]
    suite: PathBuf,
    /// Output directory for the combined report.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants: `direct`, `uniform_ot`, `full`, or
    /// `+`-joined ablation switches.
    #[arg(long, default_value = "direct,uniform_ot,full,no_global,no_local,no_kd")]
    variants: String,
    /// Run label for the report rows.
    #[arg(long, default_value = "ablate")]
    run_id: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

/// 2 config error, 3 missing artifact, 4 numerical failure.
fn exit_code_for(err: &SelmagError) -> u8 {
    match err {
        SelmagError::MissingFile(_) | SelmagError::Io { .. } => 3,
        SelmagError::NonFinite { .. } | SelmagError::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(SelmagError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SelmagError::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SelmagError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(SelmagError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| SelmagError::io(path, e))
}

/// Echoes the effective configuration and inputs of a run for provenance.
fn write_resolved(
    out_dir: &Path,
    command: &str,
    inputs: &[(&str, &Path)],
    cfg: Option<&ExperimentConfig>,
    extras: Value,
) -> Result<()> {
    let path = out_dir.join(RESOLVED_FILE);
    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), json!(command));
    doc.insert("out".into(), json!(out_dir.display().to_string()));
    for (key, input) in inputs {
        doc.insert((*key).into(), json!(input.display().to_string()));
    }
    if let Some(cfg) = cfg {
        doc.insert("config_hash".into(), json!(experiment_config_hash(cfg)));
        let value = serde_json::to_value(cfg).map_err(|e| SelmagError::json(&path, e))?;
        doc.insert("config".into(), value);
    }
    if let Value::Object(map) = extras {
        doc.extend(map);
    }
    let text = serde_json::to_string_pretty(&Value::Object(doc))
        .map_err(|e| SelmagError::json(&path, e))?;
    write_text(&path, &format!("{text}\n"))
}

// ---------------------------------------------------------------------------
// Checkpoint adapters
// ---------------------------------------------------------------------------

fn save_source_models(path: &Path, models: &SourceModels) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert_encoder("encoder", &models.encoder);
    for (k, cls) in models.classifiers.iter().enumerate() {
        ckpt.insert_classifier(&format!("classifier_{k}"), cls);
    }
    ckpt.save(path)
}

fn load_source_models(path: &Path, num_sources: usize) -> Result<SourceModels> {
    let ckpt = Checkpoint::load(path)?;
    let encoder = ckpt.read_encoder("encoder")?;
    let mut classifiers = Vec::with_capacity(num_sources);
    for k in 0..num_sources {
        classifiers.push(ckpt.read_classifier(&format!("classifier_{k}"))?);
    }
    Ok(SourceModels {
        encoder,
        classifiers,
        loss_curve: Vec::new(),
    })
}

fn insert_ssl_modules(ckpt: &mut Checkpoint, prefix: &str, modules: &SslModules) {
    ckpt.insert_encoder(&format!("{prefix}.encoder"), &modules.encoder);
    ckpt.insert(&format!("{prefix}.node_w"), &modules.heads.node_w);
    ckpt.insert(&format!("{prefix}.node_b"), &modules.heads.node_b);
    ckpt.insert(&format!("{prefix}.ctx_w"), &modules.heads.ctx_w);
    ckpt.insert(&format!("{prefix}.ctx_b"), &modules.heads.ctx_b);
    ckpt.insert(&format!("{prefix}.centroids"), &modules.heads.centroids);
    let losses = Matrix::from_rows(&[modules.final_losses.to_vec()]);
    ckpt.insert(&format!("{prefix}.final_losses"), &losses);
}

fn read_ssl_modules(ckpt: &Checkpoint, prefix: &str) -> Result<SslModules> {
    let encoder = ckpt.read_encoder(&format!("{prefix}.encoder"))?;
    let heads = SslHeads {
        node_w: ckpt.get(&format!("{prefix}.node_w"))?,
        node_b: ckpt.get(&format!("{prefix}.node_b"))?,
        ctx_w: ckpt.get(&format!("{prefix}.ctx_w"))?,
        ctx_b: ckpt.get(&format!("{prefix}.ctx_b"))?,
        centroids: ckpt.get(&format!("{prefix}.centroids"))?,
    };
    let losses = ckpt.get(&format!("{prefix}.final_losses"))?;
    let mut final_losses = [0.0; NUM_TASKS];
    for (t, slot) in final_losses.iter_mut().enumerate() {
        *slot = losses.get(0, t);
    }
    Ok(SslModules {
        encoder,
        heads,
        final_losses,
        loss_curve: Vec::new(),
    })
}

fn save_ssl(path: &Path, ssl: &SslArtifacts) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert("centroids", &ssl.centroids);
    for (k, modules) in ssl.source_modules.iter().enumerate() {
        insert_ssl_modules(&mut ckpt, &format!("source_{k}"), modules);
    }
    insert_ssl_modules(&mut ckpt, "target", &ssl.target_modules);
    ckpt.save(path)
}

fn load_ssl(path: &Path, num_sources: usize) -> Result<SslArtifacts> {
    let ckpt = Checkpoint::load(path)?;
    let centroids = ckpt.get("centroids")?;
    let mut source_modules = Vec::with_capacity(num_sources);
    for k in 0..num_sources {
        source_modules.push(read_ssl_modules(&ckpt, &format!("source_{k}"))?);
    }
    let target_modules = read_ssl_modules(&ckpt, "target")?;
    Ok(SslArtifacts {
        centroids,
        source_modules,
        target_modules,
    })
}

fn save_selectors(path: &Path, sel: &SelectorParams) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert("g_w1", &sel.g_w1);
    ckpt.insert("g_b1", &sel.g_b1);
    ckpt.insert("g_w2", &sel.g_w2);
    ckpt.insert("g_b2", &sel.g_b2);
    ckpt.insert("l_w1", &sel.l_w1);
    ckpt.insert("l_b1", &sel.l_b1);
    ckpt.insert("l_w2", &sel.l_w2);
    ckpt.insert("l_b2", &sel.l_b2);
    ckpt.save(path)
}

fn load_selectors(path: &Path) -> Result<SelectorParams> {
    let ckpt = Checkpoint::load(path)?;
    Ok(SelectorParams {
        g_w1: ckpt.get("g_w1")?,
        g_b1: ckpt.get("g_b1")?,
        g_w2: ckpt.get("g_w2")?,
        g_b2: ckpt.get("g_b2")?,
        l_w1: ckpt.get("l_w1")?,
        l_b1: ckpt.get("l_b1")?,
        l_w2: ckpt.get("l_w2")?,
        l_b2: ckpt.get("l_b2")?,
    })
}

fn save_hypothesis(path: &Path, hyp: &Hypothesis) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert_hypothesis("target_model", hyp);
    ckpt.save(path)
}

fn load_hypothesis(path: &Path) -> Result<Hypothesis> {
    Checkpoint::load(path)?.read_hypothesis("target_model")
}

fn load_pretrain(dir: &Path, set: &DomainSet) -> Result<PretrainArtifacts> {
    let models = load_source_models(&dir.join(SOURCE_MODELS_FILE), set.num_sources())?;
    let ssl = load_ssl(&dir.join(SSL_FILE), set.num_sources())?;
    let pairwise = parse_pairwise_csv(&dir.join(PAIRWISE_FILE), set.num_sources())?;
    Ok(PretrainArtifacts {
        models,
        ssl,
        pairwise,
    })
}

// ---------------------------------------------------------------------------
// CSV adapters
// ---------------------------------------------------------------------------

const PAIRWISE_HEADER: &str = "task,source,target,loss";

/// One row per (task, probe owner, evaluated graph), self-references
/// included: |tasks| * K * K rows.
fn pairwise_csv(pairwise: &PairwiseScores) -> String {
    let mut out = String::from(PAIRWISE_HEADER);
    out.push('\n');
    for (t, task) in TASK_NAMES.iter().enumerate() {
        for (k, row) in pairwise.raw.iter().enumerate() {
            for (j, losses) in row.iter().enumerate() {
                let _ = writeln!(out, "{task},{k},{j},{}", losses[t]);
            }
        }
    }
    out
}

fn parse_pairwise_csv(path: &Path, num_sources: usize) -> Result<PairwiseScores> {
    let parse_err = |line: usize, details: String| SelmagError::Parse {
        path: path.to_path_buf(),
        line,
        details,
    };
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == PAIRWISE_HEADER => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("unexpected header {header:?}")));
        }
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut raw = vec![vec![[f64::NAN; NUM_TASKS]; num_sources]; num_sources];
    let mut seen = vec![vec![[false; NUM_TASKS]; num_sources]; num_sources];
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 fields, got {}", fields.len())));
        }
        let t = TASK_NAMES
            .iter()
            .position(|name| *name == fields[0])
            .ok_or_else(|| parse_err(line_no, format!("unknown task {:?}", fields[0])))?;
        let k: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad source index: {e}")))?;
        let j: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad target index: {e}")))?;
        let loss: f64 = fields[3]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad loss: {e}")))?;
        if k >= num_sources || j >= num_sources {
            return Err(parse_err(
                line_no,
                format!("index ({k},{j}) out of range for {num_sources} sources"),
            ));
        }
        if seen[k][j][t] {
            return Err(parse_err(line_no, format!("duplicate entry ({},{k},{j})", fields[0])));
        }
        seen[k][j][t] = true;
        raw[k][j][t] = loss;
    }
    for (k, row) in seen.iter().enumerate() {
        for (j, tasks) in row.iter().enumerate() {
            for (t, filled) in tasks.iter().enumerate() {
                if !filled {
                    return Err(parse_err(
                        0,
                        format!("missing entry ({},{k},{j})", TASK_NAMES[t]),
                    ));
                }
            }
        }
    }
    Ok(PairwiseScores { raw })
}

/// One row per (task, source) against the real target, with the target's
/// own-module loss alongside.
fn target_scores_csv(scores: &TransferScores) -> String {
    let mut out = String::from("task,source,loss,self_reference_loss\n");
    for (t, task) in TASK_NAMES.iter().enumerate() {
        for (k, row) in scores.raw_loss.iter().enumerate() {
            let _ = writeln!(out, "{task},{k},{},{}", row[t], scores.self_reference[t]);
        }
    }
    out
}

fn training_log_header(num_sources: usize) -> String {
    let mut header = String::from("epoch,pseudo_target,outer_loss");
    for k in 0..num_sources {
        let _ = write!(header, ",s_global_{k}");
    }
    header.push('\n');
    header
}

fn training_log_row(record: &MetaEpochRecord) -> String {
    let mut row = format!(
        "{},{},{}",
        record.epoch, record.pseudo_target, record.outer_loss
    );
    for w in &record.s_global {
        let _ = write!(row, ",{w}");
    }
    row.push('\n');
    row
}

/// Streams meta-training epochs to disk so a partial log survives an abort.
struct LogWriter {
    file: fs::File,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl LogWriter {
    fn create(path: &Path, num_sources: usize) -> Result<LogWriter> {
        let mut file = fs::File::create(path).map_err(|e| SelmagError::io(path, e))?;
        file.write_all(training_log_header(num_sources).as_bytes())
            .map_err(|e| SelmagError::io(path, e))?;
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
            error: None,
        })
    }

    fn record(&mut self, record: &MetaEpochRecord) {
        if self.error.is_some() {
            return;
        }
        let row = training_log_row(record);
        if let Err(e) = self
            .file
            .write_all(row.as_bytes())
            .and_then(|()| self.file.flush())
        {
            self.error = Some(e);
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(SelmagError::io(self.path, e)),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Generative description of a suite: shared base parameters plus the
/// per-domain shift schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteSpec {
    base: SuiteBaseParams,
    schedule: ShiftSchedule,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            base: default_base_params(0),
            schedule: default_schedule(),
        }
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec: SuiteSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SuiteSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.base.seed = seed;
    }
    let suite = generate_suite(&spec.base, &spec.schedule)?;
    ensure_dir(&args.out)?;
    write_suite(&args.out, &suite)?;

    let spec_value = serde_json::to_value(&spec)
        .map_err(|e| SelmagError::json(args.out.join(RESOLVED_FILE), e))?;
    write_resolved(
        &args.out,
        "generate",
        &[],
        None,
        json!({ "suite_spec": spec_value }),
    )?;

    println!("{:<16} {:>6} {:>7} {:>8}", "domain", "nodes", "edges", "classes");
    let set = &suite.domain_set;
    for graph in set.sources.iter().chain(std::iter::once(&set.target)) {
        println!(
            "{:<16} {:>6} {:>7} {:>8}",
            graph.name,
            graph.num_nodes,
            graph.edges.len(),
            graph.num_classes
        );
    }
    println!(
        "generate: wrote {} domains (seed {}) to {}",
        set.num_sources() + 1,
        spec.base.seed,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let set = load_suite(&args.suite)?;
    ensure_dir(&args.out)?;

    let models_path = args.out.join(SOURCE_MODELS_FILE);
    let models = if args.resume && models_path.is_file() {
        println!("pretrain: reusing {}", models_path.display());
        load_source_models(&models_path, set.num_sources())?
    } else {
        let models = train_source_models(&set, &cfg.source_config())?;
        save_source_models(&models_path, &models)?;
        println!(
            "pretrain: trained {} source models ({} epochs)",
            set.num_sources(),
            models.loss_curve.len()
        );
        models
    };

    let ssl_path = args.out.join(SSL_FILE);
    let ssl = if args.resume && ssl_path.is_file() {
        println!("pretrain: reusing {}", ssl_path.display());
        load_ssl(&ssl_path, set.num_sources())?
    } else {
        let ssl = pretrain_all(&set, Some(&models.encoder), &cfg.ssl, cfg.ssl_seed())?;
        save_ssl(&ssl_path, &ssl)?;
        for (k, modules) in ssl.source_modules.iter().enumerate() {
            let [node, edge, context] = modules.final_losses;
            println!(
                "pretrain: source_{k} probe losses node {node:.4} edge {edge:.4} context {context:.4}"
            );
        }
        ssl
    };

    let pairs_path = args.out.join(PAIRWISE_FILE);
    if args.resume && pairs_path.is_file() {
        println!("pretrain: reusing {}", pairs_path.display());
    } else {
        let pairwise = pairwise_transfer_scores(&ssl, &set, &cfg.ssl, cfg.ssl_seed())?;
        write_text(&pairs_path, &pairwise_csv(&pairwise))?;
        println!(
            "pretrain: wrote {} pairwise transfer scores",
            NUM_TASKS * set.num_sources() * set.num_sources()
        );
    }

    write_resolved(
        &args.out,
        "pretrain",
        &[("suite", args.suite.as_path())],
        Some(&cfg),
        json!({}),
    )?;
    println!("pretrain: artifacts in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let spec = AblationSpec::parse(&args.ablation)?;
    let set = load_suite(&args.suite)?;
    let pre = load_pretrain(&args.artifacts, &set)?;
    ensure_dir(&args.out)?;

    let mut log_writer = LogWriter::create(&args.out.join(TRAIN_LOG_FILE), set.num_sources())?;
    let meta = meta_stage_observed(&set, &pre, spec, &cfg, &mut |record| {
        log_writer.record(record);
    })?;
    log_writer.finish()?;
    save_selectors(&args.out.join(SELECTORS_FILE), &meta.selectors)?;
    for (epoch, reason) in &meta.skipped {
        eprintln!("train: episode at epoch {epoch} skipped: {reason}");
    }
    println!("train: {} meta epochs logged", meta.log.len());

    let (target_scores, adapted) = adapt_stage(&set, &pre, spec, &meta.selectors, &cfg)?;
    if !spec.toggles().disable_global {
        write_text(
            &args.out.join(TARGET_SCORES_FILE),
            &target_scores_csv(&target_scores),
        )?;
    }
    save_hypothesis(&args.out.join(TARGET_MODEL_FILE), &adapted.hypothesis)?;
    if args.dump_plan {
        dump_plan(&args.out, &set, &pre, spec, &meta.selectors, &target_scores, &adapted.hypothesis, &cfg)?;
    }

    write_resolved(
        &args.out,
        "train",
        &[
            ("suite", args.suite.as_path()),
            ("artifacts", args.artifacts.as_path()),
        ],
        Some(&cfg),
        json!({
            "ablation": args.ablation,
            "meta_epochs": meta.log.len(),
            "meta_skipped": meta.skipped.len(),
            "adaptation_cycles": adapted.cycle_losses.len(),
        }),
    )?;
    match adapted.cycle_losses.last() {
        Some(loss) => println!(
            "train: {} adaptation cycles, final cycle loss {loss:.6}",
            adapted.cycle_losses.len()
        ),
        None => println!("train: adaptation ran zero cycles"),
    }
    println!("train: run artifacts in {}", args.out.display());
    Ok(())
}

/// Recomputes the selective transport plan at the adapted parameters and
/// dumps it as `i,j,gamma` rows (rows over stacked source nodes).
#[allow(clippy::too_many_arguments)]
fn dump_plan(
    out_dir: &Path,
    set: &DomainSet,
    pre: &PretrainArtifacts,
    spec: AblationSpec,
    selectors: &SelectorParams,
    target_scores: &TransferScores,
    hypothesis: &Hypothesis,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let sources: Vec<&Graph> = set.sources.iter().collect();
    let problem = build_adaptation_problem(
        &pre.models,
        &set.target,
        &sources,
        &pre.models.classifiers,
        target_scores.normalized_features.clone(),
    )?;
    let tape = Tape::new();
    let bind = bind_episode_with(&tape, selectors, &problem, spec.toggles())?;
    let params = hypothesis_to_constants(&tape, hypothesis);
    let outcome = adaptation_loss(&tape, &bind, &params, &spec.train_config(cfg), None)?;
    let gamma = &outcome.plan.gamma;
    let mut csv = String::from("i,j,gamma\n");
    for i in 0..gamma.rows() {
        for j in 0..gamma.cols() {
            let _ = writeln!(csv, "{i},{j},{}", gamma.get(i, j));
        }
    }
    write_text(&out_dir.join(PLAN_FILE), &csv)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let set = load_suite(&args.suite)?;
    let labels = load_target_eval_labels(&args.suite, &set.target)?;
    let hypothesis = load_hypothesis(&args.run.join(TARGET_MODEL_FILE))?;
    ensure_dir(&args.out)?;

    let report = evaluate_hypothesis(&hypothesis, &set.target, &labels)?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&report.csv_row(&args.run_id, &args.variant, cfg.seed));
    write_text(&args.out.join(REPORT_FILE), &csv)?;
    println!(
        "evaluate: acc {:.4} auroc {:.4} macro-F1 {:.4} on {} target nodes",
        report.accuracy, report.macro_auroc, report.macro_f1, report.n_eval
    );

    let pre = load_pretrain(&args.pretrain, &set)?;
    let selectors = load_selectors(&args.run.join(SELECTORS_FILE))?;
    let analysis = selector_analysis(&set, &labels, &pre, &selectors, &cfg)?;
    write_text(&args.out.join(ANALYSIS_FILE), &selector_analysis_csv(&analysis))?;
    println!(
        "evaluate: selector-weight/accuracy rank correlation {:.4}",
        analysis.spearman
    );

    if args.sweep {
        let sweep = run_sweep(&set, &labels, &pre, &cfg)?;
        write_text(&args.out.join(SWEEP_FILE), &sweep)?;
        println!(
            "evaluate: swept {} blend and {} regularization points",
            LAMBDA_GRID.len(),
            EPSILON_GRID.len()
        );
    }

    write_resolved(
        &args.out,
        "evaluate",
        &[
            ("suite", args.suite.as_path()),
            ("pretrain", args.pretrain.as_path()),
            ("run", args.run.as_path()),
        ],
        Some(&cfg),
        json!({
            "run_id": args.run_id,
            "variant": args.variant,
            "sweep": args.sweep,
            "spearman": analysis.spearman,
        }),
    )?;
    Ok(())
}

/// Re-trains the full variant at every grid point, reusing the pretraining
/// artifacts, and reports the target metrics per point.
fn run_sweep(
    set: &DomainSet,
    labels: &[usize],
    pre: &PretrainArtifacts,
    cfg: &ExperimentConfig,
) -> Result<String> {
    let spec = AblationSpec::parse("full")?;
    let mut out = String::from("parameter,value,acc,auroc,macro_f1\n");
    let mut point = |name: &str, value: f64, swept: ExperimentConfig| -> Result<()> {
        let stage = train_stage(set, pre, spec, &swept)?;
        let report = evaluate_hypothesis(&stage.adapted.hypothesis, &set.target, labels)?;
        let _ = writeln!(
            out,
            "{name},{value},{:.6},{:.6},{:.6}",
            report.accuracy, report.macro_auroc, report.macro_f1
        );
        println!(
            "sweep: {name}={value} acc {:.4} auroc {:.4} macro-F1 {:.4}",
            report.accuracy, report.macro_auroc, report.macro_f1
        );
        Ok(())
    };
    for &lambda in &LAMBDA_GRID {
        let mut swept = cfg.clone();
        swept.train.lambda = lambda;
        point("lambda", lambda, swept)?;
    }
    for &epsilon in &EPSILON_GRID {
        let mut swept = cfg.clone();
        swept.train.epsilon = epsilon;
        point("epsilon", epsilon, swept)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let names: Vec<String> = args
        .variants
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "ablate",
            details: "no variants given".into(),
        });
    }
    for name in &names {
        if name != "direct" && name != "uniform_ot" {
            AblationSpec::parse(name)?;
        }
    }

    let set = load_suite(&args.suite)?;
    let labels = load_target_eval_labels(&args.suite, &set.target)?;
    ensure_dir(&args.out)?;

    let pre = if names.iter().any(|n| n != "direct") {
        Some(pretrain_stage(&set, &cfg)?)
    } else {
        None
    };

    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for name in &names {
        let report = match &pre {
            Some(pre) => run_variant_with_artifacts(name, &set, &labels, pre, &cfg)?,
            None => run_baseline(name, &set, &labels, &cfg)?,
        };
        csv.push_str(&report.csv_row(&args.run_id, name, cfg.seed));
        println!(
            "ablate: {name:<20} acc {:.4} auroc {:.4} macro-F1 {:.4}",
            report.accuracy, report.macro_auroc, report.macro_f1
        );
    }
    write_text(&args.out.join(REPORT_FILE), &csv)?;

    write_resolved(
        &args.out,
        "ablate",
        &[("suite", args.suite.as_path())],
        Some(&cfg),
        json!({ "run_id": args.run_id, "variants": names }),
    )?;
    println!("ablate: report in {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
