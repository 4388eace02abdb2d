//! `panel-triage`: metrics, calibration, triage, reports and simulation.

mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use panel_triage::bootstrap::BootstrapConfig;
use panel_triage::engine::{
    calibration_document, metrics_document, render_json, report_document, residuals_csv,
    triage_document, CalibrationConfig, ReportConfig, TriageDocument,
};
use panel_triage::metrics::{metrics_csv, summaries_csv, DEFAULT_WEIGHT};
use panel_triage::panel::{
    load_dataset, parse_reference_labels, InputFormat, PanelDataset, PanelError,
};
use panel_triage::regression::AgreementTarget;
use panel_triage::rng::DEFAULT_SEED;
use panel_triage::sim::{generate_panel, SimConfig};
use panel_triage::stats::KappaReference;
use panel_triage::triage::{
    adjudications_csv, parse_adjudications, triage_dataset, Adjudication, CostWeights,
    TriageConfig, TriageError, DEFAULT_AMBER_MAX, DEFAULT_AUDIT_FRACTION, DEFAULT_GREEN_MAX,
};
use panel_triage::weight_search::DEFAULT_FOLDS;

use run::Run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::Invalid(report) => {
                let mut msg = format!(
                    "dataset failed validation with {} error(s):",
                    report.errors.len()
                );
                for issue in &report.errors {
                    msg.push_str(&format!("\n  {issue}"));
                }
                CliError::Input(msg)
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<panel_triage::engine::EngineError> for CliError {
    fn from(e: panel_triage::engine::EngineError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TriageError> for CliError {
    fn from(e: TriageError) -> Self {
        match e {
            TriageError::Adjudications(issues) => {
                let mut msg = format!("{} malformed adjudication row(s):", issues.len());
                for issue in &issues {
                    msg.push_str(&format!("\n  {issue}"));
                }
                CliError::Input(msg)
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

/// Completed runs: clean, or finished on degenerate input.
enum Outcome {
    Clean,
    Degenerate,
}

#[derive(Parser)]
#[command(
    name = "panel-triage",
    version,
    about = "Calibration and triage for multi-model annotation panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-cell agreement, diversity, confidence and risk score.
    Metrics {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = DEFAULT_WEIGHT)]
        w: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence-only and dual-signal fits, with bootstrap intervals and an
    /// optional weight search.
    Calibrate {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "full-agreement")]
        target: AgreementTarget,
        /// Run the cross-validated search over w in {0, 0.05, ..., 1}.
        #[arg(long)]
        grid_search: bool,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        /// Bootstrap resamples for coefficient intervals; 0 disables.
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Route every cell to green, amber or red and draw the audit sample.
    Triage {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        triage: TriageArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reliability table and error concentration from adjudications.
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        triage: TriageArgs,
        /// A `triage.json` from an earlier run; its config replaces the triage flags.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        adjudications: Option<PathBuf>,
        /// Reference labels replacing any bundled with the dataset.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "full-agreement")]
        target: AgreementTarget,
        /// Per-cell review costs `green,amber,red` relative to manual coding;
        /// adds an effort estimate to the report.
        #[arg(long)]
        costs: Option<CostWeights>,
        /// Labels the per-model kappas are scored against.
        #[arg(long, default_value = "panel-majority")]
        kappa_reference: KappaReference,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic panel dataset with known ground truth.
    Simulate {
        /// JSON simulation config; the bundled replication corpus when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Decisions file or dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    format: Option<InputFormat>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TriageArgs {
    #[arg(long, default_value_t = DEFAULT_WEIGHT)]
    w: f64,
    #[arg(long, default_value_t = DEFAULT_GREEN_MAX)]
    green_max: f64,
    #[arg(long, default_value_t = DEFAULT_AMBER_MAX)]
    amber_max: f64,
    /// Fraction of each tier drawn for audit.
    #[arg(long, default_value_t = DEFAULT_AUDIT_FRACTION)]
    audit: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl TriageArgs {
    fn config(&self) -> TriageConfig {
        TriageConfig {
            w: self.w,
            green_max: self.green_max,
            amber_max: self.amber_max,
            audit_fraction: self.audit,
            seed: self.seed,
            ..TriageConfig::default()
        }
    }
}

fn load(input: &InputArgs, run: &mut Run) -> Result<PanelDataset, CliError> {
    if !input.input.exists() {
        return Err(CliError::Input(format!(
            "{}: no such file or directory",
            input.input.display()
        )));
    }
    run.input(&input.input)?;
    if let Some(m) = &input.manifest {
        run.input(m)?;
    }
    Ok(load_dataset(
        &input.input,
        input.format,
        input.manifest.as_deref(),
    )?)
}

fn read(path: &Path, run: &mut Run) -> Result<String, CliError> {
    run.input(path)?;
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn cmd_metrics(input: &InputArgs, w: f64, out: &Path) -> Result<Outcome, CliError> {
    let mut run = Run::start("metrics", out)?;
    let ds = load(input, &mut run)?;
    let doc = metrics_document(&ds, w)?;
    run.write("metrics.csv", &metrics_csv(&doc.cells))?;
    run.write("categories.csv", &summaries_csv(&doc.categories))?;
    run.write("metrics.json", &render_json(&doc))?;
    for s in &doc.skipped {
        warn(&format!("skipped {}: {}", s.key, s.reason));
    }
    run.finish(None, &doc.config)?;
    Ok(if doc.skipped.is_empty() {
        Outcome::Clean
    } else {
        Outcome::Degenerate
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    input: &InputArgs,
    target: AgreementTarget,
    grid_search: bool,
    folds: usize,
    resamples: usize,
    seed: u64,
    out: &Path,
) -> Result<Outcome, CliError> {
    let mut run = Run::start("calibrate", out)?;
    let ds = load(input, &mut run)?;
    let cfg = CalibrationConfig {
        target,
        bootstrap: (resamples > 0).then_some(BootstrapConfig {
            resamples,
            seed,
            ..BootstrapConfig::default()
        }),
        grid_search,
        folds,
        seed,
    };
    let doc = calibration_document(&ds, &cfg)?;
    run.write("categories.csv", &summaries_csv(&doc.categories))?;
    if let Some(fits) = &doc.fits {
        run.write("residuals.csv", &residuals_csv(&doc.categories, fits))?;
    }
    if let Some(ws) = &doc.weight_search {
        run.write("weight_search.csv", &ws.to_csv())?;
    }
    run.write("calibration.json", &render_json(&doc))?;
    for w in &doc.warnings {
        warn(w);
    }
    run.finish(Some(seed), &cfg)?;
    Ok(if doc.incomplete {
        Outcome::Degenerate
    } else {
        Outcome::Clean
    })
}

fn cmd_triage(input: &InputArgs, args: &TriageArgs, out: &Path) -> Result<Outcome, CliError> {
    let mut run = Run::start("triage", out)?;
    let ds = load(input, &mut run)?;
    let cfg = args.config();
    cfg.validate()?;
    let doc = triage_document(&ds, &cfg)?;
    run.write("triage.csv", &doc.plan.to_csv())?;
    run.write("audit.csv", &doc.audit.to_csv())?;
    run.write("triage.json", &render_json(&doc))?;
    for n in &doc.audit.notes {
        warn(n);
    }
    for s in &doc.skipped {
        warn(&format!("skipped {}: {}", s.key, s.reason));
    }
    run.finish(Some(cfg.seed), &cfg)?;
    Ok(if doc.skipped.is_empty() {
        Outcome::Clean
    } else {
        Outcome::Degenerate
    })
}

struct ReportInputs<'a> {
    plan: Option<&'a Path>,
    adjudications: Option<&'a Path>,
    reference: Option<&'a Path>,
    target: AgreementTarget,
    costs: Option<CostWeights>,
    kappa_reference: KappaReference,
}

fn cmd_report(
    input: &InputArgs,
    args: &TriageArgs,
    extra: ReportInputs<'_>,
    out: &Path,
) -> Result<Outcome, CliError> {
    let mut run = Run::start("report", out)?;
    let mut ds = load(input, &mut run)?;
    if let Some(path) = extra.reference {
        let text = read(path, &mut run)?;
        ds.reference = parse_reference_labels(text.as_bytes(), &ds.labels)?;
    }
    let triage = match extra.plan {
        Some(path) => {
            let text = read(path, &mut run)?;
            let stored: TriageDocument = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let run_metrics = panel_triage::metrics::compute_all_metrics(&ds, stored.config.w)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let fresh = triage_dataset(&run_metrics.cells, &stored.config)?;
            let routing = |cells: &[panel_triage::triage::TriagedCell]| -> Vec<(String, String, panel_triage::triage::Tier)> {
                cells
                    .iter()
                    .map(|c| (c.metrics.item_id.clone(), c.metrics.category_id.clone(), c.tier))
                    .collect()
            };
            if routing(&fresh.cells) != routing(&stored.plan.cells) {
                return Err(CliError::Input(format!(
                    "{}: plan does not match the dataset",
                    path.display()
                )));
            }
            stored.config
        }
        None => args.config(),
    };
    let adjudications: Vec<Adjudication> = match extra.adjudications {
        Some(path) => {
            let text = read(path, &mut run)?;
            parse_adjudications(text.as_bytes(), &ds)?
        }
        None => Vec::new(),
    };
    let cfg = ReportConfig {
        triage,
        target: extra.target,
        costs: extra.costs,
        kappa_reference: extra.kappa_reference,
    };
    let doc = report_document(&ds, &cfg, &adjudications)?;
    run.write("report.json", &render_json(&doc))?;
    run.write("report.txt", &doc.table)?;
    print!("{}", doc.table);
    run.finish(Some(cfg.triage.seed), &cfg)?;
    Ok(Outcome::Clean)
}

#[derive(Serialize)]
struct SimulateConfig<'a> {
    sim: &'a SimConfig,
}

fn cmd_simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let mut run = Run::start("simulate", out)?;
    let mut cfg = match config {
        Some(path) => {
            let text = read(path, &mut run)?;
            serde_json::from_str::<SimConfig>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::replication(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (ds, truth) = generate_panel(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let mut manifest = ds.manifest();
    if !ds.reference.is_empty() {
        manifest.reference_labels_path = Some("reference_labels.csv".into());
        run.write("reference_labels.csv", &ds.reference.to_csv())?;
    }
    run.write("manifest.json", &render_json(&manifest))?;
    run.write("decisions.csv", &ds.to_canonical_csv())?;
    run.write("ground_truth.csv", &truth.to_csv())?;
    let metrics = panel_triage::metrics::compute_all_metrics(&ds, DEFAULT_WEIGHT)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let plan = triage_dataset(&metrics.cells, &TriageConfig::default())?;
    run.write(
        "adjudications.csv",
        &adjudications_csv(&truth.adjudications(&plan)),
    )?;
    run.write("sim_config.json", &render_json(&cfg))?;
    run.finish(Some(cfg.seed), &SimulateConfig { sim: &cfg })?;
    Ok(Outcome::Clean)
}

fn dispatch(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Metrics { input, w, out } => cmd_metrics(&input, w, &out),
        Command::Calibrate {
            input,
            target,
            grid_search,
            folds,
            resamples,
            seed,
            out,
        } => cmd_calibrate(&input, target, grid_search, folds, resamples, seed, &out),
        Command::Triage { input, triage, out } => cmd_triage(&input, &triage, &out),
        Command::Report {
            input,
            triage,
            plan,
            adjudications,
            reference,
            target,
            costs,
            kappa_reference,
            out,
        } => cmd_report(
            &input,
            &triage,
            ReportInputs {
                plan: plan.as_deref(),
                adjudications: adjudications.as_deref(),
                reference: reference.as_deref(),
                target,
                costs,
                kappa_reference,
            },
            &out,
        ),
        Command::Simulate { config, seed, out } => cmd_simulate(config.as_deref(), seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Degenerate) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
