//! `sgcnn` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::deploy::{convert_model, count_flops, count_params, verify_equivalence};
use crate::error::{Error, Result};
use crate::io::{blob_path_for, load_model, paths_for_stem, save_model, Dataset};
use crate::model::Model;
use crate::pipeline::{network_ratios, run_algorithm1, FinetuneMode, PruneSchedule};
use crate::sweep::{rows_to_csv, run_sweep, Scope, SweepGrid};
use crate::toy::{train_baseline, toy_cnn, ToyTask};
use crate::train::evaluate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sgcnn", version, about = "Self-grouping CNN compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy CNN and blob datasets.
    Toy(ToyArgs),
    /// Cluster, prune and fine-tune a model.
    Prune(PruneArgs),
    /// Convert a pruned model to group convolutions and verify it.
    Deploy(DeployArgs),
    /// Print top-1/top-5 accuracy.
    Eval(EvalArgs),
    /// Print parameter, FLOP and ratio statistics.
    Report(ReportArgs),
    /// Run an ablation grid and emit CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneArg {
    None,
    Global,
    LocalGlobal,
}

impl From<FinetuneArg> for FinetuneMode {
    fn from(a: FinetuneArg) -> Self {
        match a {
            FinetuneArg::None => FinetuneMode::None,
            FinetuneArg::Global => FinetuneMode::Global,
            FinetuneArg::LocalGlobal => FinetuneMode::LocalGlobal,
        }
    }
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Skip baseline training and write the randomly initialised model.
    #[arg(long)]
    pub untrained: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training set for fine-tuning.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out set for the accuracy trace.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 0.6)]
    pub target_conv: f64,
    #[arg(long, default_value_t = 0.6)]
    pub target_fc: f64,
    #[arg(long, value_enum, default_value_t = FinetuneArg::Global)]
    pub finetune: FinetuneArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output stem: writes STEM.sgm.json, STEM.sgm.bin and STEM.report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output stem of the deployed model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,8")]
    pub groups: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.3")]
    pub steps: Vec<f64>,
    /// Comma-separated subset of conv, fc, both.
    #[arg(long, value_delimiter = ',', default_value = "both")]
    pub scopes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.6)]
    pub target: f64,
    #[arg(long, value_enum, default_value_t = FinetuneArg::Global)]
    pub finetune: FinetuneArg,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Equivalence { .. } | Error::Granularity { .. } => EXIT_VERIFY,
        _ => EXIT_INPUT,
    }
}

fn load(manifest: &Path) -> Result<Model> {
    load_model(manifest, &blob_path_for(manifest))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_opt(path: Option<&PathBuf>) -> Result<Option<Dataset>> {
    path.map(|p| Dataset::load(p)).transpose()
}

fn cmd_toy(a: &ToyArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let task = ToyTask::with_classes(a.classes, a.seed)?;
    let model = if a.untrained {
        toy_cnn(task.train.num_classes(), a.seed)?
    } else {
        let (m, acc) = train_baseline(&task, a.seed)?;
        println!("baseline test top-1: {:.4}", acc.top1);
        m
    };
    let (json, bin) = paths_for_stem(&a.out_dir.join("toy"));
    save_model(&model, &json, &bin)?;
    task.train.save(&a.out_dir.join("blobs.sgd"))?;
    task.test.save(&a.out_dir.join("blobs-test.sgd"))?;
    println!("wrote {}", json.display());
    Ok(())
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    let model = load(&a.model)?;
    let train = load_opt(a.data.as_ref())?;
    let test = load_opt(a.test_data.as_ref())?;
    let mut schedule = PruneSchedule {
        groups: a.groups,
        step: a.step,
        target_conv: a.target_conv,
        target_fc: a.target_fc,
        finetune: a.finetune.into(),
        seed: a.seed,
        ..PruneSchedule::default()
    };
    schedule.local.seed = a.seed;
    schedule.global.seed = a.seed;
    let (pruned, report) = run_algorithm1(&model, train.as_ref(), test.as_ref(), &schedule)?;
    let (json, bin) = paths_for_stem(&a.out);
    save_model(&pruned, &json, &bin)?;
    let report_path = PathBuf::from(format!("{}.report.json", a.out.display()));
    write_text(&report_path, &report.to_json())?;
    println!(
        "{} iterations; conv ratio {:.4}, fc ratio {:.4}, network ratio {:.4}; params {} -> {}",
        report.iterations.len(),
        report.final_conv_ratio,
        report.final_fc_ratio,
        report.final_network_ratio,
        report.params_before,
        report.params_after
    );
    if let Some(acc) = report.accuracy_after {
        println!("test top-1 {:.4}", acc.top1);
    }
    Ok(())
}

fn cmd_deploy(a: &DeployArgs) -> Result<()> {
    let model = load(&a.model)?;
    let input = model
        .input_shape
        .clone()
        .ok_or_else(|| Error::InvalidArgument("model manifest has no input_shape".into()))?;
    let deployed = convert_model(&model)?;
    let checks = verify_equivalence(&model, &deployed, &input, a.samples, a.seed)?;
    let worst = checks.iter().map(|c| c.max_deviation).fold(0.0f32, f32::max);
    let (json, bin) = paths_for_stem(&a.out);
    save_model(&deployed, &json, &bin)?;
    println!(
        "deployed {} (params {}, max deviation {worst:e})",
        json.display(),
        count_params(&deployed)
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let acc = evaluate(&model, &data)?;
    println!("top-1 {:.4}", acc.top1);
    match acc.top5 {
        Some(t5) => println!("top-5 {t5:.4}"),
        None => println!("top-5 n/a (fewer than 5 classes)"),
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let model = load(&a.model)?;
    println!("params {}", count_params(&model));
    match &model.input_shape {
        Some(s) => println!("flops {}", count_flops(&model, s)?),
        None => println!("flops n/a (no input_shape)"),
    }
    let (conv, fc, net) = network_ratios(&model);
    println!("conv ratio {conv:.6}");
    println!("fc ratio {fc:.6}");
    println!("network ratio {net:.6}");
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let model = load(&a.model)?;
    let train = load_opt(a.data.as_ref())?;
    let test = load_opt(a.test_data.as_ref())?;
    let grid = SweepGrid {
        groups: a.groups.clone(),
        steps: a.steps.clone(),
        scopes: a.scopes.iter().map(|s| s.parse::<Scope>()).collect::<Result<_>>()?,
        seeds: a.seeds.clone(),
        target: a.target,
    };
    let base = PruneSchedule {
        finetune: a.finetune.into(),
        ..PruneSchedule::default()
    };
    let rows = run_sweep(&model, train.as_ref(), test.as_ref(), &grid, &base)?;
    let csv = rows_to_csv(&rows)?;
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} sweep cells failed", rows.len());
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Toy(a) => cmd_toy(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Deploy(a) => cmd_deploy(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
