mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coheat::corpus::{gen_synthetic, split_scenario, SyntheticSpec, DEFAULT_RATIOS};
use coheat::metrics::{summarize_runs, EvalReport, EvalTarget};
use coheat::model::{load_checkpoint, save_checkpoint};
use coheat::objective::{tiny_instance, L2Form};
use coheat::trainer::{evaluate_params, sweep_epsilon, DropoutGraphs, EPSILON_GRID};
use coheat::{train, DatasetBundle, Scenario, ScenarioSplit, TrainConfig, Variant};
use log::info;
use serde::Serialize;

use error::CliError;

const VERSION: &str = env!("COHEAT_BUILD_VERSION");

#[derive(Parser, Debug)]
#[command(name = "coheat", version = VERSION, about = "Cold-start bundle recommendation experiments")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Split a dataset's user-bundle interactions for one scenario.
    Split(SplitArgs),
    /// Train, keep the best validation epoch, and report test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences on a tiny problem.
    Gradcheck(GradcheckArgs),
    /// Train once per maximum temperature and report test metrics.
    SweepEpsilon(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    bundles: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long, default_value_t = 1000)]
    interactions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where the scenario split comes from.
#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "warm")]
    scenario: Scenario,
    /// Seed for splitting in process. Ignored with --split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Load a split written by `coheat split` instead of splitting.
    #[arg(long)]
    split: Option<PathBuf>,
}

/// Overrides for the JSON config. A flag wins over the file, which wins
/// over the defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file with any subset of the training options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    edge_dropout: Option<f64>,
    #[arg(long, value_enum)]
    dropout_graphs: Option<DropoutArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    l2_form: Option<L2Arg>,
    #[arg(long)]
    eval_k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DropoutArg {
    Both,
    UserBundle,
    UserItem,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum L2Arg {
    Squared,
    Norm,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_json_file(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag {
                    c.$field = v;
                }
            )*};
        }
        set!(dim => dim, layers => layers, lr => learning_rate, lambda1 => lambda1,
             lambda2 => lambda2, epsilon => epsilon, epochs => epochs,
             batch_size => batch_size, edge_dropout => edge_dropout, seed => seed,
             variant => variant, eval_k => eval_k);
        if let Some(d) = self.dropout_graphs {
            c.dropout_graphs = match d {
                DropoutArg::Both => DropoutGraphs::Both,
                DropoutArg::UserBundle => DropoutGraphs::UserBundle,
                DropoutArg::UserItem => DropoutGraphs::UserItem,
            };
        }
        if let Some(l) = self.l2_form {
            c.l2_form = match l {
                L2Arg::Squared => L2Form::Squared,
                L2Arg::Norm => L2Form::Norm,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Independent runs with seeds seed, seed+1, ...; each gets its own
    /// `run-{i}` directory and a summary is written alongside.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    target: TargetArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda1: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda2: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated maximum temperatures.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

/// Provenance written to `run.json` in every output directory.
#[derive(Serialize, Debug, Default)]
struct RunRecord {
    command: &'static str,
    argv: Vec<String>,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<Scenario>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_dir: Option<PathBuf>,
}

impl RunRecord {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            version: VERSION,
            ..Default::default()
        }
    }

    fn with_data(mut self, d: &DataArgs) -> Self {
        self.data_dir = Some(d.data.clone());
        self.scenario = Some(d.scenario);
        match &d.split {
            Some(dir) => self.split_dir = Some(dir.clone()),
            None => self.split_seed = Some(d.split_seed),
        }
        self
    }

    fn with_config(mut self, c: &TrainConfig) -> Self {
        self.seed = Some(c.seed);
        self.config = Some(c.clone());
        self
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    write_text(path, &s)
}

fn load_data(d: &DataArgs) -> Result<(DatasetBundle, ScenarioSplit), CliError> {
    let data = DatasetBundle::load_dir(&d.data)?;
    let split = match &d.split {
        Some(dir) => ScenarioSplit::load_dir(dir, d.scenario, data.u_count, data.b_count)?,
        None => split_scenario(&data, d.scenario, DEFAULT_RATIOS, d.split_seed)?,
    };
    info!(
        "{} users, {} bundles, {} items; {} split: {} train / {} val / {} test",
        data.u_count,
        data.b_count,
        data.i_count,
        d.scenario,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok((data, split))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        users: a.users,
        bundles: a.bundles,
        items: a.items,
        zipf_exponent: a.zipf,
        interactions: a.interactions,
        seed: a.seed,
    };
    let data = gen_synthetic(&spec)?;
    create_out(&a.out)?;
    data.write_dir(&a.out)?;
    let mut rec = RunRecord::new("synth");
    rec.seed = Some(a.seed);
    write_json(&a.out.join("run.json"), &rec)?;
    println!("wrote {} user-bundle pairs to {}", data.ub.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<(), CliError> {
    let data = DatasetBundle::load_dir(&a.data)?;
    let split = split_scenario(&data, a.scenario, DEFAULT_RATIOS, a.seed)?;
    create_out(&a.out)?;
    split.write_dir(&a.out)?;
    let mut rec = RunRecord::new("split");
    rec.data_dir = Some(a.data.clone());
    rec.scenario = Some(a.scenario);
    rec.split_seed = Some(a.seed);
    write_json(&a.out.join("run.json"), &rec)?;
    println!(
        "{}: {} train / {} val / {} test, {} cold bundles",
        a.scenario,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.cold_bundles.len()
    );
    Ok(())
}

fn train_once(
    data: &DatasetBundle,
    split: &ScenarioSplit,
    config: &TrainConfig,
    out: &Path,
) -> Result<EvalReport, CliError> {
    create_out(out)?;
    let outcome = train(data, split, config)?;
    write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
    save_checkpoint(&outcome.best, out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, out.join("last.ckpt"))?;
    let report = evaluate_params(data, split, config, &outcome.best, EvalTarget::Test)?;
    write_json(&out.join("report.json"), &report)?;
    info!("seed {}: recall {:.4}, ndcg {:.4}", config.seed, report.recall, report.ndcg);
    Ok(report)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let config = a.config.resolve()?;
    let (data, split) = load_data(&a.data)?;
    create_out(&a.out)?;
    write_json(
        &a.out.join("run.json"),
        &RunRecord::new("train").with_data(&a.data).with_config(&config),
    )?;
    if a.runs == 1 {
        let r = train_once(&data, &split, &config, &a.out)?;
        println!("{}\n{}", EvalReport::CSV_HEADER, r.csv_row());
        return Ok(());
    }
    let mut reports = Vec::with_capacity(a.runs);
    for i in 0..a.runs {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        reports.push(train_once(&data, &split, &cfg, &a.out.join(format!("run-{i}")))?);
    }
    let summary = summarize_runs(&reports).expect("at least one run");
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable summary"));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    let (data, split) = load_data(&a.data)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let target = match a.target {
        TargetArg::Val => EvalTarget::Validation,
        TargetArg::Test => EvalTarget::Test,
    };
    let report = evaluate_params(&data, &split, &config, &params, target)?;
    create_out(&a.out)?;
    let rec = RunRecord::new("eval").with_data(&a.data).with_config(&config);
    write_json(&a.out.join("run.json"), &rec)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_text(
        &a.out.join("report.csv"),
        &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
    )?;
    println!("{}\n{}", EvalReport::CSV_HEADER, report.csv_row());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let inst = tiny_instance(a.seed, a.dim);
    let report = inst.check(a.lambda1, a.lambda2, a.layers, a.step, a.tolerance)?;
    create_out(&a.out)?;
    let mut rec = RunRecord::new("gradcheck");
    rec.seed = Some(a.seed);
    write_json(&a.out.join("run.json"), &rec)?;
    write_json(&a.out.join("gradcheck.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            report.max_rel_error, a.tolerance
        )))
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    let grid = a.grid.clone().unwrap_or_else(|| EPSILON_GRID.to_vec());
    let (data, split) = load_data(&a.data)?;
    create_out(&a.out)?;
    write_json(
        &a.out.join("run.json"),
        &RunRecord::new("sweep-epsilon").with_data(&a.data).with_config(&config),
    )?;
    let points = sweep_epsilon(&data, &split, &config, &grid)?;
    let mut csv = String::from("epsilon,recall,ndcg\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.epsilon, p.recall, p.ndcg));
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SweepEpsilon(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
