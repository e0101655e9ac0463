//! Command-line front end for the exposure-aware recommendation pipeline.
//!
//! `run` executes a full configured experiment; `fit` restricts it to one
//! method; `evaluate` re-scores a predictions dump under chosen metric
//! settings; `simulate` generates a synthetic world; `sweep` measures
//! causal error across confounding strengths. Configuration is a flat
//! `key = value` file plus repeatable `--set key=value` overrides; every
//! key and its default appears at the bottom of `run --help`.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use deconf::data::SparseInteractions;
use deconf::experiment::{
    apply_override, canonical_text, emit_outputs, parse_experiment_config, run_experiment,
    ExperimentConfig, ResultsTable,
};
use deconf::ipw::PropensityConfig;
use deconf::metrics::{self, GainScheme, RankedList};
use deconf::outcome::OutcomeConfig;
use deconf::pf::PFConfig;
use deconf::sim::{self, ModelSpec, SimConfig, SweepMethod};

#[derive(Parser)]
#[command(
    name = "deconf",
    version,
    about = "Exposure-aware matrix factorization: fit, evaluate, simulate, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: ingest, split, grid-search every configured
    /// method, evaluate on the test fold, and write result CSVs.
    #[command(after_help = config_key_help())]
    Run(RunArgs),
    /// Run the pipeline for a single method (same config machinery as
    /// `run`, with the method list replaced).
    #[command(after_help = config_key_help())]
    Fit(FitArgs),
    /// Re-score a predictions CSV (as written by `run`) under chosen
    /// metric settings.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic confounded world and summarize or save it.
    Simulate(SimulateArgs),
    /// Measure causal error across a grid of confounding strengths,
    /// averaged over repeated simulated worlds.
    Sweep(SweepArgs),
}

/// Shared config-file + override plumbing.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; missing keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable, applied in order after the
    /// file), e.g. --set seed=42
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                parse_experiment_config(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        for entry in &self.set {
            let (key, value) = entry
                .split_once('=')
                .with_context(|| format!("--set {entry:?} is not KEY=VALUE"))?;
            apply_override(&mut cfg, key.trim(), value)
                .with_context(|| format!("applying --set {entry:?}"))?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for results.csv, grid_scores.csv, predictions, and the
    /// manifest (overrides the config's output_dir).
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Print the resolved config (canonical form) and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Method to fit: `oracle` or `variant/correction`, e.g.
    /// probabilistic/deconfounded
    method: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the result CSVs (overrides the config's output_dir).
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum CliGain {
    /// Gain 2^rating - 1.
    ExpMinusOne,
    /// Gain 2^(rating - 1).
    LiteralPaper,
}

impl From<CliGain> for GainScheme {
    fn from(g: CliGain) -> Self {
        match g {
            CliGain::ExpMinusOne => GainScheme::ExpMinusOne,
            CliGain::LiteralPaper => GainScheme::LiteralPaper,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV with a `user,item,actual,predicted` header.
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    /// Ranking cutoff for recall.
    #[arg(long, default_value_t = 5)]
    recall_k: usize,
    /// Ratings at or above this count as relevant for recall.
    #[arg(long, default_value_t = 3.0)]
    relevance_threshold: f64,
    /// NDCG gain scheme.
    #[arg(long, value_enum, default_value_t = CliGain::ExpMinusOne)]
    gain: CliGain,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = SimConfig::default().n_users)]
    users: usize,
    #[arg(long, default_value_t = SimConfig::default().n_items)]
    items: usize,
    /// Latent dimension of the generator.
    #[arg(long, default_value_t = SimConfig::default().k)]
    k: usize,
    /// Exposure-preference correlation in [0, 1].
    #[arg(long, default_value_t = SimConfig::default().gamma_theta)]
    gamma_theta: f64,
    /// Confounding strength on outcomes (>= 0).
    #[arg(long, default_value_t = SimConfig::default().gamma_y)]
    gamma_y: f64,
    /// Shape of the Gamma prior on latent coordinates.
    #[arg(long, default_value_t = SimConfig::default().gamma_shape)]
    gamma_shape: f64,
    /// Rate of that Gamma prior.
    #[arg(long, default_value_t = SimConfig::default().gamma_rate)]
    gamma_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for observed.csv (and, with --full, exposures.csv and
    /// potential.csv). Without it only the summary is printed.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Also write the full exposure mask and potential-outcome table.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Exposure-preference correlations to scan.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
    gamma_theta: Vec<f64>,
    /// Outcome confounding strengths to scan.
    #[arg(long, value_delimiter = ',', default_values_t = [3.0])]
    gamma_y: Vec<f64>,
    /// Worlds per grid point; methods share each world.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Methods: `oracle` or `variant/correction` tokens.
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [
            "oracle".to_string(),
            "probabilistic/none".to_string(),
            "probabilistic/deconfounded".to_string(),
        ]
    )]
    methods: Vec<String>,
    #[arg(long, default_value_t = SimConfig::default().n_users)]
    users: usize,
    #[arg(long, default_value_t = SimConfig::default().n_items)]
    items: usize,
    /// Latent dimension of the generator.
    #[arg(long, default_value_t = SimConfig::default().k)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latent dimension of every outcome model.
    #[arg(long, default_value_t = 10)]
    outcome_k: usize,
    /// Latent dimension of the exposure model.
    #[arg(long, default_value_t = 10)]
    pf_k: usize,
    /// Prior standard deviation of the outcome factors.
    #[arg(long, default_value_t = 1.0)]
    prior_std: f64,
    #[arg(long, default_value_t = OutcomeConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = OutcomeConfig::default().max_epochs)]
    max_epochs: usize,
    /// Directory for sweep_rows.csv and sweep_summary.csv.
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
}

/// Trailing section for `--help`: every config key with its default value.
fn config_key_help() -> String {
    let mut out = String::from(
        "Config keys (flat `key = value` file, `#` comments; defaults shown):\n",
    );
    for line in canonical_text(&ExperimentConfig::default()).lines() {
        out.push_str("  ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(
        "\nNotes:\n  \
         methods takes `all`, `oracle`, or comma-separated variant/correction tokens\n    \
         (variants: probabilistic, weighted, poisson; corrections: none, deconfounded, ipw).\n  \
         generalization = weak|strong is shorthand for holdout_fraction = 0 / 0.2.\n  \
         an empty value clears an optional key (data_path, data_test_path, rating_min,\n    \
         rating_max, output_dir).\n",
    );
    out
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = args.config.load()?;
    if let Some(dir) = args.output {
        cfg.output_dir = Some(dir);
    }
    if args.print_config {
        print!("{}", canonical_text(&cfg));
        return Ok(ExitCode::SUCCESS);
    }
    execute(&cfg)
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode> {
    let mut cfg = args.config.load()?;
    apply_override(&mut cfg, "methods", &args.method)
        .with_context(|| format!("method {:?}", args.method))?;
    if let Some(dir) = args.output {
        cfg.output_dir = Some(dir);
    }
    execute(&cfg)
}

/// Runs a configured experiment, reports it, writes outputs if a directory
/// is configured, and maps failures to a nonzero exit code.
fn execute(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let table = run_experiment(cfg)?;
    print_table(&table);
    if let Some(dir) = &cfg.output_dir {
        let written = emit_outputs(&table, dir)?;
        println!("\nwrote {} files to {}:", written.len(), dir.display());
        for path in &written {
            if let Some(name) = path.file_name() {
                println!("  {}", name.to_string_lossy());
            }
        }
    }
    for failure in &table.failures {
        eprintln!("FAILED {failure}");
    }
    Ok(if table.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_table(table: &ResultsTable) {
    println!(
        "seed {}  config {}  wall time {:.2}s",
        table.seed,
        &table.config_hash[..12],
        table.wall_time_s
    );
    if !table.holdout_users.is_empty() {
        println!(
            "{} users held out of training (strong generalization)",
            table.holdout_users.len()
        );
    }
    println!(
        "\n{:<14} {:<13} {:>7} {:>7} {:>8} {:>8} {:>9} {:>9}  {}",
        "method", "correction", "ndcg", "recall", "mse", "mae", "item-mse", "item-mae", "selected"
    );
    for m in &table.results {
        let r = &m.row;
        let selected = match &r.selected {
            Some(s) => format!(
                "k={} std={} pf={}",
                s.outcome_k,
                s.prior_std,
                s.pf_k.map_or_else(|| "-".into(), |k| k.to_string())
            ),
            None => "-".into(),
        };
        println!(
            "{:<14} {:<13} {:>7.4} {:>7.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4}  {}",
            r.method,
            r.correction,
            r.ndcg,
            r.recall,
            r.mse,
            r.mae,
            r.per_item_mse,
            r.per_item_mae,
            selected
        );
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let path = &args.predictions;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("user,item,actual,predicted") => {}
        other => bail!(
            "{}: expected a `user,item,actual,predicted` header, found {:?}",
            path.display(),
            other.unwrap_or("")
        ),
    }

    let mut user_index: HashMap<i64, u32> = HashMap::new();
    let mut item_index: HashMap<i64, u32> = HashMap::new();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut predicted_of: HashMap<(u32, u32), f64> = HashMap::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let context = || format!("{} line {}", path.display(), idx + 2);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("{}: expected 4 fields, found {}", context(), fields.len());
        }
        let raw_user: i64 = fields[0].parse().with_context(context)?;
        let raw_item: i64 = fields[1].parse().with_context(context)?;
        let actual: f64 = fields[2].parse().with_context(context)?;
        let predicted: f64 = fields[3].parse().with_context(context)?;
        let next_user = user_index.len() as u32;
        let u = *user_index.entry(raw_user).or_insert(next_user);
        let next_item = item_index.len() as u32;
        let i = *item_index.entry(raw_item).or_insert(next_item);
        triplets.push((u, i, actual));
        predicted_of.insert((u, i), predicted);
    }
    if triplets.is_empty() {
        bail!("{} holds no predictions", path.display());
    }

    let matrix =
        SparseInteractions::from_triplets(user_index.len(), item_index.len(), triplets)?;
    let mut lists = Vec::new();
    let mut predicted = Vec::with_capacity(matrix.nnz());
    let mut actual = Vec::with_capacity(matrix.nnz());
    for u in 0..matrix.n_users() {
        let scored: Vec<(u32, f64, f64)> = matrix
            .row(u)
            .iter()
            .map(|e| (e.item, predicted_of[&(u as u32, e.item)], e.value))
            .collect();
        for &(_, p, a) in &scored {
            predicted.push(p);
            actual.push(a);
        }
        lists.push(RankedList::from_scored(u as u32, scored));
    }
    let per_item = metrics::per_item_accuracy(&matrix, |u, i| predicted_of[&(u, i)]);

    println!(
        "{} predictions over {} users and {} items",
        matrix.nnz(),
        matrix.n_users(),
        matrix.n_items()
    );
    println!("ndcg = {:.6}", metrics::ndcg(&lists, args.gain.into()));
    println!(
        "recall@{} = {:.6}",
        args.recall_k,
        metrics::recall_at_k(&lists, args.recall_k, args.relevance_threshold)
    );
    println!("mse = {:.6}", metrics::mse(&predicted, &actual));
    println!("mae = {:.6}", metrics::mae(&predicted, &actual));
    println!("per_item_mse = {:.6}", per_item.mse);
    println!("per_item_mae = {:.6}", per_item.mae);
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let cfg = SimConfig {
        n_users: args.users,
        n_items: args.items,
        k: args.k,
        gamma_theta: args.gamma_theta,
        gamma_y: args.gamma_y,
        gamma_shape: args.gamma_shape,
        gamma_rate: args.gamma_rate,
        seed: args.seed,
    };
    let world = sim::generate(&cfg)?;

    let pairs = (world.n_users() * world.n_items()) as f64;
    let mut histogram = [0usize; 5];
    for e in world.observed.entries() {
        histogram[(e.value as usize).clamp(1, 5) - 1] += 1;
    }
    println!(
        "world: {} users x {} items (k={}), gamma_theta={}, gamma_y={}, seed {}",
        world.n_users(),
        world.n_items(),
        cfg.k,
        cfg.gamma_theta,
        cfg.gamma_y,
        cfg.seed
    );
    println!(
        "observed {} ratings (density {:.4})",
        world.observed.nnz(),
        world.observed.nnz() as f64 / pairs
    );
    for (i, n) in histogram.iter().enumerate() {
        println!(
            "  rating {}: {:>8} ({:.1}%)",
            i + 1,
            n,
            100.0 * *n as f64 / world.observed.nnz().max(1) as f64
        );
    }

    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        deconf::data::write_triplets(dir.join("observed.csv"), &world.observed, None)?;
        let mut written = vec!["observed.csv"];
        if args.full {
            write_dense(dir.join("exposures.csv"), &world.exposures, true)?;
            write_dense(dir.join("potential.csv"), &world.potential, false)?;
            written.extend(["exposures.csv", "potential.csv"]);
        }
        println!("wrote {} to {}", written.join(", "), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes a dense user x item table as `user,item,value` rows;
/// `nonzero_only` keeps just the nonzero cells (for 0/1 masks).
fn write_dense(
    path: PathBuf,
    table: &deconf::matrix::Matrix,
    nonzero_only: bool,
) -> Result<()> {
    let file = std::fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "user,item,value")?;
    for u in 0..table.rows() {
        for i in 0..table.cols() {
            let v = table.get(u, i);
            if nonzero_only && v == 0.0 {
                continue;
            }
            writeln!(out, "{u},{i},{v}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut methods = Vec::with_capacity(args.methods.len());
    for token in &args.methods {
        methods.push(parse_sweep_method(token, &args)?);
    }
    let mut grid = Vec::new();
    for &gamma_theta in &args.gamma_theta {
        for &gamma_y in &args.gamma_y {
            grid.push(SimConfig {
                n_users: args.users,
                n_items: args.items,
                k: args.k,
                gamma_theta,
                gamma_y,
                seed: args.seed,
                ..SimConfig::default()
            });
        }
    }

    let outcome = sim::sweep(&grid, &methods, args.runs)?;
    std::fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    sim::write_sweep_rows(&outcome.rows, args.output.join("sweep_rows.csv"))?;
    let aggregates = sim::aggregate(&outcome.rows);
    sim::write_sweep_aggregates(&aggregates, args.output.join("sweep_summary.csv"))?;

    println!(
        "{:<6} {:>7} {:<28} {:<11} {:>4} {:>12} {:>10}",
        "gth", "gy", "method", "metric", "runs", "mean", "stderr"
    );
    for a in &aggregates {
        println!(
            "{:<6} {:>7} {:<28} {:<11} {:>4} {:>12.6} {:>10.6}",
            a.gamma_theta, a.gamma_y, a.method, a.metric, a.runs, a.mean, a.stderr
        );
    }
    println!(
        "\nwrote sweep_rows.csv, sweep_summary.csv to {}",
        args.output.display()
    );
    for failure in &outcome.failures {
        eprintln!("FAILED {failure}");
    }
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn parse_sweep_method(token: &str, args: &SweepArgs) -> Result<SweepMethod> {
    let token = token.trim();
    if token == "oracle" {
        return Ok(SweepMethod::Oracle);
    }
    let (variant, correction) = token
        .split_once('/')
        .with_context(|| format!("method {token:?} is not `oracle` or `variant/correction`"))?;
    let outcome = OutcomeConfig {
        variant: variant.trim().parse()?,
        correction: correction.trim().parse()?,
        k: args.outcome_k,
        prior_std_theta_beta: args.prior_std,
        learning_rate: args.learning_rate,
        max_epochs: args.max_epochs,
        seed: args.seed,
        ..OutcomeConfig::default()
    };
    Ok(SweepMethod::Model(ModelSpec {
        name: token.to_string(),
        pf: PFConfig {
            k: args.pf_k,
            seed: args.seed,
            ..PFConfig::default()
        },
        propensity: PropensityConfig::default(),
        outcome,
    }))
}
