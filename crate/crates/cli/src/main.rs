use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use ststack::covariance::DEFAULT_MC_SAMPLES;
use ststack::evaluation::{
    empirical_semivariogram, fit_exponential_variogram, waic, write_variogram_csv, DEFAULT_VARIOGRAM_BINS,
};
use ststack::io;
use ststack::model::{BasisSpec, PointDataset};
use ststack::pipeline::{
    self, build_outcome_dataset, fit_stack, load_model, predict, run_outcome, run_with_threads, write_outcome,
    write_prediction, write_simulation, write_stack_outputs, PriorConfig, RunConfig, StackedModel, Targets,
    DEFAULT_DRAWS,
};
use ststack::simulation::{simulate, SimConfig};

#[derive(Parser)]
#[command(name = "ststack", version, about = "Predictive stacking for spatially-temporally misaligned data")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for candidate-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate point data, block design, outcomes and truths.
    Simulate,
    /// Fit the candidate grid, compute leave-one-out densities and stack.
    FitStack {
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Stacked predictive draws at instants (CSV) or blocks (GeoJSON).
    Predict {
        /// Directory written by fit-stack (its `fits` subdirectory).
        #[arg(long)]
        fits: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Outcome regression over stacked block-level exposure draws.
    Outcome {
        #[arg(long)]
        outcomes: Option<PathBuf>,
        #[arg(long)]
        blocks: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// WAIC from a draws × points log-likelihood CSV.
    Waic {
        #[arg(long)]
        loglik: PathBuf,
    },
    /// Empirical semivariogram of detrended point data with an exponential fit.
    Variogram {
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_VARIOGRAM_BINS)]
        bins: usize,
    },
}

enum Failure {
    Config(String),
    Run(ststack::Error),
}

impl From<ststack::Error> for Failure {
    fn from(e: ststack::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(e) if e.is_numerical() => 4,
            Failure::Run(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Failure::Config(format!("{}: at '{at}': {}", path.display(), e.inner()))
    })
}

fn run_config(cli: &Cli) -> CliResult<Option<RunConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg: RunConfig = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(cfg))
}

fn required(flag: Option<&PathBuf>, configured: Option<&PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(configured)
        .cloned()
        .ok_or_else(|| Failure::Config(format!("no {name} path: pass --{name} or set paths.{name} in the config")))
}

fn cmd_simulate(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config::<SimConfig>(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let sim = run_with_threads(cli.threads, || simulate(&cfg))??;
    write_simulation(&cli.out, &sim)?;
    log::info!("wrote {} point records and {} blocks to {}", sim.data.len(), sim.blocks.len(), cli.out.display());
    Ok(())
}

fn cmd_fit_stack(cli: &Cli, points: Option<&PathBuf>) -> CliResult<()> {
    let cfg =
        run_config(cli)?.ok_or_else(|| Failure::Config("fit-stack needs --config with the candidate grids".into()))?;
    let path = required(points, cfg.paths.points.as_ref(), "points")?;
    let table = io::read_points(io::open(&path)?)?;
    let data = PointDataset::new(table.coords, table.values, cfg.basis.clone())?;
    let model = run_with_threads(cfg.threads, || -> ststack::Result<(StackedModel, _)> {
        let stack = fit_stack(&data, &cfg)?;
        let loo = stack.loo.clone();
        Ok((StackedModel::new(table.site_ids.clone(), data.clone(), stack)?, loo))
    })??;
    write_stack_outputs(&cli.out, &model.0, &model.1)?;
    for c in model.0.weights.candidates.iter().filter(|c| c.weight > pipeline::WEIGHT_EPS) {
        log::info!("phi_s={} nu={} phi_t={} delta2={} weight={:.4}", c.phi_s, c.nu, c.phi_t, c.delta2, c.weight);
    }
    Ok(())
}

fn is_geojson(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("geojson" | "json"))
}

fn cmd_predict(cli: &Cli, fits: Option<&PathBuf>, targets: Option<&PathBuf>, draws: Option<usize>) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let paths = cfg.as_ref().map(|c| c.paths.clone()).unwrap_or_default();
    let fits = required(fits, paths.fits.as_ref(), "fits")?;
    let target_path =
        match targets {
            Some(t) => t.clone(),
            None => paths.instants.clone().or(paths.blocks.clone()).ok_or_else(|| {
                Failure::Config("no targets: pass --targets or set paths.instants / paths.blocks".into())
            })?,
        };
    let draws = draws.or(cfg.as_ref().map(|c| c.draws)).unwrap_or(DEFAULT_DRAWS);
    if draws == 0 {
        return Err(Failure::Config("draws must be positive".into()));
    }
    let mc = cfg.as_ref().map_or(DEFAULT_MC_SAMPLES, |c| c.mc_samples);
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let threads = cli.threads.or(cfg.as_ref().and_then(|c| c.threads));

    let model = load_model(&fits)?;
    let (ids, targets) = if is_geojson(&target_path) {
        let t = io::read_blocks_geojson(&fs::read_to_string(&target_path)?)?;
        (t.ids, Targets::Blocks(t.blocks))
    } else {
        let t = io::read_instants(io::open(&target_path)?)?;
        (t.ids, Targets::Instants(t.points))
    };
    let pred = run_with_threads(threads, || predict(&model, &targets, draws, mc, seed))??;
    write_prediction(&cli.out, &ids, &pred)?;
    Ok(())
}

fn cmd_outcome(
    cli: &Cli,
    outcomes: Option<&PathBuf>,
    blocks: Option<&PathBuf>,
    samples: Option<&PathBuf>,
) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let paths = cfg.as_ref().map(|c| c.paths.clone()).unwrap_or_default();
    let outcomes = required(outcomes, paths.outcomes.as_ref(), "outcomes")?;
    let blocks = required(blocks, paths.blocks.as_ref(), "blocks")?;
    let samples = required(samples, paths.samples.as_ref(), "samples")?;
    let outcome_cfg = cfg.as_ref().map(|c| c.outcome.clone()).unwrap_or_default();
    let priors = cfg.as_ref().map(|c| c.priors.clone()).unwrap_or_else(PriorConfig::default);
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);

    let table = io::read_outcomes(io::open(&outcomes)?)?;
    let block_table = io::read_blocks_geojson(&fs::read_to_string(&blocks)?)?;
    let dataset = build_outcome_dataset(&table, &block_table, &outcome_cfg)?;
    let zl = pipeline::align_samples(&table.block_ids, &io::read_samples(io::open(&samples)?)?)?;
    let report = run_outcome(&dataset, &zl, &priors, seed)?;
    write_outcome(&cli.out, &report)?;
    for c in &report.summary.coefficients {
        log::info!("{}: median {:.4} [{:.4}, {:.4}]", c.name, c.summary.median, c.summary.q025, c.summary.q975);
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ststack::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_waic(cli: &Cli, loglik: &Path) -> CliResult<()> {
    let m = io::read_numeric_matrix(io::open(loglik)?)?;
    let report = waic(&m)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cli.out.join("waic.json"), &report)
}

#[derive(serde::Serialize)]
struct VariogramFit {
    nugget: f64,
    partial_sill: f64,
    phi: f64,
    nugget_ratio: f64,
}

fn cmd_variogram(cli: &Cli, points: Option<&PathBuf>, bins: usize) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let configured = cfg.as_ref().and_then(|c| c.paths.points.clone());
    let path = required(points, configured.as_ref(), "points")?;
    let basis = cfg.map_or(BasisSpec::Monthly, |c| c.basis);
    let table = io::read_points(io::open(&path)?)?;
    let data = PointDataset::new(table.coords, table.values, basis)?;
    let bins = empirical_semivariogram(&data, bins)?;
    fs::create_dir_all(&cli.out)?;
    write_variogram_csv(io::create(&cli.out.join("variogram.csv"))?, &bins)?;
    let fit = fit_exponential_variogram(&bins)?;
    write_json(
        &cli.out.join("variogram_fit.json"),
        &VariogramFit {
            nugget: fit.nugget,
            partial_sill: fit.partial_sill,
            phi: fit.phi,
            nugget_ratio: fit.nugget_ratio(),
        },
    )
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::FitStack { points } => cmd_fit_stack(cli, points.as_ref()),
        Command::Predict { fits, targets, draws } => cmd_predict(cli, fits.as_ref(), targets.as_ref(), *draws),
        Command::Outcome { outcomes, blocks, samples } => {
            cmd_outcome(cli, outcomes.as_ref(), blocks.as_ref(), samples.as_ref())
        }
        Command::Waic { loglik } => cmd_waic(cli, loglik),
        Command::Variogram { points, bins } => cmd_variogram(cli, points.as_ref(), *bins),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(msg) => eprintln!("config error: {msg}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
