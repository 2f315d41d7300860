use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use forcebench::dataio::{read_dataset, write_dataset, ScenarioDataset};
use forcebench::emulator::{
    train_ensemble, train_generative, write_log_csv, EmulatorParams, ForcingGroup, TrainConfig, TrainingSet,
};
use forcebench::mesmerm::{self, HarmonicArModel, DEFAULT_ORDER, MAX_ORDER};
use forcebench::metrics::{evaluate, EvalOptions, Metric, Region};
use forcebench::rollout::{rollout, RolloutOptions, DEFAULT_EULER_STEPS};
use forcebench::toyesm::{simulate, Scenario, ToyEsmConfig};
use forcebench::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "forcebench", version, about = "Forcing-conditioned climate emulation workbench")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario with the toy earth-system model and write a .fbch dataset.
    GenData(GenDataArgs),
    /// List the built-in scenarios.
    Scenarios,
    /// Fit the MESMER-M harmonic + AR(1) baseline on tas.
    FitMesmer(FitMesmerArgs),
    /// Train the deterministic ensemble and the flow head.
    Train(TrainArgs),
    /// Roll a trained emulator out over a scenario's forcings.
    Rollout(RolloutArgs),
    /// Compare a prediction with a target and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Train, roll out and evaluate with each forcing group withheld in turn.
    AblationSuite(AblationArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Scenario name (see `forcebench scenarios`).
    #[arg(long)]
    scenario: String,
    /// Ensemble members; they differ only in their noise seed.
    #[arg(long, default_value_t = 1)]
    members: usize,
    /// Months to simulate [default: the scenario's full length].
    #[arg(long)]
    months: Option<usize>,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latitude bands of the output grid.
    #[arg(long, default_value_t = 12)]
    n_lat: usize,
    /// Longitude cells of the output grid.
    #[arg(long, default_value_t = 24)]
    n_lon: usize,
    /// Output .fbch file.
    #[arg(long)]
    out: PathBuf,
    /// TOML file supplying any of these flags; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitMesmerArgs {
    /// Training datasets (.fbch); the first provides the reference period.
    #[arg(long, num_args = 1.., required = true)]
    train: Vec<PathBuf>,
    /// Harmonic order K.
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    /// Fit and drive on land cells only.
    #[arg(long)]
    land_only: bool,
    /// Length in years of the reference period at the start of the first dataset.
    #[arg(long, default_value_t = 51)]
    ref_years: usize,
    /// Output model file (.fbch).
    #[arg(long)]
    out: PathBuf,
    /// TOML file supplying any of these flags; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablate {
    None,
    Ghg,
    Aero,
    O3,
}

impl Ablate {
    const ALL: [Ablate; 4] = [Ablate::None, Ablate::Ghg, Ablate::Aero, Ablate::O3];

    fn group(self) -> Option<ForcingGroup> {
        match self {
            Ablate::None => None,
            Ablate::Ghg => Some(ForcingGroup::Ghg),
            Ablate::Aero => Some(ForcingGroup::Aero),
            Ablate::O3 => Some(ForcingGroup::O3),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Ablate::None => "ac_full",
            Ablate::Ghg => "ac_no_ghg",
            Ablate::Aero => "ac_no_aero",
            Ablate::O3 => "ac_no_o3",
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Hyper {
    /// Forcing keep probability λ.
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    /// Training horizons in months, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,6,12")]
    horizons: Vec<usize>,
    /// Optimizer steps per deterministic model.
    #[arg(long, default_value_t = TrainConfig::default().det_steps)]
    steps: usize,
    /// Optimizer steps of the flow head.
    #[arg(long, default_value_t = TrainConfig::default().flow_steps)]
    flow_steps: usize,
    /// Hidden width of each network.
    #[arg(long, default_value_t = TrainConfig::default().width)]
    width: usize,
    /// Deterministic ensemble size.
    #[arg(long, default_value_t = TrainConfig::default().n_det_models)]
    models: usize,
    /// Items per optimizer step.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    /// Peak learning rate of the deterministic models.
    #[arg(long, default_value_t = TrainConfig::default().det_lr)]
    lr: f64,
    /// Peak learning rate of the flow head.
    #[arg(long, default_value_t = TrainConfig::default().flow_lr)]
    flow_lr: f64,
    /// Mask each forcing independently instead of all together.
    #[arg(long)]
    independent_masking: bool,
    /// Skip the flow head; rollouts are then deterministic.
    #[arg(long)]
    no_flow: bool,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Hyper {
    fn config(&self, withheld: Option<ForcingGroup>) -> TrainConfig {
        TrainConfig {
            keep_prob: self.lambda,
            horizons: self.horizons.clone(),
            independent_masking: self.independent_masking,
            width: self.width,
            batch_size: self.batch,
            det_steps: self.steps,
            flow_steps: self.flow_steps,
            det_lr: self.lr,
            flow_lr: self.flow_lr,
            n_det_models: self.models,
            withheld: withheld.into_iter().collect(),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training datasets (.fbch) on a common grid.
    #[arg(long, num_args = 1.., required = true)]
    train: Vec<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
    /// Forcing group hidden from the model.
    #[arg(long, value_enum, default_value_t = Ablate::None)]
    ablate: Ablate,
    /// Output directory for params, checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// TOML file supplying any of these flags; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    /// Trained parameters (.fbch).
    #[arg(long)]
    params: PathBuf,
    /// Built-in scenario name or a .fbch dataset supplying forcings and the two initial months.
    #[arg(long)]
    scenario: String,
    /// Emulated members.
    #[arg(long, default_value_t = 1)]
    members: usize,
    /// Residual noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Months to emulate [default: the whole forcing series].
    #[arg(long)]
    months: Option<usize>,
    /// Euler steps per flow sample.
    #[arg(long, default_value_t = DEFAULT_EULER_STEPS)]
    euler_steps: usize,
    /// Ignore the flow head and emit the ensemble-mean trajectory.
    #[arg(long)]
    deterministic: bool,
    /// Seed of the toy simulation that provides a built-in scenario.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Output .fbch file.
    #[arg(long)]
    out: PathBuf,
    /// TOML file supplying any of these flags; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predicted dataset (.fbch).
    #[arg(long)]
    pred: PathBuf,
    /// Target dataset (.fbch).
    #[arg(long)]
    target: PathBuf,
    /// Metrics to compute, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Regions: global, north, tropics, south, land.
    #[arg(long, value_delimiter = ',', default_value = "global")]
    region: Vec<String>,
    /// Dataset whose last 20 years define the anomaly climatology.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Window length in years of the regional series.
    #[arg(long, default_value_t = 5)]
    window_years: usize,
    /// Bins of the value histograms.
    #[arg(long, default_value_t = 20)]
    pdf_bins: usize,
    /// Also write whitespace-separated .dat tables for plotting.
    #[arg(long)]
    plot_data: bool,
    /// Output directory of the report.
    #[arg(long)]
    report: PathBuf,
    /// TOML file supplying any of these flags; the command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblationArgs {
    /// TOML manifest supplying the flags below.
    #[arg(long, required = true)]
    config: Option<PathBuf>,
    /// Training datasets (.fbch).
    #[arg(long, num_args = 1.., required = true)]
    train: Vec<PathBuf>,
    /// Evaluation dataset (.fbch); rollouts start from its first two months.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    /// Emulated members per variant.
    #[arg(long, default_value_t = 1)]
    members: usize,
    /// Output directory; one subdirectory per variant plus summary.csv.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Scenarios => {
            println!("name\tstart_year\tmonths\tdescription");
            for s in Scenario::ALL {
                println!("{}\t{}\t{}\t{}", s.name(), s.start_year(), s.default_months(), s.description());
            }
            Ok(())
        }
        Command::FitMesmer(a) => fit_mesmer(a),
        Command::Train(a) => {
            train(&a.train, &a.hyper, a.ablate, &a.out)?;
            Ok(())
        }
        Command::Rollout(a) => rollout_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AblationSuite(a) => ablation_suite(a),
    }
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<ScenarioDataset>> {
    paths.iter().map(|p| read_dataset(p).map_err(CliError::from)).collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse()?;
    let cfg = ToyEsmConfig {
        n_lat: a.n_lat,
        n_lon: a.n_lon,
        ..ToyEsmConfig::default()
    };
    let months = a.months.unwrap_or(scenario.default_months());
    let d = simulate(&cfg, scenario.name(), months, a.members, a.seed)?;
    create_parent(&a.out)?;
    write_dataset(&d, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn fit_mesmer(a: FitMesmerArgs) -> Result<()> {
    if a.order == 0 || a.order > MAX_ORDER {
        return Err(CliError::Usage(format!("--order must be in 1..={MAX_ORDER}")));
    }
    let data = read_all(&a.train)?;
    let first = &data[0];
    let v = first.require_var("tas", None)?;
    let tas: Vec<_> = first.members.iter().map(|m| m.index_axis(ndarray::Axis(1), v)).collect();
    let land = if a.land_only {
        Some(first.land_mask.clone().ok_or_else(|| {
            Error::InvalidDataset(format!("dataset `{}` has no land mask", first.name))
        })?)
    } else {
        None
    };
    let years = a.ref_years.min(first.n_months() / 12);
    let reference = mesmerm::reference_period(&tas, &first.grid, first.start_year, 0..years, land.as_ref())?;
    let refs: Vec<&ScenarioDataset> = data.iter().collect();
    let model: HarmonicArModel = mesmerm::fit_datasets(&refs, &reference, a.order)?;
    create_parent(&a.out)?;
    model.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

/// Trains one emulator into `out` and returns its parameters.
fn train(paths: &[PathBuf], hyper: &Hyper, ablate: Ablate, out: &Path) -> Result<EmulatorParams> {
    let cfg = hyper.config(ablate.group());
    cfg.validate()?;
    let data = read_all(paths)?;
    let refs: Vec<&ScenarioDataset> = data.iter().collect();
    let set = TrainingSet::new(&refs, &cfg.horizons, &cfg.withheld)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    let echo = serde_json::to_string_pretty(&cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(out.join("config.json"), echo + "\n")?;

    let runs = train_ensemble(&set, &cfg)?;
    for (k, run) in runs.iter().enumerate() {
        write_log_csv(&run.log, &out.join(format!("log-det{k}.csv")))?;
        for c in &run.checkpoints {
            let p = EmulatorParams {
                layout: set.layout.clone(),
                det: vec![c.net.clone()],
                flow: None,
            };
            p.save(&out.join("checkpoints").join(format!("det{k}-step{:06}.fbch", c.step)))?;
        }
    }
    let det: Vec<_> = runs.into_iter().map(|r| r.net).collect();
    let flow = if hyper.no_flow {
        None
    } else {
        let run = train_generative(&set, &det, &cfg, cfg.seed ^ 0xF10)?;
        write_log_csv(&run.log, &out.join("log-flow.csv"))?;
        Some(run.net)
    };
    let params = EmulatorParams {
        layout: set.layout.clone(),
        det,
        flow,
    };
    params.save(&out.join("params.fbch"))?;
    println!("{}", out.join("params.fbch").display());
    Ok(params)
}

fn scenario_source(spec: &str, params: &EmulatorParams, months: Option<usize>, seed: u64) -> Result<ScenarioDataset> {
    if let Ok(sc) = spec.parse::<Scenario>() {
        let (n_lat, n_lon) = params.layout.grid.shape();
        let cfg = ToyEsmConfig {
            n_lat,
            n_lon,
            ..ToyEsmConfig::default()
        };
        let n = months.unwrap_or(sc.default_months()).max(2);
        return Ok(simulate(&cfg, sc.name(), n, 1, seed)?);
    }
    let path = Path::new(spec);
    if path.exists() {
        return Ok(read_dataset(path)?);
    }
    Err(Error::UnknownScenario(spec.to_string()).into())
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let params = EmulatorParams::load(&a.params)?;
    let init = scenario_source(&a.scenario, &params, a.months, a.init_seed)?;
    let opts = RolloutOptions {
        n_months: a.months,
        n_members: a.members,
        seed: a.seed,
        euler_steps: a.euler_steps,
        use_flow: !a.deterministic,
        init_member: 0,
    };
    let out = rollout(&params, &init, &opts)?;
    create_parent(&a.out)?;
    write_dataset(&out, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| s.parse::<T>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let metrics: Vec<Metric> = if a.metrics.is_empty() {
        Metric::ALL.to_vec()
    } else {
        parse_list(&a.metrics)?
    };
    let regions: Vec<Region> = parse_list(&a.region)?;
    let pred = read_dataset(&a.pred)?;
    let target = read_dataset(&a.target)?;
    let baseline = a.baseline.as_deref().map(read_dataset).transpose()?;
    let opts = EvalOptions {
        metrics,
        regions,
        baseline: baseline.as_ref(),
        window_years: a.window_years,
        pdf_bins: a.pdf_bins,
        ..EvalOptions::default()
    };
    let report = evaluate(&pred, &target, &opts)?;
    report.write_dir(&a.report, a.plot_data)?;
    println!("{}", a.report.join("metrics.csv").display());
    Ok(())
}

fn ablation_suite(a: AblationArgs) -> Result<()> {
    let target = read_dataset(&a.target)?;
    fs::create_dir_all(&a.out)?;
    let mut summary = csv::Writer::from_path(a.out.join("summary.csv")).map_err(Error::from)?;
    summary
        .write_record(["variant", "metric", "variable", "region", "value"])
        .map_err(Error::from)?;
    for variant in Ablate::ALL {
        let dir = a.out.join(variant.label());
        let params = train(&a.train, &a.hyper, variant, &dir)?;
        let opts = RolloutOptions {
            n_members: a.members,
            seed: a.hyper.seed,
            ..RolloutOptions::default()
        };
        let pred = rollout(&params, &target, &opts)?;
        write_dataset(&pred, &dir.join("rollout.fbch"))?;
        let eval = EvalOptions {
            metrics: vec![Metric::Rmse, Metric::Nrmse],
            regions: Region::ALL.to_vec(),
            stats: Some(&params.layout.stats),
            ..EvalOptions::default()
        };
        let report = evaluate(&pred, &target, &eval)?;
        report.write_dir(&dir.join("report"), false)?;
        for r in &report.rows {
            summary
                .write_record([variant.label(), &r.metric, &r.variable, &r.region, &r.value.to_string()])
                .map_err(Error::from)?;
        }
    }
    summary.flush()?;
    println!("{}", a.out.join("summary.csv").display());
    Ok(())
}
