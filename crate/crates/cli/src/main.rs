use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use spillsel::estimate::{estimate_effect, fit_sc, write_effect_csv, EffectEstimate, ScFit};
use spillsel::experiment::{
    pre_target_std, run_experiment, run_latent_shift_study, run_semi_synthetic, write_summary_csv, ExperimentConfig,
};
use spillsel::panel::{ingest_csv, write_csv};
use spillsel::proximal::{fit_proximal_sc, ProximalFit};
use spillsel::regression::SparsePriorConfig;
use spillsel::rng::derive_seed;
use spillsel::select::{sample_ids, select_donors_with, write_selection_csv, Procedure, SelectionConfig, SelectionReport};
use spillsel::sensitivity::{default_tau_spill_grid, sensitivity_report, write_fn_curve_csv, SensitivityReport};
use spillsel::simulate::{inject_synthetic_donor, simulate, SimConfig};
use spillsel::{Execution, Panel};

const TOOL: &str = "spillsel";

#[derive(Parser, Debug)]
#[command(name = "spillsel", version, about = "Donor selection for synthetic control by spillover detection")]
struct Cli {
    /// Seed for every random draw of the run; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Rendering of the report printed on stdout. Both JSON and CSV files are always written.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads (1 = sequential). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a panel from the structural model; writes panel.csv and truth.json.
    Simulate {
        /// JSON simulation config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Forecast every donor past the intervention and flag spillover.
    Select {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        rule: RuleArgs,
    },
    /// Fit the synthetic control and estimate the effect with bias bounds.
    Estimate(EstimateArgs),
    /// Same as `estimate --debias`.
    Debias(EstimateArgs),
    /// Bias bounds only.
    Sensitivity(EstimateArgs),
    /// Monte Carlo bias study on simulated panels.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Shift the first latent's innovations by this mean and rerun once per offset.
        #[arg(long)]
        latent_shift: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,3")]
        offsets: Vec<usize>,
    },
    /// Append a donor drawn as N(y, sigma) to a real panel.
    Inject {
        #[command(flatten)]
        panel: PanelArgs,
        /// Absolute noise scale of the injected donor.
        #[arg(long, conflicts_with = "sigma_rel")]
        sigma: Option<f64>,
        /// Noise scale as a multiple of the pre-intervention target std.
        #[arg(long, default_value_t = 0.1)]
        sigma_rel: f64,
        /// Run the detection study over this many seeds instead of writing one panel.
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        rule: RuleArgs,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct PanelArgs {
    /// Wide CSV with a `time` column, the target and one column per donor.
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value = "y")]
    target: String,
    /// First post-intervention time value.
    #[arg(long)]
    intervention: i64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProcedureArg {
    S1,
    S2,
}

#[derive(Args, Debug, Clone)]
struct RuleArgs {
    #[arg(long, value_enum, ignore_case = true, default_value = "s2")]
    procedure: ProcedureArg,
    /// Forecast interval level.
    #[arg(long, default_value_t = 0.8)]
    phi: f64,
    /// Number of donors kept by S1.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Average the panel over buckets of this many periods before forecasting.
    #[arg(long)]
    bucket: Option<usize>,
    /// Fixed forecast penalty; leave-one-out CV when absent.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct EstimateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Selection report written by `select`.
    #[arg(long, required_unless_present = "donors", conflicts_with = "donors")]
    selection: Option<PathBuf>,
    /// Comma-separated donor ids; every other donor counts as excluded.
    #[arg(long, value_delimiter = ',')]
    donors: Option<Vec<String>>,
    /// Fit on a uniform sample of this many donors.
    #[arg(long)]
    k: Option<usize>,
    /// Instrument the donors with the excluded ones.
    #[arg(long)]
    debias: bool,
    /// Sparse mixture-prior fit instead of least squares.
    #[arg(long, conflicts_with = "debias")]
    sparse: bool,
    /// JSON prior settings for `--sparse`.
    #[arg(long, requires = "sparse")]
    sparse_config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    instrument_cap: usize,
    /// Spillover magnitudes for the false-negative curve.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<spillsel::Error> for CliError {
    fn from(e: spillsel::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> CliResult<io::BufWriter<fs::File>> {
        self.outputs.push(name.to_string());
        Ok(io::BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut io::BufWriter<fs::File>) -> spillsel::Result<()>) -> CliResult<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn manifest(mut self, command: &str, config: Value) -> CliResult<()> {
        let outputs = self.outputs.clone();
        self.json(
            "manifest.json",
            &json!({
                "tool": TOOL,
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "argv": std::env::args().collect::<Vec<_>>(),
                "config": config,
                "outputs": outputs,
            }),
        )
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn print_file(run: &Run, name: &str) -> CliResult<()> {
    print!("{}", fs::read_to_string(run.dir.join(name))?);
    Ok(())
}

fn load_panel(args: &PanelArgs) -> CliResult<Panel> {
    Ok(ingest_csv(&args.panel, &args.target, args.intervention)?)
}

impl RuleArgs {
    fn config(&self, seed: u64) -> SelectionConfig {
        SelectionConfig {
            procedure: match self.procedure {
                ProcedureArg::S1 => Procedure::S1,
                ProcedureArg::S2 => Procedure::S2,
            },
            ppi_level: self.phi,
            s1_count: self.k,
            time_average_bucket: self.bucket,
            ridge_lambda: self.lambda,
            seed,
        }
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    intervention_time: i64,
    true_tau: f64,
    valid_ids: Vec<String>,
    invalid_ids: Vec<String>,
    true_counterfactual: &'a [f64],
    latents: &'a [Vec<f64>],
    slopes: &'a [Vec<f64>],
    beta: &'a [Vec<f64>],
}

fn cmd_simulate(cli: &Cli, config: Option<&Path>) -> CliResult<()> {
    let mut cfg: SimConfig = match config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let trace = simulate(&cfg)?;
    let mut run = Run::new(&cli.output_dir)?;
    run.outputs.push("panel.csv".into());
    write_csv(&trace.panel, run.dir.join("panel.csv"))?;
    let truth = Truth {
        intervention_time: trace.panel.intervention_time(),
        true_tau: trace.true_tau,
        valid_ids: trace.valid_ids(),
        invalid_ids: trace.invalid_ids(),
        true_counterfactual: &trace.true_counterfactual,
        latents: &trace.latents,
        slopes: &trace.slopes,
        beta: &trace.beta,
    };
    run.json("truth.json", &truth)?;
    match cli.format {
        Format::Json => print_json(&json!({
            "n_donors": trace.panel.n_donors(),
            "n_times": trace.panel.n_times(),
            "intervention_time": truth.intervention_time,
            "n_invalid": truth.invalid_ids.len(),
        }))?,
        Format::Csv => print_file(&run, "panel.csv")?,
    }
    run.manifest("simulate", json!({ "sim": cfg }))
}

fn cmd_select(cli: &Cli, panel_args: &PanelArgs, rule: &RuleArgs) -> CliResult<()> {
    let panel = load_panel(panel_args)?;
    let cfg = rule.config(cli.seed.unwrap_or(0));
    let report = select_donors_with(&panel, &cfg, Execution::from_jobs(cli.jobs))?;
    let mut run = Run::new(&cli.output_dir)?;
    run.json("selection.json", &report)?;
    run.csv("selection.csv", |w| write_selection_csv(&report, w))?;
    match cli.format {
        Format::Json => print_json(&json!({
            "procedure": report.procedure,
            "n_pvd": report.pvd_ids.len(),
            "n_excluded": report.excluded_ids.len(),
            "ridge_lambda": report.ridge_lambda,
        }))?,
        Format::Csv => print_file(&run, "selection.csv")?,
    }
    run.manifest(
        "select",
        json!({ "panel": panel_args, "selection": cfg, "jobs": cli.jobs }),
    )
}

struct Fitted {
    sc: ScFit,
    effect: EffectEstimate,
    sensitivity: SensitivityReport,
    proximal: Option<ProximalFit>,
    excluded: Vec<String>,
}

fn fit_and_bound(panel: &Panel, args: &EstimateArgs, debias: bool, seed: u64) -> CliResult<(Fitted, Value)> {
    let (pool, excluded) = match (&args.selection, &args.donors) {
        (Some(path), _) => {
            let report: SelectionReport = read_json(path)?;
            (report.pvd_ids, report.excluded_ids)
        }
        (None, Some(ids)) => {
            panel.donor_indices(ids)?;
            let rest = panel.donor_ids().iter().filter(|d| !ids.contains(d)).cloned().collect();
            (ids.clone(), rest)
        }
        (None, None) => return Err(CliError::Input("one of --selection or --donors is required".into())),
    };
    if pool.is_empty() {
        return Err(CliError::Input("the donor set is empty".into()));
    }
    let chosen = match args.k {
        Some(k) => sample_ids(&pool, k, derive_seed(seed, 0))?,
        None => pool.clone(),
    };
    let sparse = if args.sparse {
        let prior: SparsePriorConfig = match &args.sparse_config {
            Some(p) => read_json(p)?,
            None => SparsePriorConfig::default(),
        };
        prior.validate()?;
        Some(prior)
    } else {
        None
    };
    // donors in the pool but not sampled are valid proxies too
    let proxies_pool: Vec<String> = excluded
        .iter()
        .chain(pool.iter().filter(|d| !chosen.contains(d)))
        .cloned()
        .collect();
    let (sc, proximal) = if debias {
        if proxies_pool.is_empty() {
            return Err(spillsel::Error::NoExcludedDonors.into());
        }
        if args.instrument_cap == 0 {
            return Err(CliError::Input("invalid `instrument_cap`: must be at least 1".into()));
        }
        let proxies = sample_ids(&proxies_pool, args.instrument_cap, derive_seed(seed, 1))?;
        let fit = fit_proximal_sc(panel, &chosen, &proxies)?;
        (fit.to_sc_fit(), Some(fit))
    } else {
        (fit_sc(panel, &chosen, sparse.as_ref())?, None)
    };
    let effect = estimate_effect(panel, &sc)?;
    let grid = args.grid.clone().unwrap_or_else(default_tau_spill_grid);
    let sensitivity = sensitivity_report(panel, &sc, &excluded, effect.tau_hat, &grid)?;
    let config = json!({
        "panel": args.panel,
        "selection": args.selection,
        "donors": chosen,
        "excluded": excluded,
        "k": args.k,
        "debias": debias,
        "sparse": sparse,
        "instrument_cap": args.instrument_cap,
        "grid": grid,
        "seed": seed,
    });
    Ok((
        Fitted {
            sc,
            effect,
            sensitivity,
            proximal,
            excluded,
        },
        config,
    ))
}

fn write_sensitivity(run: &mut Run, s: &SensitivityReport) -> CliResult<()> {
    run.json("sensitivity.json", s)?;
    run.csv("fn_curve.csv", |w| write_fn_curve_csv(s, w))
}

fn cmd_estimate(cli: &Cli, args: &EstimateArgs, debias: bool, name: &str) -> CliResult<()> {
    let panel = load_panel(&args.panel)?;
    let (fitted, config) = fit_and_bound(&panel, args, debias, cli.seed.unwrap_or(0))?;
    let mut run = Run::new(&cli.output_dir)?;
    run.json(
        "effect.json",
        &json!({
            "tau_hat": fitted.effect.tau_hat,
            "interval_95": fitted.effect.interval_95,
            "per_time_effects": fitted.effect.per_time_effects,
            "debiased": fitted.proximal.is_some(),
            "sparse": fitted.sc.sparse,
            "weights": fitted.sc.ranked_weights(),
            "intercept": fitted.sc.fit.intercept,
            "residual_variance": fitted.sc.fit.residual_variance,
            "n_excluded": fitted.excluded.len(),
        }),
    )?;
    run.csv("effect.csv", |w| write_effect_csv(&panel, &fitted.effect, w))?;
    write_sensitivity(&mut run, &fitted.sensitivity)?;
    if let Some(p) = &fitted.proximal {
        run.json("proximal.json", p)?;
    }
    match cli.format {
        Format::Json => print_json(&json!({
            "tau_hat": fitted.effect.tau_hat,
            "interval_95": fitted.effect.interval_95,
            "ov_bound": fitted.sensitivity.ov_bound,
            "fp_bound": fitted.sensitivity.fp_bound,
            "sign_flip_tau_spill": fitted.sensitivity.sign_flip_tau_spill,
        }))?,
        Format::Csv => print_file(&run, "effect.csv")?,
    }
    run.manifest(name, config)
}

fn cmd_sensitivity(cli: &Cli, args: &EstimateArgs) -> CliResult<()> {
    let panel = load_panel(&args.panel)?;
    let (fitted, config) = fit_and_bound(&panel, args, args.debias, cli.seed.unwrap_or(0))?;
    let mut run = Run::new(&cli.output_dir)?;
    write_sensitivity(&mut run, &fitted.sensitivity)?;
    match cli.format {
        Format::Json => print_json(&fitted.sensitivity)?,
        Format::Csv => print_file(&run, "fn_curve.csv")?,
    }
    run.manifest("sensitivity", config)
}

fn cmd_experiment(
    cli: &Cli,
    config: Option<&Path>,
    replicates: Option<usize>,
    latent_shift: Option<f64>,
    offsets: &[usize],
) -> CliResult<()> {
    let mut cfg: ExperimentConfig = match config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    let mut run = Run::new(&cli.output_dir)?;
    match latent_shift {
        None => {
            let report = run_experiment(&cfg)?;
            run.json("summary.json", &report)?;
            run.csv("summary.csv", |w| write_summary_csv(&report.summaries, w))?;
            match cli.format {
                Format::Json => print_json(&report.summaries)?,
                Format::Csv => print_file(&run, "summary.csv")?,
            }
        }
        Some(shift) => {
            if offsets.is_empty() {
                return Err(CliError::Input("invalid `offsets`: must not be empty".into()));
            }
            let results = run_latent_shift_study(&cfg, shift, offsets)?;
            run.json("summary.json", &results)?;
            for r in &results {
                let name = format!("summary_offset{}.csv", r.shift_time_offset);
                run.csv(&name, |w| write_summary_csv(&r.report.summaries, w))?;
                if cli.format == Format::Csv {
                    println!("# shift_time_offset={}", r.shift_time_offset);
                    print_file(&run, &name)?;
                }
            }
            if cli.format == Format::Json {
                print_json(&results.iter().map(|r| (r.shift_time_offset, &r.report.summaries)).collect::<Vec<_>>())?;
            }
        }
    }
    run.manifest(
        "experiment",
        json!({ "experiment": cfg, "latent_shift": latent_shift, "offsets": offsets }),
    )
}

fn cmd_inject(
    cli: &Cli,
    panel_args: &PanelArgs,
    sigma: Option<f64>,
    sigma_rel: f64,
    seeds: Option<usize>,
    rule: &RuleArgs,
) -> CliResult<()> {
    let panel = load_panel(panel_args)?;
    let sigma = sigma.unwrap_or_else(|| sigma_rel * pre_target_std(&panel));
    let seed = cli.seed.unwrap_or(0);
    let mut run = Run::new(&cli.output_dir)?;
    let selection = rule.config(seed);
    match seeds {
        None => {
            let (injected, id) = inject_synthetic_donor(&panel, sigma, seed)?;
            run.outputs.push("panel.csv".into());
            write_csv(&injected, run.dir.join("panel.csv"))?;
            let info = json!({ "injected_id": id, "sigma": sigma, "seed": seed });
            run.json("inject.json", &info)?;
            match cli.format {
                Format::Json => print_json(&info)?,
                Format::Csv => print_file(&run, "panel.csv")?,
            }
        }
        Some(n) => {
            let list: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, i)).collect();
            let report = run_semi_synthetic(&panel, sigma, &selection, &list, Execution::from_jobs(cli.jobs))?;
            run.json("semi_synthetic.json", &report)?;
            print_json(&json!({
                "sigma": report.sigma,
                "flag_rate": report.flag_rate,
                "attenuation_rate": report.attenuation_rate,
                "failure_count": report.failure_count,
            }))?;
        }
    }
    run.manifest(
        "inject",
        json!({
            "panel": panel_args,
            "sigma": sigma,
            "seed": seed,
            "seeds": seeds,
            "selection": seeds.map(|_| selection),
        }),
    )
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate { config } => cmd_simulate(cli, config.as_deref()),
        Command::Select { panel, rule } => cmd_select(cli, panel, rule),
        Command::Estimate(args) => cmd_estimate(cli, args, args.debias, "estimate"),
        Command::Debias(args) => cmd_estimate(cli, args, true, "debias"),
        Command::Sensitivity(args) => cmd_sensitivity(cli, args),
        Command::Experiment {
            config,
            replicates,
            latent_shift,
            offsets,
        } => cmd_experiment(cli, config.as_deref(), *replicates, *latent_shift, offsets),
        Command::Inject {
            panel,
            sigma,
            sigma_rel,
            seeds,
            rule,
        } => cmd_inject(cli, panel, *sigma, *sigma_rel, *seeds, rule),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Input(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}
