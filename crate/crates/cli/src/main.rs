use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zimix::effects::effect_table;
use zimix::io::{read_csv, render_fit_table, render_simulation_table, to_json, ColumnMap, FitReport, Versioned};
use zimix::select::select;
use zimix::simulate::{builtin_design, replicate_study, SimDesign};
use zimix::{Error, FamilyChoice, KRange, MediatorFamily, ModelConfig};

#[derive(Parser)]
#[command(name = "zimix", version, about = "Causal mediation analysis with zero-inflated mixture mediators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select and fit a mediator model on a CSV file and report effects.
    Fit(FitArgs),
    /// Run a replication study on a built-in or JSON-defined design.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Auto,
    Zilonm,
    Zipm,
    Zinbm,
}

impl From<FamilyArg> for FamilyChoice {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Auto => FamilyChoice::Auto,
            FamilyArg::Zilonm => FamilyChoice::Fixed(MediatorFamily::Zilonm),
            FamilyArg::Zipm => FamilyChoice::Fixed(MediatorFamily::Zipm),
            FamilyArg::Zinbm => FamilyChoice::Fixed(MediatorFamily::Zinbm),
        }
    }
}

/// Model options shared by `fit` and `simulate`.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "auto")]
    family: FamilyArg,
    /// Mixture orders to compare, as MIN:MAX.
    #[arg(long = "k-range", default_value = "1:3", value_parser = parse_k_range)]
    k_range: KRange,
    /// Number of EM starts per candidate model.
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    y: String,
    #[arg(long)]
    m: String,
    #[arg(long)]
    x: String,
    /// Confounder columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    z: Vec<String>,
    /// Upper bound of the false-zero mechanism.
    #[arg(long = "L", default_value_t = 20.0)]
    bound_l: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x1: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    x2: f64,
    /// Confounder values for the effects: `means` or a comma-separated list.
    #[arg(long = "z-ref", default_value = "means", allow_hyphen_values = true)]
    z_ref: String,
    #[arg(long)]
    no_xb_interaction: bool,
    #[arg(long)]
    no_xm_interaction: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in design name (e.g. zilonm30) or a JSON design file.
    #[arg(long)]
    design: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

fn parse_k_range(s: &str) -> Result<KRange, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected MIN:MAX, got '{s}'"))?;
    let min = a.trim().parse().map_err(|_| format!("bad lower bound '{a}'"))?;
    let max = b.trim().parse().map_err(|_| format!("bad upper bound '{b}'"))?;
    Ok(KRange::new(min, max))
}

/// A failure with its exit code: 2 for data or usage problems, 3 when the
/// model could not be fitted.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidData(_)
            | Error::InvalidConfig(_)
            | Error::Support { .. }
            | Error::UnknownDesign(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn base_config(m: &ModelArgs) -> ModelConfig {
    ModelConfig {
        family: m.family.into(),
        k_range: m.k_range,
        n_starts: m.starts,
        seed: m.seed,
        ..ModelConfig::default()
    }
}

fn run_fit(args: &FitArgs) -> Result<(), Failure> {
    let config = ModelConfig {
        bound_l: args.bound_l,
        include_xb_interaction: !args.no_xb_interaction,
        include_xm_interaction: !args.no_xm_interaction,
        ..base_config(&args.model)
    };
    config.validate()?;
    let columns = ColumnMap {
        y: args.y.clone(),
        m: args.m.clone(),
        x: args.x.clone(),
        z: args.z.clone(),
    };
    let data = read_csv(&args.data, &columns)?;
    let z_ref = match args.z_ref.trim() {
        "means" => None,
        list => {
            let values = list
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("--z-ref: cannot parse '{list}'")))?;
            if values.len() != columns.z.len() {
                return Err(usage(format!(
                    "--z-ref has {} values for {} confounders",
                    values.len(),
                    columns.z.len()
                )));
            }
            Some(values)
        }
    };
    let selection = select(&data, &config)?;
    let effects = effect_table(&selection.best, args.x1, args.x2, z_ref.as_deref())?;
    let report = Versioned::new(FitReport::new(&data, &config, selection.table.clone(), &selection.best, effects));
    let text = match args.model.format {
        Format::Json => to_json(&report)?,
        Format::Table => render_fit_table(&report),
    };
    emit(&text, args.model.out.as_deref())
}

fn load_design(spec: &str) -> Result<SimDesign, Failure> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read design {spec}: {e}")))?;
        Ok(zimix::io::from_json(&text)?)
    } else {
        Ok(builtin_design(spec)?)
    }
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut design = load_design(&args.design)?;
    if let Some(n) = args.n {
        design.n = n;
    }
    if let Some(reps) = args.reps {
        design.n_reps = reps;
    }
    design.seed = args.model.seed;
    design.validate()?;
    let config = ModelConfig {
        bound_l: design.bound_l,
        ..base_config(&args.model)
    };
    let report = Versioned::new(replicate_study(&design, &config)?);
    let text = match args.model.format {
        Format::Json => to_json(&report)?,
        Format::Table => render_simulation_table(&report),
    };
    emit(&text, args.model.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("zimix: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
