use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scglr_core::{
    compare, cross_validate, fit_mixed_scglr, fit_scglr, gen_grouped_data, load_csv, load_features, write_comparison,
    write_dataset, Bundle, CompareConfig, CriterionParams, CvConfig, CvGrid, CvResult, Dataset, Error, Family,
    FamilySpec, FitSettings, FittedModel, Locality, Metric, MixedSettings, ModelDocument, OptimizerSettings,
    PredictionMode, Schema, SimConfig, TraceRow,
};

const EXIT_INPUT: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "scglr",
    version,
    about = "Supervised component regression for grouped multivariate GLMMs"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a grouped dataset with a known bundle structure.
    Simulate(SimulateArgs),
    /// Fit a component model and write it as JSON.
    Fit(FitArgs),
    /// Predict means for new rows with a saved model.
    Predict(PredictArgs),
    /// Grouped cross-validation over (H, s, l).
    Cv(CvArgs),
    /// Tuned component regression against tuned mixed ridge on a test set.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    q: usize,
    /// Additional covariates besides the intercept.
    #[arg(long, default_value_t = 0)]
    r: usize,
    #[arg(long, default_value = "poisson")]
    family: Family,
    /// Random-intercept variance of every response.
    #[arg(long, default_value_t = 0.5)]
    sigma2: f64,
    /// Coefficient of the true component.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Size of the predictive bundle.
    #[arg(long, default_value_t = 10)]
    bundle: usize,
    /// Within-bundle correlation.
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for data.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SchemaArgs {
    /// Input CSV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Response columns; a trailing `*` matches a prefix.
    #[arg(long, value_delimiter = ',', default_value = "y*")]
    response: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "x*")]
    explanatory: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    additional: Vec<String>,
    #[arg(long, default_value = "group")]
    group: String,
    /// Observation weight column (default uniform).
    #[arg(long)]
    weights: Option<String>,
    /// One family for all responses or one per response.
    #[arg(long, value_delimiter = ',', default_value = "poisson")]
    family: Vec<Family>,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    no_standardize: bool,
}

impl SchemaArgs {
    fn schema(&self) -> Schema {
        let mut schema = Schema::new(&self.response, &self.explanatory, &self.additional, &self.group);
        schema.weights = self.weights.clone();
        schema.intercept = !self.no_intercept;
        schema
    }

    fn load(&self, path: &Path) -> Result<Dataset, Error> {
        load_csv(path, &self.schema())
    }

    fn family(&self, q: usize) -> Result<FamilySpec, Error> {
        match self.family.as_slice() {
            [f] => Ok(FamilySpec::uniform(*f, q)),
            fs if fs.len() == q => Ok(FamilySpec::new(fs.to_vec())),
            fs => Err(Error::Config(format!("{} families given for {q} responses", fs.len()))),
        }
    }
}

#[derive(Args)]
struct SettingsArgs {
    /// Random group intercept.
    #[arg(long)]
    mixed: bool,
    #[arg(long, default_value = "identity")]
    metric: Metric,
    /// Outer iteration cap (default 100 fixed, 200 mixed).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: Option<u64>,
    /// Outer convergence threshold.
    #[arg(long, default_value_t = 1e-6, value_parser = positive)]
    tol: f64,
    /// Random restarts of the loading optimizer.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SettingsArgs {
    fn mixed_settings(&self) -> MixedSettings {
        let defaults = MixedSettings::default();
        let max_outer = match (self.max_iter, self.mixed) {
            (Some(m), _) => m as usize,
            (None, true) => defaults.fit.max_outer,
            (None, false) => FitSettings::default().max_outer,
        };
        MixedSettings {
            fit: FitSettings {
                optimizer: OptimizerSettings {
                    n_restarts: self.restarts,
                    seed: self.seed,
                    ..OptimizerSettings::default()
                },
                max_outer,
                outer_tol: self.tol,
            },
            ..defaults
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: SchemaArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Number of components.
    #[arg(long = "H", default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    h: u64,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    s: f64,
    #[arg(long, default_value = "1", value_parser = locality)]
    l: Locality,
    /// Model JSON; the trace goes to <stem>.trace.csv beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Add the predicted group effects (mixed models only).
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long = "H", value_delimiter = ',', default_value = "1,2,3", value_parser = clap::value_parser!(u64).range(1..))]
    h: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5", value_parser = unit_interval)]
    s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = locality)]
    l: Vec<Locality>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

impl GridArgs {
    fn grid(&self) -> CvGrid {
        CvGrid {
            h: self.h.iter().map(|&h| h as usize).collect(),
            s: self.s.clone(),
            l: self.l.clone(),
        }
    }

    fn config(&self, data: &SchemaArgs, settings: &SettingsArgs) -> CvConfig {
        CvConfig {
            folds: self.folds,
            seed: settings.seed,
            mixed: settings.mixed,
            standardize: !data.no_standardize,
            metric: settings.metric,
            settings: settings.mixed_settings(),
        }
    }
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: SchemaArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Optional CSV copy of the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: SchemaArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Held-out CSV with the same columns as --in.
    #[arg(long)]
    test: PathBuf,
    /// Ridge penalties (default: 25 log-spaced values in [1e-4, 1e4]).
    #[arg(long, value_delimiter = ',', value_parser = nonnegative)]
    lambda_grid: Vec<f64>,
    /// Score with the predicted group effects; test groups must appear in --in.
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    out: PathBuf,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a nonnegative number")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("`{s}` is not in [0, 1]")),
    }
}

fn locality(s: &str) -> Result<Locality, String> {
    s.parse::<Locality>().map_err(|e| e.to_string())
}

/// Failure of a subcommand, mapped to an exit code.
enum Failure {
    Input(Error),
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = Result<(), Failure>;

fn mode(conditional: bool) -> PredictionMode {
    if conditional {
        PredictionMode::Conditional
    } else {
        PredictionMode::Marginal
    }
}

fn create_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn run_simulate(args: &SimulateArgs) -> Outcome {
    let mut cfg = SimConfig::new(args.n, args.groups, args.p, args.q, args.family);
    cfg.r_additional = args.r;
    cfg.bundles = vec![Bundle {
        size: args.bundle,
        rho: args.rho,
        weight: 1.0,
    }];
    cfg.sigma2 = vec![args.sigma2; args.q];
    cfg.gamma = vec![args.gamma; args.q];
    let intercept = cfg.delta[0][0];
    cfg.delta = vec![
        std::iter::once(intercept)
            .chain(std::iter::repeat_n(0.25, args.r))
            .collect();
        args.q
    ];
    cfg.seed = args.seed;
    let (ds, truth) = gen_grouped_data(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let data_path = args.out.join("data.csv");
    write_dataset(&ds, &data_path)?;
    let truth_path = args.out.join("truth.json");
    let mut text = serde_json::to_string_pretty(&truth).map_err(Error::from)?;
    text.push('\n');
    fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    println!(
        "simulated n={} groups={} p={} q={} family={} seed={} -> {}, {}",
        args.n,
        args.groups,
        args.p,
        args.q,
        args.family,
        args.seed,
        data_path.display(),
        truth_path.display()
    );
    Ok(())
}

fn trace_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.trace.csv"))
}

fn write_trace(rows: &[TraceRow], responses: &[String], path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "component",
        "iteration",
        "criterion",
        "delta_u",
        "delta_coef",
        "delta_sigma2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(responses.iter().map(|r| format!("sigma2_{r}")));
    w.write_record(&header)?;
    for row in rows {
        let mut record = vec![
            row.component.to_string(),
            row.iteration.to_string(),
            row.criterion.to_string(),
            row.delta_u.to_string(),
            row.delta_coef.to_string(),
            row.delta_sigma2.to_string(),
        ];
        record.extend((0..responses.len()).map(|k| row.sigma2.get(k).map_or(String::new(), f64::to_string)));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_fit(args: &FitArgs) -> Outcome {
    let raw = args.data.load(&args.data.input)?;
    let family = args.data.family(raw.q())?;
    let ds = if args.data.no_standardize {
        raw
    } else {
        raw.standardize()?
    };
    let params = CriterionParams {
        s: args.s,
        l: args.l,
        metric: args.settings.metric,
    };
    let settings = args.settings.mixed_settings();
    let h = args.h as usize;
    let model = if args.settings.mixed {
        FittedModel::Mixed(fit_mixed_scglr(&ds, &family, h, &params, &settings)?)
    } else {
        FittedModel::Fixed(fit_scglr(&ds, &family, h, &params, &settings.fit)?)
    };
    let base = model.base();
    create_parent(&args.out)?;
    ModelDocument::from_model(&model).save(&args.out)?;
    let trace = trace_path(&args.out);
    write_trace(&base.trace, &base.schema.response, &trace)?;
    println!(
        "fitted {} model: H={} p={} q={} -> {}, {}",
        if args.settings.mixed { "mixed" } else { "fixed" },
        h,
        ds.p(),
        ds.q(),
        args.out.display(),
        trace.display()
    );
    if let FittedModel::Mixed(m) = &model {
        for (name, s2) in base.schema.response.iter().zip(&m.sigma2) {
            println!("sigma2[{name}] = {s2}");
        }
    }
    match base.failed_component {
        Some(c) if !base.converged => Err(Failure::NotConverged(format!(
            "component {c} hit the iteration cap; model written"
        ))),
        _ if !base.converged => Err(Failure::NotConverged("fit did not converge; model written".into())),
        _ => Ok(()),
    }
}

fn run_predict(args: &PredictArgs) -> Outcome {
    let model = ModelDocument::load(&args.model)?.into_model()?;
    let base = model.base();
    let features = load_features(&args.input, &base.schema)?;
    let (x, t) = features.design(&base.schema, &base.standardization)?;
    let eta = match (&model, args.conditional) {
        (FittedModel::Mixed(m), _) => m.predict_eta(&x, &t, &features.labels, mode(args.conditional))?,
        (FittedModel::Fixed(_), true) => {
            return Err(Error::Config("--conditional needs a mixed model".into()).into());
        }
        (FittedModel::Fixed(m), false) => m.predict_eta(&x, &t)?,
    };
    create_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out).map_err(Error::from)?;
    let mut header = vec!["row".to_string(), base.schema.group.clone()];
    header.extend(base.schema.response.iter().map(|r| format!("mu_{r}")));
    w.write_record(&header).map_err(Error::from)?;
    for i in 0..eta.nrows() {
        let mut record = vec![i.to_string(), features.labels[i].clone()];
        record.extend((0..eta.ncols()).map(|k| base.family.get(k).mean(eta[(i, k)]).to_string()));
        w.write_record(&record).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    println!("predicted {} rows -> {}", eta.nrows(), args.out.display());
    Ok(())
}

fn write_cv_table(result: &CvResult, path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "H",
        "s",
        "l",
        "mean_deviance",
        "std_error",
        "nonconverged",
        "failed",
        "selected",
    ])?;
    for (i, row) in result.rows.iter().enumerate() {
        w.write_record([
            row.point.h.to_string(),
            row.point.s.to_string(),
            row.point.l.to_string(),
            row.mean_deviance.to_string(),
            row.std_error.to_string(),
            row.nonconverged.to_string(),
            row.failed.to_string(),
            u8::from(i == result.selected_index).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_cv(args: &CvArgs) -> Outcome {
    let raw = args.data.load(&args.data.input)?;
    let family = args.data.family(raw.q())?;
    let result = cross_validate(
        &raw,
        &family,
        &args.grid.grid(),
        &args.grid.config(&args.data, &args.settings),
    )?;
    println!(
        "{:>3} {:>6} {:>5} {:>14} {:>12} {:>6} {:>6}",
        "H", "s", "l", "mean_deviance", "std_error", "noconv", "failed"
    );
    for row in &result.rows {
        println!(
            "{:>3} {:>6} {:>5} {:>14.6} {:>12.6} {:>6} {:>6}",
            row.point.h, row.point.s, row.point.l, row.mean_deviance, row.std_error, row.nonconverged, row.failed
        );
    }
    println!("selected {}", result.selected);
    if let Some(out) = &args.out {
        create_parent(out)?;
        write_cv_table(&result, out)?;
    }
    Ok(())
}

fn run_compare(args: &CompareArgs) -> Outcome {
    let train = args.data.load(&args.data.input)?;
    let test = args.data.load(&args.test)?;
    let family = args.data.family(train.q())?;
    let lambdas = if args.lambda_grid.is_empty() {
        scglr_core::default_lambda_grid()
    } else {
        args.lambda_grid.clone()
    };
    let config = CompareConfig {
        cv: args.grid.config(&args.data, &args.settings),
        grid: args.grid.grid(),
        lambdas,
        mode: mode(args.conditional),
    };
    let rows = compare(&train, &test, &family, &config)?;
    create_parent(&args.out)?;
    write_comparison(&rows, &args.out)?;
    for row in &rows {
        println!(
            "{:<10} {:<8} {:<22} deviance={:.6} rmse={:.6}",
            row.method, row.response, row.tuning, row.holdout_deviance, row.holdout_rmse
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads as usize)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    let outcome = match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Cv(a) => run_cv(a),
        Command::Compare(a) => run_compare(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
    }
}
