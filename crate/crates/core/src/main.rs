use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use prioritized_dtr::data::{load_csv, split_even, standardize_outcomes, write_csv};
use prioritized_dtr::inference::{aipw_value, confidence_ellipsoid, universal_lambda_set, CovarianceKind};
use prioritized_dtr::irl::{estimate_lambda_with_grid, sphere_grid, DEFAULT_SPHERE_GRID};
use prioritized_dtr::methods::{fit_methods, parse_methods, FitSettings, Method};
use prioritized_dtr::policy::{selection_trace, write_trace, Dissimilarity, DissimilaritySpec};
use prioritized_dtr::qreg::{backward_induce, Downstream, Engine, FeatureBasis, TreeConfig};
use prioritized_dtr::regime::Regime;
use prioritized_dtr::report::{read_json, render_text, round4, write_json, EvaluationReport, RegimeDocument};
use prioritized_dtr::serde_ext::parse_list;
use prioritized_dtr::sim::mc::{run_mc, write_rows, McConfig};
use prioritized_dtr::sim::{simulate, Design, GenerativeModel, OutcomeReading};
use prioritized_dtr::win_ratio::{cyclic_triples, win_ratio, WinRatioSpec};
use prioritized_dtr::{Error, Result};

#[derive(Parser)]
#[command(name = "pdtr", version, about = "Treatment regimes for prioritized outcomes")]
struct Cli {
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a uniformly randomized two-stage trial.
    Simulate(SimulateArgs),
    /// Fit a regime and write its document.
    Fit(FitArgs),
    /// Estimate a fitted regime's value on held-out data.
    Evaluate(EvaluateArgs),
    /// Monte Carlo comparison of methods on a design.
    Mc(McArgs),
    /// Win ratio between regimes on a design.
    Winratio(WinRatioArgs),
    /// Composite weights under which a regime looks best.
    Irl(IrlArgs),
    /// Plain-text summary of a regime document and its evaluation.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    design: Option<Design>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `normalized` or `literal` coefficients for S1/S2.
    #[arg(long)]
    reading: Option<OutcomeReading>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// prioritized, qlearn_y<l>, composite_average, tuned_composite or fixed:<codes>.
    #[arg(long)]
    method: Option<String>,
    /// Thresholds, comma separated; `inf` is allowed.
    #[arg(long)]
    deltas: Option<String>,
    /// Dissimilarity per outcome: absolute or log_ratio, comma separated.
    #[arg(long)]
    kinds: Option<String>,
    #[arg(long)]
    n_lambda: Option<usize>,
    /// linear or trees.
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Split the data evenly and fit on the first half.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Where to write the held-out half when splitting.
    #[arg(long, requires = "split_seed")]
    eval_out: Option<PathBuf>,
    /// Per-subject selection trace (prioritized only).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    regime: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// influence or ipw.
    #[arg(long)]
    covariance: Option<CovarianceKind>,
    /// Sphere directions for the universal set; 0 skips it.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-outcome table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    design: Option<Design>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Comma-separated methods.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_lambda: Option<usize>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    covariance: Option<CovarianceKind>,
    #[arg(long)]
    reading: Option<OutcomeReading>,
    #[arg(long)]
    out: PathBuf,
    /// Per-replication records as JSON.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct WinRatioArgs {
    #[arg(long)]
    design: Option<Design>,
    /// Regime document path or `fixed:<codes>`; give two or more.
    #[arg(long = "regime", required = true)]
    regimes: Vec<String>,
    /// Margins, comma separated; `inf` is allowed.
    #[arg(long)]
    margins: Option<String>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reading: Option<OutcomeReading>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IrlArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Regime document path or `fixed:<codes>`.
    #[arg(long)]
    regime: String,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sphere directions searched by non-linear engines.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    regime: PathBuf,
    #[arg(long)]
    evaluation: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings a config file may provide. Keys mirror the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    design: Option<Design>,
    data: Option<PathBuf>,
    reading: Option<OutcomeReading>,
    #[serde(default, with = "prioritized_dtr::serde_ext::option_vec")]
    deltas: Option<Vec<f64>>,
    kinds: Option<Vec<Dissimilarity>>,
    method: Option<String>,
    methods: Option<Vec<String>>,
    n_lambda: Option<usize>,
    engine: Option<String>,
    alpha: Option<f64>,
    seed: Option<u64>,
    split_seed: Option<u64>,
    n: Option<usize>,
    reps: Option<usize>,
    test_size: Option<usize>,
    covariance: Option<CovarianceKind>,
    #[serde(default, with = "prioritized_dtr::serde_ext::option_vec")]
    margins: Option<Vec<f64>>,
    pairs: Option<usize>,
    grid: Option<usize>,
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::invalid(format!("missing --{flag} (flag or config file)")))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn parse_engine(name: &str, seed: u64) -> Result<Engine> {
    match name {
        "linear" => Ok(Engine::Linear),
        "trees" => Ok(Engine::Trees(TreeConfig {
            seed,
            ..TreeConfig::default()
        })),
        other => Err(Error::invalid(format!("unknown engine `{other}` (expected linear or trees)"))),
    }
}

fn parse_floats(text: &str, flag: &str) -> Result<Vec<f64>> {
    parse_list(text).map_err(|e| Error::invalid(format!("--{flag}: {e}")))
}

fn parse_kinds(text: &str) -> Result<Vec<Dissimilarity>> {
    text.split(',')
        .map(|s| s.trim().parse::<Dissimilarity>().map_err(Error::invalid))
        .collect()
}

fn write_sidecar(out: &Path, config: &Value) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    write_json(config, PathBuf::from(name))
}

/// A regime named on the command line: a document path or `fixed:<codes>`.
fn load_regime(spec: &str) -> Result<(Regime, Option<RegimeDocument>, Value)> {
    if spec.starts_with("fixed") {
        let method: Method = spec.parse()?;
        let Method::Fixed { actions } = &method else {
            return Err(Error::invalid(format!("`{spec}` is not a fixed regime")));
        };
        return Ok((Regime::fixed(method.name(), actions), None, json!(method.name())));
    }
    let doc = RegimeDocument::load(spec)?;
    let id = json!({ "document": doc.content_hash });
    Ok((doc.regime.clone(), Some(doc), id))
}

fn cmd_simulate(a: SimulateArgs, cfg: &RunConfig) -> Result<()> {
    let design = required(a.design.or(cfg.design), "design")?;
    let n = required(a.n.or(cfg.n), "n")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(1);
    let reading = a.reading.or(cfg.reading).unwrap_or_default();
    let model = GenerativeModel::with_reading(design, reading);
    let data = simulate(&model, n, seed)?;
    write_csv(&data, &a.out)?;
    write_sidecar(
        &a.out,
        &json!({ "command": "simulate", "design": design, "n": n, "seed": seed, "reading": reading }),
    )?;
    log::info!("wrote {n} trajectories to {}", a.out.display());
    Ok(())
}

fn cmd_fit(a: FitArgs, cfg: &RunConfig) -> Result<()> {
    let data_path = required(a.data.or(cfg.data.clone()), "data")?;
    let data = load_csv(&data_path, None)?;
    let method: Method = a
        .method
        .or(cfg.method.clone())
        .unwrap_or_else(|| "prioritized".into())
        .parse()?;
    let seed = a.seed.or(cfg.seed).unwrap_or(1);
    let engine_name = a.engine.or(cfg.engine.clone()).unwrap_or_else(|| "linear".into());
    let engine = parse_engine(&engine_name, seed)?;
    let n_lambda = a.n_lambda.or(cfg.n_lambda).unwrap_or(1000);
    let p = data.p_y();
    let deltas = match a.deltas {
        Some(t) => Some(parse_floats(&t, "deltas")?),
        None => cfg.deltas.clone(),
    };
    let needs_deltas = matches!(method, Method::Prioritized | Method::TunedComposite);
    let deltas = match deltas {
        Some(d) => d,
        None if needs_deltas => return Err(Error::invalid("missing --deltas for a prioritized fit")),
        None => vec![f64::INFINITY; p],
    };
    if deltas.len() != p {
        return Err(Error::invalid(format!("{} deltas given for {p} outcomes", deltas.len())));
    }
    let kinds = match a.kinds {
        Some(t) => parse_kinds(&t)?,
        None => cfg.kinds.clone().unwrap_or_else(|| vec![Dissimilarity::AbsoluteDifference; p]),
    };
    let spec = DissimilaritySpec::new(kinds.clone(), deltas.clone())?;
    let split_seed = a.split_seed.or(cfg.split_seed);
    let fit = match split_seed {
        Some(s) => {
            let split = split_even(&data, s)?;
            if let Some(path) = &a.eval_out {
                write_csv(&split.second, path)?;
            }
            split.first
        }
        None => data,
    };
    let basis = FeatureBasis::default();
    let settings = FitSettings {
        basis: basis.clone(),
        engine: engine.clone(),
        n_lambda,
        simplex_seed: seed,
        spec,
    };
    let fitted = fit_methods(std::slice::from_ref(&method), &fit, &settings)?
        .pop()
        .expect("one method requested");
    if let (Some(path), Some(policy)) = (&a.trace, fitted.regime.policy.as_deref()) {
        let records = selection_trace(policy, &fit)?;
        write_trace(&records, std::fs::File::create(path)?)?;
    }
    let stack = backward_induce(&fit, &basis, &engine, Downstream::Regime(&fitted.regime))?;
    let lambda = match fitted.lambda {
        Some(l) => Some(l),
        None => {
            let std = standardize_outcomes(&fit);
            match estimate_lambda_with_grid(&std, &fitted.regime, &basis, &engine, DEFAULT_SPHERE_GRID) {
                Ok(l) => Some(l),
                Err(e) => {
                    log::warn!("composite weights not reported: {e}");
                    None
                }
            }
        }
    };
    let config = json!({
        "command": "fit",
        "data_sha256": file_hash(&data_path)?,
        "method": method.name(),
        "deltas": deltas.iter().map(|d| if d.is_finite() { json!(d) } else { json!("inf") }).collect::<Vec<_>>(),
        "kinds": kinds,
        "n_lambda": n_lambda,
        "engine": engine,
        "seed": seed,
        "split_seed": split_seed,
    });
    let doc = RegimeDocument::new(method.name(), &fit, fitted.regime, stack, lambda, config)?;
    doc.save(&a.out)?;
    log::info!("regime {} written to {}", doc.content_hash, a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let doc = RegimeDocument::load(&a.regime)?;
    let data_path = required(a.data.or(cfg.data.clone()), "data")?;
    let eval = load_csv(&data_path, None)?;
    doc.check_disjoint(&eval)?;
    let alpha = a.alpha.or(cfg.alpha).unwrap_or(0.05);
    let kind = a.covariance.or(cfg.covariance).unwrap_or_default();
    let grid_size = a.grid.or(cfg.grid).unwrap_or(1000);
    let est = aipw_value(&eval, &doc.regime, &doc.evaluation_stack, alpha, kind)?;
    let ellipsoid = confidence_ellipsoid(&est, alpha)?;
    let universal = match (&doc.lambda, grid_size) {
        (Some(l), g) if g > 0 => {
            let std = standardize_outcomes(&eval);
            let grid = sphere_grid(g, eval.p_y(), 0);
            let engine = doc.config.get("engine").cloned().map(serde_json::from_value).transpose()?;
            let engine: Engine = engine.unwrap_or_default();
            Some(universal_lambda_set(
                &std,
                &doc.regime,
                &FeatureBasis::default(),
                &engine,
                &l.lambda,
                &grid,
                alpha,
            )?)
        }
        _ => None,
    };
    let config = json!({
        "command": "evaluate",
        "regime_hash": doc.content_hash,
        "data_sha256": file_hash(&data_path)?,
        "alpha": alpha,
        "covariance": kind,
        "grid": grid_size,
    });
    let report = EvaluationReport::new(&doc, &eval, est, &ellipsoid, universal.as_ref(), config);
    write_json(&report, &a.out)?;
    if let Some(path) = &a.csv {
        report.write_csv(std::fs::File::create(path)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct McRecordsFile<'a> {
    config: &'a McConfig,
    design: Design,
    reading: OutcomeReading,
    run: &'a prioritized_dtr::sim::mc::McRun,
}

fn cmd_mc(a: McArgs, cfg: &RunConfig) -> Result<()> {
    let design = required(a.design.or(cfg.design), "design")?;
    let seed = a
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Error::invalid("mc requires an explicit --seed"))?;
    let mut config = McConfig::new(seed);
    config.reps = a.reps.or(cfg.reps).unwrap_or(config.reps);
    config.n = a.n.or(cfg.n).unwrap_or(config.n);
    config.test_size = a.test_size.or(cfg.test_size).unwrap_or(config.test_size);
    config.alpha = a.alpha.or(cfg.alpha).unwrap_or(config.alpha);
    config.n_lambda = a.n_lambda.or(cfg.n_lambda).unwrap_or(config.n_lambda);
    config.covariance = a.covariance.or(cfg.covariance).unwrap_or(config.covariance);
    if let Some(list) = a.methods.or(cfg.methods.as_ref().map(|m| m.join(","))) {
        config.methods = parse_methods(&list)?;
    }
    let engine_name = a.engine.or(cfg.engine.clone()).unwrap_or_else(|| "linear".into());
    config.engine = parse_engine(&engine_name, seed)?;
    let reading = a.reading.or(cfg.reading).unwrap_or_default();
    let model = GenerativeModel::with_reading(design, reading);
    let run = run_mc(&model, &config)?;
    write_rows(&run.summarize(), std::fs::File::create(&a.out)?)?;
    let echo = json!({
        "command": "mc",
        "design": design,
        "reading": reading,
        "config": config,
        "failed_replications": run.failed.len(),
    });
    write_sidecar(&a.out, &echo)?;
    if let Some(path) = &a.records {
        write_json(
            &McRecordsFile {
                config: &config,
                design,
                reading,
                run: &run,
            },
            path,
        )?;
    }
    Ok(())
}

fn cmd_winratio(a: WinRatioArgs, cfg: &RunConfig) -> Result<()> {
    let design = required(a.design.or(cfg.design), "design")?;
    let reading = a.reading.or(cfg.reading).unwrap_or_default();
    let model = GenerativeModel::with_reading(design, reading);
    let margins = match a.margins {
        Some(t) => parse_floats(&t, "margins")?,
        None => required(cfg.margins.clone(), "margins")?,
    };
    let pairs = a.pairs.or(cfg.pairs).unwrap_or(100_000);
    let seed = a.seed.or(cfg.seed).unwrap_or(1);
    if a.regimes.len() < 2 {
        return Err(Error::invalid("give at least two --regime values"));
    }
    let spec = WinRatioSpec::absolute(margins, pairs, seed)?;
    let loaded = a.regimes.iter().map(|r| load_regime(r)).collect::<Result<Vec<_>>>()?;
    let n = loaded.len();
    let mut wins = vec![vec![0.0; n]; n];
    let mut comparisons = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let wr = win_ratio(&model, &loaded[i].0, &loaded[j].0, &spec)?;
            wins[i][j] = wr.win_a;
            wins[j][i] = wr.win_b;
            comparisons.push(json!({ "a": loaded[i].2, "b": loaded[j].2, "result": wr }));
        }
    }
    let out = json!({
        "config": { "command": "winratio", "design": design, "reading": reading, "spec": spec },
        "comparisons": comparisons,
        "cyclic_triples": cyclic_triples(&wins),
    });
    write_json(&out, &a.out)
}

fn cmd_irl(a: IrlArgs, cfg: &RunConfig) -> Result<()> {
    let data_path = required(a.data.or(cfg.data.clone()), "data")?;
    let data = load_csv(&data_path, None)?;
    let (regime, _, id) = load_regime(&a.regime)?;
    let seed = a.seed.or(cfg.seed).unwrap_or(1);
    let engine_name = a.engine.or(cfg.engine.clone()).unwrap_or_else(|| "linear".into());
    let engine = parse_engine(&engine_name, seed)?;
    let grid = a.grid.or(cfg.grid).unwrap_or(DEFAULT_SPHERE_GRID);
    let std = standardize_outcomes(&data);
    let lambda = estimate_lambda_with_grid(&std, &regime, &FeatureBasis::default(), &engine, grid)?;
    let out = json!({
        "config": {
            "command": "irl",
            "data_sha256": file_hash(&data_path)?,
            "regime": id,
            "engine": engine,
            "grid": grid,
        },
        "outcome_names": data.outcome_names,
        "lambda_hat": round4(&lambda.lambda),
        "lambda": lambda,
    });
    write_json(&out, &a.out)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let doc = RegimeDocument::load(&a.regime)?;
    let report: Option<EvaluationReport> = a.evaluation.as_ref().map(read_json).transpose()?;
    let text = render_text(&doc, report.as_ref());
    match &a.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::invalid("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let cfg: RunConfig = match &cli.config {
        Some(path) => read_json(path).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if cfg.design.is_some() && cfg.data.is_some() {
        return Err(Error::invalid("config file names both a design and a data path"));
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Fit(a) => cmd_fit(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Mc(a) => cmd_mc(a, &cfg),
        Command::Winratio(a) => cmd_winratio(a, &cfg),
        Command::Irl(a) => cmd_irl(a, &cfg),
        Command::Report(a) => cmd_report(a),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
