//! `stepdiff`: simulate, ingest, split, train, forecast, evaluate and ablate.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stepdiff::ablate::{run_ablation, AblationConfig};
use stepdiff::diffusion::write_loss_curve;
use stepdiff::eval::{evaluate_fields, TruthSource};
use stepdiff::grid::{discretize, load_field, persist_field, read_records, split_5_1_1, write_records};
use stepdiff::pipeline::{fit, Model};
use stepdiff::synth::field_to_records;

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "stepdiff", version, about = "Physics-regularized diffusion forecasting of gridded pollution fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground truth and its fleet observations.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Discretise `device_id,timestamp,lon,lat,value` records onto the grid.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Input CSV.
        #[arg(long = "in", value_name = "PATH")]
        input: Option<PathBuf>,
        /// Output field.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Split a field 5:1:1 along time into `<stem>.train/.val/.test.stpf`.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: Option<PathBuf>,
        /// Output directory; defaults to the input's directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Pretrain the DeepONet and train the denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training field.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// PDE loss weight.
        #[arg(long, value_name = "F")]
        omega: Option<f64>,
        /// Residual blocks in the denoiser.
        #[arg(long, value_name = "N")]
        layers: Option<usize>,
        /// Integration mode: diff or 1..10.
        #[arg(long, value_name = "STR")]
        mode: Option<String>,
        /// Also train on unobserved target entries.
        #[arg(long)]
        unmasked_loss: bool,
        /// Worker threads.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Forecast every slice after the first history window.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Field to forecast from.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Draws averaged per forecast.
        #[arg(long, value_name = "K")]
        samples: Option<usize>,
        /// Worker threads.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Score a forecast against a truth field.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        pred: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        /// Ground truth entries: mobile or station.
        #[arg(long, value_name = "SOURCE")]
        truth_source: Option<String>,
        /// Pollution-day threshold.
        #[arg(long, value_name = "F")]
        threshold: Option<f64>,
        /// Report prefix; writes `.json`, `.txt` and `.csv`.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Sweep omega, residual blocks and integration modes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        train: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        test: Option<PathBuf>,
        /// Table prefix; writes `.txt` and `.csv`.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Draws averaged per forecast.
        #[arg(long, value_name = "K")]
        samples: Option<usize>,
        /// Train on unobserved target entries too.
        #[arg(long)]
        unmasked_loss: bool,
        /// Worker threads.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<stepdiff::Error> for Failure {
    fn from(e: stepdiff::Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Res<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &common.config {
        c.merge_file(p)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        c.set("seed", &s.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    Ok(c)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn load(path: &Path) -> Res<stepdiff::grid::MaskedField> {
    load_field(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_config(cfg: &RunConfig, path: &Path) -> Res<()> {
    fs::write(path, cfg.to_text())?;
    Ok(())
}

fn simulate(common: &Common, out: &Option<PathBuf>) -> Res<()> {
    let mut cfg = resolve(common, &[("path.out", path_flag(out))])?;
    let sc = cfg.scenario()?;
    let dir = match cfg.raw("path.out") {
        "" => PathBuf::from("."),
        p => PathBuf::from(p),
    };
    fs::create_dir_all(&dir)?;
    let clock = Instant::now();
    let data = sc.generate()?;
    persist_field(&data.truth, dir.join("truth.stpf"))?;
    persist_field(&data.observed, dir.join("observed.stpf"))?;
    let t0: i64 = cfg.get("ingest.t0")?;
    write_records(dir.join("observed.csv"), &field_to_records(&data.observed, t0))?;
    let provenance = json!({
        "scenario": sc.name,
        "synth": sc.synth,
        "fleet": sc.fleet,
        "observed_density": data.observed.density(),
        "files": ["truth.stpf", "observed.stpf", "observed.csv"],
    });
    fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&provenance).map_err(stepdiff::Error::from)? + "\n")?;
    write_config(&cfg, &dir.join("simulate.cfg"))?;
    println!(
        "simulated {} slices of {}x{} cells, observed density {:.4}, in {:.2} s -> {}",
        data.truth.slices,
        data.truth.grid.x,
        data.truth.grid.y,
        data.observed.density(),
        clock.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn ingest(common: &Common, input: &Option<PathBuf>, out: &Option<PathBuf>) -> Res<()> {
    let mut cfg = resolve(common, &[("path.in", path_flag(input)), ("path.out", path_flag(out))])?;
    let grid = cfg.grid()?;
    let t0: i64 = cfg.get("ingest.t0")?;
    let input = cfg.path("path.in")?.to_path_buf();
    let out = cfg.path("path.out")?.to_path_buf();
    let file = fs::File::open(&input).map_err(|e| Failure::Data(format!("{}: {e}", input.display())))?;
    let records = read_records(file)?;
    let slices = match cfg.get_auto::<usize>("ingest.slices")? {
        Some(n) => n,
        None => {
            let last = records.iter().map(|r| r.timestamp).max().unwrap_or(t0);
            (((last - t0) as f64 / grid.slice_length).floor() as usize) + 1
        }
    };
    cfg.set("ingest.slices", &slices.to_string())?;
    let field = discretize(&records, &grid, t0, slices)?;
    persist_field(&field, &out)?;
    write_config(&cfg, &with_suffix(&out, ".cfg"))?;
    println!("ingested {} records into {} slices, density {:.4} -> {}", records.len(), slices, field.density(), out.display());
    Ok(())
}

fn split(common: &Common, input: &Option<PathBuf>, out: &Option<PathBuf>) -> Res<()> {
    let cfg = resolve(common, &[("path.in", path_flag(input)), ("path.out", path_flag(out))])?;
    let input = cfg.path("path.in")?.to_path_buf();
    let field = load(&input)?;
    let (tr, va, te) = split_5_1_1(&field)?;
    let dir = match cfg.raw("path.out") {
        "" => input.parent().map(Path::to_path_buf).unwrap_or_default(),
        p => PathBuf::from(p),
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
    for (part, f) in [("train", &tr), ("val", &va), ("test", &te)] {
        let p = dir.join(format!("{stem}.{part}.stpf"));
        persist_field(f, &p)?;
        println!("{part}: {} slices -> {}", f.slices, p.display());
    }
    write_config(&cfg, &dir.join(format!("{stem}.split.cfg")))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    common: &Common,
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    omega: Option<f64>,
    layers: Option<usize>,
    mode: &Option<String>,
    unmasked: bool,
    jobs: Option<usize>,
) -> Res<()> {
    let mut cfg = resolve(
        common,
        &[
            ("path.data", path_flag(data)),
            ("path.out", path_flag(out)),
            ("train.omega", omega.map(|v| v.to_string())),
            ("denoiser.layers", layers.map(|v| v.to_string())),
            ("train.mode", mode.clone()),
            ("train.unmasked_loss", unmasked.then(|| "true".to_string())),
            ("jobs", jobs.map(|v| v.to_string())),
        ],
    )?;
    let pc = cfg.pipeline()?;
    let data = cfg.path("path.data")?.to_path_buf();
    let out = cfg.path("path.out")?.to_path_buf();
    let field = load(&data)?;
    let clock = Instant::now();
    let fitted = fit(&field, &pc)?;
    let total = clock.elapsed().as_secs_f64();
    fitted.model.save(&out)?;
    write_loss_curve(with_suffix(&out, ".loss.csv"), &fitted.curve)?;
    write_config(&cfg, &with_suffix(&out, ".cfg"))?;
    let t = &fitted.timings;
    if let Some(last) = fitted.curve.last() {
        println!("final loss {:.4} (l_eps {:.4}, l_pde {:.4})", last.loss, last.l_eps, last.l_pde);
    }
    println!(
        "training seconds: pde_fit {:.2}, deeponet {:.2}, diffusion {:.2}, total {:.2}",
        t.pde_fit, t.deeponet, t.diffusion, total
    );
    println!("model -> {}", out.display());
    Ok(())
}

fn forecast(
    common: &Common,
    model: &Option<PathBuf>,
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    samples: Option<usize>,
    jobs: Option<usize>,
) -> Res<()> {
    let cfg = resolve(
        common,
        &[
            ("path.model", path_flag(model)),
            ("path.data", path_flag(data)),
            ("path.out", path_flag(out)),
            ("forecast.samples", samples.map(|v| v.to_string())),
            ("jobs", jobs.map(|v| v.to_string())),
        ],
    )?;
    let samples: usize = cfg.get("forecast.samples")?;
    let seed: u64 = cfg.get("seed")?;
    let jobs: usize = cfg.get("jobs")?;
    let model_path = cfg.path("path.model")?;
    let model = Model::load(model_path).map_err(|e| Failure::Data(format!("{}: {e}", model_path.display())))?;
    let field = load(cfg.path("path.data")?)?;
    let out = cfg.path("path.out")?.to_path_buf();
    let clock = Instant::now();
    let pred = model.forecast_field(&field, samples, seed, jobs)?;
    let secs = clock.elapsed().as_secs_f64();
    persist_field(&pred, &out)?;
    write_config(&cfg, &with_suffix(&out, ".cfg"))?;
    let forecast_slices = (0..pred.slices).filter(|&l| pred.slice_mask(l).iter().any(|&m| m)).count();
    println!("inference seconds: {secs:.2} ({forecast_slices} slices forecast)");
    println!("forecast -> {}", out.display());
    Ok(())
}

fn evaluate(
    common: &Common,
    pred: &Option<PathBuf>,
    truth: &Option<PathBuf>,
    source: &Option<String>,
    threshold: Option<f64>,
    out: &Option<PathBuf>,
) -> Res<()> {
    let cfg = resolve(
        common,
        &[
            ("path.pred", path_flag(pred)),
            ("path.truth", path_flag(truth)),
            ("eval.truth_source", source.clone()),
            ("eval.threshold", threshold.map(|v| v.to_string())),
            ("path.out", path_flag(out)),
        ],
    )?;
    let source: TruthSource = cfg.get("eval.truth_source")?;
    let threshold: f64 = cfg.get("eval.threshold")?;
    let start_hour: f64 = cfg.get("eval.start_hour")?;
    let pred = load(cfg.path("path.pred")?)?;
    let truth = load(cfg.path("path.truth")?)?;
    let report = evaluate_fields(&pred, &truth, source, threshold, start_hour)?;
    let table = report.to_table();
    print!("{table}");
    if let Ok(prefix) = cfg.path("path.out") {
        let prefix = prefix.to_path_buf();
        fs::write(with_suffix(&prefix, ".json"), report.to_json()?)?;
        fs::write(with_suffix(&prefix, ".txt"), &table)?;
        fs::write(with_suffix(&prefix, ".csv"), report.to_csv())?;
        write_config(&cfg, &with_suffix(&prefix, ".cfg"))?;
    }
    Ok(())
}

fn ablate(
    common: &Common,
    train: &Option<PathBuf>,
    test: &Option<PathBuf>,
    out: &Option<PathBuf>,
    samples: Option<usize>,
    unmasked: bool,
    jobs: Option<usize>,
) -> Res<()> {
    let mut cfg = resolve(
        common,
        &[
            ("path.train", path_flag(train)),
            ("path.test", path_flag(test)),
            ("path.out", path_flag(out)),
            ("forecast.samples", samples.map(|v| v.to_string())),
            ("train.unmasked_loss", unmasked.then(|| "true".to_string())),
            ("jobs", jobs.map(|v| v.to_string())),
        ],
    )?;
    let acfg = AblationConfig {
        base: cfg.pipeline()?,
        omegas: cfg.list("ablate.omegas")?,
        layers: cfg.list("ablate.layers")?,
        modes: cfg.list("ablate.modes")?,
        iterations: cfg.get("ablate.iterations")?,
        eval_windows: cfg.get("ablate.eval_windows")?,
        samples: cfg.get("forecast.samples")?,
        jobs: cfg.get("jobs")?,
    };
    let train = load(cfg.path("path.train")?)?;
    let test = load(cfg.path("path.test")?)?;
    let clock = Instant::now();
    let table = run_ablation(&train, &test, &acfg)?;
    print!("{}", table.to_text(true));
    println!("ablation seconds: {:.2}", clock.elapsed().as_secs_f64());
    if let Ok(prefix) = cfg.path("path.out") {
        let prefix = prefix.to_path_buf();
        fs::write(with_suffix(&prefix, ".txt"), table.to_text(false))?;
        fs::write(with_suffix(&prefix, ".csv"), table.to_csv(false))?;
        write_config(&cfg, &with_suffix(&prefix, ".cfg"))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Res<()> {
    match &cli.command {
        Command::Simulate { common, out } => simulate(common, out),
        Command::Ingest { common, input, out } => ingest(common, input, out),
        Command::Split { common, input, out } => split(common, input, out),
        Command::Train { common, data, out, omega, layers, mode, unmasked_loss, jobs } => {
            train_cmd(common, data, out, *omega, *layers, mode, *unmasked_loss, *jobs)
        }
        Command::Forecast { common, model, data, out, samples, jobs } => {
            forecast(common, model, data, out, *samples, *jobs)
        }
        Command::Evaluate { common, pred, truth, truth_source, threshold, out } => {
            evaluate(common, pred, truth, truth_source, *threshold, out)
        }
        Command::Ablate { common, train, test, out, samples, unmasked_loss, jobs } => {
            ablate(common, train, test, out, *samples, *unmasked_loss, *jobs)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEPDIFF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
