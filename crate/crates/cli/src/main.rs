//! `rainseer` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rainseer::baselines::zr_baseline_field;
use rainseer::datagen::{load_dataset, simulate_storm, write_dataset, Dataset, StormConfig};
use rainseer::geo::RainField;
use rainseer::harness::{
    evaluate, prepare, read_field_csv, render_heatmap, run_baseline, train, write_field_csv, Checkpoint, ColorScale, TrainConfig, BASELINE_METHODS,
};
use rainseer::objective::MetricsReport;
use rainseer::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rainseer", version, about = "Rainfall field reconstruction from radar and rain gauges")]
struct Cli {
    /// Print progress messages (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic storm dataset.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint at the held-out stations.
    Evaluate(EvaluateArgs),
    /// Score a classical baseline at the held-out stations.
    Baseline(BaselineArgs),
    /// Reconstruct the rain field at one step with a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Render a rain field as a PNG heatmap.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable lag, tilt, evaporation and noise.
    #[arg(long)]
    undistorted: bool,
    /// Storm setting override, `key=value` (size, steps, cells, gauges, lag,
    /// tilt, evaporation, radar_noise, rain_noise).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration override, `key=value`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Ablation flag to switch on (repeatable).
    #[arg(long)]
    ablate: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-step training loss as CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV report (method,rmse,mae,nse,cc).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// One of zr, tin, tps, idw, or a comma-separated list.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seed of the held-out station draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target step index.
    #[arg(long)]
    step: usize,
    /// Field CSV to write (one line per grid row, southern row first).
    #[arg(long)]
    out: PathBuf,
    /// Also render the field to this PNG.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// PNG file to write.
    #[arg(long)]
    out: PathBuf,
    /// Field CSV to render; without it `--source` picks a field from the data.
    #[arg(long)]
    field: Option<PathBuf>,
    /// `truth` or `zr`, at `--step`.
    #[arg(long, default_value = "truth")]
    source: String,
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Rain rate (mm/h) at the top of the colour scale.
    #[arg(long, default_value_t = 20.0)]
    max: f64,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 8)]
    pixel: usize,
    /// Leave out the gauge markers.
    #[arg(long)]
    no_stations: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rainseer: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Render(a) => render_cmd(a),
    }
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Usage(format!("expected key=value, got '{s}'")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = if a.undistorted {
        StormConfig::undistorted(a.seed)
    } else {
        StormConfig::canonical(a.seed)
    };
    for kv in &a.set {
        let (k, v) = split_kv(kv)?;
        cfg.set(k, v)?;
    }
    let ds = simulate_storm(&cfg)?;
    write_dataset(&ds, &a.out)?;
    log::info!("wrote {} steps, {} gauges to {}", ds.steps(), ds.gauges.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = split_kv(kv)?;
        cfg.set(k, v)?;
    }
    for name in &a.ablate {
        cfg.ablation.enable(name)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let ex = prepare(&ds, cfg.mask_ratio, cfg.train_fraction, cfg.seed)?;
    let out = train(&cfg, &ex.train)?;
    out.checkpoint.save(&a.out)?;
    if let Some(p) = &a.losses {
        let mut s = String::from("step,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        write_text(p, &s)?;
    }
    log::info!("final loss {:?}", out.losses.last());
    Ok(())
}

fn emit(reports: &[MetricsReport], csv: Option<&Path>) -> Result<()> {
    for r in reports {
        print!("{}", r.to_text());
    }
    if let Some(p) = csv {
        write_text(p, &MetricsReport::to_csv(reports))?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let cfg = &ckpt.model.config;
    let ex = prepare(&ds, cfg.mask_ratio, cfg.train_fraction, cfg.seed)?;
    let report = evaluate(&ckpt, &ex.input, &ex.held_out)?;
    emit(&[report], a.report.as_deref())
}

fn baseline_cmd(a: BaselineArgs) -> Result<()> {
    let methods: Vec<&str> = if a.method == "all" {
        BASELINE_METHODS.to_vec()
    } else {
        a.method.split(',').map(str::trim).collect()
    };
    let ds = load_dataset(&a.data)?;
    let ex = prepare(&ds, a.mask_ratio, a.train_fraction, a.seed)?;
    let reports = methods
        .iter()
        .map(|m| run_baseline(m, &ex.input, &ex.held_out, a.train_fraction))
        .collect::<Result<Vec<_>>>()?;
    emit(&reports, a.report.as_deref())
}

fn station_coords(ds: &Dataset) -> Vec<(f64, f64)> {
    ds.gauges.stations.coords.clone()
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let cfg = &ckpt.model.config;
    let ex = prepare(&ds, cfg.mask_ratio, cfg.train_fraction, cfg.seed)?;
    let field = ckpt.model.reconstruct(&ex.input.radar, &ex.input.gauges, a.step)?;
    write_field_csv(&field, &a.out)?;
    if let Some(p) = &a.png {
        render_heatmap(&field, &station_coords(&ex.input), p, ColorScale::default())?;
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let g = ds.radar.georef;
    let field = match &a.field {
        Some(p) => read_field_csv(p, g)?,
        None => {
            if a.step >= ds.steps() {
                return Err(Error::Domain(format!("step {} beyond the {} steps of the data", a.step, ds.steps())));
            }
            match a.source.as_str() {
                "truth" => {
                    let v = ds
                        .truth_frame(a.step)
                        .ok_or_else(|| Error::Domain("the dataset has no truth field".into()))?;
                    RainField::new(v, g)?
                }
                "zr" => zr_baseline_field(&ds.radar, a.step, Default::default())?,
                other => return Err(Error::Usage(format!("unknown source '{other}'; valid: truth, zr"))),
            }
        }
    };
    let stations = if a.no_stations { Vec::new() } else { station_coords(&ds) };
    render_heatmap(&field, &stations, &a.out, ColorScale { max: a.max, pixel: a.pixel })
}
