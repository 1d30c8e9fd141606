//! `costroke`: complete a partial sketch, run experiments, compute metrics
//! or serve interactive sessions.
//!
//! Exit codes: 0 success, 2 input errors (including usage), 3 backend
//! transport errors, 1 anything else.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use costroke_core::encoder::{backend_from_spec, EncoderBackend};
use costroke_core::engine::{OptimState, StepRecord};
use costroke_core::experiments::{load_spec, run_experiment, ExperimentSpec, Scenario};
use costroke_core::io::{load_config, svg_export, svg_import, Config};
use costroke_core::metrics::{fid_report, tie_report, EmbeddingSet};
use costroke_core::raster::RasterImage;
use costroke_core::sketch::Region;
use costroke_core::Error;

#[derive(Parser)]
#[command(name = "costroke", version, about = "Co-creative vector sketch completion")]
#[command(args_conflicts_with_subcommands = true, arg_required_else_help = true)]
struct Cli {
    /// Serve interactive sessions on this address (e.g. 127.0.0.1:8080).
    #[arg(long, value_name = "ADDR")]
    serve: Option<SocketAddr>,

    /// Encoder backend for --serve: `toy` or `remote:<host:port>`.
    #[arg(long, default_value = "toy", requires = "serve")]
    backend: String,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a partial sketch towards a prompt.
    Complete(CompleteArgs),
    /// Run one of the experiment scenarios and write its report.
    Experiment(ExperimentArgs),
    /// TIE of one set, or FID between two sets, of images or embeddings.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct CompleteArgs {
    /// Partial sketch in the supported SVG subset.
    #[arg(long)]
    svg: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Drawing region `x0,y0,x1,y1` in canvas units; whole canvas if omitted.
    #[arg(long, value_parser = parse_region)]
    region: Option<Region>,
    /// Optimization steps; overrides the config.
    #[arg(long)]
    iters: Option<u64>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Completed SVG.
    #[arg(long)]
    out: PathBuf,
    /// Step telemetry; defaults to the output path with a `.jsonl` extension.
    #[arg(long)]
    telemetry: Option<PathBuf>,
    /// Also write a PNG render of the result.
    #[arg(long)]
    png: Option<PathBuf>,
    /// `toy` or `remote:<host:port>`; overrides the config.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// penalisation_sweep, prompt_change or fixed_traces.
    #[arg(long)]
    scenario: String,
    /// JSON or TOML experiment spec; toy defaults if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for report.json, CSVs and telemetry.
    #[arg(long)]
    out: PathBuf,
    /// Use the original study's run counts and full-resolution renders.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value = "toy")]
    backend: String,
}

#[derive(Args)]
#[command(group(ArgGroup::new("metric").required(true).args(["tie", "fid"])))]
struct MetricsArgs {
    #[arg(long)]
    tie: bool,
    /// Requires --set-b.
    #[arg(long, requires = "set_b")]
    fid: bool,
    /// Directory of PNG images and/or JSON embedding files.
    #[arg(long)]
    set_a: PathBuf,
    #[arg(long)]
    set_b: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    backend: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match (cli.serve, cli.command) {
        (Some(addr), _) => serve(addr, &cli.backend),
        (None, Some(Command::Complete(a))) => complete(a),
        (None, Some(Command::Experiment(a))) => experiment(a),
        (None, Some(Command::Metrics(a))) => metrics(a),
        (None, None) => unreachable!("clap requires a subcommand or --serve"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_)
        | Error::Config(_)
        | Error::Schema { .. }
        | Error::Unsupported { .. }
        | Error::Domain(_)
        | Error::Degenerate(_) => 2,
        Error::Transport(_) => 3,
        _ => 1,
    }
}

fn parse_region(s: &str) -> Result<Region, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x0, y0, x1, y1] => Region::new(x0, y0, x1, y1).map_err(|e| e.to_string()),
        _ => Err("expected four comma-separated numbers x0,y0,x1,y1".into()),
    }
}

fn read_input(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn complete(a: CompleteArgs) -> Result<(), Error> {
    let mut cfg = match &a.config {
        Some(p) => load_config(&read_input(p)?)?,
        None => Config::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    cfg.validate()?;
    let iters = a.iters.unwrap_or(cfg.iterations);
    let sketch = svg_import(&read_input(&a.svg)?)?;
    let backend = backend_from_spec(&cfg.backend)?;
    let region = a.region.unwrap_or_else(Region::full);

    let mut state = OptimState::initialized(sketch, &a.prompt, region, cfg.engine(), backend, cfg.seed)?;
    let records = state.run_default(iters)?;

    fs::write(&a.out, svg_export(state.sketch()))?;
    let telemetry = a.telemetry.unwrap_or_else(|| a.out.with_extension("jsonl"));
    StepRecord::write_jsonl(&records, std::io::BufWriter::new(fs::File::create(&telemetry)?))?;
    if let Some(png) = &a.png {
        state.render()?.save_png(png)?;
    }
    if let Some(last) = records.last() {
        eprintln!(
            "{} steps: L_s {:.6}, L_b {:.6}, L_Omega {:.6}, total {:.6}",
            records.len(),
            last.semantic,
            last.curve_fidelity,
            last.geometric,
            last.total
        );
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<(), Error> {
    let scenario: Scenario = a.scenario.parse()?;
    let mut spec = match &a.spec {
        Some(p) => load_spec(&read_input(p)?, Some(scenario))?,
        None => ExperimentSpec::toy(scenario),
    };
    if a.paper_scale {
        spec = spec.paper_scale();
    }
    let backend = backend_from_spec(&a.backend)?;
    let report = run_experiment(&spec, backend, Some(&a.out.join("telemetry")))?;
    report.write(&a.out)?;
    for t in &report.tests {
        println!(
            "{} {}: {} {:.4} vs {} {:.4}, t = {:.3}, p = {:.4}, adjusted p = {:.4}",
            t.category, t.metric, t.a, t.mean_a, t.b, t.mean_b, t.t, t.p, t.p_adjusted
        );
    }
    if let Some(ok) = report.frozen_identical {
        println!("frozen strokes identical: {ok}");
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<(), Error> {
    let backend = backend_from_spec(&a.backend)?;
    let set_a = load_set(&a.set_a, backend.as_ref())?;
    let report = if a.tie {
        tie_report(&set_a)?
    } else {
        let dir = a.set_b.as_ref().ok_or_else(|| Error::Input("--fid needs --set-b".into()))?;
        fid_report(&set_a, &load_set(dir, backend.as_ref())?)?
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

/// Reads every `.png` (embedded with the backend) and `.json` (one vector
/// or an array of vectors) in `dir`, in file-name order.
fn load_set(dir: &Path, backend: &dyn EncoderBackend) -> Result<EmbeddingSet, Error> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut vectors = Vec::new();
    for p in paths {
        match p.extension().and_then(|e| e.to_str()) {
            Some("png") => vectors.push(backend.embed_image(&RasterImage::load_png(&p)?)?.embedding.as_slice().to_vec()),
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&read_input(&p)?)
                    .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
                let parse = |v: &serde_json::Value| -> Option<Vec<f64>> { v.as_array()?.iter().map(|x| x.as_f64()).collect() };
                match parse(&v) {
                    Some(one) => vectors.push(one),
                    None => {
                        let many: Option<Vec<Vec<f64>>> = v.as_array().and_then(|rows| rows.iter().map(parse).collect());
                        vectors.extend(many.ok_or_else(|| {
                            Error::Input(format!("{}: expected a number array or an array of number arrays", p.display()))
                        })?);
                    }
                }
            }
            _ => {}
        }
    }
    if vectors.len() < 2 {
        return Err(Error::Input(format!("{} holds {} samples, need at least 2", dir.display(), vectors.len())));
    }
    EmbeddingSet::new(vectors)
}

fn serve(addr: SocketAddr, backend: &str) -> Result<(), Error> {
    let backend: Arc<dyn EncoderBackend> = backend_from_spec(backend)?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving on ws://{addr}/ws (health: http://{addr}/health)");
    rt.block_on(costroke_service::serve(addr, backend)).map_err(|e| Error::Io(std::io::Error::other(e)))
}
