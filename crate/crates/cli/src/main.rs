mod config;
mod error;
mod svg;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gridplan::dataset::{generate_synthetic, Dataset, Sample, Split, SynthConfig};
use gridplan::geo::{LocalPoint, Pose2D, Trajectory};
use gridplan::metrics::{evaluate, MetricsReport};
use gridplan::model::{train, CvaeModel, EpochLog, ModelConfig};
use gridplan::osm::{build_road_graph, parse_osm_file};
use gridplan::planner::{plan_at, shortest_route, PlanSettings};
use gridplan::scene::ScenarioSpec;
use serde_json::{json, Value};

use config::{ConfigArgs, RunConfig};
use error::{io_err, CliError};

#[derive(Parser, Debug)]
#[command(name = "gridplan", version, about = "Plan-conditioned trajectory generation on semantic grids")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Route on an OSM file and print the plan matrix seen from an ego pose
    Plan {
        /// OSM XML file
        #[arg(long)]
        osm: PathBuf,
        /// Source node id
        #[arg(long)]
        src: i64,
        /// Destination node id
        #[arg(long)]
        dst: i64,
        /// Ego pose "x,y,heading" in meters and radians, in the frame centered on the source node (east, north)
        #[arg(long, allow_hyphen_values = true)]
        ego: String,
    },
    /// Generate a synthetic dataset from scenario presets or JSON files
    Synth {
        /// Preset name (straight, four_way, three_way, u_turn) or scenario JSON path; repeatable
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<String>,
        /// Samples drawn per scenario
        #[arg(long, default_value_t = 64)]
        per_scenario: usize,
        /// Split recorded in the dataset header
        #[arg(long, default_value = "train")]
        split: Split,
        /// Output dataset file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train {
        /// Dataset file
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score argmax predictions against the ground truth
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample metrics CSV
        #[arg(long)]
        per_sample: Option<PathBuf>,
    },
    /// Predict trajectories and emit them as JSON
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only this sample (default: all)
        #[arg(long)]
        index: Option<usize>,
        /// Output JSON file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render an SVG panel (requires --index)
        #[arg(long, requires = "index")]
        svg: Option<PathBuf>,
    },
    /// Time single-sample inference
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Timed runs
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Dataset supplying the input (default: one synthetic four_way sample)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render a sample, its plan and an optional prediction to SVG
    Plot {
        /// Dataset file holding the sample
        #[arg(long)]
        sample: PathBuf,
        /// Sample index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Prediction JSON written by `infer`
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.config.resolve()?;
    eprintln!("{}", serde_json::to_string(&cfg).expect("config serializes"));
    match cli.command {
        Command::Plan { osm, src, dst, ego } => cmd_plan(&cfg, &osm, src, dst, &ego),
        Command::Synth { scenarios, per_scenario, split, out } => {
            cmd_synth(&cfg, &scenarios, per_scenario, split, &out)
        }
        Command::Train { data, out, loss_csv } => cmd_train(&cfg, &data, &out, loss_csv.as_deref()),
        Command::Eval { checkpoint, data, per_sample } => {
            cmd_eval(&cfg, &checkpoint, &data, per_sample.as_deref())
        }
        Command::Infer { checkpoint, data, index, out, svg } => {
            cmd_infer(&cfg, &checkpoint, &data, index, out.as_deref(), svg.as_deref())
        }
        Command::Bench { checkpoint, n, data } => cmd_bench(&checkpoint, n as usize, data.as_deref()),
        Command::Plot { sample, index, pred, out } => cmd_plot(&sample, index, pred.as_deref(), &out),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn print_json(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json"));
}

fn parse_pose(text: &str) -> Result<Pose2D, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--ego expects \"x,y,heading\", got {text:?}")))?;
    match parts[..] {
        [x, y, h] if parts.iter().all(|v| v.is_finite()) => Ok(Pose2D::new(x, y, h)),
        _ => Err(CliError::Usage(format!("--ego expects \"x,y,heading\", got {text:?}"))),
    }
}

fn cmd_plan(cfg: &RunConfig, osm: &Path, src: i64, dst: i64, ego: &str) -> Result<(), CliError> {
    let ego = parse_pose(ego)?;
    let (nodes, ways) = parse_osm_file(osm)?;
    let graph = build_road_graph(&nodes, &ways);
    let origin = graph
        .nodes
        .get(&src)
        .ok_or(gridplan::planner::PlanError::UnknownNode(src))?
        .location;
    let positions = graph
        .project(origin)
        .map_err(|e| CliError::Domain(e.to_string()))?;
    let route = shortest_route(&graph, src, dst)?;
    let settings = PlanSettings {
        variant: cfg.model.variant,
        past: cfg.model.past,
        future: cfg.model.future,
        ..PlanSettings::default()
    };
    let (plan, frame) = plan_at(&route, &graph, &positions, ego.position, &settings)?;
    print_json(&plan.reframed(&frame, &ego).to_json());
    Ok(())
}

fn load_scenario(name: &str) -> Result<ScenarioSpec, CliError> {
    if let Some(s) = ScenarioSpec::preset(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::Io(format!(
            "{name}: not a preset ({}) and no such file",
            ScenarioSpec::PRESETS.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(ScenarioSpec::from_json(&text)?)
}

fn cmd_synth(
    cfg: &RunConfig,
    names: &[String],
    per_scenario: usize,
    split: Split,
    out: &Path,
) -> Result<(), CliError> {
    let specs = names.iter().map(|n| load_scenario(n)).collect::<Result<Vec<_>, _>>()?;
    let synth = SynthConfig {
        pos_sigma: cfg.pos_sigma,
        heading_sigma_deg: cfg.heading_sigma_deg,
        split,
        threads: cfg.threads,
        ..SynthConfig::for_model(&cfg.model)
    };
    let (ds, report) = generate_synthetic(&specs, per_scenario, cfg.train.seed, &synth)?;
    write_file(out, &ds.to_bytes())?;
    let per: Vec<Value> = report
        .per_scenario
        .iter()
        .map(|(n, g, s)| json!({ "scenario": n, "generated": g, "skipped_short": s }))
        .collect();
    print_json(&json!({
        "out": out.display().to_string(),
        "generated": report.generated,
        "skipped_short": report.skipped_short,
        "per_scenario": per,
    }));
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such dataset file", path.display())));
    }
    Ok(Dataset::load(path)?)
}

fn load_model(path: &Path) -> Result<(CvaeModel, usize), CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such checkpoint", path.display())));
    }
    Ok(CvaeModel::load(path)?)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, loss_csv: Option<&Path>) -> Result<(), CliError> {
    let ds = load_dataset(data)?;
    let mut model = CvaeModel::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!("training {} parameters on {} samples", model.num_parameters(), ds.len());
    let logs = train(&mut model, &ds.samples, &cfg.train, |e, _| {
        log::info!("epoch {} loss {:.6}", e.epoch, e.total);
        Ok(true)
    })?;
    model.save(out, logs.len())?;
    if let Some(path) = loss_csv {
        let mut text = String::from(EpochLog::CSV_HEADER);
        text.push('\n');
        for l in &logs {
            text.push_str(&l.csv_row());
            text.push('\n');
        }
        write_file(path, text.as_bytes())?;
    }
    let last = logs.last().map(|l| json!({ "total": l.total, "recon": l.recon, "kl": l.kl, "mse": l.mse }));
    print_json(&json!({
        "checkpoint": out.display().to_string(),
        "epochs": logs.len(),
        "parameters": model.num_parameters(),
        "final": last,
    }));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, data: &Path, per_sample: Option<&Path>) -> Result<(), CliError> {
    let (model, _) = load_model(ckpt)?;
    let ds = load_dataset(data)?;
    let (report, samples, _) = evaluate(&model, &ds, cfg.threads)?;
    let label = model.config.variant.as_str().to_string();
    print!("{}", MetricsReport::to_table(&[(label, report)]));
    if let Some(path) = per_sample {
        let mut text = String::from("index,ade_full,ade_half,fde,mde,dac_full,dac_half\n");
        for (i, s) in samples.iter().enumerate() {
            text.push_str(&format!(
                "{i},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                s.ade_full, s.ade_half, s.fde, s.mde, s.dac_full as u8, s.dac_half as u8
            ));
        }
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn trajectory_json(t: &Trajectory) -> Value {
    Value::Array(t.waypoints.iter().map(|p| json!([p.x, p.y])).collect())
}

fn sample_at(ds: &Dataset, index: usize) -> Result<&Sample, CliError> {
    ds.samples
        .get(index)
        .ok_or_else(|| CliError::Io(format!("sample {index} not found ({} samples)", ds.len())))
}

fn cmd_infer(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    index: Option<usize>,
    out: Option<&Path>,
    svg_out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, _) = load_model(ckpt)?;
    let ds = load_dataset(data)?;
    let indices: Vec<usize> = match index {
        Some(i) => {
            sample_at(&ds, i)?;
            vec![i]
        }
        None => (0..ds.len()).collect(),
    };
    let threads = cfg.threads.max(1);
    let chunk = indices.len().div_ceil(threads).max(1);
    let mut results = Vec::with_capacity(indices.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                let (model, ds) = (&model, &ds);
                scope.spawn(move || {
                    let refs: Vec<&Sample> = part.iter().map(|&i| &ds.samples[i]).collect();
                    model.infer_modes(&refs)
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("inference thread panicked"));
        }
    });
    let mut preds = Vec::with_capacity(indices.len());
    for r in results {
        preds.extend(r?);
    }
    let entries: Vec<Value> = indices
        .iter()
        .zip(&preds)
        .map(|(&i, (z, t))| json!({ "index": i, "mode": z, "waypoints": trajectory_json(t) }))
        .collect();
    let doc = json!({ "predictions": entries });
    match out {
        Some(p) => write_file(p, format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")).as_bytes())?,
        None => print_json(&doc),
    }
    if let (Some(path), Some(i)) = (svg_out, index) {
        write_file(path, svg::render(&ds.samples[i], Some(&preds[0].1)).as_bytes())?;
    }
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn bench_sample(config: &ModelConfig) -> Result<Sample, CliError> {
    let spec = ScenarioSpec::preset("four_way").expect("preset exists");
    let (ds, _) = generate_synthetic(&[spec], 1, 0, &SynthConfig::for_model(config))?;
    ds.samples
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Domain("could not synthesize a benchmark sample".into()))
}

fn cmd_bench(ckpt: &Path, n: usize, data: Option<&Path>) -> Result<(), CliError> {
    let (model, _) = load_model(ckpt)?;
    let sample = match data {
        Some(p) => sample_at(&load_dataset(p)?, 0)?.clone(),
        None => bench_sample(&model.config)?,
    };
    model.infer(&sample)?;
    let mut ms = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        let traj = model.infer(&sample)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(traj);
    }
    let mean = ms.iter().sum::<f64>() / n as f64;
    ms.sort_by(f64::total_cmp);
    print_json(&json!({
        "runs": n,
        "mean_ms": mean,
        "p50_ms": percentile(&ms, 0.5),
        "p99_ms": percentile(&ms, 0.99),
        "parameters": model.num_parameters(),
    }));
    Ok(())
}

fn prediction_for(path: &Path, index: usize) -> Result<Trajectory, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    let bad = || CliError::Domain(format!("{}: no prediction for sample {index}", path.display()));
    let entry = doc
        .get("predictions")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().find(|e| e.get("index").and_then(Value::as_u64) == Some(index as u64)))
        .ok_or_else(bad)?;
    let pts = entry
        .get("waypoints")
        .and_then(Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|p| Some(LocalPoint::new(p.get(0)?.as_f64()?, p.get(1)?.as_f64()?)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)?;
    Ok(Trajectory::new(pts))
}

fn cmd_plot(data: &Path, index: usize, pred: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(data)?;
    let sample = sample_at(&ds, index)?;
    let pred = pred.map(|p| prediction_for(p, index)).transpose()?;
    write_file(out, svg::render(sample, pred.as_ref()).as_bytes())
}
