mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cola_core::bench::{bench, BenchMode};
use cola_core::config::{load_model, save_model, RunConfig};
use cola_core::eval::evaluate_open_loop;
use cola_core::model::ColaModel;
use cola_core::sim::closed::{read_scenarios, EpisodeRow};
use cola_core::sim::{generate_scenarios, run_suite, summarize, Driver, OpenLoopMetrics};
use cola_core::train::{train, MetricsLog};
use cola_core::world::{generate_dataset, read_dataset, write_dataset, ClusterModel};
use cola_core::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cola", version, about = "Latent driving reasoning with a hierarchical parallel planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value run configuration; missing keys use defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its maneuver clusters
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train reasoner and planner jointly
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-loop or closed-loop evaluation of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "closed", required_unless_present = "closed")]
        open: bool,
        #[arg(long)]
        closed: bool,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset for --open; a held-out split is generated when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scenario file for --closed; the standard suite is generated when absent
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock latency of one planning cycle
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "parallel")]
        mode: String,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
    },
    /// Render SVG plots from an evaluation or metrics CSV
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for uniformity; plotting is not random
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// An error in the command line or config file.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| anyhow::Error::new(Usage(format!("config {}: {e}", p.display()))))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.data_seed = s;
        cfg.train.seed = s;
        cfg.model_seed = s;
        cfg.eval_seed = s.wrapping_add(1000);
        cfg.scenario_seed = s;
    }
    Ok(cfg)
}

fn clusters_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".clusters.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_gen_data(common: &Common, out: &Path, n: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let n = n.unwrap_or(cfg.n_scenes);
    let (data, clusters) = if n < cfg.model.reasoner.actions {
        (generate_dataset(n, cfg.data_seed, &cfg.world)?, None)
    } else {
        let (d, c) = cfg.labelled_dataset(n)?;
        (d, Some(c))
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&data, out)?;
    match clusters {
        Some(c) => {
            write_json(&clusters_path(out), &c)?;
            println!("wrote {n} scenes and {} clusters to {}", c.len(), out.display());
        }
        None => eprintln!(
            "warning: {n} scenes are too few for {} clusters; no cluster file written",
            cfg.model.reasoner.actions
        ),
    }
    Ok(())
}

fn print_open_loop(label: &str, m: &OpenLoopMetrics) {
    let l2: Vec<String> = m.l2.iter().map(|v| format!("{v:.3}")).collect();
    let col: Vec<String> = m.collision.iter().map(|v| format!("{v:.2}")).collect();
    println!(
        "{label:<18} | L2 (m) {} | avg {:.3} | Col (%) {} | avg {:.2}",
        l2.join(" "),
        m.l2_avg,
        col.join(" "),
        m.collision_avg
    );
}

fn cmd_train(common: &Common, data_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let data = read_dataset(data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let cpath = clusters_path(data_path);
    let clusters: ClusterModel = serde_json::from_str(
        &fs::read_to_string(&cpath).with_context(|| format!("reading {}", cpath.display()))?,
    )
    .map_err(|e| Error::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut model = ColaModel::new(cfg.model.clone(), &clusters, cfg.model_seed)?;
    let ckpt = out.join("model.ckpt");
    let mut log = MetricsLog::create(&out.join("metrics.csv"))?;
    let result = train(&mut model, &data, &cfg.train, |row| {
        println!(
            "step {:>5}  loss {:.4}  focal {:.4}  reg {:.4}  conf {:.4}  acc {:.3}  lr {:.2e}",
            row.step, row.total, row.focal, row.regression, row.confidence, row.accuracy, row.lr
        );
        log.write(row)
    });
    // Parameters only move after a finite step, so the model is always the last good one.
    save_model(&ckpt, &cfg, &clusters, &model)?;
    let report = result?;
    println!("trained {} steps; checkpoint {}", report.steps_done, ckpt.display());

    let held = cfg.held_out(&clusters)?;
    if !held.is_empty() {
        let ev = evaluate_open_loop(&model, &held, cfg.model.candidates, 32, cfg.world.dt)?;
        println!("held-out maneuver accuracy {:.3} on {} scenes", ev.accuracy, held.len());
        print_open_loop("model", &ev.metrics);
        print_open_loop("constant velocity", &ev.baseline);
    }
    Ok(())
}

#[derive(Serialize)]
struct OpenRow {
    method: String,
    horizon_s: String,
    l2_m: f64,
    collision_pct: f64,
}

fn open_rows(method: &str, m: &OpenLoopMetrics) -> Vec<OpenRow> {
    let mut rows: Vec<OpenRow> = m
        .horizons
        .iter()
        .zip(m.l2.iter().zip(&m.collision))
        .map(|(h, (l, c))| OpenRow {
            method: method.into(),
            horizon_s: format!("{h}"),
            l2_m: *l,
            collision_pct: *c,
        })
        .collect();
    rows.push(OpenRow {
        method: method.into(),
        horizon_s: "avg".into(),
        l2_m: m.l2_avg,
        collision_pct: m.collision_avg,
    });
    rows
}

#[derive(Serialize)]
struct PointRow {
    scene: u64,
    series: String,
    t: usize,
    x: f32,
    y: f32,
}

fn cmd_eval_open(cfg: &RunConfig, model: &ColaModel, clusters: &ClusterModel, data: Option<&Path>, out: &Path) -> Result<()> {
    let samples = match data {
        Some(p) => {
            let mut d = read_dataset(p).with_context(|| format!("reading {}", p.display()))?;
            clusters.relabel(&mut d);
            d
        }
        None => cfg.held_out(clusters)?,
    };
    if samples.is_empty() {
        bail!(Error::contract("no scenes to evaluate"));
    }
    let ev = evaluate_open_loop(model, &samples, cfg.model.candidates, 32, cfg.world.dt)?;
    let mut rows = open_rows("model", &ev.metrics);
    rows.extend(open_rows("constant_velocity", &ev.baseline));
    write_csv(&out.join("open_loop.csv"), &rows)?;

    let mut points = Vec::new();
    let mut records = String::new();
    for (p, s) in ev.plans.iter().zip(&samples) {
        points.extend(s.gt.iter().enumerate().map(|(t, q)| PointRow {
            scene: s.id,
            series: "gt".into(),
            t,
            x: q[0],
            y: q[1],
        }));
        let best = &p.plan.candidates[p.plan.best];
        for (k, (pts, steps)) in best.scales.iter().zip(&p.plan.blocks).enumerate() {
            points.extend(pts.iter().zip(steps).map(|(q, &t)| PointRow {
                scene: s.id,
                series: format!("scale{}", k + 1),
                t,
                x: q[0],
                y: q[1],
            }));
        }
        records.push_str(&serde_json::to_string(&p.plan.to_record(s.id))?);
        records.push('\n');
    }
    write_csv(&out.join("predictions.csv"), &points)?;
    fs::write(out.join("plans.jsonl"), records)?;

    println!("maneuver accuracy {:.3} on {} scenes", ev.accuracy, samples.len());
    println!("{:<18} | horizons {:?} s", "", ev.metrics.horizons);
    print_open_loop("model", &ev.metrics);
    print_open_loop("constant velocity", &ev.baseline);
    Ok(())
}

fn cmd_eval_closed(cfg: &RunConfig, model: &ColaModel, scenarios: Option<&Path>, out: &Path) -> Result<()> {
    let suite = match scenarios {
        Some(p) => read_scenarios(p).with_context(|| format!("reading {}", p.display()))?,
        None => generate_scenarios(cfg.scenarios_per_kind, cfg.scenario_seed),
    };
    let mut rows = Vec::new();
    println!("{:<18} | {:>5} {:>6} {:>8} {:>5} | collision % avg / static / frontal / side", "driver", "avg", "static", "frontal", "side");
    for driver in [Driver::Model(model), Driver::ConstantVelocity, Driver::NoOp] {
        let results = run_suite(&suite, driver, cfg.replan_hz)?;
        if let Driver::Model(_) = driver {
            if let Some(r) = results.iter().find(|r| r.passes.iter().any(|&p| p != 3)) {
                bail!(Error::contract(format!("scenario {} used {:?} passes per tick", r.scenario, r.passes)));
            }
        }
        rows.extend(results.iter().map(|r| EpisodeRow::new(driver.name(), r)));
        let s = summarize(driver.name(), &results);
        println!(
            "{:<18} | {:>5.2} {:>6.2} {:>8.2} {:>5.2} | {:.1} / {:.1} / {:.1} / {:.1}{}",
            s.driver,
            s.score_avg,
            s.score[0].1,
            s.score[1].1,
            s.score[2].1,
            s.collision_rate_avg,
            s.collision_rate[0].1,
            s.collision_rate[1].1,
            s.collision_rate[2].1,
            if s.failures > 0 { format!("  ({} failed)", s.failures) } else { String::new() }
        );
    }
    write_csv(&out.join("closed_loop.csv"), &rows)?;
    Ok(())
}

fn cmd_bench(common: &Common, ckpt: &Path, mode: &str, repeats: usize) -> Result<()> {
    let mode: BenchMode = mode.parse()?;
    let (mut cfg, clusters, model) = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(s) = common.seed {
        cfg.eval_seed = s;
    }
    let scenes = RunConfig { eval_scenes: 16, ..cfg.clone() }.held_out(&clusters)?;
    let r = bench(&model, &scenes, mode, cfg.model.candidates, repeats)?;
    println!(
        "mode {:?}  candidates {}  repeats {}  median {:.3} ms  p95 {:.3} ms  backbone passes/cycle {}",
        r.mode, r.candidates, r.repeats, r.median_ms, r.p95_ms, r.passes_per_cycle
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, n } => cmd_gen_data(&common, &out, n),
        Command::Train { common, data, out } => cmd_train(&common, &data, &out),
        Command::Eval {
            common,
            open,
            closed: _,
            ckpt,
            data,
            scenarios,
            out,
        } => {
            let (mut cfg, clusters, model) = load_model(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            if let Some(s) = common.seed {
                cfg.eval_seed = s;
                cfg.scenario_seed = s;
            }
            let out = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&out)?;
            if open {
                cmd_eval_open(&cfg, &model, &clusters, data.as_deref(), &out)
            } else {
                cmd_eval_closed(&cfg, &model, scenarios.as_deref(), &out)
            }
        }
        Command::Bench {
            common,
            ckpt,
            mode,
            repeats,
        } => cmd_bench(&common, &ckpt, &mode, repeats),
        Command::Plot { results, out, seed: _ } => plot::plot(&results, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<Usage>()) {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Config(_)) => 1,
        Some(_) => 2,
        None if err.chain().any(|e| e.is::<std::io::Error>() || e.is::<csv::Error>() || e.is::<serde_json::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = std::env::var("COLA_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
