use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use risac::decoder::{run_decoder, SblImager};
use risac::io;
use risac::optimizer::pattern::{beam_pattern, fine_grid, summarize};
use risac::plot::{Chart, Series};
use risac::rng::{self, StreamTag};
use risac::sim::{self, Letter, ScenarioSpec};
use risac::{optimize, synth_received, PhaseSchedule, SceneConfig, SceneTruth, SymbolFrame};

#[derive(Parser)]
#[command(name = "risac", version, about = "RIS-assisted joint communication and imaging simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base parameter set, overridden by --config and --set.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 200)]
    trials: usize,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Phase resolution: 1..16 bits or `continuous`.
    #[arg(long, global = true)]
    nbit: Option<String>,
    #[arg(long, global = true)]
    rho: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Design an RIS phase schedule.
    OptimizePhases,
    /// Receive beam patterns of a schedule at selected time indices.
    BeamPattern {
        /// Schedule CSV; optimized from scratch when absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// 1-based time indices.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize])]
        rows: Vec<usize>,
    },
    /// Monte Carlo SER/NMSE sweep.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        scenario: u8,
    },
    /// Recover symbols and scene from a received frame.
    Decode {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
    },
    /// Generate a received frame for testing `decode`.
    Synthesize {
        #[arg(long)]
        schedule: PathBuf,
        /// Scene CSV (`m,re,im`).
        #[arg(long, conflicts_with = "letter")]
        sigma: Option<PathBuf>,
        /// Letter scene X, D or U (needs 64 pixels).
        #[arg(long)]
        letter: Option<String>,
    },
}

fn build_config(g: &Global) -> Result<SceneConfig> {
    let mut cfg = match g.preset {
        Preset::Full => SceneConfig::full(),
        Preset::Desk => SceneConfig::desk(),
    };
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_str(&text).with_context(|| format!("in {}", path.display()))?;
    }
    let mut pairs = Vec::new();
    for kv in &g.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{kv}'");
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(n) = &g.nbit {
        pairs.push(("n_bit".into(), n.clone()));
    }
    if let Some(r) = g.rho {
        pairs.push(("rho".into(), r.to_string()));
    }
    cfg.apply_pairs(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_svg(path: &Path, chart: &Chart) -> Result<()> {
    fs::write(path, chart.to_svg()).with_context(|| format!("writing {}", path.display()))
}

fn optimize_phases(cfg: &SceneConfig, g: &Global) -> Result<()> {
    let (sched, report) = optimize(cfg, g.seed)?;
    io::write_schedule(g.out.join("schedule.csv"), &sched)?;
    io::write_loss_trace(g.out.join("loss_trace.csv"), &report)?;
    let iters = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| ((i + 1) as f64, y)).collect();
    write_svg(
        &g.out.join("loss_trace.svg"),
        &Chart {
            title: "Schedule design".into(),
            x_label: "iteration".into(),
            y_label: "loss".into(),
            log_y: true,
            series: vec![
                Series { name: "loss".into(), points: iters(&report.loss_trace) },
                Series { name: "orthogonality".into(), points: iters(&report.ortho_trace) },
            ],
        },
    )?;
    let summary = summarize(cfg, &sched, cfg.delay..cfg.total_len())?;
    println!("iterations        {} ({} initialization)", report.iterations, report.stage1_iterations);
    println!("final loss        {:.6e}", report.final_loss);
    println!("orthogonality     {:.6e} (threshold {:.6e})", report.final_ortho_metric, report.threshold);
    println!("UE gain           {:.3} dB", summary.ue_gain_db);
    println!("mean RoI gain     {:.3} dB", summary.roi_gain_db);
    println!("peak at UE ±1°    {:.1}% of rows", 100.0 * summary.peak_fraction(cfg.theta_ue, 1.0));
    Ok(())
}

fn read_or_optimize(cfg: &SceneConfig, path: Option<&Path>, seed: u64) -> Result<PhaseSchedule> {
    match path {
        Some(p) => {
            let sched = io::read_schedule(p).with_context(|| format!("reading {}", p.display()))?;
            sched.check_shape(cfg)?;
            Ok(sched)
        }
        None => Ok(optimize(cfg, seed)?.0),
    }
}

fn beam_pattern_cmd(cfg: &SceneConfig, g: &Global, schedule: Option<&Path>, rows: &[usize]) -> Result<()> {
    let sched = read_or_optimize(cfg, schedule, g.seed)?;
    let grid = fine_grid();
    let mut patterns = Vec::new();
    for &t in rows {
        let gain = beam_pattern(cfg, &sched, t, &grid)?;
        patterns.push((t, grid.iter().copied().zip(gain).collect::<Vec<_>>()));
    }
    io::write_beam_pattern(g.out.join("beam_pattern.csv"), &patterns)?;
    write_svg(
        &g.out.join("beam_pattern.svg"),
        &Chart {
            title: "Receive beam pattern".into(),
            x_label: "angle (deg)".into(),
            y_label: "normalized gain (dB)".into(),
            log_y: false,
            series: patterns
                .iter()
                .map(|(t, pts)| Series {
                    name: format!("t = {t}"),
                    points: pts.iter().map(|&(a, v)| (a, v.max(-60.0))).collect(),
                })
                .collect(),
        },
    )?;
    Ok(())
}

fn simulate(cfg: &SceneConfig, g: &Global, scenario: u8) -> Result<()> {
    let spec = ScenarioSpec::standard(scenario, cfg.n_pixels, g.trials)?;
    let jobs = g.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let res = sim::run_scenario(&spec, cfg, Some(&g.out), g.seed, jobs)?;
    println!("{:>7} {:>7} {:<12} {:>10} {:>10} {:>9}", "cnr_db", "inr_db", "method", "ser", "stderr", "nmse_db");
    for r in &res.records {
        println!(
            "{:>7.1} {:>7.1} {:<12} {:>10.3e} {:>10.3e} {:>9.2}",
            r.cnr_db,
            r.inr_db,
            r.method.name(),
            r.ser,
            r.stderr,
            r.nmse_db
        );
    }
    Ok(())
}

fn decode(cfg: &SceneConfig, g: &Global, frame: &Path, schedule: &Path) -> Result<()> {
    let sched = read_or_optimize(cfg, Some(schedule), g.seed)?;
    let y = io::read_frame(frame).with_context(|| format!("reading {}", frame.display()))?;
    let out = run_decoder(cfg, &sched, &y, &mut SblImager::from_config(cfg))?;
    io::write_decisions(g.out.join("decisions.csv"), &out.state.beliefs)?;
    io::write_sigma(g.out.join("sigma.csv"), &out.estimate.sigma)?;
    io::write_estimate(g.out.join("recovered_scene.csv"), &out.estimate)?;
    if cfg.n_pixels == sim::GRID * sim::GRID {
        io::write_magnitude_grid(g.out.join("scene_grid.csv"), &out.estimate.sigma, sim::GRID)?;
    }
    println!(
        "{} outer iterations, {}",
        out.iterations,
        if out.converged { "converged" } else { "iteration limit reached" }
    );
    Ok(())
}

fn synthesize(cfg: &SceneConfig, g: &Global, schedule: &Path, sigma: Option<&Path>, letter: Option<&str>) -> Result<()> {
    let sched = read_or_optimize(cfg, Some(schedule), g.seed)?;
    let truth = match (sigma, letter) {
        (Some(p), _) => SceneTruth::new(io::read_sigma(p)?),
        (None, Some(l)) => sim::letter_scene(l.parse::<Letter>()?, cfg.n_pixels)?,
        (None, None) => ScenarioSpec::standard(1, cfg.n_pixels, 1)?.scene.truth(cfg.n_pixels)?,
    };
    if truth.sigma.len() != cfg.n_pixels {
        bail!("scene has {} pixels, configuration expects {}", truth.sigma.len(), cfg.n_pixels);
    }
    let frame = SymbolFrame::random(cfg.frame_len, &mut rng::stream(g.seed, 0, StreamTag::Symbols));
    let y = synth_received(cfg, &sched, &frame, &truth, g.seed)?;
    io::write_frame(g.out.join("frame.csv"), &y)?;
    io::write_sigma(g.out.join("truth.csv"), &truth.sigma)?;
    io::write_rows(
        g.out.join("symbols.csv"),
        &["t", "symbol_index"],
        frame.indices().iter().enumerate().map(|(i, s)| vec![(i + 1).to_string(), s.to_string()]),
    )?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let cfg = build_config(g)?;
    if let Some(j) = g.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    match &cli.command {
        Command::OptimizePhases => optimize_phases(&cfg, g),
        Command::BeamPattern { schedule, rows } => beam_pattern_cmd(&cfg, g, schedule.as_deref(), rows),
        Command::Simulate { scenario } => simulate(&cfg, g, *scenario),
        Command::Decode { frame, schedule } => decode(&cfg, g, frame, schedule),
        Command::Synthesize { schedule, sigma, letter } => {
            synthesize(&cfg, g, schedule, sigma.as_deref(), letter.as_deref())
        }
    }
}
