use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use teleassist_core::planner::{plan, smooth};
use teleassist_core::splat::{load_ply_with, SplatMapOptions, DEFAULT_ROBOT_RADIUS, DEFAULT_SIGMA_GATE};
use teleassist_core::synth::{NoiseConfig, SyntheticScenario};
use teleassist_core::tracker::{TrackMode, TrackState};
use teleassist_service::backend::{FilesSource, FrameSource, HttpSource};
use teleassist_service::config::{parse_numbers, BackendMode, PipelineConfig};
use teleassist_service::pipeline::{run_pipeline_step, FrameInputs};
use teleassist_service::record::PathRecord;
use teleassist_service::scenario::{write_scenario, ScenarioDir};
use teleassist_service::server::{plan_error_name, ServeOptions, Service};

#[derive(Parser)]
#[command(name = "teleassist", version, about = "Monocular robot pose tracking over a Gaussian-splat map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a scenario directory and write one pose record per frame.
    Estimate {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the scenario's own scenario.cfg.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Splat map for collision alerts.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Serve the HTTP/WebSocket API while tracking frames from a scenario directory.
    Serve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Segmentation backend URL; overrides the config's backend settings.
        #[arg(long)]
        backend: Option<String>,
        /// Frame source: depth (and, without a backend, logits) per frame.
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Plan a collision-free path through a splat map and print it as JSON.
    Plan {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_parser = parse_point)]
        start: Vector3<f64>,
        #[arg(long, value_parser = parse_point)]
        goal: Vector3<f64>,
        #[arg(long)]
        voxel: f64,
        #[arg(long, default_value_t = DEFAULT_ROBOT_RADIUS)]
        robot_radius: f64,
        #[arg(long, default_value_t = DEFAULT_SIGMA_GATE)]
        sigma_gate: f64,
        #[arg(long, default_value_t = 200)]
        smooth_iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a synthetic scenario directory with ground truth.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        logit_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        outlier_frac: f64,
        /// Obstacle splats written to map.ply (0 for none).
        #[arg(long, default_value_t = 200)]
        obstacles: usize,
    },
}

fn parse_point(s: &str) -> Result<Vector3<f64>, String> {
    match parse_numbers(s)?.as_slice() {
        &[x, y, z] => Ok(Vector3::new(x, y, z)),
        other => Err(format!("expected x,y,z, got {} numbers", other.len())),
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Estimate { scenario, config, out, map } => estimate(scenario, config, out, map),
        Command::Serve { map, config, port, host, backend, scenario } => serve(map, config, SocketAddr::new(host, port), backend, scenario),
        Command::Plan { map, start, goal, voxel, robot_radius, sigma_gate, smooth_iterations, seed } => {
            let opts = SplatMapOptions { robot_radius, ..Default::default() };
            let map = load_ply_with(&map, opts).with_context(|| format!("loading {}", map.display()))?;
            let grid = map.build_occupancy(voxel, sigma_gate, robot_radius)?;
            let path = match plan(&grid, &start, &goal, 0.0) {
                Ok(p) => smooth(&p, &grid, smooth_iterations, seed),
                Err(e) => bail!("{}: {e}", plan_error_name(&e)),
            };
            println!("{}", serde_json::to_string(&PathRecord::from(&path))?);
            Ok(())
        }
        Command::Synth { seed, frames, out, width, height, samples, depth_sigma, logit_sigma, outlier_frac, obstacles } => {
            let mut scn = SyntheticScenario::overhead(seed, frames, width, height);
            scn.n_samples = samples;
            scn.noise = NoiseConfig { depth_sigma, logit_sigma };
            scn.outlier_frac = outlier_frac;
            write_scenario(&out, &scn, obstacles)?;
            eprintln!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
    }
}

fn estimate(scenario: PathBuf, config: Option<PathBuf>, out: PathBuf, map: Option<PathBuf>) -> Result<()> {
    let dir = ScenarioDir::open(&scenario)?;
    let cfg_path = config.or_else(|| dir.config()).context("no --config and the scenario has no scenario.cfg")?;
    let cfg = PipelineConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
    let map = match map {
        Some(p) => {
            let opts = SplatMapOptions { opacity_floor: cfg.opacity_floor, robot_radius: cfg.robot_radius };
            Some(load_ply_with(&p, opts).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let mut source = FilesSource::new(dir.clone());
    let mut writer = BufWriter::new(File::create(&out)?);
    let mut state = TrackState::lost(0.0, &cfg.tracker);
    let mut tracked = 0;
    for i in 0..dir.frames() {
        let (depth, logits) = source.frame(i as u64, &cfg.prompt)?;
        let inputs = FrameInputs { frame_id: i as u64, timestamp: i as f64 / cfg.tracker.rate_hz, depth, logits };
        let step = run_pipeline_step(&inputs, &state, &cfg, map.as_ref())?;
        state = step.state;
        tracked += (state.mode == TrackMode::Tracked) as usize;
        writeln!(writer, "{}", step.record.to_json_line())?;
    }
    writer.flush()?;
    eprintln!("{} frames, {tracked} tracked, poses in {}", dir.frames(), out.display());
    Ok(())
}

fn serve(map: PathBuf, config: PathBuf, addr: SocketAddr, backend: Option<String>, scenario: PathBuf) -> Result<()> {
    let mut cfg = PipelineConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(url) = backend {
        cfg.backend = BackendMode::Http;
        cfg.backend_url = Some(url);
    }
    let opts = SplatMapOptions { opacity_floor: cfg.opacity_floor, robot_radius: cfg.robot_radius };
    let map = load_ply_with(&map, opts).with_context(|| format!("loading {}", map.display()))?;
    let dir = ScenarioDir::open(&scenario)?;
    let source: Box<dyn FrameSource> = match (cfg.backend, &cfg.backend_url) {
        (BackendMode::Http, Some(url)) => Box::new(HttpSource::new(
            dir,
            url.clone(),
            Duration::from_millis(cfg.backend_timeout_ms),
            cfg.n_samples,
            (cfg.intrinsics.width, cfg.intrinsics.height),
        )),
        _ => Box::new(FilesSource::new(dir)),
    };
    let service = Service::start(ServeOptions::new(cfg, map, addr), source)?;
    eprintln!("listening on http://{}", service.addr());
    service.run_until_interrupted()?;
    Ok(())
}
