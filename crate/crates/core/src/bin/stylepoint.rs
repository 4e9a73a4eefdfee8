use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stylepoint::pipeline::{self, PipelineConfig};
use stylepoint::synth::SceneKind;
use stylepoint::train::{LossRecord, Stage};

#[derive(Parser)]
#[command(name = "stylepoint", version, about = "Restyle a photo with depth and render it from nearby viewpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: image.png, depth.dpth, camera.json, scene.json.
    MakeScene {
        #[arg(long, default_value = "boxes")]
        kind: SceneKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
    /// Run both training stages.
    Train {
        #[command(flatten)]
        common: Common,
        /// Tiny end-to-end run: scene, both stages and a short trajectory.
        #[arg(long)]
        smoke: bool,
    },
    /// Render the configured trajectory to PNG frames with a manifest.
    Stylize3d {
        #[command(flatten)]
        common: Common,
    },
    /// Render the trajectory and write the warp-consistency report.
    EvalConsistency {
        #[command(flatten)]
        common: Common,
    },
    /// Serve frames over HTTP for the viewer.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn progress(stage: Stage, r: &LossRecord) {
    if r.iteration % 50 == 0 {
        log::info!("stage {} iteration {}: total {:.5}", stage as u8, r.iteration, r.total);
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STYLEPOINT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("STYLEPOINT_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads()?;
    match Cli::parse().command {
        Command::MakeScene { kind, seed, size, out } => {
            let paths = pipeline::make_scene(kind, seed, size, &out)?;
            println!("{}", paths.image.display());
        }
        Command::Train { common, smoke } => {
            if smoke {
                let out = common.out.clone().unwrap_or_else(|| PathBuf::from("smoke"));
                let cfg = pipeline::smoke_config(out, common.seed.unwrap_or(0));
                let manifest = pipeline::smoke_run(&cfg, progress)?;
                println!("{} frames in {}", manifest.frames.len(), cfg.output.join("frames").display());
            } else {
                let cfg = common.load()?;
                pipeline::train(&cfg, progress)?;
                println!("{}", cfg.output.join(pipeline::STAGE2_CHECKPOINT).display());
            }
        }
        Command::Stylize3d { common } => {
            let cfg = common.load()?;
            let manifest = pipeline::stylize3d(&cfg)?;
            println!("{} frames in {}", manifest.frames.len(), cfg.output.join("frames").display());
        }
        Command::EvalConsistency { common } => {
            let report = pipeline::eval_consistency(&common.load()?)?;
            println!("{}", report.to_json());
        }
        Command::Serve { common, port } => {
            let session = Arc::new(common.load()?.session()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(pipeline::service::serve(session, SocketAddr::from(([127, 0, 0, 1], port))))?;
        }
    }
    Ok(())
}
