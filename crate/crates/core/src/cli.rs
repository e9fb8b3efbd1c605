//! `semslam` command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::eval::{ape, landmark_prf, ApeStats, MatchConfig, PrfReport, SemanticRule};
use crate::io::{self, IoError, TrajectoryRecord};
use crate::pipeline::{oracle_for, run, OracleMode, PipelineConfig, PipelineError};
use crate::simulator::{simulate, SimConfig, SimError};

#[derive(Debug, Parser)]
#[command(name = "semslam", version, about = "Semantic object-SLAM backend")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Scripted,
    Http,
    None,
}

impl From<OracleArg> for OracleMode {
    fn from(o: OracleArg) -> Self {
        match o {
            OracleArg::Scripted => OracleMode::Scripted,
            OracleArg::Http => OracleMode::Http,
            OracleArg::None => OracleMode::None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Sim {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        objects: usize,
        #[arg(long, default_value_t = 3)]
        groups: usize,
        #[arg(long, default_value_t = 80)]
        frames: usize,
        /// Simulator settings (JSON); flags override seed and sizes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline over a frames file.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        oracle: Option<OracleArg>,
        #[arg(long)]
        oracle_url: Option<String>,
        /// Ground-truth world for the scripted oracle; defaults to
        /// `world.json` next to the dataset.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out_map: Option<PathBuf>,
        #[arg(long)]
        out_traj: Option<PathBuf>,
        #[arg(long)]
        edit_log: Option<PathBuf>,
    },
    /// Score a map and trajectory against ground truth.
    Eval {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, requires = "gt_traj")]
        traj: Option<PathBuf>,
        #[arg(long, requires = "traj")]
        gt_traj: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        match_dist: f64,
        /// Use embedding similarity at this threshold instead of category tokens.
        #[arg(long)]
        match_embedding: Option<f64>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::SchemaViolation { .. } => CliError::Input(e.to_string()),
            IoError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::OutOfOrderFrame { .. }
            | PipelineError::TimestampRegression { .. }
            | PipelineError::InvalidFrame { .. } => CliError::Input(e.to_string()),
            PipelineError::Graph { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const WORLD_FILE: &str = "world.json";
pub const GT_TRAJ_FILE: &str = "gt_traj.csv";
pub const ODOM_TRAJ_FILE: &str = "odom_traj.csv";
pub const SIM_CONFIG_FILE: &str = "sim_config.json";

/// Writes frames, world, ground-truth and dead-reckoned trajectories and
/// the effective simulator settings into `out`.
pub fn write_sim_dataset(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let data = simulate(cfg)?;
    create_dir(out)?;
    io::write_frames(&out.join(FRAMES_FILE), &data.frames)?;
    io::write_world(&out.join(WORLD_FILE), &data.world)?;
    let records = |poses: &[crate::geometry::Pose]| -> Vec<TrajectoryRecord> {
        poses.iter().zip(&data.timestamps).map(|(p, t)| TrajectoryRecord::from_pose(*t, p)).collect()
    };
    io::write_trajectory(&out.join(GT_TRAJ_FILE), &records(&data.trajectory.gt))?;
    io::write_trajectory(&out.join(ODOM_TRAJ_FILE), &records(&data.trajectory.dead_reckoning()))?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(out.join(SIM_CONFIG_FILE), text + "\n").map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub prf: PrfReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ape: Option<ApeStats>,
    #[serde(rename = "match")]
    pub match_config: MatchConfig,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim { seed, objects, groups, frames, config, out } => {
            let mut cfg: SimConfig = match &config {
                Some(p) => read_config(p)?,
                None => SimConfig::default(),
            };
            cfg.seed = seed;
            cfg.n_objects = objects;
            cfg.n_groups = groups;
            cfg.n_frames = frames;
            write_sim_dataset(&cfg, &out)
        }
        Command::Run { dataset, config, oracle, oracle_url, world, out_map, out_traj, edit_log } => {
            let mut cfg: PipelineConfig = match &config {
                Some(p) => read_config(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(o) = oracle {
                cfg.oracle = o.into();
            }
            if oracle_url.is_some() {
                cfg.oracle_url = oracle_url;
            }
            cfg.validate()?;
            let frames = io::read_frames(&dataset)?;
            let world = match cfg.oracle {
                OracleMode::Scripted => {
                    let path =
                        world.unwrap_or_else(|| dataset.parent().unwrap_or_else(|| Path::new(".")).join(WORLD_FILE));
                    Some(io::read_world(&path)?)
                }
                _ => None,
            };
            let oracle = oracle_for(&cfg, world)?;
            let result = run(&frames, &cfg, oracle)?;
            if let Some(p) = out_map {
                io::write_map(&p, &result.map)?;
            }
            if let Some(p) = out_traj {
                io::write_trajectory(&p, &result.trajectory)?;
            }
            if let Some(p) = edit_log {
                io::write_edit_log(&p, &result.edit_log)?;
            }
            log::info!(
                "{} frames, {} landmarks exported, {} edits",
                frames.len(),
                result.map.landmarks.len(),
                result.edit_log.edits.len()
            );
            Ok(())
        }
        Command::Eval { map, world, traj, gt_traj, match_dist, match_embedding, json } => {
            if match_dist.is_nan() || match_dist <= 0.0 {
                return Err(CliError::Input("--match-dist must be positive".into()));
            }
            let semantic = match match_embedding {
                Some(tau) if (-1.0..=1.0).contains(&tau) => SemanticRule::Embedding { tau },
                Some(_) => return Err(CliError::Input("--match-embedding must lie in [-1, 1]".into())),
                None => SemanticRule::ExactCategory,
            };
            let match_config = MatchConfig { distance: match_dist, semantic };
            let map = io::read_map(&map)?;
            let world = io::read_world(&world)?;
            let prf = landmark_prf(&map, &world, &match_config);
            let ape = match (traj, gt_traj) {
                (Some(a), Some(b)) => {
                    let est = io::read_trajectory(&a)?;
                    let gt = io::read_trajectory(&b)?;
                    Some(ape(&est, &gt).map_err(|e| CliError::Input(e.to_string()))?)
                }
                _ => None,
            };
            let out = EvalOutput { prf, ape, match_config };
            if json {
                println!("{}", serde_json::to_string(&out).expect("metrics serialize"));
            } else {
                println!(
                    "precision {:.4}  recall {:.4}  f1 {:.4}  landmarks {}  false positives {}  ground truth {}",
                    prf.precision, prf.recall, prf.f1, prf.est_count, prf.false_pos, prf.gt_count
                );
                if let Some(a) = ape {
                    println!("ape rmse {:.4} m  mean {:.4}  median {:.4}  max {:.4}", a.rmse, a.mean, a.median, a.max);
                }
            }
            Ok(())
        }
    }
}
