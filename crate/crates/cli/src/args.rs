use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nrsfm-uq", version, about = "Non-rigid shape recovery with element-wise uncertainty")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Input directory used to resolve default file names.
    #[arg(long, global = true, value_name = "DIR")]
    pub input: Option<PathBuf>,

    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Track noise level; a comma-separated list sweeps it for `mc`.
    #[arg(long, global = true, value_name = "F64", value_delimiter = ',')]
    pub sigma0: Vec<f64>,

    #[arg(long, global = true, value_name = "F64")]
    pub mu: Option<f64>,

    #[arg(long, global = true, value_name = "N")]
    pub max_iters: Option<usize>,

    #[arg(long, global = true, value_name = "F64")]
    pub tol: Option<f64>,

    /// Use momentum in the proximal solver.
    #[arg(long, global = true)]
    pub accelerate: bool,

    #[arg(long, global = true, value_name = "U32")]
    pub trials: Option<u32>,

    /// Signed percent applied to the selected rank; comma-separated for a sweep.
    #[arg(long, global = true, value_name = "I32", value_delimiter = ',', allow_negative_numbers = true)]
    pub rank_override: Vec<i32>,

    #[arg(long, global = true, value_name = "U32")]
    pub segments: Option<u32>,

    #[arg(long, global = true, value_name = "F64")]
    pub overlap: Option<f64>,

    /// Worker threads (default: all available cores).
    #[arg(long, global = true, value_name = "U32")]
    pub parallel: Option<u32>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub frames: Option<usize>,

    #[arg(long)]
    pub points: Option<usize>,

    /// Rank of the synthetic deformation.
    #[arg(long = "true-rank")]
    pub true_rank: Option<usize>,

    /// Camera revolutions over the sequence.
    #[arg(long)]
    pub revolutions: Option<f64>,

    /// Map coordinates into [0, 1].
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrackArgs {
    /// Tracks CSV (default: <input>/tracks.csv).
    #[arg(long, value_name = "PATH")]
    pub tracks: Option<PathBuf>,

    /// Rotations JSON (default: <input>/rotations.json).
    #[arg(long, value_name = "PATH")]
    pub rotations: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene.
    Synth {
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Nuclear-norm shape recovery.
    Solve {
        #[command(flatten)]
        io: TrackArgs,
    },
    /// Noise-aware rank selection of a recovered shape.
    RankSearch {
        #[command(flatten)]
        io: TrackArgs,

        /// Solver output to project (solved from the tracks when omitted).
        #[arg(long, value_name = "PATH")]
        shape: Option<PathBuf>,
    },
    /// Closed-form uncertainty of a recovered shape.
    Uq {
        /// Shape CSV in either layout (default: <input>/s_sharp.csv).
        #[arg(long, value_name = "PATH")]
        shape: Option<PathBuf>,

        /// Factor rank (default: numerical rank of the shape).
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Monte Carlo calibration on a synthetic scene.
    Mc {
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Segmented recovery with uncertainty-weighted fusion.
    Fuse {
        #[command(flatten)]
        io: TrackArgs,
    },
    /// Re-render tables and data files from Monte Carlo reports.
    Report {
        /// One or more mc_report.json files.
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
    },
}
