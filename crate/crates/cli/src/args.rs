use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bevnav",
    version,
    about = "Topo-metric map navigation agent: data generation, training and evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for episode generation and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural world (JSON).
    GenWorld {
        /// Number of rooms.
        #[arg(long)]
        rooms: Option<usize>,
    },
    /// Generate instruction-following episodes in a world (JSON).
    GenEpisodes {
        /// World file the episodes are generated in.
        #[arg(long)]
        world: PathBuf,
        /// Number of episodes.
        #[arg(long, default_value_t = 20)]
        count: u64,
        /// Expert path style.
        #[arg(long, value_enum, default_value_t = KindArg::Goal)]
        kind: KindArg,
    },
    /// Pre-train with the masked-word, action-prediction and masked-cell tasks.
    Pretrain {
        #[command(flatten)]
        data: Data,
        /// Optimizer steps; overrides the configuration.
        #[arg(long)]
        steps: Option<usize>,
        /// Also write a checkpoint every this many steps.
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Fine-tune a checkpoint with teacher and student forcing.
    Finetune {
        #[command(flatten)]
        data: Data,
        /// Checkpoint to start from; it also fixes the model shape.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optimizer steps; overrides the configuration.
        #[arg(long)]
        steps: Option<usize>,
        /// Weight of the teacher-forcing loss, in [0, 1].
        #[arg(long)]
        lambda: Option<f64>,
        /// Pseudo label supervising student forcing.
        #[arg(long, value_enum)]
        label: Option<LabelArg>,
    },
    /// Roll out a policy over episode files and score it.
    Eval {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Dump the metric map and the topological graph after some decisions.
    ExportMap {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Index of the episode in the episode file.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Decisions taken before the export.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Print the header of a checkpoint, world, episode or map file.
    Inspect {
        /// File to describe.
        path: PathBuf,
    },
}

/// World files and the episode files generated in them, paired in order.
#[derive(Debug, Args)]
pub struct Data {
    /// World file; repeat for several worlds.
    #[arg(long = "world", value_name = "WORLD", required = true)]
    pub worlds: Vec<PathBuf>,
    /// Episode file of the world at the same position; repeat likewise.
    #[arg(long = "episodes", required = true)]
    pub episodes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Who chooses the actions.
    #[arg(long, value_enum, default_value_t = PolicyArg::Model)]
    pub policy: PolicyArg,
    /// Model checkpoint, required by the model policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// Expert follows the shortest path.
    Goal,
    /// Expert detours through extra waypoints.
    Fidelity,
    /// Alternate goal and fidelity episodes.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Greedy decisions of a trained checkpoint.
    Model,
    /// Uniform choice among stopping and the neighbouring nodes.
    Random,
    /// Replays the expert path, then stops.
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelArg {
    /// Step toward the target along the shortest route.
    Goal,
    /// Step that keeps the walk closest to the expert path.
    Fidelity,
}
