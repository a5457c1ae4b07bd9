//! `lit`: command-line driver for training, conversion, distillation,
//! sampling and cost measurements.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error class that maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "lit", version, about = "Linear diffusion transformer experiments at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Clone)]
pub struct SeedArgs {
    /// Seed for fresh parameter initialization
    #[arg(long, default_value_t = 0)]
    pub seed_init: u64,
    /// Seed for dataset generation and batch order
    #[arg(long, default_value_t = 1)]
    pub seed_data: u64,
    /// Seed for timesteps, diffusion noise and label dropout
    #[arg(long, default_value_t = 2)]
    pub seed_noise: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Optimizer steps; the reference recipe trains teachers for 200K-800K
    /// iterations, scaled down proportionally here
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// AdamW learning rate (reference recipe: 1e-4, weight decay 0)
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
    /// Probability of training on the null label, for classifier-free guidance
    #[arg(long, default_value_t = 0.1)]
    pub label_dropout: f64,
    /// Comma-separated steps at which to write checkpoints
    #[arg(long, value_delimiter = ',')]
    pub milestones: Vec<usize>,
    /// Numeric precision of training
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a softmax teacher with the simple loss plus the variational term
    TrainTeacher {
        /// Model preset name (e.g. dit-micro, dit-s) or path to a JSON model config
        #[arg(long, default_value = "dit-micro")]
        config: String,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Build a linear student from a teacher checkpoint by weight inheritance
    Convert {
        /// Teacher checkpoint
        #[arg(long)]
        teacher: PathBuf,
        /// Student preset name or JSON model config (reference students use 2-4 heads and DWC kernel 5)
        #[arg(long, default_value = "lit-micro")]
        config: String,
        /// JSON inheritance spec; the default copies everything except the
        /// attention projections, which are initialized randomly
        #[arg(long)]
        inherit_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed_init: u64,
        /// Output directory for student.ckpt and conversion_report.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student with L_simple + lambda1 L_noise + lambda2 L_var
    TrainStudent {
        /// Initial student checkpoint (from `convert`); omit for random init
        #[arg(long)]
        student: Option<PathBuf>,
        /// Student preset or JSON config when no student checkpoint is given
        #[arg(long, default_value = "lit-micro")]
        config: String,
        /// Frozen teacher checkpoint; required when lambda1 + lambda2 > 0
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Noise-distillation weight (reference setting 0.5)
        #[arg(long, default_value_t = 0.5)]
        lambda1: f64,
        /// Variance-distillation weight (reference setting 0.05)
        #[arg(long, default_value_t = 0.05)]
        lambda2: f64,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Train one student per cell of the distillation-weight grid
    DistillGrid {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Teacher for the alternate-teacher cell; defaults to --teacher
        #[arg(long)]
        alt_teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        eval_size: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Draw class-conditional samples with the ancestral sampler
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Comma-separated labels; default cycles through the classes
        #[arg(long, value_delimiter = ',')]
        labels: Vec<usize>,
        /// Classifier-free guidance scale; 1 disables guidance
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        /// Sampling steps (reference setting 250)
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        seed_noise: u64,
        /// Use the EMA weights stored in the checkpoint
        #[arg(long)]
        ema: bool,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Output image (binary PGM/PPM)
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one attention layer and report its MAC counts
    Bench {
        #[command(flatten)]
        layer: LayerArgs,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[command(flatten)]
        timing: TimingArgs,
        /// Optional CSV output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep head counts and write a cost CSV
    SweepHeads {
        #[command(flatten)]
        layer: LayerArgs,
        /// Comma-separated head counts
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,6,48,96")]
        heads_list: Vec<usize>,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print closed-form MAC counts of softmax and linear attention
    Gmacs {
        #[arg(long, default_value_t = 256)]
        tokens: u64,
        #[arg(long, default_value_t = 384)]
        dim: u64,
        #[arg(long, default_value_t = 2)]
        heads: u64,
        /// DWC kernel size
        #[arg(long, default_value_t = 5)]
        kernel: u64,
        /// Also run the instrumented counter
        #[arg(long)]
        count: bool,
    },
    /// Run the finite-difference gradient suite in 64-bit
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Mean pairwise cosine similarity of per-head attention maps
    HeadSimilarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Diffusion timestep at which to inspect the maps
        #[arg(long, default_value_t = 500)]
        timestep: usize,
        #[arg(long, default_value_t = 2)]
        seed_noise: u64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct LayerArgs {
    /// Attention variant
    #[arg(long, default_value = "linear_relu_dwc")]
    pub variant: String,
    /// Token count N
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    /// Width D
    #[arg(long, default_value_t = 384)]
    pub dim: usize,
    /// DWC kernel size
    #[arg(long, default_value_t = 5)]
    pub kernel: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TimingArgs {
    /// Timed repetitions
    #[arg(long, default_value_t = 30)]
    pub trials: usize,
    /// Discarded warm-up runs
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
