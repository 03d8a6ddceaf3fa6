//! `graspbox`: demonstrations, detector, training, evaluation and the
//! prompt service from the command line.

mod run;

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "graspbox", version, about = "Grasp-box-conditioned diffusion policies in a planar grasping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options that pick the simulator configuration.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct SimArgs {
    /// Catalog TOML; the bundled catalog when omitted.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Render width and height in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
}

/// Which episodes an evaluation runs.
#[derive(clap::Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub family: String,
    /// Comma-separated placement ids; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub placements: Option<Vec<u32>>,
    /// Comma-separated target item ids; every candidate when omitted.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<u32>>,
    #[arg(long, default_value_t = 40)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// oracle, trained or prompt.
    #[arg(long, default_value = "oracle")]
    pub source: String,
    /// Detector checkpoint, required with `--source trained`.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub max_steps: usize,
    /// Actions executed per predicted chunk.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Episodes simulated in lockstep.
    #[arg(long, default_value_t = 40)]
    pub batch: usize,
    /// Report printed to stdout: text, csv or plot.
    #[arg(long, default_value = "text")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset.
    DemoGen {
        #[arg(long)]
        family: String,
        /// Episodes per condition, overriding the collection protocol.
        #[arg(long)]
        counts: Option<usize>,
        /// Divide every protocol count by this (rounded up).
        #[arg(long, default_value_t = 1)]
        divisor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        max_steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Keep only `k` episodes of a held-out item.
    FewshotSplit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: u32,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the grasp-box detector on sampled simulator frames.
    DetectorTrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        frames: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// mAP@0.5 of a detector on fresh held-out frames.
    DetectorEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long, default_value_t = 1_000_003)]
        seed: u64,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Replace a dataset's boxes with detector output.
    Autolabel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default training config as TOML.
    DefaultConfig,
    /// Evaluate one policy (one or more seeds) and write reports.
    Eval {
        /// Policy checkpoints, one per training seed.
        #[arg(long, required = true, num_args = 1..)]
        policy: Vec<PathBuf>,
        #[arg(long, default_value = "policy")]
        name: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate two arms on one shared episode grid.
    Ablate {
        #[arg(long, required = true, num_args = 1..)]
        first: Vec<PathBuf>,
        #[arg(long, default_value = "DP")]
        first_name: String,
        #[arg(long, required = true, num_args = 1..)]
        second: Vec<PathBuf>,
        #[arg(long, default_value = "BoxConditioned")]
        second_name: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Build a few-shot split, train both arms on it, evaluate the held-out item.
    Fewshot {
        /// Full dataset containing the held-out item.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: u32,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Training config shared by both arms.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Re-run an evaluation from its seed manifest and compare the metrics.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Serve the prompt API.
    Serve {
        /// `name=path` pairs; a bare path is named after its file stem.
        #[arg(long, required = true, num_args = 1..)]
        policy: Vec<String>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 200)]
        max_steps: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Pause after each streamed frame.
        #[arg(long, default_value_t = 0)]
        frame_delay_ms: u64,
        #[command(flatten)]
        sim: SimArgs,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::DemoGen {
            family,
            counts,
            divisor,
            seed,
            max_steps,
            out,
            sim,
        } => run::demo_gen(&family, counts, divisor, seed, max_steps, &out, &sim),
        Command::FewshotSplit { data, heldout, k, out } => run::fewshot_split(&data, heldout, k, &out).map(|_| ()),
        Command::DetectorTrain {
            out,
            frames,
            steps,
            seed,
            sim,
        } => run::detector_train(&out, frames, steps, seed, &sim),
        Command::DetectorEval { model, frames, seed, sim } => run::detector_eval(&model, frames, seed, &sim),
        Command::Autolabel { model, data, out } => run::autolabel(&model, &data, &out),
        Command::Train { config, seed, out } => run::train(&config, seed, out),
        Command::DefaultConfig => {
            print!("{}", toml::to_string(&graspbox_core::train::TrainConfig::default())?);
            Ok(())
        }
        Command::Eval { policy, name, eval } => run::eval(&name, &policy, &eval),
        Command::Ablate {
            first,
            first_name,
            second,
            second_name,
            eval,
        } => run::ablate((&first_name, &first), (&second_name, &second), &eval, "ablate"),
        Command::Fewshot {
            data,
            heldout,
            k,
            config,
            seeds,
            eval,
        } => run::fewshot(&data, heldout, k, &config, seeds, &eval),
        Command::Replay { manifest } => run::replay(&manifest),
        Command::Serve {
            policy,
            detector,
            addr,
            max_steps,
            k,
            frame_delay_ms,
            sim,
        } => run::serve(&policy, detector.as_deref(), addr, max_steps, k, frame_delay_ms, &sim),
    }
}
