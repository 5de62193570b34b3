use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcgsm_cli::commands::{self, DeadLeavesArgs, EvalArgs, LpStatArgs, SampleArgs, TrainArgs};

/// Causal random field image models: training, sampling, and evaluation.
#[derive(Parser)]
#[command(name = "mcgsm", version, about)]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multiscale model on an image corpus.
    Train(TrainCli),
    /// Draw images from a trained model.
    Sample(SampleCli),
    /// Estimate cross-entropy rates and the cross-MIR on held-out images.
    Eval(EvalCli),
    /// Generate dead-leaves occlusion images.
    Deadleaves(DeadLeavesCli),
    /// Replace an image's phase spectrum with white-noise phases.
    Scramble(ScrambleCli),
    /// Fit L_p-spherical models to pairwise derivative-filter responses.
    Lpstat(LpStatCli),
    /// Superpixel pyramid decomposition and reconstruction.
    Pyramid(PyramidCli),
}

#[derive(Args)]
struct TrainCli {
    /// Corpus: one image file or a directory of .img/.pgm files.
    #[arg(long)]
    corpus: PathBuf,
    /// Output model file (JSON).
    #[arg(long)]
    output: PathBuf,
    /// Pyramid depth M; M+1 conditional models are trained.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Mixture components per model.
    #[arg(long, default_value_t = 8)]
    components: usize,
    /// Scales per component.
    #[arg(long, default_value_t = 4)]
    scales: usize,
    /// Rows above the predicted pixel in the coarse causal mask.
    #[arg(long, default_value_t = 3)]
    coarse_rows: usize,
    /// Width of the coarse causal mask (odd).
    #[arg(long, default_value_t = 7)]
    coarse_width: usize,
    /// Superpixel window at the finer scales (odd).
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Training pairs per scale.
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    /// Quasi-Newton iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Fraction of pairs held out for early stopping.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Number of images to draw.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Burn-in margin; defaults to eight times the coarse mask height.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Boundary noise standard deviation; defaults to 0.1x the coarse-scale
    /// pixel standard deviation recorded at training time.
    #[arg(long)]
    boundary_sigma: Option<f64>,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Optional JSON report destination.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pairs_per_image: usize,
    #[arg(long, default_value_t = 100)]
    bootstrap_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeadLeavesCli {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 2.0)]
    r_min: f64,
    #[arg(long, default_value_t = 64.0)]
    r_max: f64,
    /// Radius density exponent (density proportional to r^-exponent).
    #[arg(long, default_value_t = 3.0)]
    exponent: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScrambleCli {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LpStatCli {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated vertical offsets in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 25, 49, 73, 97])]
    offsets: Vec<usize>,
    /// Gaussian derivative filter width in pixels.
    #[arg(long, default_value_t = 1.5)]
    sigma_f: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PyramidCli {
    #[command(subcommand)]
    direction: PyramidDirection,
}

#[derive(Subcommand)]
enum PyramidDirection {
    /// Decompose an image into detail levels plus the coarse image.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Rebuild an image from a forward decomposition.
    Inverse {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::Train(a) => commands::cmd_train(&TrainArgs {
            corpus: a.corpus,
            output: a.output,
            depth: a.depth,
            components: a.components,
            scales: a.scales,
            coarse_rows: a.coarse_rows,
            coarse_width: a.coarse_width,
            window: a.window,
            samples: a.samples,
            max_iters: a.max_iters,
            validation_fraction: a.validation_fraction,
            seed: a.seed,
        }),
        Command::Sample(a) => commands::cmd_sample(&SampleArgs {
            model: a.model,
            output_dir: a.output_dir,
            height: a.height,
            width: a.width,
            count: a.count,
            seed: a.seed,
            burn_in: a.burn_in,
            boundary_sigma: a.boundary_sigma,
        }),
        Command::Eval(a) => commands::cmd_eval(&EvalArgs {
            model: a.model,
            corpus: a.corpus,
            output: a.output,
            pairs_per_image: a.pairs_per_image,
            bootstrap_reps: a.bootstrap_reps,
            seed: a.seed,
        })
        .map(|_| ()),
        Command::Deadleaves(a) => commands::cmd_deadleaves(&DeadLeavesArgs {
            output_dir: a.output_dir,
            count: a.count,
            height: a.height,
            width: a.width,
            r_min: a.r_min,
            r_max: a.r_max,
            exponent: a.exponent,
            noise_sigma: a.noise_sigma,
            seed: a.seed,
        }),
        Command::Scramble(a) => commands::cmd_scramble(&a.input, &a.output, a.seed),
        Command::Lpstat(a) => commands::cmd_lpstat(&LpStatArgs {
            corpus: a.corpus,
            offsets: a.offsets,
            sigma_f: a.sigma_f,
            output: a.output,
        }),
        Command::Pyramid(a) => match a.direction {
            PyramidDirection::Forward { input, depth, output_dir } => {
                commands::cmd_pyramid_forward(&input, depth, &output_dir)
            }
            PyramidDirection::Inverse { input_dir, output } => {
                commands::cmd_pyramid_inverse(&input_dir, &output)
            }
        },
    }
}

/// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mcgsm::Error>() {
        Some(mcgsm::Error::InvalidParameter(_)) => 2,
        Some(mcgsm::Error::Numerical { .. }) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
