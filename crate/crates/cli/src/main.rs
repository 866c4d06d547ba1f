mod commands;
mod config;
mod data;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Overrides;

/// Usage errors exit with 2, operational errors with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Op(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Op(m) => write!(f, "error: {m}"),
        }
    }
}

macro_rules! operational {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Op(e.to_string())
            }
        }
    )*};
}

operational!(
    gsfix::sceneio::SceneIoError,
    gsfix::enhance::EnhanceError,
    gsfix::evalx::EvalError,
    gsfix::fixer::FixError,
    gsfix::scene::SceneError,
    gsfix::synth::SynthError
);

impl From<gsfix::pipeline::PipelineError> for CliError {
    fn from(e: gsfix::pipeline::PipelineError) -> Self {
        match e {
            gsfix::pipeline::PipelineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            e => CliError::Op(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "gsfix", version, about = "Gaussian splatting reconstruction and fixer-guided enhancement")]
pub struct Cli {
    /// Worker threads; results do not depend on this. Default: available
    /// parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML config file. Precedence: defaults < file < $GSFIX_FIXER < flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.enhance.iterations=24`.
    /// Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct FixerArgs {
    /// Builtin fixer backend: identity, median-denoise, oracle.
    #[arg(long)]
    pub fixer: Option<String>,
    /// Remote fixer: `tcp://host:port` or a command to spawn. Takes
    /// precedence over --fixer and $GSFIX_FIXER.
    #[arg(long)]
    pub fixer_endpoint: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Transport {
    Stdio,
    Tcp,
}

#[derive(Subcommand)]
pub enum Command {
    /// Materialize synthetic scenes as dataset directories.
    Synth {
        /// Output directory; one subdirectory per scene.
        #[arg(long)]
        out: PathBuf,
        /// Spec files (TOML). Default: the bundled suite.
        #[arg(long)]
        spec: Vec<PathBuf>,
        /// Only this index of the bundled suite.
        #[arg(long, conflicts_with = "spec")]
        scene: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build scenes from points and input views, one per 20-frame chunk.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Enhance an existing scene through a fixer.
    Enhance {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corrupt the scene with the `degrade` profile first.
        #[arg(long)]
        degrade: bool,
        /// Restrict input views to frames START..END.
        #[arg(long, value_name = "START..END")]
        frames: Option<String>,
        /// Write fixer inputs and outputs as PNGs.
        #[arg(long)]
        dump_artifacts: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        fixer: FixerArgs,
    },
    /// Reconstruct, fix and enhance every chunk.
    GenrePlus {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_artifacts: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        fixer: FixerArgs,
    },
    /// Render a scene along a trajectory to PNGs.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Pose file; defaults to the dataset's when --data is given.
        #[arg(long, required_unless_present = "data")]
        poses: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Lateral shift in meters, positive to the right.
        #[arg(long, allow_hyphen_values = true)]
        shift: Option<f64>,
        /// Behavior rollout: brake, accelerate, lane-change, swerve.
        #[arg(long)]
        behavior: Option<String>,
        /// Behavior lateral offset in meters.
        #[arg(long, allow_hyphen_values = true)]
        offset: Option<f64>,
        /// Behavior progress multiplier.
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        ramp_frames: Option<u32>,
        #[arg(long)]
        start_frame: Option<u32>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score scenes against ground truth: interpolation and lateral shifts.
    Evaluate {
        /// Scene file; repeat for chunked runs, in chunk order.
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scene id in the report. Default: the dataset directory name.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the protocol conformance suite against a fixer.
    FixerCheck {
        /// Serve this builtin backend in process and check it.
        #[arg(long, conflicts_with = "endpoint")]
        backend: Option<String>,
        /// `tcp://host:port` or a command to spawn. Default: $GSFIX_FIXER.
        #[arg(long)]
        endpoint: Option<String>,
        /// Require payloads to come back unchanged (implied for identity).
        #[arg(long)]
        expect_identity: bool,
        #[arg(long, default_value_t = 30.0)]
        timeout_s: f64,
    },
    /// Serve a builtin backend over the fixer protocol.
    FixerServe {
        #[arg(long, default_value = "identity")]
        backend: String,
        #[arg(long, value_enum, default_value = "stdio")]
        transport: Transport,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// TCP port; 0 picks a free one. The bound address is printed.
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
    /// Print the flag and config-key reference as Markdown.
    ConfigReference,
}

impl ConfigArgs {
    pub fn overrides(&self, fixer: Option<&FixerArgs>) -> Overrides {
        Overrides {
            sets: self.sets.clone(),
            seed: self.seed,
            fixer: fixer.and_then(|f| f.fixer.clone()),
            fixer_endpoint: fixer.and_then(|f| f.fixer_endpoint.clone()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("usage error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Op(_) => 1,
            })
        }
    }
}
