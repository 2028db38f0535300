use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use rigsfm::scene::io::{parse_image_poses, read_state, read_view_graph, IMAGE_POSES_FILE};
use rigsfm::synth::{generate_scene, pose_errors, write_scene, SceneConfig};
use rigsfm::translation::AblationKind;
use rigsfm_cli::ablate::{ablate, write_ablation};
use rigsfm_cli::config::{read_json_file, resolve};
use rigsfm_cli::{solve, PipelineConfig, PipelineError};

/// Global structure-from-motion for multi-camera rigs.
///
/// Any configuration key can be overridden with `--key=value` or
/// `--key value`, e.g. `--rotation.sigma_deg=3` or `--stages.skip ba`.
#[derive(Debug, Parser)]
#[command(name = "rigsfm", version)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    /// Log level on stderr (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimates rig, unit poses and points from a view graph.
    Solve {
        graph: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Generates a synthetic view graph and its ground truth.
    Synth {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compares estimated camera poses with ground truth.
    Evaluate {
        estimate: PathBuf,
        truth: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Runs the six translation objectives against ground truth.
    Ablate {
        graph: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

const OWN_FLAGS: [&str; 6] = ["--threads", "--log", "--output", "--config", "--truth", "--help"];

/// Splits configuration overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let key = a.split('=').next().unwrap_or_default();
        let is_override = a.starts_with("--") && a.len() > 2 && !OWN_FLAGS.contains(&key) && key != "--version";
        if !is_override {
            plain.push(a);
        } else if a.contains('=') {
            overrides.push(a);
        } else {
            match it.next_if(|n| !n.starts_with("--")) {
                Some(v) => overrides.push(format!("{a}={v}")),
                None => overrides.push(a),
            }
        }
    }
    (plain, overrides)
}

fn config_value(path: &Option<PathBuf>) -> Result<Option<serde_json::Value>, PipelineError> {
    path.as_deref()
        .map(read_json_file)
        .transpose()
        .map_err(|e| PipelineError::Input(e.to_string()))
}

fn pipeline_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    resolve(config_value(path)?, overrides).map_err(|e| PipelineError::Input(e.to_string()))
}

fn read_poses(dir: &Path) -> Result<std::collections::BTreeMap<rigsfm::scene::ImageId, rigsfm::scene::CameraPose>, PipelineError> {
    let path = dir.join(IMAGE_POSES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    parse_image_poses(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn run(cli: Cli, overrides: &[String]) -> Result<(), PipelineError> {
    match cli.command {
        Command::Solve { graph, output, config } => {
            let config = pipeline_config(&config, overrides)?;
            let run = solve(&graph, &config, &output)?;
            info!(
                "solved {} images ({} dropped), {} points -> {}",
                run.graph.images.len(),
                run.dropped_images,
                run.state.map(|s| s.points.len()).unwrap_or(0),
                output.display()
            );
        }
        Command::Synth { config, output } => {
            let cfg: SceneConfig =
                resolve(config_value(&config)?, overrides).map_err(|e| PipelineError::Input(e.to_string()))?;
            let scene = generate_scene(&cfg).map_err(|e| PipelineError::Input(e.to_string()))?;
            write_scene(&output, &scene).map_err(|e| PipelineError::Internal(e.to_string()))?;
            info!(
                "wrote {} images, {} edges, {} tracks to {}",
                scene.graph.images.len(),
                scene.graph.edges.len(),
                scene.graph.tracks.len(),
                output.display()
            );
        }
        Command::Evaluate { estimate, truth, output } => {
            let report = pose_errors(&read_poses(&estimate)?, &read_poses(&truth)?)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            std::fs::write(&output, report.to_json() + "\n")
                .map_err(|e| PipelineError::Internal(format!("{}: {e}", output.display())))?;
            print!("{}", report.to_table());
        }
        Command::Ablate { graph, truth, output, config } => {
            let config = pipeline_config(&config, overrides)?;
            let g = read_view_graph(&graph).map_err(|e| PipelineError::Input(e.to_string()))?;
            let t = read_state(&truth, &g).map_err(|e| PipelineError::Input(format!("{}: {e}", truth.display())))?;
            let rows = ablate(&g, &t, &config, None, &AblationKind::ALL)?;
            write_ablation(&output, &rows)?;
            info!("wrote {} rows to {}", rows.len(), output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .target(env_logger::Target::Stderr)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    let outcome = std::panic::catch_unwind(|| run(cli, &overrides));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            error!("{e}");
            eprintln!("{}", e.record(&[]));
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("{}", PipelineError::Internal("panic".into()).record(&[]));
            ExitCode::from(4)
        }
    }
}
