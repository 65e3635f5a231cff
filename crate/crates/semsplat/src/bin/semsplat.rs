//! Thin command-line front end; all behavior lives in the library.

use clap::{Parser, Subcommand};
use semsplat::commands;
use semsplat::config::PipelineConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "semsplat", version, about = "Multi-channel Gaussian splatting with online semantic mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D + feature sequence to disk.
    Gen {
        /// Scene spec file (TOML).
        spec: PathBuf,
        /// Output sequence directory.
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the generalized feature compressor on dumped sequences.
    TrainStage1 {
        /// One or more sequence directories.
        #[arg(required = true)]
        seq_dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        code_size: usize,
        #[arg(long, default_value = "stage1.mlpc")]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the online mapping pipeline over a sequence.
    Run {
        seq_dir: PathBuf,
        /// Pretrained stage-1 codec file.
        codec: PathBuf,
        out_dir: PathBuf,
        /// Config file; omit for defaults. SEMSPLAT_* env vars override keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override [run] seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override [run] mode (disentangled | joint).
        #[arg(long)]
        mode: Option<String>,
        /// Override [run] threads (0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a finished run: 2D queries, render quality, ATE, 3D protocol.
    Eval {
        run_dir: PathBuf,
        /// Text file with one query class per line.
        queries: PathBuf,
        #[arg(long)]
        export_heatmaps: bool,
    },
    /// Benchmark the rasterizer and its backward pass.
    Bench {
        #[arg(long, default_value_t = 10000)]
        gaussians: usize,
        #[arg(long, default_value_t = 192)]
        width: usize,
        #[arg(long, default_value_t = 192)]
        height: usize,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        /// Comma-separated thread counts to sweep.
        #[arg(long, default_value = "1,8")]
        threads: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> semsplat::Result<()> {
    match cli.command {
        Command::Gen { spec, out_dir, seed } => commands::cmd_gen(&spec, &out_dir, seed),
        Command::TrainStage1 {
            seq_dirs,
            code_size,
            out,
            iters,
            seed,
        } => commands::cmd_train_stage1(&seq_dirs, code_size, &out, iters, seed).map(|_| ()),
        Command::Run {
            seq_dir,
            codec,
            out_dir,
            config,
            seed,
            mode,
            threads,
        } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => {
                    let mut c = PipelineConfig::default();
                    c.apply_env_overrides()?;
                    c
                }
            };
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(m) = mode {
                cfg.run.mode = match m.as_str() {
                    "disentangled" => semsplat::OptimMode::Disentangled,
                    "joint" => semsplat::OptimMode::Joint,
                    other => {
                        return Err(semsplat::SplatError::Config(format!(
                            "unknown mode '{other}'"
                        )))
                    }
                };
            }
            if let Some(t) = threads {
                cfg.run.threads = t;
            }
            commands::cmd_run(&seq_dir, &codec, &cfg, &out_dir).map(|_| ())
        }
        Command::Eval {
            run_dir,
            queries,
            export_heatmaps,
        } => {
            let report = commands::cmd_eval(&run_dir, &queries, export_heatmaps)?;
            if !report.skipped_queries.is_empty() {
                return Err(semsplat::SplatError::UnknownName(format!(
                    "skipped queries: {}",
                    report.skipped_queries.join(", ")
                )));
            }
            Ok(())
        }
        Command::Bench {
            gaussians,
            width,
            height,
            iterations,
            threads,
            seed,
            out,
        } => {
            let threads: Vec<usize> = threads
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| semsplat::SplatError::Config(format!("--threads: {e}")))?;
            let report =
                commands::cmd_bench(gaussians, width, height, iterations, &threads, seed)?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, text)
                    .map_err(|e| semsplat::SplatError::io(path, e))?;
            }
            Ok(())
        }
    }
}
