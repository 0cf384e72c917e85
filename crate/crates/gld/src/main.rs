use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gld::config::ExperimentConfig;
use gld::eval::{fmt_value, mean_row};
use gld::pipeline::GenerationOptions;
use gld::stages::Run;
use gld::{GldError, Result};

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Without it the chosen preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to the config's `output_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Dataset directory; defaults to `<run-dir>/data`.
    #[arg(long, global = true, env = "GLD_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-view corpus.
    GenData {
        /// Shorthand for `--set data.scenes=N`.
        #[arg(long)]
        scenes: Option<usize>,
        /// Shorthand for `--set seed=S`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the geometric encoder.
    TrainGeo,
    /// Per-level channel statistics of the frozen encoder.
    ComputeStats,
    /// Train the RGB decoder and report per-level reconstruction.
    TrainDec,
    /// Train a level diffusion model or the cascaded level-0 model.
    TrainDiff {
        #[arg(long, conflicts_with = "cascade", required_unless_present = "cascade", value_parser = clap::value_parser!(u8).range(0..4))]
        level: Option<u8>,
        #[arg(long)]
        cascade: bool,
    },
    /// Generate the target views of every evaluation case.
    Sample {
        #[arg(long)]
        geo_ckpt: Option<PathBuf>,
        #[arg(long)]
        dec_ckpt: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Boundary level; defaults to `eval.boundary`.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..4))]
        boundary: Option<u8>,
        /// Generate level 0 independently even if a cascaded model exists.
        #[arg(long)]
        no_cascade: bool,
    },
    /// Score generations and write `eval.csv`.
    Eval,
    /// Evaluate every boundary level with identical cases and seeds.
    SweepBoundary,
    /// Independent vs. cascaded level-0 generation.
    AblateCascade,
    /// Correspondence PCK of encoder features and diffusion attention.
    ProbePck,
    /// Collect tables, image grids and timings into `<run-dir>/report`.
    Report,
    /// Print the resolved config and its hash.
    ShowConfig,
}

#[derive(Parser, Debug)]
#[command(name = "gld", version, about = "Multi-view geometric latent diffusion experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn run_command(common: Common, command: Command) -> Result<()> {
    let mut overrides = common.overrides.clone();
    if let Command::GenData { scenes, seed } = &command {
        overrides.extend(scenes.map(|n| format!("data.scenes={n}")));
        overrides.extend(seed.map(|s| format!("seed={s}")));
    }
    let config = match &common.config {
        Some(p) => ExperimentConfig::load(Some(p), &overrides)?,
        None => ExperimentConfig::from_toml_str(&ExperimentConfig::preset(&common.preset)?.to_toml()?, &overrides)?,
    };
    let run = Run::new(config, common.run_dir, common.data_dir);
    match command {
        Command::GenData { .. } => {
            let m = run.gen_data()?;
            println!("wrote {} scenes to {}", m.scenes.len(), run.data_dir.display());
        }
        Command::TrainGeo => {
            let (_, log) = run.train_geo()?;
            report_loss("geoenc", log.tail_mean(20));
            println!("wrote {}", run.geo_path().display());
        }
        Command::ComputeStats => {
            run.compute_stats()?;
            println!("wrote {}", run.stats_path().display());
        }
        Command::TrainDec => {
            for r in run.train_dec()? {
                println!("{:>12}  psnr {:.3}  ssim {:.4}", r.subset, r.psnr, r.ssim);
            }
            println!("wrote {}", run.decoder_path().display());
        }
        Command::TrainDiff { level, cascade } => {
            let level = if cascade { 0 } else { level.expect("clap enforces one of --level/--cascade") as usize };
            let log = run.train_diff(level, cascade)?;
            report_loss(&run.config.diffusion.model(level, cascade).name(), log.tail_mean(20));
            println!("wrote {}", run.diffusion_path(level, cascade).display());
        }
        Command::Sample {
            geo_ckpt,
            dec_ckpt,
            stats,
            boundary,
            no_cascade,
        } => {
            let geo = geo_ckpt.ok_or_else(|| GldError::MissingAsset("geometric encoder checkpoint (--geo-ckpt)".into()))?;
            let mut paths = run.model_paths();
            paths.geo = geo;
            paths.decoder = dec_ckpt.unwrap_or(paths.decoder);
            paths.stats = stats.unwrap_or(paths.stats);
            let models = run.load_models(&paths)?;
            let opts = GenerationOptions {
                boundary: boundary.map_or(run.config.eval.boundary, usize::from),
                use_cascade: run.config.eval.use_cascade && !no_cascade,
            };
            for d in run.sample(&models, opts)? {
                println!("wrote {}", d.display());
            }
        }
        Command::Eval => {
            let models = run.load_models(&run.model_paths())?;
            let report = run.eval(&models)?;
            let m = mean_row(&report.rows);
            let cols = gld::eval::METRIC_COLUMNS;
            let line: Vec<String> = cols.iter().zip(m).map(|(c, v)| format!("{c} {}", fmt_value(v))).collect();
            println!("{}", line.join("  "));
            println!("wrote {}", run.dir.join("eval.csv").display());
        }
        Command::SweepBoundary => {
            let models = run.load_models(&run.model_paths())?;
            for r in run.sweep(&models)? {
                println!("k={}  psnr {}  absrel {}", r.boundary, fmt_value(r.psnr), fmt_value(r.absrel));
            }
            println!("wrote {}", run.dir.join("sweep.csv").display());
        }
        Command::AblateCascade => {
            let models = run.load_models(&run.model_paths())?;
            for r in run.ablate(&models)? {
                println!("{:>12}  psnr {}", r.variant, fmt_value(r.metrics[0]));
            }
            println!("wrote {}", run.dir.join("ablation.csv").display());
        }
        Command::ProbePck => {
            let paths = run.model_paths();
            let geo = run.load_geo(&paths.geo)?;
            let l1 = &paths.levels[1];
            let level1 = if l1.exists() {
                let stats = run.load_stats(&paths.stats)?;
                Some((run.load_diffusion(l1, &geo, &stats)?, stats))
            } else {
                None
            };
            let (rows, attn) = run.probe(&geo, level1.as_ref().map(|(m, s)| (m, s)))?;
            for r in rows {
                println!("{:>6}  pck {:.4}  chance {:.4}", r.descriptor, r.pck, r.chance);
            }
            if !attn.is_empty() {
                println!("attention probe over {} layers", attn.len());
            }
            println!("wrote {}", run.dir.join("pck.csv").display());
        }
        Command::Report => {
            let m = run.report()?;
            for g in &m.gaps {
                println!("gap: {g}");
            }
            for g in &m.mismatched {
                println!("config hash differs: {g}");
            }
            println!("wrote {}", run.dir.join("report").display());
        }
        Command::ShowConfig => {
            println!("# config_hash = {}", run.hash);
            print!("{}", run.config.to_toml()?);
        }
    }
    Ok(())
}

fn report_loss(name: &str, loss: Option<f64>) {
    if let Some(l) = loss {
        println!("{name}: final loss {l:.5}");
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    if std::env::var("GLD_DETERMINISTIC").is_ok_and(|v| v == "1") {
        // Single-threaded kernels make reductions order-stable.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run_command(cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
