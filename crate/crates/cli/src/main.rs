use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use clipforge::config::RunConfig;
use clipforge::dataio::{gen_synth, SynthConfig};
use clipforge::experiment::{run_ablation, run_finetune, run_pretrain, table_csv, Dataset};
use clipforge::nn::NetworkVariant;
use clipforge::permspace::enumerate_classes;
use clipforge::selfcheck::run_checks;
use clipforge::transfer::{Init, Task};
use clipforge::{Error, Result};

mod report;

const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Parser)]
#[command(name = "clipforge", version, about = "Self-supervised pretext training on ultrasound-like video clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video store.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        videos: usize,
        #[arg(long, default_value_t = 256)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Pretrain one pretext variant.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "siamese",
              value_parser = ["siamese", "disentangle", "order-only", "transform-only"])]
        variant: String,
        /// Overrides pretrain.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to a directory under output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune on a downstream task from a checkpoint or from scratch.
    Finetune {
        #[arg(long, value_parser = ["planes", "saliency"])]
        task: String,
        /// `random` or a checkpoint directory.
        #[arg(long)]
        init: String,
        #[arg(long)]
        config: PathBuf,
        /// Overrides finetune.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain every ablation arm and fine-tune each on both tasks.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "17")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fast verification suite.
    Selfcheck {
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        corrupt: Vec<String>,
    },
    /// PNG plots for a pretrain or fine-tune run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the order-class table as CSV.
    Permspace {
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CLIPFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CLIPFORGE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenSynth {
            out,
            videos,
            frames,
            classes,
            seed,
        } => {
            let cfg = SynthConfig {
                num_videos: videos,
                frames_per_video: frames,
                num_classes: classes,
                seed,
                ..SynthConfig::default()
            };
            cfg.validate().map_err(to_config)?;
            let store = gen_synth(&cfg, &out)?;
            println!("wrote {} videos to {}", store.manifest.videos.len(), out.display());
        }
        Command::Pretrain {
            config,
            variant,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let variant = NetworkVariant::from_str(&variant)?;
            let seed = seed.unwrap_or(cfg.pretrain.seed);
            let dir = out.unwrap_or_else(|| cfg.output.dir.join(format!("pretrain_{variant}_seed{seed}")));
            let data = Dataset::load(&cfg)?;
            snapshot_config(&cfg, &dir)?;
            let outcome = run_pretrain(&cfg, &data, variant, seed, &dir)?;
            let e = &outcome.eval;
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{variant} seed {seed}: order accuracy {}, tau MAE {} (mean predictor {}); checkpoint {}",
                fmt(e.order_accuracy),
                fmt(e.tau_mae),
                fmt(e.mean_predictor_mae),
                dir.join("final").display()
            );
        }
        Command::Finetune {
            task,
            init,
            config,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let task = Task::from_str(&task)?;
            let init = parse_init(&init)?;
            let seed = seed.unwrap_or(cfg.finetune.seed);
            let dir = out.unwrap_or_else(|| {
                let tag = match &init {
                    Init::Random => "random".to_string(),
                    Init::Checkpoint(p) => p
                        .parent()
                        .and_then(|d| d.file_name())
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "checkpoint".into()),
                };
                cfg.output.dir.join(format!("finetune_{task}_{tag}_seed{seed}"))
            });
            let data = Dataset::load(&cfg)?;
            snapshot_config(&cfg, &dir)?;
            let outcome = run_finetune(&cfg, &data, task, init, seed, Some(&dir))?;
            let r = &outcome.report;
            match (r.macro_f1(), r.saliency()) {
                (Some(f1), _) => println!("{task} seed {seed}: macro-F1 {:.2}%", 100.0 * f1),
                (_, Some(s)) => println!(
                    "{task} seed {seed}: KL {:.4} NSS {:.4} AUC {:.4} SIM {:.4}",
                    s.kl, s.nss, s.auc, s.sim
                ),
                _ => {}
            }
            println!("report {}", dir.join("metrics.json").display());
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.join("ablation"));
            let data = Dataset::load(&cfg)?;
            snapshot_config(&cfg, &dir)?;
            let outcome = run_ablation(&cfg, &data, &seeds, &dir)?;
            print!("{}", table_csv(&outcome.table));
            eprintln!("table {}", outcome.table_path.display());
        }
        Command::Selfcheck { json, corrupt } => {
            let results = run_checks(&corrupt);
            if json {
                println!("{}", serde_json::to_string_pretty(&results).expect("results serialize"));
            } else {
                for r in &results {
                    let status = if r.passed { "ok" } else { "FAIL" };
                    println!("{:<18} {status:<4} {:>7.2}s  {}", r.name, r.seconds, r.detail);
                }
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failed checks: {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { run, out } => {
            let written = report::write_report(&run, &out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Permspace { k } => {
            let space = enumerate_classes(k)?;
            println!("class_id,representative");
            for (i, p) in space.representatives().iter().enumerate() {
                let rep: Vec<String> = p.as_slice().iter().map(|v| v.to_string()).collect();
                println!("{i},{}", rep.join(" "));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn parse_init(raw: &str) -> Result<Init> {
    if raw == "random" {
        return Ok(Init::Random);
    }
    let path = PathBuf::from(raw);
    if !path.exists() {
        return Err(Error::NotFound(format!("checkpoint {}", path.display())));
    }
    Ok(Init::Checkpoint(path))
}

/// Keeps the resolved config beside the run outputs; `report` reads it back.
fn snapshot_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    fs::write(&path, cfg.to_json()).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
