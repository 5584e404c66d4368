use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use scenepose_core::environment::EnvironmentCloud;
use scenepose_core::skeleton::KinematicTree;
use scenepose_core::synthdata::{make_dataset, DatasetSpec, Split};
use scenepose_core::DEFAULT_FPS;
use scenepose_pipeline::ablate::{preset, run_ablation};
use scenepose_pipeline::evaluate::evaluate;
use scenepose_pipeline::infer::{infer, read_stream, write_f64s, EpsilonMode};
use scenepose_pipeline::train::{load_sequences, train_stage1, train_stage2};
use scenepose_pipeline::windows::Stream;
use scenepose_pipeline::{Checkpoint, Estimator, PipelineError, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "scenepose", version, about = "Full-body pose from three trackers and a scene point cloud")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of labeled sequences with scenes.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sit and reach heavy motion mix.
        #[arg(long)]
        interaction_heavy: bool,
    },
    /// Train Stage I, or Stage II on top of a Stage I checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage I checkpoint (stage 2 only); overrides `stage1_checkpoint`.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for report.json and report.txt.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run a checkpoint on a tracking stream.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// frames × 36 observations (.txt/.csv text or raw little-endian f64).
        #[arg(long)]
        input: PathBuf,
        /// Environment point cloud.
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value = "zero")]
        epsilon: String,
        #[arg(long, default_value_t = DEFAULT_FPS)]
        fps: f64,
        /// Directory for pose.f64, positions.f64, contacts.f64 and delta.f64.
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
    },
    /// Train and evaluate named variants under identical seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory for ablation.json and ablation.txt.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PipelineError::Config(format!("split must be train or test, got {other}"))),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    std::fs::write(path, text).map_err(PipelineError::io(path))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            train,
            test,
            seed,
            interaction_heavy,
        } => {
            let spec = if interaction_heavy { DatasetSpec::interaction_heavy() } else { DatasetSpec::default() };
            let manifest = make_dataset(train, test, seed, &out, &spec, &KinematicTree::smpl_lite())?;
            println!("wrote {} sequences to {}", manifest.sequences.len(), out.display());
        }
        Command::Train {
            stage,
            config,
            stage1,
            dataset,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.stage = stage;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(s) = stage1 {
                cfg.stage1_checkpoint = Some(s);
            }
            cfg.validate()?;
            let (tree, seqs) = load_sequences(&cfg, Split::Train)?;
            let result = if stage == 1 {
                train_stage1(&cfg, &tree, &seqs)
            } else {
                let path = cfg
                    .stage1_checkpoint
                    .clone()
                    .ok_or_else(|| PipelineError::Config("stage 2 needs --stage1 or stage1_checkpoint".into()))?;
                let s1 = Checkpoint::load(&path)?;
                train_stage2(&cfg, &tree, &seqs, &s1)
            };
            let trained = match result {
                Ok(t) => t,
                Err(PipelineError::NonFinite(dump)) => {
                    let path = cfg.output.with_extension("nan.json");
                    write(&path, &serde_json::to_string_pretty(&dump).expect("dump serializes"))?;
                    eprintln!("diagnostic dump written to {}", path.display());
                    return Err(PipelineError::NonFinite(dump));
                }
                Err(e) => return Err(e),
            };
            trained.checkpoint()?.save(&cfg.output)?;
            let log_path = cfg.output.with_extension("log.tsv");
            let mut tsv = String::from("stage\tphase\tstep\tlr\tterm\tvalue\n");
            for r in &trained.log {
                for (n, v) in &r.losses {
                    tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.stage, r.phase, r.step, r.lr, n, v));
                }
            }
            write(&log_path, &tsv)?;
            println!("saved {} (loss log {})", cfg.output.display(), log_path.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split: name,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let est = Estimator::from_checkpoint(&ckpt)?;
            let mut cfg = est.config.clone();
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let (_, seqs) = load_sequences(&cfg, split(&name)?)?;
            let report = evaluate(&est, &seqs, true)?;
            report.write(&out)?;
            print!("{}", report.to_text());
        }
        Command::Infer {
            checkpoint,
            input,
            env,
            epsilon,
            fps,
            out,
        } => {
            let mode: EpsilonMode = epsilon.parse()?;
            let est = Estimator::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let obs = read_stream(&input)?;
            let cloud = EnvironmentCloud::load(&env)?;
            let stream = Stream::new(input.display().to_string(), fps, obs, cloud)?;
            let pred = infer(&est, &stream, mode, 0)?;
            std::fs::create_dir_all(&out).map_err(PipelineError::io(&out))?;
            let positions: Vec<f64> = pred.positions.as_slice().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            write_f64s(&out.join("pose.f64"), &pred.pose)?;
            write_f64s(&out.join("positions.f64"), &positions)?;
            write_f64s(&out.join("contacts.f64"), &pred.contacts)?;
            write_f64s(&out.join("delta.f64"), &pred.delta)?;
            println!("{} frames written to {}", pred.n_frames(), out.display());
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            dataset,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            for v in &variants {
                preset(&cfg, v)?;
            }
            let (tree, train) = load_sequences(&cfg, Split::Train)?;
            let (_, test) = load_sequences(&cfg, Split::Test)?;
            let table = run_ablation(&cfg, &variants, &seeds, &tree, &train, &test)?;
            write(&out.join("ablation.json"), &table.to_json())?;
            write(&out.join("ablation.txt"), &table.to_text())?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
