use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbln_core::checkpoint;
use cbln_core::config::RunConfig;
use cbln_core::data::{self, GroundingExample, SyntheticSpec};
use cbln_core::evaluation::{evaluate_model, segment_to_timestamps, top_n_segments};
use cbln_core::model::{gradcheck_config, gradcheck_modules, Cbln};
use cbln_core::params::ParameterStore;
use cbln_core::training::train;
use cbln_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cbln",
    version,
    about = "Temporal sentence grounding with biaffine localization"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat JSON config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train.json/test.json datasets into --out.
    Generate,
    /// Train on a dataset; writes model.ckpt, loss.csv and epochs.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate R@n,IoU=m; writes report.txt and report.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint; without one a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Recall cut-offs, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// IoU thresholds, comma separated.
        #[arg(long, value_delimiter = ',')]
        iou: Option<Vec<f64>>,
        #[arg(long)]
        nms_iou: Option<f64>,
    },
    /// Score one example and print its best segment.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write the T×T score map as CSV.
        #[arg(long)]
        dump_map: Option<PathBuf>,
        #[arg(long)]
        nms_iou: Option<f64>,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::from_flat_json(&serde_json::from_str(&fs::read_to_string(path)?)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.with_overrides(&g.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint parameters, or a fresh initialization from the config seed.
fn model_and_params(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<(Cbln, ParameterStore)> {
    match ckpt {
        Some(path) => {
            let (saved, store) = checkpoint::load(path)?;
            let model = Cbln::new(&saved.model)?;
            Ok((model, store))
        }
        None => {
            let model = Cbln::new(&cfg.model)?;
            let store = model.init(cfg.seed)?;
            Ok((model, store))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Generate => {
            let spec = SyntheticSpec::new(&cfg.data, cfg.seed)?;
            let train_set = spec.records(0, cfg.data.train_count)?;
            let test_set = spec.records(cfg.data.train_count as u64, cfg.data.test_count)?;
            for (name, set) in [("train.json", &train_set), ("test.json", &test_set)] {
                let path = out.join(name);
                data::save_dataset(set, &path)?;
                println!("wrote {} ({} records)", path.display(), set.len());
            }
        }
        Command::Train { data: path } => {
            let examples = data::load_dataset(&path)?;
            let model = Cbln::new(&cfg.model)?;
            let mut store = model.init(cfg.seed)?;
            println!(
                "training {} parameters on {} examples for {} epochs",
                store.num_scalars(),
                examples.len(),
                cfg.train.epochs
            );
            let trace = train(
                &model,
                &mut store,
                &examples,
                &cfg.train,
                cfg.seed,
                |epoch, loss| {
                    println!("epoch {:>3} loss {loss:.6}", epoch + 1);
                },
            )?;
            write(&out.join("loss.csv"), trace.to_csv())?;
            let epochs: String = std::iter::once("epoch,loss\n".to_owned())
                .chain(
                    trace
                        .epoch_losses
                        .iter()
                        .enumerate()
                        .map(|(i, l)| format!("{},{l}\n", i + 1)),
                )
                .collect();
            write(&out.join("epochs.csv"), epochs)?;
            checkpoint::save(&out.join("model.ckpt"), &cfg, &store)?;
            println!("wrote {}", out.join("model.ckpt").display());
        }
        Command::Eval {
            data: path,
            checkpoint,
            n,
            iou,
            nms_iou,
        } => {
            let examples = data::load_dataset(&path)?;
            let (model, store) = model_and_params(&cfg, checkpoint.as_deref())?;
            let mut eval = cfg.eval.clone();
            if let Some(n) = n {
                eval.n = n;
            }
            if let Some(iou) = iou {
                eval.iou = iou;
            }
            if let Some(t) = nms_iou {
                eval.nms_iou = t;
            }
            let report = evaluate_model(&model, &store, &examples, &eval)?;
            print!("{}", report.to_text());
            write(&out.join("report.txt"), report.to_text())?;
            write(&out.join("report.json"), report.to_json()? + "\n")?;
        }
        Command::Score {
            data: path,
            checkpoint,
            index,
            dump_map,
            nms_iou,
        } => {
            let examples = data::load_dataset(&path)?;
            let ex: &GroundingExample = examples.get(index).ok_or_else(|| {
                Error::Index(format!(
                    "index {index} but dataset has {} records",
                    examples.len()
                ))
            })?;
            let (model, store) = model_and_params(&cfg, checkpoint.as_deref())?;
            let map = model.predict(&store, &ex.features, &ex.tokens)?;
            let pred = top_n_segments(&map, 1, nms_iou.unwrap_or(cfg.eval.nms_iou))?;
            let (best, score) = pred.ranked[0];
            let (ts, te) = segment_to_timestamps(best, ex.frames(), ex.duration_s)?;
            println!("best segment {best} score {score:.6} time {ts:.3}s-{te:.3}s");
            println!("ground truth {}", ex.gt);
            if let Some(path) = dump_map {
                let t = map.rows();
                let csv: String = (0..t)
                    .map(|r| {
                        let row: Vec<String> = map.row(r).iter().map(|v| v.to_string()).collect();
                        row.join(",") + "\n"
                    })
                    .collect();
                write(&path, csv)?;
            }
        }
        Command::Gradcheck { step, tol } => {
            let gc = if cli.global.config.is_some() || !cli.global.overrides.is_empty() {
                cfg.model.clone()
            } else {
                gradcheck_config()
            };
            let t = gc.max_t.clamp(2, 5);
            let n = gc.max_n.min(3);
            let mut failed = false;
            for (module, r) in gradcheck_modules(&gc, t, n, cfg.seed, step, tol)? {
                let verdict = if r.passed() { "<" } else { ">=" };
                println!("{module}: max rel err {:.3e} {verdict} {tol:e}", r.max_rel_err);
                failed |= !r.passed();
            }
            if failed {
                return Err(Error::Contract("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
