mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use config::RunConfig;
use epcontrast_core::bench::{bench_loss, BenchConfig, BenchMode};
use epcontrast_core::encoder::{checkpoint_digest, load_checkpoint, save_checkpoint};
use epcontrast_core::losses::LossKind;
use epcontrast_core::pointcloud::{load_ascii, load_binary, save_binary, PointCloud};
use epcontrast_core::superpoint::kmeans_segments;
use epcontrast_core::trainer::{generate_scenes, history_csv, linear_probe, pretrain};
use epcontrast_core::verify::{gradient_suite, oracle_suite};

const SCENE_EXT: &str = "epcc";

#[derive(Parser, Debug)]
#[command(name = "epcontrast", version, about = "Contrastive point-cloud pre-training at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Root seed; wins over EPC_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic labeled scenes.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        points_per_cluster: Option<usize>,
    },
    /// Segment one cloud with k-means and write one segment id per line.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder; writes a checkpoint and a loss-history CSV.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ep")]
        loss: LossKind,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss history path; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Linear-probe accuracy of a frozen checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out scenes; without it the last `probe.holdout` share of --data is used.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Pair counts, accounted bytes and wall time across sizes.
    Bench {
        #[arg(long)]
        kind: LossKind,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        budget_mb: Option<u64>,
        /// Skip timing and run sizes in parallel.
        #[arg(long)]
        count_only: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Oracle-equivalence and gradient-check suites.
    Check {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        grad_instances: usize,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Ok(seed) = std::env::var("EPC_SEED") {
        cfg.set("seed", &seed).context("EPC_SEED")?;
    }
    for s in &common.sets {
        cfg.apply_assignment(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let mut put = |key: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(key, &v));
    match command {
        Command::Gen {
            scenes,
            clusters,
            points_per_cluster,
            ..
        } => {
            put("scenes.count", scenes.map(|v| v.to_string()))?;
            put("scenes.clusters", clusters.map(|v| v.to_string()))?;
            put("scenes.points_per_cluster", points_per_cluster.map(|v| v.to_string()))?;
        }
        Command::Segment { segments, .. } => {
            put("kmeans.segments", segments.map(|v| v.to_string()))?;
        }
        Command::Pretrain { epochs, .. } => {
            put("train.epochs", epochs.map(|v| v.to_string()))?;
        }
        Command::Probe { label_fraction, .. } => {
            put("probe.label_fraction", label_fraction.map(|v| v.to_string()))?;
        }
        Command::Bench {
            m,
            c,
            repeats,
            budget_mb,
            ..
        } => {
            put("bench.m", m.map(|v| v.to_string()))?;
            put("bench.c", c.map(|v| v.to_string()))?;
            put("bench.repeats", repeats.map(|v| v.to_string()))?;
            put("bench.budget_mb", budget_mb.map(|v| v.to_string()))?;
        }
        Command::Check { .. } => {}
    }
    Ok(cfg)
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    let cloud = if path.extension().is_some_and(|e| e == SCENE_EXT) {
        load_binary(path)?
    } else {
        load_ascii(path)?
    };
    Ok(cloud)
}

/// Every `.epcc` file in `dir`, in file-name order.
fn load_scenes(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading scene directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == SCENE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .{SCENE_EXT} scenes in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| load_binary(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve(&cli.common, &cli.command)?;
    print!("{}", cfg.render());
    match cli.command {
        Command::Gen { out, .. } => {
            let count: usize = cfg.get("scenes.count")?;
            let scenes = generate_scenes(&cfg.scene_config()?, count)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            for (i, s) in scenes.iter().enumerate() {
                save_binary(s, out.join(format!("scene_{i:04}.{SCENE_EXT}")))?;
            }
            println!("wrote {count} scenes of {} points to {}", scenes[0].len(), out.display());
        }
        Command::Segment { input, out, .. } => {
            let cloud = load_cloud(&input)?;
            let km = cfg.kmeans_config()?;
            if km.target_segments > cloud.len() {
                warn!(
                    "requested {} segments for {} points; clamped to {}",
                    km.target_segments,
                    cloud.len(),
                    cloud.len()
                );
            }
            let seg = kmeans_segments(&cloud, &km);
            std::fs::write(&out, seg.to_lines())
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{} points in {} segments -> {}", cloud.len(), seg.num_segments(), out.display());
        }
        Command::Pretrain {
            data,
            out,
            loss,
            history,
            ..
        } => {
            let scenes = load_scenes(&data)?;
            let train = cfg.train_config(loss)?;
            let result = pretrain(&scenes, &train, &cfg.kmeans_config()?)?;
            save_checkpoint(result.params(), &out)?;
            let history = history.unwrap_or_else(|| out.with_extension("csv"));
            std::fs::write(&history, history_csv(&result.history))
                .with_context(|| format!("writing {}", history.display()))?;
            let last = result.history.last().map_or(f64::NAN, |h| h.loss);
            println!("steps {}  final loss {last:.6}", result.history.len());
            println!("checkpoint {} sha256 {}", out.display(), checkpoint_digest(result.params()));
            println!("history {}", history.display());
        }
        Command::Probe { ckpt, data, test, .. } => {
            let params = load_checkpoint(&ckpt)?;
            let mut train = load_scenes(&data)?;
            let test = match test {
                Some(dir) => load_scenes(&dir)?,
                None => {
                    if train.len() < 2 {
                        bail!("need at least two scenes to hold one out; pass --test");
                    }
                    let k = ((cfg.holdout()? * train.len() as f64).round() as usize)
                        .clamp(1, train.len() - 1);
                    train.split_off(train.len() - k)
                }
            };
            let report = linear_probe(&params, &train, &test, &cfg.probe_config()?)?;
            println!(
                "labeled points {}  test points {}  absent classes {:?}",
                report.labeled_points, report.test_points, report.absent_classes
            );
            println!("accuracy {:.6}", report.accuracy);
        }
        Command::Bench {
            kind,
            sizes,
            count_only,
            csv,
            ..
        } => {
            let bench = BenchConfig {
                kind,
                sizes,
                m: cfg.get("bench.m")?,
                c: cfg.get("bench.c")?,
                repeats: cfg.get("bench.repeats")?,
                seed: cfg.seed()?,
                budget: cfg.bench_budget()?,
                mode: if count_only {
                    BenchMode::CountOnly
                } else {
                    BenchMode::Timed
                },
            };
            let report = bench_loss(&bench)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Check {
            instances,
            grad_instances,
        } => {
            let seed = cfg.seed()?;
            let oracle = oracle_suite(instances, seed)?;
            println!("{oracle}");
            let grads = gradient_suite(grad_instances, seed)?;
            println!("{grads}");
            if !(oracle.passed() && grads.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
