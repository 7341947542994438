//! Command-line driver for dataset generation, training, evaluation, latent
//! optimization, likelihood scans, and percept rendering.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phosflow::baselines::TrainStep;
use phosflow::data::{find_mnist_dir, load_mnist_dir, PairDataset};
use phosflow::metrics::{csv_header, csv_row, train_classifier, Classifier, ClassifierTrainOptions};
use phosflow::phosim::{default_geometry, AxonMapGeometry};
use phosflow::pipeline::{
    evaluate_model, likelihood_mse_scan, load_run, optimize_latent, save_run, train_encoder,
    write_loss_csv, write_scan_csv, ExperimentConfig, InnDirection, ModelKind, RunCheckpoint,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "phosflow", about = "Phosphene stimulus optimization pipeline")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random stimulus-percept dataset.
    GenData {
        #[arg(long, default_value_t = 28)]
        res: usize,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output .pfds path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and write a run checkpoint.
    Train(TrainArgs),
    /// Evaluate a run checkpoint on MNIST test images.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Likelihood ascent on the latent for the worst evaluation samples.
    OptimizeLatent {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        worst: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        rate: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Scatter data relating stimulus log|det J| at z = 0 to percept MSE.
    ScanLikelihood {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Dataset supplying random conditions.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render dataset rows (stimulus and percept) to PGM files.
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config mirroring the experiment configuration; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    /// down | linear | nn | inn | cinn
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Swap the unconditional flow's forward direction to stimulus->percept.
    #[arg(long)]
    swap_direction: bool,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Output root: $PHOSFLOW_OUT or the current directory.
fn out_root() -> PathBuf {
    std::env::var("PHOSFLOW_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("."))
}

fn resolve_out(dir: Option<PathBuf>, default_leaf: &str) -> PathBuf {
    let leaf = dir.unwrap_or_else(|| PathBuf::from(default_leaf));
    if leaf.is_absolute() {
        leaf
    } else {
        out_root().join(leaf)
    }
}

fn mnist(dir: Option<PathBuf>, split: &str, side: usize) -> Result<phosflow::data::LabeledImageSet> {
    let dir = dir
        .or_else(find_mnist_dir)
        .context("MNIST not found: pass --mnist-dir or set PHOSFLOW_MNIST_DIR")?;
    let set = load_mnist_dir(&dir, split)?;
    Ok(set.at_resolution(side))
}

/// Load the dataset for `geometry`, generating and saving it when missing.
fn dataset_for(
    path: Option<&Path>,
    geometry: &AxonMapGeometry,
    pairs: usize,
    seed: u64,
) -> Result<PairDataset> {
    if let Some(p) = path {
        if p.is_file() {
            return Ok(PairDataset::load(p, Some(geometry))?);
        }
        eprintln!("dataset {} not found, generating {pairs} pairs", p.display());
        let ds = PairDataset::generate(pairs, geometry, seed)?;
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        ds.save(p)?;
        return Ok(ds);
    }
    Ok(PairDataset::generate(pairs, geometry, seed)?)
}

/// Classifier for `side`, trained on demand and cached next to the outputs.
fn classifier_for(side: usize, mnist_dir: Option<PathBuf>, cache_dir: &Path) -> Result<Classifier> {
    let cache = cache_dir.join(format!("classifier-{side}.pfck"));
    if cache.is_file() {
        let ck = phosflow::checkpoint::Checkpoint::load(&cache)?;
        let clf = Classifier::read_checkpoint(&ck, "classifier")?;
        if clf.side == side {
            return Ok(clf);
        }
    }
    eprintln!(
        "training {side}x{side} digit classifier (cached at {})",
        cache.display()
    );
    let train = mnist(mnist_dir.clone(), "train", 28)?;
    let test = mnist(mnist_dir, "test", 28)?;
    let opts = ClassifierTrainOptions::for_resolution(side);
    let (clf, acc) = train_classifier(&train, &test, side, opts)?;
    eprintln!("classifier test accuracy at {side}x{side}: {acc:.4}");
    std::fs::create_dir_all(cache_dir)?;
    let mut ck = phosflow::checkpoint::Checkpoint::new();
    clf.write_checkpoint(&mut ck, "classifier");
    ck.save(&cache)?;
    Ok(clf)
}

fn write_steps(path: &Path, steps: &[TrainStep]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_loss_csv(std::io::BufWriter::new(f), steps)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("thread pool")?;
    }
    match cli.command {
        Command::GenData {
            res,
            pairs,
            seed,
            out,
        } => {
            let geometry = default_geometry(res)?;
            let ds = PairDataset::generate(pairs, &geometry, seed)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            ds.save(&out)?;
            println!(
                "wrote {} pairs at {res}x{res} (normalization {:.4}) to {}",
                ds.count,
                ds.normalization,
                out.display()
            );
        }
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(p) => serde_json::from_str::<ExperimentConfig>(
                    &std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?,
                )
                .context("parsing config JSON")?,
                None => ExperimentConfig::default(),
            };
            if let Some(m) = &args.model {
                cfg.model = m.parse::<ModelKind>()?;
            }
            if let Some(r) = args.res {
                cfg.resolution = r;
            }
            if let Some(d) = args.dataset {
                cfg.dataset = Some(d);
            }
            if let Some(p) = args.pairs {
                cfg.pairs = p;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(b) = args.batch {
                cfg.batch = b;
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = args.lr {
                cfg.lr = lr;
            }
            if let Some(d) = args.depth {
                cfg.depth = d;
            }
            if let Some(h) = args.hidden {
                cfg.hidden = h;
            }
            if args.swap_direction {
                cfg.inn_direction = InnDirection::StimulusToPercept;
            }
            if let Some(o) = args.out_dir {
                cfg.out_dir = o;
            }
            cfg.out_dir = resolve_out(Some(cfg.out_dir.clone()), "runs");
            std::fs::create_dir_all(&cfg.out_dir)?;

            let geometry = default_geometry(cfg.resolution)?;
            let matrix = geometry.effect_matrix();
            let pairs = dataset_for(cfg.dataset.as_deref(), &geometry, cfg.pairs, cfg.seed)?;
            let gain_targets = if cfg.model == ModelKind::Down {
                Some(mnist(args.mnist_dir, "train", cfg.resolution)?)
            } else {
                None
            };
            eprintln!(
                "training {} at {}x{} ({} pairs, {} epochs, batch {})",
                cfg.model, cfg.resolution, cfg.resolution, pairs.count, cfg.epochs, cfg.batch
            );
            let started = std::time::Instant::now();
            let (encoder, steps) =
                train_encoder(&cfg, &pairs, gain_targets.as_ref(), &geometry, &matrix)?;
            eprintln!(
                "trained {} ({} params) in {:.1}s",
                encoder.kind(),
                encoder.param_count(),
                started.elapsed().as_secs_f64()
            );
            let tag = format!("{}-{}", encoder.kind(), cfg.resolution);
            write_steps(&cfg.out_dir.join(format!("{tag}-loss.csv")), &steps)?;
            let run_path = cfg.out_dir.join(format!("{tag}.pfck"));
            save_run(
                &run_path,
                &RunCheckpoint {
                    encoder,
                    geometry,
                    normalization: pairs.normalization,
                },
            )?;
            println!("run checkpoint: {}", run_path.display());
        }
        Command::Eval {
            run,
            mnist_dir,
            count,
            out_dir,
        } => {
            let rc = load_run(&run)?;
            let side = rc.geometry.resolution;
            let out = resolve_out(out_dir, "eval");
            std::fs::create_dir_all(&out)?;
            let eval_set = mnist(mnist_dir.clone(), "test", side)?.take(count);
            let classifier = classifier_for(side, mnist_dir, &out)?;
            let matrix = rc.geometry.effect_matrix();
            let art = evaluate_model(
                &rc.encoder,
                &eval_set,
                &rc.geometry,
                &matrix,
                rc.normalization,
                &classifier,
                Some(&out.join("triptychs")),
            )?;
            let kind = rc.encoder.kind();
            println!("{}", csv_header());
            println!("{}", csv_row(&kind, side, &art.report));
            let table = out.join("metrics.csv");
            let mut rows: Vec<String> = vec![csv_header().to_string()];
            if table.is_file() {
                // keep other models' rows, replace this model's
                let existing = std::fs::read_to_string(&table)?;
                rows = existing
                    .lines()
                    .filter(|l| !l.starts_with(&format!("{kind},{side}")))
                    .map(String::from)
                    .collect();
            }
            rows.push(csv_row(&kind, side, &art.report));
            std::fs::write(&table, rows.join("\n") + "\n")?;
            let per_sample = out.join(format!("{kind}-{side}-per-sample.csv"));
            let f = std::fs::File::create(&per_sample)?;
            phosflow::metrics::write_per_sample_csv(std::io::BufWriter::new(f), &art.report)?;
            println!("metrics table: {}", table.display());
        }
        Command::OptimizeLatent {
            run,
            mnist_dir,
            count,
            worst,
            steps,
            rate,
            out_dir,
        } => {
            let rc = load_run(&run)?;
            let phosflow::pipeline::TrainedEncoder::Cinn(flow) = &rc.encoder else {
                bail!("latent optimization needs a conditional flow checkpoint");
            };
            let side = rc.geometry.resolution;
            let eval_set = mnist(mnist_dir, "test", side)?.take(count);
            let matrix = rc.geometry.effect_matrix();
            let results = optimize_latent(
                flow,
                &eval_set,
                &rc.geometry,
                &matrix,
                rc.normalization,
                worst,
                steps,
                rate,
            )?;
            let improved = results.iter().filter(|r| r.new_mse < r.old_mse).count();
            println!("improved {}/{} of the worst samples", improved, results.len());
            let out = resolve_out(out_dir, "eval");
            std::fs::create_dir_all(&out)?;
            let path = out.join("latent-optimization.csv");
            let mut w = String::from("sample_index,old_mse,new_mse,accepted_steps,final_loglik\n");
            for r in &results {
                w.push_str(&format!(
                    "{},{:.8},{:.8},{},{:.4}\n",
                    r.sample_index,
                    r.old_mse,
                    r.new_mse,
                    r.trace.len().saturating_sub(1),
                    r.trace.last().copied().unwrap_or(f64::NAN)
                ));
            }
            std::fs::write(&path, w)?;
            println!("details: {}", path.display());
        }
        Command::ScanLikelihood {
            run,
            mnist_dir,
            count,
            dataset,
            out_dir,
        } => {
            let rc = load_run(&run)?;
            let phosflow::pipeline::TrainedEncoder::Cinn(flow) = &rc.encoder else {
                bail!("likelihood scan needs a conditional flow checkpoint");
            };
            let side = rc.geometry.resolution;
            let eval_set = mnist(mnist_dir, "test", side)?.take(count);
            let random = PairDataset::load(&dataset, Some(&rc.geometry))?;
            let matrix = rc.geometry.effect_matrix();
            let rows = likelihood_mse_scan(
                flow,
                &eval_set,
                &random,
                count,
                &rc.geometry,
                &matrix,
                rc.normalization,
            )?;
            let out = resolve_out(out_dir, "eval");
            std::fs::create_dir_all(&out)?;
            let path = out.join("likelihood-mse.csv");
            let f = std::fs::File::create(&path)?;
            write_scan_csv(std::io::BufWriter::new(f), &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Render {
            dataset,
            count,
            out_dir,
        } => {
            let ds = PairDataset::load(&dataset, None)?;
            let out = resolve_out(out_dir, "renders");
            std::fs::create_dir_all(&out)?;
            let side = ds.resolution;
            for i in 0..count.min(ds.count) {
                let stim = ds.stimulus_row(i);
                let percept = ds.percept_row(i);
                let mut stim_panel = vec![0.0f32; 9 * side.max(9)];
                for y in 0..9 {
                    let pad = (side.max(9) - 9) / 2;
                    stim_panel[(y + pad) * 9..(y + pad) * 9 + 9]
                        .copy_from_slice(&stim[y * 9..(y + 1) * 9]);
                }
                phosflow::pgm::write_strip(
                    out.join(format!("pair-{i:03}.pgm")),
                    &[(&stim_panel, 9), (percept, side)],
                    side.max(9),
                )?;
            }
            println!("wrote {} renders to {}", count.min(ds.count), out.display());
        }
    }
    Ok(())
}
