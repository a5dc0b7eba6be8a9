use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prwd_core::harness::sweep::{pareto, read_rows, run_experiment, safe_zones, write_outputs};
use prwd_core::harness::{ExperimentConfig, ResultRow, Session};
use prwd_core::metrics::{count_flops, speedup_over_original};
use prwd_core::retrain::{RetrainTechnique, Technique};
use prwd_core::{Mask, Result};

#[derive(Parser)]
#[command(name = "prwd", about = "Prune, rewind and retrain neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one retraining technique.
    #[arg(long)]
    technique: Option<Technique>,
    /// Restrict to one retraining time, in epochs.
    #[arg(long)]
    t: Option<f64>,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original network and record rewind snapshots.
    Train(Common),
    /// Prune the trained network once and save the masks.
    Prune(Common),
    /// One-shot prune, then retrain with a single technique.
    Retrain(Common),
    /// Iterative pruning with a single technique.
    Iterate(Common),
    /// Full sweep over techniques, retraining times and targets.
    Sweep(Common),
    /// FLOPs of the dense network, or of a pruned one.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Pareto table and safe zone from a finished sweep.
    Report(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(t) = self.technique {
            cfg.techniques = vec![t];
        }
        if let Some(t) = self.t {
            cfg.sweep.retrain_times = Some(vec![t]);
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| prwd_core::Error::io("<stdout>", e))
}

fn single(cfg: &ExperimentConfig, session: &Session) -> RetrainTechnique {
    RetrainTechnique::new(cfg.techniques[0], session.retrain_times[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let session = Session::new(cfg.clone())?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| prwd_core::Error::io(&cfg.output_dir, e))?;
            for &seed in &cfg.seeds {
                let store = session.trained_store(seed)?;
                let final_weights = store.restore(session.total_epochs())?.weights;
                let path = cfg.output_dir.join(format!("{}.prwd", store.run_id()));
                session.arch.with_weights(final_weights)?.save(&path)?;
                println!("{}\t{}\t{:?}", store.run_id(), path.display(), store.epochs());
            }
        }
        Command::Prune(common) => {
            let cfg = common.load()?;
            let session = Session::new(cfg.clone())?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| prwd_core::Error::io(&cfg.output_dir, e))?;
            let dense = count_flops(&session.arch, &Mask::ones(session.arch.num_params()));
            for &seed in &cfg.seeds {
                let store = session.trained_store(seed)?;
                let retrainer = session.retrainer(&store, seed);
                for (i, target) in session.targets().iter().enumerate() {
                    let mask = retrainer.one_shot_mask(target)?;
                    let path = cfg.output_dir.join(format!("{}-target{i}.prwm", store.run_id()));
                    mask.save(&path)?;
                    let flops = count_flops(&session.arch, &mask);
                    println!(
                        "{}\tcompression {:.4}\tflops {flops}\tspeedup {:.3}",
                        path.display(),
                        mask.compression_ratio()?,
                        speedup_over_original(dense, flops)?
                    );
                }
            }
        }
        Command::Retrain(common) => {
            let cfg = common.load()?;
            let session = Session::new(cfg.clone())?;
            let technique = single(&cfg, &session);
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let store = session.trained_store(seed)?;
                let retrainer = session.retrainer(&store, seed);
                for target in session.targets() {
                    let r = retrainer.one_shot(&target, technique)?;
                    rows.push(result_row(&cfg, seed, technique, &r.metrics));
                }
            }
            print_rows(&rows)?;
        }
        Command::Iterate(common) => {
            let cfg = common.load()?;
            let session = Session::new(cfg.clone())?;
            let technique = single(&cfg, &session);
            let d = session.arch.num_params();
            let pool = cfg.pool().candidates(&session.arch).iter().filter(|&&b| b).count();
            let fraction = cfg.pruning.per_iteration_fraction;
            let target = cfg.sweep.compression_ratios.iter().copied().fold(1.0, f64::max);
            let k = prwd_core::retrain::iterations_for_compression(d, pool, fraction, target)?.max(1);
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let store = session.trained_store(seed)?;
                for r in session.retrainer(&store, seed).iterative(k, technique, fraction)? {
                    rows.push(result_row(&cfg, seed, technique, &r.metrics));
                }
            }
            print_rows(&rows)?;
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let outcome = run_experiment(&cfg, common.jobs)?;
            write_outputs(&outcome, &cfg.output_dir)?;
            eprintln!(
                "{} rows, {} failures written to {}",
                outcome.rows.len(),
                outcome.failures.len(),
                cfg.output_dir.display()
            );
            if !outcome.failures.is_empty() {
                return Err(prwd_core::Error::Config(format!(
                    "{} cells failed; see failures.csv",
                    outcome.failures.len()
                )));
            }
        }
        Command::Flops { common, mask } => {
            let cfg = common.load()?;
            let session = Session::new(cfg)?;
            let dense = count_flops(&session.arch, &Mask::ones(session.arch.num_params()));
            println!("dense\t{dense}");
            if let Some(path) = mask {
                let mask = Mask::load(&path)?;
                mask.check_len(session.arch.num_params())?;
                let pruned = count_flops(&session.arch, &mask);
                println!("pruned\t{pruned}");
                println!("speedup\t{:.4}", speedup_over_original(dense, pruned)?);
            }
        }
        Command::Report(common) => {
            let cfg = common.load()?;
            let total = cfg.schedule()?.total_epochs();
            let rows = read_rows(&cfg.output_dir.join("raw.csv"))?;
            println!("technique\tcompression\tbest_t\tmedian_val\tmedian_test\tmin_test\tmax_test");
            for p in pareto(&rows) {
                println!(
                    "{}\t{:.3}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    p.technique,
                    p.compression_ratio,
                    p.t_epochs,
                    p.val_accuracy_median,
                    p.test_accuracy_median,
                    p.test_accuracy_min,
                    p.test_accuracy_max
                );
            }
            println!();
            println!("arch\tcompression\tsafe_zone");
            for z in safe_zones(&rows, total)? {
                let zone = match (z.from_fraction, z.to_fraction) {
                    (Some(a), Some(b)) => format!("[{a:.3}, {b:.3}] x T"),
                    _ => "empty".to_string(),
                };
                println!("{}\t{:.3}\t{zone}", z.arch, z.compression_ratio);
            }
        }
    }
    Ok(())
}

fn result_row(
    cfg: &ExperimentConfig,
    seed: u64,
    technique: RetrainTechnique,
    m: &prwd_core::metrics::MetricsRecord,
) -> ResultRow {
    ResultRow {
        arch: cfg.arch_name(),
        technique: technique.variant,
        t_epochs: technique.t,
        compression_ratio: m.compression_ratio,
        seed,
        val_accuracy: m.val_accuracy,
        test_accuracy: m.test_accuracy,
        flops: m.flops,
        retrain_epochs: m.retrain_epochs,
        total_epochs: m.total_training_epochs,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
