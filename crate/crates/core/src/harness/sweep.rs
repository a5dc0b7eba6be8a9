//! The retraining sweep: every (seed, technique, retraining time, target)
//! cell, CSV output, Pareto selection and the safe-zone report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, PruningModeConfig};
use crate::harness::Session;
use crate::retrain::{iterations_for_compression, PruneTarget, PrunedResult, RetrainTechnique, Technique};
use crate::snapshot::SnapshotStore;

/// `n` evenly spaced retraining times `round(i T / n)` for `i = 1..=n`.
pub fn sweep_grid(total_epochs: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("the retraining grid needs at least one point".into()));
    }
    if !(total_epochs > 0.0 && total_epochs.is_finite()) {
        return Err(Error::Config(format!("invalid training length {total_epochs}")));
    }
    let mut grid: Vec<f64> = (1..=n)
        .map(|i| (i as f64 * total_epochs / n as f64).round())
        .filter(|&t| t > 0.0)
        .collect();
    grid.dedup();
    Ok(grid)
}

/// One line of `raw.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arch: String,
    pub technique: Technique,
    pub t_epochs: f64,
    pub compression_ratio: f64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub flops: u64,
    pub retrain_epochs: f64,
    pub total_epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub technique: Technique,
    pub t_epochs: f64,
    pub target: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
enum CellKind {
    OneShot(PruneTarget),
    /// Iterative chain run to the largest needed round; `(round, label)`
    /// pairs mark the rounds that produce rows.
    Chain(Vec<(usize, String)>),
}

#[derive(Debug, Clone)]
struct Cell {
    seed: u64,
    technique: Technique,
    t: f64,
    kind: CellKind,
}

fn target_label(target: &PruneTarget) -> String {
    match target {
        PruneTarget::Compression(c) => format!("compression {c}"),
        PruneTarget::Density(d) => format!("density {d}"),
        PruneTarget::Structured(r) => format!("exponent {}", r.exponent),
    }
}

fn to_row(arch: &str, seed: u64, technique: RetrainTechnique, result: &PrunedResult) -> ResultRow {
    let m = &result.metrics;
    ResultRow {
        arch: arch.to_string(),
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

fn build_cells(session: &Session) -> Result<Vec<Cell>> {
    let cfg = &session.config;
    let kinds: Vec<CellKind> = match cfg.pruning.mode {
        PruningModeConfig::OneShot => session.targets().into_iter().map(CellKind::OneShot).collect(),
        PruningModeConfig::Iterative => {
            let d = session.arch.num_params();
            let pool = cfg.pool().candidates(&session.arch).iter().filter(|&&b| b).count();
            let mut rounds = Vec::new();
            for &c in &cfg.sweep.compression_ratios {
                let k = iterations_for_compression(d, pool, cfg.pruning.per_iteration_fraction, c)?;
                if k == 0 {
                    return Err(Error::Config(format!("compression {c} needs no pruning")));
                }
                rounds.push((k, format!("compression {c}")));
            }
            vec![CellKind::Chain(rounds)]
        }
    };
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &technique in &cfg.techniques {
            for &t in &session.retrain_times {
                for kind in &kinds {
                    cells.push(Cell {
                        seed,
                        technique,
                        t,
                        kind: kind.clone(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell(session: &Session, store: &SnapshotStore, cell: &Cell) -> Vec<std::result::Result<ResultRow, CellFailure>> {
    let arch = session.config.arch_name();
    let technique = RetrainTechnique::new(cell.technique, cell.t);
    let retrainer = session.retrainer(store, cell.seed);
    let fail = |target: String, e: &Error| CellFailure {
        seed: cell.seed,
        technique: cell.technique,
        t_epochs: cell.t,
        target,
        error: e.to_string(),
    };
    match &cell.kind {
        CellKind::OneShot(target) => vec![retrainer
            .one_shot(target, technique)
            .map(|r| to_row(&arch, cell.seed, technique, &r))
            .map_err(|e| fail(target_label(target), &e))],
        CellKind::Chain(rounds) => {
            let k = rounds.iter().map(|r| r.0).max().unwrap_or(0);
            match retrainer.iterative(k, technique, session.config.pruning.per_iteration_fraction) {
                Ok(results) => rounds
                    .iter()
                    .map(|(j, _)| Ok(to_row(&arch, cell.seed, technique, &results[j - 1])))
                    .collect(),
                Err(e) => rounds
                    .iter()
                    .map(|(_, label)| Err(fail(label.clone(), &e)))
                    .collect(),
            }
        }
    }
}

fn row_order(a: &ResultRow, b: &ResultRow) -> std::cmp::Ordering {
    a.arch
        .cmp(&b.arch)
        .then(a.technique.cmp(&b.technique))
        .then(a.compression_ratio.total_cmp(&b.compression_ratio))
        .then(a.t_epochs.total_cmp(&b.t_epochs))
        .then(a.seed.cmp(&b.seed))
}

/// Trains (or reuses) one run per seed, then evaluates every cell on a pool
/// of `jobs` worker threads. Results do not depend on `jobs`.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    let session = Session::new(config.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let cells = build_cells(&session)?;
    pool.install(|| {
        let stores: BTreeMap<u64, std::result::Result<SnapshotStore, String>> = session
            .config
            .seeds
            .par_iter()
            .map(|&seed| (seed, session.trained_store(seed).map_err(|e| e.to_string())))
            .collect();
        let outcomes: Vec<_> = cells
            .par_iter()
            .flat_map_iter(|cell| match &stores[&cell.seed] {
                Ok(store) => run_cell(&session, store, cell),
                Err(e) => vec![Err(CellFailure {
                    seed: cell.seed,
                    technique: cell.technique,
                    t_epochs: cell.t,
                    target: match &cell.kind {
                        CellKind::OneShot(t) => target_label(t),
                        CellKind::Chain(_) => "iterative".into(),
                    },
                    error: format!("original training failed: {e}"),
                })],
            })
            .collect();
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for o in outcomes {
            match o {
                Ok(r) => rows.push(r),
                Err(f) => {
                    log::warn!(
                        "cell failed (seed {}, {} t={}, {}): {}",
                        f.seed,
                        f.technique,
                        f.t_epochs,
                        f.target,
                        f.error
                    );
                    failures.push(f)
                }
            }
        }
        rows.sort_by(row_order);
        Ok(ExperimentOutcome { rows, failures })
    })
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Best retraining time per (arch, technique, compression), chosen by median
/// validation accuracy over seeds; ties go to the shorter time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub arch: String,
    pub technique: Technique,
    pub compression_ratio: f64,
    pub t_epochs: f64,
    pub seeds: usize,
    pub val_accuracy_median: f64,
    pub test_accuracy_median: f64,
    pub test_accuracy_min: f64,
    pub test_accuracy_max: f64,
    pub flops_median: f64,
    pub retrain_epochs: f64,
    pub total_epochs: f64,
}

type GroupKey = (String, Technique, u64);

fn group_by_t(rows: &[ResultRow]) -> BTreeMap<GroupKey, BTreeMap<u64, Vec<&ResultRow>>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
    for r in rows {
        // compression ratios and times are positive, so bit order is numeric order
        groups
            .entry((r.arch.clone(), r.technique, r.compression_ratio.to_bits()))
            .or_default()
            .entry(r.t_epochs.to_bits())
            .or_default()
            .push(r);
    }
    groups
}

pub fn pareto(rows: &[ResultRow]) -> Vec<ParetoRow> {
    let mut out = Vec::new();
    for ((arch, technique, c), by_t) in group_by_t(rows) {
        let mut best: Option<ParetoRow> = None;
        for (t, cell) in by_t {
            let vals: Vec<f64> = cell.iter().map(|r| r.val_accuracy).collect();
            let tests: Vec<f64> = cell.iter().map(|r| r.test_accuracy).collect();
            let flops: Vec<f64> = cell.iter().map(|r| r.flops as f64).collect();
            let candidate = ParetoRow {
                arch: arch.clone(),
                technique,
                compression_ratio: f64::from_bits(c),
                t_epochs: f64::from_bits(t),
                seeds: cell.len(),
                val_accuracy_median: median(&vals),
                test_accuracy_median: median(&tests),
                test_accuracy_min: tests.iter().copied().fold(f64::INFINITY, f64::min),
                test_accuracy_max: tests.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                flops_median: median(&flops),
                retrain_epochs: cell[0].retrain_epochs,
                total_epochs: cell[0].total_epochs,
            };
            if best
                .as_ref()
                .is_none_or(|b| candidate.val_accuracy_median > b.val_accuracy_median)
            {
                best = Some(candidate);
            }
        }
        out.extend(best);
    }
    out
}

/// Longest contiguous run of the retraining grid, as fractions of `T`, on
/// which both weight rewinding and learning-rate rewinding match or beat
/// fine-tuning in median test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeZone {
    pub arch: String,
    pub compression_ratio: f64,
    pub from_fraction: Option<f64>,
    pub to_fraction: Option<f64>,
}

pub fn safe_zones(rows: &[ResultRow], total_epochs: f64) -> Result<Vec<SafeZone>> {
    if !(total_epochs > 0.0) {
        return Err(Error::Config(format!("invalid training length {total_epochs}")));
    }
    let groups = group_by_t(rows);
    let curve = |arch: &str, technique: Technique, c: u64| -> Option<Vec<(f64, f64)>> {
        groups.get(&(arch.to_string(), technique, c)).map(|by_t| {
            by_t.iter()
                .map(|(t, cell)| {
                    let tests: Vec<f64> = cell.iter().map(|r| r.test_accuracy).collect();
                    (f64::from_bits(*t), median(&tests))
                })
                .collect()
        })
    };
    let keys: BTreeSet<(String, u64)> = groups.keys().map(|(a, _, c)| (a.clone(), *c)).collect();
    let mut out = Vec::new();
    for (arch, c) in keys {
        let (Some(ft), Some(wr), Some(lrr)) = (
            curve(&arch, Technique::FineTune, c),
            curve(&arch, Technique::WeightRewind, c),
            curve(&arch, Technique::LrRewind, c),
        ) else {
            continue;
        };
        let grid = |v: &[(f64, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
        if grid(&ft) != grid(&wr) || grid(&ft) != grid(&lrr) {
            return Err(Error::Config(format!(
                "{arch} at compression {}: techniques were run on different retraining grids",
                f64::from_bits(c)
            )));
        }
        let mut best: Option<(usize, usize)> = None;
        let mut run_start = None;
        for i in 0..=ft.len() {
            let ok = i < ft.len() && wr[i].1 >= ft[i].1 && lrr[i].1 >= ft[i].1;
            match (ok, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(s)) => {
                    if best.is_none_or(|(bs, be)| i - s > be - bs + 1) {
                        best = Some((s, i - 1));
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
        out.push(SafeZone {
            arch,
            compression_ratio: f64::from_bits(c),
            from_fraction: best.map(|(s, _)| ft[s].0 / total_epochs),
            to_fraction: best.map(|(_, e)| ft[e].0 / total_epochs),
        });
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RAW_COLUMNS: [&str; 10] = [
    "arch",
    "technique",
    "t_epochs",
    "compression_ratio",
    "seed",
    "val_accuracy",
    "test_accuracy",
    "flops",
    "retrain_epochs",
    "total_epochs",
];

/// Writes `raw.csv`, `pareto.csv` and `failures.csv` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("raw.csv"), &outcome.rows, &RAW_COLUMNS)?;
    write_csv(
        &dir.join("pareto.csv"),
        &pareto(&outcome.rows),
        &[
            "arch",
            "technique",
            "compression_ratio",
            "t_epochs",
            "seeds",
            "val_accuracy_median",
            "test_accuracy_median",
            "test_accuracy_min",
            "test_accuracy_max",
            "flops_median",
            "retrain_epochs",
            "total_epochs",
        ],
    )?;
    write_csv(
        &dir.join("failures.csv"),
        &outcome.failures,
        &["seed", "technique", "t_epochs", "target", "error"],
    )
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RAW_COLUMNS {
        return Err(Error::Config(format!(
            "{} has columns {header:?}, expected {RAW_COLUMNS:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
