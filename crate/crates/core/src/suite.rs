//! Pair-by-mode evaluation tables.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::Mode;
use crate::engine::{register, RegistrationConfig, RegistrationResult};
use crate::metrics::{dsc, report, MetricsReport};
use crate::phantom::{gen_pair, PhantomPair, PhantomSpec};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub pair: usize,
    pub seed: u64,
    pub mode: Mode,
    pub initial_dsc: f64,
    pub iterations: usize,
    pub best_total: f64,
    pub wall_time_s: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub pairs: usize,
    pub mean_dsc: f64,
    pub mean_folds: f64,
    pub mean_grad_l2: f64,
    pub mean_cycle_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
    pub summary: Vec<ModeSummary>,
}

pub fn run_pair(pair: &PhantomPair, index: usize, cfg: &RegistrationConfig) -> Result<(SuiteRow, RegistrationResult)> {
    let start = Instant::now();
    let result = register(&pair.mask_a, &pair.mask_b, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let metrics = report(&pair.eval_inputs(), &result)?;
    let row = SuiteRow {
        pair: index,
        seed: pair.spec.seed,
        mode: cfg.mode,
        initial_dsc: dsc(&pair.mask_a, &pair.mask_b)?,
        iterations: result.iterations_run,
        best_total: result.best_loss().total,
        wall_time_s,
        metrics,
    };
    Ok((row, result))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(rows: &[SuiteRow], modes: &[Mode]) -> Vec<ModeSummary> {
    modes
        .iter()
        .map(|&mode| {
            let of = || rows.iter().filter(move |r| r.mode == mode);
            ModeSummary {
                mode,
                pairs: of().count(),
                mean_dsc: mean(of().map(|r| r.metrics.dsc)).unwrap_or(0.0),
                mean_folds: mean(of().map(|r| r.metrics.folds as f64)).unwrap_or(0.0),
                mean_grad_l2: mean(of().map(|r| r.metrics.grad_l2)).unwrap_or(0.0),
                mean_cycle_l1: mean(of().filter_map(|r| r.metrics.cycle_l1)),
            }
        })
        .collect()
}

/// Generates every pair once and registers it under each mode, pair-major.
/// `progress` sees each row as it completes.
pub fn run_suite(
    specs: &[PhantomSpec],
    modes: &[Mode],
    base: &RegistrationConfig,
    mut progress: impl FnMut(&SuiteRow),
) -> Result<SuiteTable> {
    let mut rows = Vec::new();
    for (index, spec) in specs.iter().enumerate() {
        let pair = gen_pair(spec)?;
        for &mode in modes {
            let (row, _) = run_pair(&pair, index, &base.clone().with_mode(mode))?;
            progress(&row);
            rows.push(row);
        }
    }
    let summary = summarize(&rows, modes);
    Ok(SuiteTable { rows, summary })
}
