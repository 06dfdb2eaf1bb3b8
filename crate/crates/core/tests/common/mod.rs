//! Shared test oracles.
#![allow(dead_code)]

use cycreg::energy::{EnergyProblem, Mode};
use cycreg::grid::{Grid, Volume3, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of comparing analytic and central-difference derivatives.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: (usize, f64, f64),
    pub probes: usize,
}

/// Derivatives smaller than this are compared absolutely. A central
/// difference with h = 1e-3 carries O(h^2) truncation of a few 1e-9 on the
/// integrated modes, which no exact gradient can match relatively near zero.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central differences of the total energy at `probes` random parameters.
pub fn finite_difference_check(
    problem: &EnergyProblem,
    params: &[f64],
    probes: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let (_, grad) = problem.evaluate(params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0, 0.0, 0.0);
    let mut max_rel_err: f64 = 0.0;
    let mut p = params.to_vec();
    for _ in 0..probes {
        let i = rng.random_range(0..params.len());
        p[i] = params[i] + h;
        let up = problem.loss(&p).unwrap().total;
        p[i] = params[i] - h;
        let down = problem.loss(&p).unwrap().total;
        p[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(grad[i], fd);
        if e > max_rel_err {
            max_rel_err = e;
            worst = (i, grad[i], fd);
        }
    }
    GradCheck {
        max_rel_err,
        worst,
        probes,
    }
}

pub fn random_params(n: usize, amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

/// Binary ball.
pub fn ball(grid: Grid, center: [f64; 3], radius: f64) -> Volume3 {
    Volume3::from_fn(grid, VolumeKind::Mask, |[i, j, k]| {
        let d2 = (i as f64 - center[0]).powi(2)
            + (j as f64 - center[1]).powi(2)
            + (k as f64 - center[2]).powi(2);
        if d2 <= radius * radius {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Ball with a smooth logistic rim of the given width.
pub fn soft_ball(grid: Grid, center: [f64; 3], radius: f64, width: f64) -> Volume3 {
    Volume3::from_fn(grid, VolumeKind::Mask, |[i, j, k]| {
        let d = ((i as f64 - center[0]).powi(2)
            + (j as f64 - center[1]).powi(2)
            + (k as f64 - center[2]).powi(2))
        .sqrt();
        1.0 / (1.0 + ((d - radius) / width).exp())
    })
    .unwrap()
}

/// Random parameters whose displacements stay strictly inside one lattice
/// cell along every axis, so every trilinear sample of the pipeline is
/// polynomial in the parameters within a finite-difference step.
pub fn in_cell_params(problem: &EnergyProblem, mode: Mode, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: [f64; 3] = [0, 1, 2].map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
    // coarse values double on upsampling; two incremental fields add
    let (base, jitter) = if mode.steps() == 2 { (0.125, 0.1) } else { (0.25, 0.2) };
    (0..problem.param_len())
        .map(|i| signs[i % 3] * (base + rng.random_range(-jitter..jitter)))
        .collect()
}

/// Two overlapping soft balls with random centres and radii.
pub fn random_mask_pair(grid: Grid, seed: u64) -> (Volume3, Volume3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = grid.dims.map(|n| n as f64 / 2.0 - 0.5);
    let ball_at = |rng: &mut ChaCha8Rng| {
        let centre = c.map(|x| x + rng.random_range(-1.0..1.0));
        soft_ball(grid, centre, rng.random_range(2.5..4.0), rng.random_range(0.5..1.2))
    };
    let a = ball_at(&mut rng);
    let b = ball_at(&mut rng);
    (a, b)
}



/// Soft mask of box-smoothed uniform noise filling the whole grid.
pub fn textured_mask(grid: Grid, seed: u64) -> Volume3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..grid.len()).map(|_| rng.random::<f64>()).collect();
    let [nx, ny, nz] = grid.dims;
    let at = |i: isize, j: isize, k: isize| {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        raw[c(i, nx) + nx * (c(j, ny) + ny * c(k, nz))]
    };
    Volume3::from_fn(grid, VolumeKind::Mask, |[i, j, k]| {
        let (i, j, k) = (i as isize, j as isize, k as isize);
        let mut s = 0.0;
        for d in [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
            s += at(i + d[0], j + d[1], k + d[2]);
        }
        s / 7.0
    })
    .unwrap()
}
