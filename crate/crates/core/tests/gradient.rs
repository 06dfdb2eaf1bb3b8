mod common;

use common::*;
use cycreg::energy::{EnergyProblem, LossWeights, Mode};
use cycreg::grid::{Grid, Volume3, VolumeKind};
use cycreg::transforms::IntegrationConfig;
use proptest::prelude::*;

fn problem(mode: Mode, seed: u64) -> EnergyProblem {
    let g = Grid::unit([12, 12, 12]).unwrap();
    let (a, b) = (textured_mask(g, 2 * seed), textured_mask(g, 2 * seed + 1));
    EnergyProblem::new(a, b, mode, LossWeights::default(), IntegrationConfig::default()).unwrap()
}

#[test]
fn analytic_gradient_matches_central_differences_in_every_mode() {
    for mode in Mode::ALL {
        for seed in 0..3 {
            let p = problem(mode, seed);
            let x = in_cell_params(&p, mode, seed);
            let c = finite_difference_check(&p, &x, 50, 1e-3, 1000 + seed);
            assert!(c.max_rel_err <= 1e-4, "{mode} seed {seed}: {c:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn gradient_check_holds_on_random_instances(seed in 0u64..10_000, m in 0usize..5) {
        let mode = Mode::ALL[m];
        let p = problem(mode, seed);
        let x = in_cell_params(&p, mode, seed);
        let c = finite_difference_check(&p, &x, 50, 1e-3, seed ^ 0x5eed);
        prop_assert!(c.max_rel_err <= 1e-4, "{} {:?}", mode, c);
    }
}

#[test]
fn central_difference_error_shrinks_quadratically() {
    // an exact gradient leaves only the O(h^2) truncation of the oracle
    for mode in [Mode::Diffeo, Mode::DiffeoInc2, Mode::DiffeocycInc2] {
        let p = problem(mode, 7);
        let x = in_cell_params(&p, mode, 7);
        let (_, grad) = p.evaluate(&x).unwrap();
        // x component at the centre of the first field
        let i = 3 * (3 + 6 * (3 + 6 * 3));
        let fd = |h: f64| {
            let mut q = x.clone();
            q[i] = x[i] + h;
            let up = p.loss(&q).unwrap().total;
            q[i] = x[i] - h;
            (up - p.loss(&q).unwrap().total) / (2.0 * h)
        };
        let e1 = (fd(4e-2) - grad[i]).abs();
        let e2 = (fd(4e-3) - grad[i]).abs();
        assert!(e1 > 0.0 && (e1 / e2 - 100.0).abs() < 10.0, "{mode}: {e1:e} {e2:e}");
    }
}

#[test]
fn antifold_gradient_matches_differences_where_the_gate_is_open() {
    let g = Grid::unit([12, 12, 12]).unwrap();
    let (a, b) = random_mask_pair(g, 3);
    for mode in [Mode::Diffeo, Mode::DiffeocycInc2] {
        let p = EnergyProblem::new(a.clone(), b.clone(), mode, LossWeights::default(), IntegrationConfig::default())
            .unwrap();
        let x = random_params(p.param_len(), 2.5, 11);
        assert!(p.loss(&x).unwrap().antifold > 0.0);
        // a tiny step keeps the probe clear of interpolation kinks and gate flips
        let c = finite_difference_check(&p, &x, 50, 1e-6, 12);
        assert!(c.max_rel_err <= 1e-4, "{mode}: {c:?}");
    }
}

#[test]
fn zero_gradient_at_global_minimum() {
    let g = Grid::unit([12, 12, 12]).unwrap();
    // uniform masks put the optimum away from any interpolation kink
    let a = Volume3::from_fn(g, VolumeKind::Mask, |_| 1.0).unwrap();
    for mode in Mode::ALL {
        let p = EnergyProblem::new(a.clone(), a.clone(), mode, LossWeights::default(), IntegrationConfig::default())
            .unwrap();
        let (loss, grad) = p.evaluate(&p.zero_params()).unwrap();
        assert!(loss.total < 1e-9);
        assert!(grad.iter().all(|v| v.abs() < 1e-9), "{mode}");
    }
}
