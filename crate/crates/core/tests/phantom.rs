use cycreg::grid::VectorField3;
use cycreg::metrics::{components, dsc};
use cycreg::phantom::{gen_gt_deformation, gen_liver_mask, gen_pair, random_spec, PhantomSpec, TumorKind, TumorPlan};
use cycreg::transforms::warp;
use cycreg::Error;
use proptest::prelude::*;

const N: [usize; 3] = [64, 64, 64];

/// det(I + grad phi) by its own central differences (one-sided at borders).
fn fold_count(phi: &VectorField3) -> usize {
    let d = phi.grid().dims;
    let at = |c: [usize; 3]| phi.get(c[0], c[1], c[2]);
    let mut folds = 0;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let c = [i, j, k];
                let mut m = [[0.0; 3]; 3];
                for axis in 0..3 {
                    let (mut lo, mut hi) = (c, c);
                    lo[axis] = c[axis].saturating_sub(1);
                    hi[axis] = (c[axis] + 1).min(d[axis] - 1);
                    let h = (hi[axis] - lo[axis]) as f64;
                    let (a, b) = (at(lo), at(hi));
                    for comp in 0..3 {
                        m[comp][axis] = (b[comp] - a[comp]) / h + if comp == axis { 1.0 } else { 0.0 };
                    }
                }
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                if det <= 0.0 {
                    folds += 1;
                }
            }
        }
    }
    folds
}

#[test]
fn liver_is_one_connected_component() {
    for seed in 0..4 {
        let mask = gen_liver_mask(seed, N).unwrap();
        assert_eq!(components(&mask).len(), 1, "seed {seed}");
    }
}

#[test]
fn amplitude_six_stays_in_range_without_folds() {
    for seed in [0, 5, 11] {
        let phi = gen_gt_deformation(seed, N, 6.0).unwrap();
        let m = phi.max_norm();
        assert!((4.8..=7.2).contains(&m), "seed {seed}: max {m}");
        assert_eq!(fold_count(&phi), 0, "seed {seed}");
    }
}

#[test]
fn different_seeds_give_different_fields() {
    let a = gen_gt_deformation(1, N, 6.0).unwrap();
    let b = gen_gt_deformation(2, N, 6.0).unwrap();
    let mad: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).abs()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / a.data().len() as f64;
    assert!(mad > 0.1, "{mad}");
}

#[test]
fn undeformed_noiseless_pair_is_identical() {
    let spec = PhantomSpec {
        seed: 7,
        deform_amplitude: 0.0,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    let pair = gen_pair(&spec).unwrap();
    assert_eq!(pair.image_a.data(), pair.image_b.data());
    assert_eq!(pair.mask_a.data(), pair.mask_b.data());
}

fn single_tumor_pair(center: [f64; 3], r0: f64, r1: f64) -> cycreg::phantom::PhantomPair {
    gen_pair(&PhantomSpec {
        seed: 3,
        deform_amplitude: 0.0,
        tumor_plan: vec![TumorPlan {
            center,
            radius_t0: r0,
            radius_t1: r1,
            kind: TumorKind::Growing,
        }],
        ..PhantomSpec::default()
    })
    .unwrap()
}

/// Lattice points within distance r of c.
fn lattice_count(c: [f64; 3], r: f64) -> usize {
    let span = |a: usize| (c[a] - r).ceil() as i64..=(c[a] + r).floor() as i64;
    let mut n = 0;
    for k in span(2) {
        for j in span(1) {
            for i in span(0) {
                let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                n += usize::from(d2 <= r * r);
            }
        }
    }
    n
}

#[test]
fn growing_tumor_volume_follows_radius_cubed() {
    let pair = single_tumor_pair([32.0, 32.0, 32.0], 3.0, 5.0);
    let ratio = pair.tumors_b.count_inside() as f64 / pair.tumors_a.count_inside() as f64;
    let expected = (5.0f64 / 3.0).powi(3);
    assert!((ratio / expected - 1.0).abs() <= 0.10, "{ratio} vs {expected}");
}

#[test]
fn tumor_voxels_are_the_lattice_points_of_the_ball() {
    let c = [31.5, 30.25, 32.7];
    let pair = single_tumor_pair(c, 3.0, 5.5);
    assert_eq!(pair.tumors_a.count_inside(), lattice_count(c, 3.0));
    assert_eq!(pair.tumors_b.count_inside(), lattice_count(c, 5.5));
}

#[test]
fn deformed_pairs_start_misaligned_and_match_their_ground_truth() {
    for seed in [0, 9] {
        let spec = random_spec(seed, N, 6.0, &[TumorKind::Stable, TumorKind::Shrinking]).unwrap();
        let pair = gen_pair(&spec).unwrap();
        assert!(dsc(&pair.mask_a, &pair.mask_b).unwrap() < 0.95, "seed {seed}");
        let rebuilt = warp(&pair.mask_a, &pair.gt).unwrap().thresholded();
        assert_eq!(rebuilt.data(), pair.mask_b.data());
        assert_eq!(pair.tumors.len(), 2);
        for i in 0..2 {
            let ta = pair.tumor_mask_a(i);
            let tb = pair.tumor_mask_b(i);
            assert!(components(&ta).len() == 1 && components(&tb).len() == 1);
        }
    }
}

#[test]
fn tumor_outside_the_liver_is_rejected() {
    let spec = PhantomSpec {
        deform_amplitude: 0.0,
        tumor_plan: vec![TumorPlan {
            center: [2.0, 2.0, 2.0],
            radius_t0: 2.0,
            radius_t1: 2.0,
            kind: TumorKind::Stable,
        }],
        ..PhantomSpec::default()
    };
    assert!(matches!(gen_pair(&spec), Err(Error::TumorOutsideLiver { index: 0 })));
}

#[test]
fn spec_json_round_trip() {
    let spec = random_spec(4, N, 6.0, &[TumorKind::New, TumorKind::Vanished]).unwrap();
    let text = serde_json::to_string(&spec).unwrap();
    let back: PhantomSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    // omitted fields take their defaults
    let partial: PhantomSpec = serde_json::from_str(r#"{"seed": 2}"#).unwrap();
    assert_eq!(partial.dims, [64, 64, 64]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]
    #[test]
    fn pairs_are_bit_deterministic_and_fold_free(seed in 0u64..1000, amp in 1.0f64..4.0) {
        let spec = PhantomSpec { seed, dims: [40, 40, 40], deform_amplitude: amp, ..PhantomSpec::default() };
        let a = gen_pair(&spec).unwrap();
        let b = gen_pair(&spec).unwrap();
        prop_assert_eq!(a.image_b.data(), b.image_b.data());
        prop_assert_eq!(a.gt.data(), b.gt.data());
        prop_assert_eq!(fold_count(&a.gt), 0);
        for img in [&a.image_a, &a.image_b] {
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
