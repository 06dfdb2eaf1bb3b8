//! Synthetic longitudinal liver phantoms with a known deformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::{gradient_central, sample_field_trilinear, upsample2x, FieldKind, Grid, Vec3, VectorField3, Volume3, VolumeKind};
use crate::transforms::{integrate_velocity, jacobian_stats, warp, IntegrationConfig};
use crate::{Error, Result};

pub const BACKGROUND_INTENSITY: f64 = 0.15;
pub const LIVER_INTENSITY: f64 = 0.55;
pub const TUMOR_INTENSITY: f64 = 0.35;
pub const EFFUSION_INTENSITY: f64 = 0.3;
pub const MIN_PHANTOM_DIM: usize = 32;

const SUPERELLIPSOID_EXPONENT: f64 = 2.5;
/// Semi-axes as fractions of the grid extent; about 18% volume fraction.
const LIVER_SEMI_AXES: [f64; 3] = [0.36, 0.335, 0.30];
const SHIFT_WEIGHT: f64 = 0.5;
const DRIFT_WEIGHT: f64 = 0.3;
const BULGE_WEIGHT: f64 = 0.35;
const EFFUSION_WIDTH: usize = 2;
/// Clearance between a tumor and the liver surface when planning.
const TUMOR_CLEARANCE: f64 = 2.0;

// rng streams, one per independent random quantity
const STREAM_LIVER: u64 = 1;
const STREAM_DEFORM: u64 = 2;
const STREAM_NOISE_A: u64 = 3;
const STREAM_NOISE_B: u64 = 4;
const STREAM_PLAN: u64 = 5;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorKind {
    Stable,
    Growing,
    Shrinking,
    New,
    Vanished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorPlan {
    /// Centre in moving-image (t0) voxel coordinates.
    pub center: Vec3,
    pub radius_t0: f64,
    pub radius_t1: f64,
    pub kind: TumorKind,
}

impl TumorPlan {
    fn validate(&self, index: usize) -> Result<()> {
        let bad = |why: &str| {
            Err(Error::InvalidConfig(format!(
                "tumor {index} ({:?}): {why} (radii {} -> {})",
                self.kind, self.radius_t0, self.radius_t1
            )))
        };
        let (r0, r1) = (self.radius_t0, self.radius_t1);
        if !(r0.is_finite() && r1.is_finite() && r0 >= 0.0 && r1 >= 0.0) || self.center.iter().any(|c| !c.is_finite()) {
            return bad("radii must be finite and nonnegative");
        }
        let ok = match self.kind {
            TumorKind::Stable => r0 > 0.0 && r1 == r0,
            TumorKind::Growing => r0 > 0.0 && r1 > r0,
            TumorKind::Shrinking => r1 > 0.0 && r1 < r0,
            TumorKind::New => r0 == 0.0 && r1 > 0.0,
            TumorKind::Vanished => r0 > 0.0 && r1 == 0.0,
        };
        if ok {
            Ok(())
        } else {
            bad("radii do not match the tumor kind")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Target maximum ground-truth displacement in voxels.
    pub deform_amplitude: f64,
    pub tumor_plan: Vec<TumorPlan>,
    pub noise_sigma: f64,
    pub effusion: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 64],
            deform_amplitude: 6.0,
            tumor_plan: Vec::new(),
            noise_sigma: 0.02,
            effusion: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.deform_amplitude.is_finite() && self.deform_amplitude >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "deform_amplitude must be nonnegative, got {}",
                self.deform_amplitude
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        for (i, t) in self.tumor_plan.iter().enumerate() {
            t.validate(i)?;
        }
        Ok(())
    }
}

/// Where a planned tumor ended up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedTumor {
    pub plan: TumorPlan,
    /// Centre carried to the fixed (t1) image by the ground truth.
    pub center_t1: Vec3,
}

#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub image_a: Volume3,
    pub image_b: Volume3,
    pub mask_a: Volume3,
    pub mask_b: Volume3,
    pub tumors_a: Volume3,
    pub tumors_b: Volume3,
    /// Pull-back displacement with `mask_b = warp(mask_a, gt)` rethresholded.
    pub gt: VectorField3,
    pub tumors: Vec<PlacedTumor>,
    pub spec: PhantomSpec,
}

impl PhantomPair {
    /// Moving-image mask of one planned tumor (empty for new tumors).
    pub fn tumor_mask_a(&self, index: usize) -> Volume3 {
        let t = &self.tumors[index];
        ball(self.mask_a.grid(), t.plan.center, t.plan.radius_t0)
    }

    /// Fixed-image mask of one planned tumor (empty for vanished tumors).
    pub fn tumor_mask_b(&self, index: usize) -> Volume3 {
        let t = &self.tumors[index];
        ball(self.mask_b.grid(), t.center_t1, t.plan.radius_t1)
    }
}

fn ball(grid: &Grid, c: Vec3, r: f64) -> Volume3 {
    let data = (0..grid.len())
        .map(|idx| {
            let p = grid.coords(idx);
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            if r > 0.0 && d2 <= r * r {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Volume3::new(*grid, data, VolumeKind::Mask).expect("binary data is valid")
}

fn check_dims(dims: [usize; 3]) -> Result<Grid> {
    if dims.iter().any(|&n| n < MIN_PHANTOM_DIM) {
        return Err(Error::InvalidGrid(format!(
            "phantom dims {dims:?} must be at least {MIN_PHANTOM_DIM} per axis"
        )));
    }
    Grid::unit(dims)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// Superellipsoid liver with a few random low-frequency radial harmonics.
pub fn gen_liver_mask(seed: u64, dims: [usize; 3]) -> Result<Volume3> {
    let grid = check_dims(dims)?;
    let mut rng = rng_for(seed, STREAM_LIVER);
    let semi: Vec3 = [0, 1, 2].map(|a| LIVER_SEMI_AXES[a] * dims[a] as f64 * rng.random_range(0.97..1.03));
    let centre: Vec3 = [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.5..1.5));
    let count = rng.random_range(3..=5);
    let harmonics: Vec<(Vec3, f64, f64, f64)> = (0..count)
        .map(|_| {
            let dir = random_unit(&mut rng);
            let freq = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.02..0.05);
            (dir, freq, phase, amp)
        })
        .collect();
    let e = SUPERELLIPSOID_EXPONENT;
    Volume3::from_fn(grid, VolumeKind::Mask, |[i, j, k]| {
        let q = [i as f64, j as f64, k as f64];
        let u: Vec3 = [0, 1, 2].map(|a| (q[a] - centre[a]) / semi[a]);
        let rho = u.iter().map(|c| c.abs().powf(e)).sum::<f64>().powf(1.0 / e);
        let len = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if len == 0.0 {
            return 1.0;
        }
        let bound: f64 = 1.0
            + harmonics
                .iter()
                .map(|(d, f, ph, a)| {
                    let cos_t = (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]) / len;
                    a * (f * std::f64::consts::PI * cos_t + ph).cos()
                })
                .sum::<f64>();
        if rho <= bound {
            1.0
        } else {
            0.0
        }
    })
}

/// Separable Gaussian blur with clamped borders, truncated at 3 sigma.
fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * stride[o1] + b * stride[o2];
                line.clear();
                line.extend((0..n).map(|i| data[base + i * stride[axis]]));
                for i in 0..n {
                    let mut s = 0.0;
                    for (w, d) in kernel.iter().zip(-r..=r) {
                        let j = (i as isize + d).clamp(0, n as isize - 1) as usize;
                        s += w * line[j];
                    }
                    data[base + i * stride[axis]] = s;
                }
            }
        }
    }
}

/// Smooth random stationary velocity: a global translation, a
/// divergence-free drift (curl of a blurred noise potential) and an inward
/// Gaussian bulge near the liver surface. Unit maximum norm.
fn gt_velocity(seed: u64, grid: &Grid) -> Result<VectorField3> {
    let dims = grid.dims;
    let mut rng = rng_for(seed, STREAM_DEFORM);
    let min_dim = *dims.iter().min().expect("three axes") as f64;
    // the potential is drawn and blurred at half resolution, then upsampled
    let coarse = grid.coarse()?;
    let sigma = (min_dim / 8.0).max(4.0);
    let potential: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let mut comp: Vec<f64> = (0..coarse.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            gaussian_smooth(&mut comp, coarse.dims, sigma);
            comp
        })
        .collect();
    let pot = VectorField3::new(
        coarse,
        (0..coarse.len()).map(|i| [potential[0][i], potential[1][i], potential[2][i]]).collect(),
        FieldKind::Velocity,
    )?;
    // a light fine-scale blur removes the kinks of trilinear upsampling
    let mut fine = upsample2x(&pot, grid)?.into_data();
    for a in 0..3 {
        let mut comp: Vec<f64> = fine.iter().map(|v| v[a]).collect();
        gaussian_smooth(&mut comp, dims, 1.5);
        fine.iter_mut().zip(comp).for_each(|(v, c)| v[a] = c);
    }
    let pot = VectorField3::new(*grid, fine, FieldKind::Velocity)?;
    let jac = gradient_central(&pot);
    let curl: Vec<Vec3> = jac
        .iter()
        .map(|j| [j[2][1] - j[1][2], j[0][2] - j[2][0], j[1][0] - j[0][1]])
        .collect();
    let drift = VectorField3::new(*grid, curl, FieldKind::Velocity)?;
    let drift_scale = 1.0 / drift.max_norm().max(1e-12);

    let shift = random_unit(&mut rng);
    let dir = random_unit(&mut rng);
    let centre: Vec3 = [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) / 2.0);
    let site: Vec3 = [0, 1, 2].map(|a| centre[a] + dir[a] * LIVER_SEMI_AXES[a] * dims[a] as f64);
    let width = 0.11 * min_dim;
    let v = VectorField3::from_fn(*grid, FieldKind::Velocity, |[i, j, k]| {
        let p = [i as f64, j as f64, k as f64];
        let d2: f64 = (0..3).map(|a| (p[a] - site[a]).powi(2)).sum();
        let g = (-d2 / (2.0 * width * width)).exp();
        let d = drift.get(i, j, k);
        // the bulge pushes the surface inwards: fixed points sample outward
        [0, 1, 2].map(|a| SHIFT_WEIGHT * shift[a] + DRIFT_WEIGHT * drift_scale * d[a] + BULGE_WEIGHT * g * dir[a])
    })?;
    let peak = v.max_norm();
    Ok(v.scaled(1.0 / peak))
}

fn max_gradient_norm(v: &VectorField3) -> f64 {
    gradient_central(v)
        .iter()
        .map(|j| j.iter().flatten().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Ground-truth displacement whose maximum is about `amplitude` voxels.
///
/// The velocity is rejected when its scaled Jacobian norm reaches 1, and the
/// integrated field is rejected if any voxel folds.
pub fn gen_gt_deformation(seed: u64, dims: [usize; 3], amplitude: f64) -> Result<VectorField3> {
    let grid = check_dims(dims)?;
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "deformation amplitude must be nonnegative, got {amplitude}"
        )));
    }
    if amplitude == 0.0 {
        return Ok(VectorField3::zeros(grid, FieldKind::Displacement));
    }
    let unit = gt_velocity(seed, &grid)?;
    let lipschitz = max_gradient_norm(&unit);
    let cfg = IntegrationConfig::default();
    let mut scale = amplitude;
    let mut phi = integrate_velocity(&unit.scaled(scale), &cfg)?;
    for _ in 0..8 {
        let m = phi.max_norm();
        if (m - amplitude).abs() <= 0.01 * amplitude {
            break;
        }
        scale *= amplitude / m;
        phi = integrate_velocity(&unit.scaled(scale), &cfg)?;
    }
    if scale * lipschitz >= 1.0 {
        return Err(Error::Deformation(format!(
            "amplitude {amplitude} needs velocity Jacobian norm {:.3} >= 1",
            scale * lipschitz
        )));
    }
    let everywhere = Volume3::from_parts(grid, vec![1.0; grid.len()], VolumeKind::Mask);
    let stats = jacobian_stats(&phi, &everywhere)?;
    if stats.nonpositive_count > 0 {
        return Err(Error::Deformation(format!(
            "amplitude {amplitude} folds {} voxels",
            stats.nonpositive_count
        )));
    }
    Ok(phi)
}

/// Solves `q + phi(q) = c` by fixed-point iteration.
fn carry_point(phi: &VectorField3, c: Vec3) -> Result<Vec3> {
    let mut q = c;
    for _ in 0..50 {
        let d = sample_field_trilinear(phi, q)?;
        q = [0, 1, 2].map(|a| c[a] - d[a]);
    }
    Ok(q)
}

fn ball_inside(mask: &Volume3, c: Vec3, r: f64) -> bool {
    let g = mask.grid();
    let lo = |a: usize| (c[a] - r).floor().max(0.0) as usize;
    let hi = |a: usize| ((c[a] + r).ceil().max(0.0) as usize).min(g.dims[a] - 1);
    if (0..3).any(|a| c[a] - r < 0.0 || c[a] + r > (g.dims[a] - 1) as f64) {
        return false;
    }
    for k in lo(2)..=hi(2) {
        for j in lo(1)..=hi(1) {
            for i in lo(0)..=hi(0) {
                let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                if d2 <= r * r && mask.get(i, j, k) <= 0.5 {
                    return false;
                }
            }
        }
    }
    true
}

struct Geometry {
    mask_a: Volume3,
    mask_b: Volume3,
    gt: VectorField3,
}

fn geometry(seed: u64, dims: [usize; 3], amplitude: f64) -> Result<Geometry> {
    let mask_a = gen_liver_mask(seed, dims)?;
    let gt = gen_gt_deformation(seed, dims, amplitude)?;
    let mask_b = warp(&mask_a, &gt)?.thresholded();
    Ok(Geometry { mask_a, mask_b, gt })
}

fn place_tumors(geo: &Geometry, plan: &[TumorPlan]) -> Result<Vec<PlacedTumor>> {
    plan.iter()
        .enumerate()
        .map(|(index, t)| {
            let center_t1 = carry_point(&geo.gt, t.center)?;
            let inside_a = t.radius_t0 == 0.0 || ball_inside(&geo.mask_a, t.center, t.radius_t0);
            let inside_b = t.radius_t1 == 0.0 || ball_inside(&geo.mask_b, center_t1, t.radius_t1);
            if inside_a && inside_b {
                Ok(PlacedTumor {
                    plan: t.clone(),
                    center_t1,
                })
            } else {
                Err(Error::TumorOutsideLiver { index })
            }
        })
        .collect()
}

fn radii_for(kind: TumorKind, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let r = rng.random_range(4.0..5.5);
    match kind {
        TumorKind::Stable => (r, r),
        TumorKind::Growing => (r, r * 1.35),
        TumorKind::Shrinking => (r * 1.3, r),
        TumorKind::New => (0.0, r),
        TumorKind::Vanished => (r, 0.0),
    }
}

/// A spec whose tumors of the requested kinds sit well inside the liver at
/// both time points and do not touch each other.
pub fn random_spec(seed: u64, dims: [usize; 3], amplitude: f64, kinds: &[TumorKind]) -> Result<PhantomSpec> {
    let geo = geometry(seed, dims, amplitude)?;
    let mut rng = rng_for(seed, STREAM_PLAN);
    let inside: Vec<usize> = (0..geo.mask_a.grid().len())
        .filter(|&i| geo.mask_a.data()[i] > 0.5)
        .collect();
    let mut plan: Vec<TumorPlan> = Vec::new();
    for (index, &kind) in kinds.iter().enumerate() {
        let (r0, r1) = radii_for(kind, &mut rng);
        let reach = r0.max(r1);
        let mut placed = false;
        for _ in 0..2000 {
            let c = geo.mask_a.grid().coords(inside[rng.random_range(0..inside.len())]);
            let center = c.map(|x| x as f64);
            let apart = plan.iter().all(|o| {
                let d2: f64 = (0..3).map(|a| (o.center[a] - center[a]).powi(2)).sum();
                d2.sqrt() >= reach + o.radius_t0.max(o.radius_t1) + 3.0
            });
            if !apart || !ball_inside(&geo.mask_a, center, reach + TUMOR_CLEARANCE) {
                continue;
            }
            let c1 = carry_point(&geo.gt, center)?;
            if !ball_inside(&geo.mask_b, c1, reach + TUMOR_CLEARANCE) {
                continue;
            }
            plan.push(TumorPlan {
                center,
                radius_t0: r0,
                radius_t1: r1,
                kind,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::TumorOutsideLiver { index });
        }
    }
    Ok(PhantomSpec {
        seed,
        dims,
        deform_amplitude: amplitude,
        tumor_plan: plan,
        ..PhantomSpec::default()
    })
}

fn union_of_balls(grid: &Grid, balls: impl Iterator<Item = (Vec3, f64)>) -> Volume3 {
    let mut out = Volume3::zeros(*grid, VolumeKind::Mask).into_data();
    for (c, r) in balls {
        for (o, v) in out.iter_mut().zip(ball(grid, c, r).data()) {
            *o = o.max(*v);
        }
    }
    Volume3::from_parts(*grid, out, VolumeKind::Mask)
}

/// Voxels outside `mask` within `width` voxels (Chebyshev) of it.
fn rim(mask: &Volume3, width: usize) -> Vec<bool> {
    let g = mask.grid();
    let mut grown: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    for _ in 0..width {
        let prev = grown.clone();
        for idx in 0..g.len() {
            if prev[idx] {
                continue;
            }
            let c = g.coords(idx);
            let mut hit = false;
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let n = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                        if (0..3).all(|a| n[a] >= 0 && n[a] < g.dims[a] as i64)
                            && prev[g.index(n[0] as usize, n[1] as usize, n[2] as usize)]
                        {
                            hit = true;
                        }
                    }
                }
            }
            grown[idx] = hit;
        }
    }
    grown
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| g && m <= 0.5)
        .collect()
}

fn render_image(liver: &Volume3, tumors: &Volume3, effusion: Option<&[bool]>, sigma: f64, rng: &mut ChaCha8Rng) -> Volume3 {
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = (0..liver.grid().len())
        .map(|i| {
            let mut v = if tumors.data()[i] > 0.5 {
                TUMOR_INTENSITY
            } else if liver.data()[i] > 0.5 {
                LIVER_INTENSITY
            } else if effusion.is_some_and(|e| e[i]) {
                EFFUSION_INTENSITY
            } else {
                BACKGROUND_INTENSITY
            };
            if sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Volume3::from_parts(*liver.grid(), data, VolumeKind::Intensity)
}

pub fn gen_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let geo = geometry(spec.seed, spec.dims, spec.deform_amplitude)?;
    let tumors = place_tumors(&geo, &spec.tumor_plan)?;
    let grid = *geo.mask_a.grid();
    let tumors_a = union_of_balls(&grid, tumors.iter().map(|t| (t.plan.center, t.plan.radius_t0)));
    let tumors_b = union_of_balls(&grid, tumors.iter().map(|t| (t.center_t1, t.plan.radius_t1)));
    let effusion = spec.effusion.then(|| rim(&geo.mask_b, EFFUSION_WIDTH));
    let image_a = render_image(
        &geo.mask_a,
        &tumors_a,
        None,
        spec.noise_sigma,
        &mut rng_for(spec.seed, STREAM_NOISE_A),
    );
    let image_b = render_image(
        &geo.mask_b,
        &tumors_b,
        effusion.as_deref(),
        spec.noise_sigma,
        &mut rng_for(spec.seed, STREAM_NOISE_B),
    );
    Ok(PhantomPair {
        image_a,
        image_b,
        mask_a: geo.mask_a,
        mask_b: geo.mask_b,
        tumors_a,
        tumors_b,
        gt: geo.gt,
        tumors,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_dims_are_rejected() {
        assert!(matches!(gen_liver_mask(0, [31, 64, 64]), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn liver_mask_is_deterministic_and_sized() {
        for seed in 0..6 {
            let a = gen_liver_mask(seed, [64, 64, 64]).unwrap();
            assert_eq!(a.data(), gen_liver_mask(seed, [64, 64, 64]).unwrap().data());
            let frac = a.count_inside() as f64 / a.grid().len() as f64;
            assert!((0.15..=0.30).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let f = gen_gt_deformation(3, [32, 32, 32], 0.0).unwrap();
        assert_eq!(f.max_norm(), 0.0);
    }

    #[test]
    fn excessive_amplitude_is_refused() {
        assert!(matches!(gen_gt_deformation(1, [32, 32, 32], 60.0), Err(Error::Deformation(_))));
    }

    #[test]
    fn gaussian_smoothing_preserves_constants() {
        let mut d = vec![2.5; 8 * 9 * 10];
        gaussian_smooth(&mut d, [8, 9, 10], 3.0);
        assert!(d.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn carried_point_solves_the_inverse_map() {
        let phi = gen_gt_deformation(4, [32, 32, 32], 3.0).unwrap();
        let c = [15.0, 14.0, 17.0];
        let q = carry_point(&phi, c).unwrap();
        let d = sample_field_trilinear(&phi, q).unwrap();
        for a in 0..3 {
            assert!((q[a] + d[a] - c[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn tumor_kind_radius_rules() {
        let t = |kind, r0, r1| TumorPlan {
            center: [0.0; 3],
            radius_t0: r0,
            radius_t1: r1,
            kind,
        };
        assert!(t(TumorKind::Stable, 3.0, 3.0).validate(0).is_ok());
        assert!(t(TumorKind::Stable, 3.0, 4.0).validate(0).is_err());
        assert!(t(TumorKind::New, 0.0, 4.0).validate(0).is_ok());
        assert!(t(TumorKind::New, 1.0, 4.0).validate(0).is_err());
        assert!(t(TumorKind::Vanished, 2.0, 0.0).validate(0).is_ok());
        assert!(t(TumorKind::Growing, 2.0, 1.0).validate(0).is_err());
    }
}
