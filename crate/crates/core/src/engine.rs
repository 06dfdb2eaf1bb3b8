//! Per-pair optimization: affine pre-alignment, then Adam on the energy.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::energy::{sim_with_grad, EnergyProblem, LossBreakdown, LossWeights, Mode};
use crate::grid::{BoundingBox, FieldKind, Grid, Mat3, Vec3, VectorField3, Volume3};
use crate::transforms::{compose, for_each_voxel, warp, warp_adjoint, IntegrationConfig};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Variance below which a mask counts as flat along a principal axis.
const DEGENERATE_VARIANCE: f64 = 0.05;

/// Maps fixed-grid voxel coordinates to moving-grid voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(linear: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self {
            linear,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.linear.iter().flatten().chain(&self.translation).all(|v| v.is_finite());
        if finite && self.det().abs() > 1e-6 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "affine transform is singular or non-finite (det {})",
                self.det()
            )))
        }
    }

    pub fn det(&self) -> f64 {
        to_matrix(&self.linear).determinant()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let l = &self.linear;
        [0, 1, 2].map(|i| l[i][0] * p[0] + l[i][1] * p[1] + l[i][2] * p[2] + self.translation[i])
    }

    /// Displacement field `T(p) - p` on `grid`.
    pub fn to_field(&self, grid: &Grid) -> Result<VectorField3> {
        VectorField3::from_fn(*grid, FieldKind::Displacement, |[i, j, k]| {
            let p = [i as f64, j as f64, k as f64];
            let q = self.apply(p);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        })
    }
}

fn to_matrix(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn from_matrix(m: &Matrix3<f64>) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

/// First and second moments of a soft mask.
struct Moments {
    centroid: Vec3,
    cov: Matrix3<f64>,
}

fn moments(mask: &Volume3) -> Result<Moments> {
    if mask.count_inside() == 0 {
        return Err(Error::EmptyMask);
    }
    let g = *mask.grid();
    let mut mass = 0.0;
    let mut sum = [0.0; 3];
    for (idx, &w) in mask.data().iter().enumerate() {
        let c = g.coords(idx);
        mass += w;
        for a in 0..3 {
            sum[a] += w * c[a] as f64;
        }
    }
    let centroid = sum.map(|s| s / mass);
    let mut cov = Matrix3::zeros();
    for (idx, &w) in mask.data().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let c = g.coords(idx);
        let d = [0, 1, 2].map(|a| c[a] as f64 - centroid[a]);
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += w * d[a] * d[b];
            }
        }
    }
    Ok(Moments {
        centroid,
        cov: cov / mass,
    })
}

/// Symmetric square root and its inverse, or `None` when an axis is flat.
fn sqrt_and_inv_sqrt(cov: &Matrix3<f64>) -> Option<(Matrix3<f64>, Matrix3<f64>)> {
    let eig = SymmetricEigen::new(*cov);
    if eig.eigenvalues.iter().any(|&l| !(l >= DEGENERATE_VARIANCE)) {
        return None;
    }
    let q = eig.eigenvectors;
    let root = eig.eigenvalues.map(f64::sqrt);
    let s = q * Matrix3::from_diagonal(&root) * q.transpose();
    let inv = q * Matrix3::from_diagonal(&root.map(|r| 1.0 / r)) * q.transpose();
    Some((s, inv))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineOptions {
    pub learn_rate: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for AffineOptions {
    fn default() -> Self {
        Self {
            learn_rate: 0.05,
            max_iters: 200,
            patience: 20,
            rel_tol: 1e-4,
        }
    }
}

pub fn affine_prereg(moving: &Volume3, fixed: &Volume3) -> Result<AffineTransform> {
    affine_prereg_with(moving, fixed, &AffineOptions::default())
}

/// Moment-initialized affine alignment refined by Adam on the soft Dice loss.
///
/// Parameters are a translation and a linear correction scaled by the fixed
/// mask's radius of gyration, so one step moves the mask surface by about
/// `learn_rate` voxels in either block.
pub fn affine_prereg_with(moving: &Volume3, fixed: &Volume3, opts: &AffineOptions) -> Result<AffineTransform> {
    moving.grid().ensure_conforms(fixed.grid())?;
    let ma = moments(moving)?;
    let mb = moments(fixed)?;
    let base = match (sqrt_and_inv_sqrt(&ma.cov), sqrt_and_inv_sqrt(&mb.cov)) {
        (Some((sa, _)), Some((_, sb_inv))) => sa * sb_inv,
        _ => Matrix3::identity(),
    };
    let base = if base.determinant().abs() > 1e-6 {
        base
    } else {
        Matrix3::identity()
    };
    let radius = mb.cov.trace().sqrt().max(1.0);
    let cb = mb.centroid;
    let t0 = [0, 1, 2].map(|a| ma.centroid[a] - cb[a]);

    // x_moving = L (p - cb) + cb + t with L = base + M / radius
    let build = |theta: &[f64]| -> AffineTransform {
        let l = base + Matrix3::from_fn(|i, j| theta[3 + 3 * i + j] / radius);
        let lc = l * nalgebra::Vector3::from(cb);
        AffineTransform {
            linear: from_matrix(&l),
            translation: [0, 1, 2].map(|a| cb[a] + t0[a] + theta[a] - lc[a]),
        }
    };

    let grid = *fixed.grid();
    let mut theta = vec![0.0; 12];
    let mut adam = AdamState::new(12);
    let mut best = (f64::INFINITY, theta.clone());
    let mut history = Vec::new();
    for it in 0..opts.max_iters {
        let t = build(&theta);
        let field = t.to_field(&grid)?;
        let warped = warp(moving, &field)?;
        let (loss, g_warp) = sim_with_grad(warped.data(), fixed.data());
        if !loss.is_finite() {
            return Err(Error::NumericalAbort {
                iteration: it,
                term: "sim",
            });
        }
        if loss < best.0 {
            best = (loss, theta.clone());
        }
        history.push(best.0);
        if best.0 <= 0.0 || stalled(&history, opts.patience, opts.rel_tol) || it + 1 == opts.max_iters {
            break;
        }
        let g_phi = warp_adjoint(moving, &field, &g_warp);
        let mut grad = vec![0.0; 12];
        for_each_voxel(&grid.dims, |idx, p| {
            let g = g_phi[idx];
            for i in 0..3 {
                grad[i] += g[i];
                for j in 0..3 {
                    grad[3 + 3 * i + j] += g[i] * (p[j] - cb[j]) / radius;
                }
            }
        });
        adam_step(&mut theta, &grad, &mut adam, opts.learn_rate);
    }
    let out = build(&best.1);
    out.validate()?;
    Ok(out)
}

/// True when the best value improved by at most `rel_tol` (relative) over
/// the last `patience` iterations.
fn stalled(best_history: &[f64], patience: usize, rel_tol: f64) -> bool {
    let n = best_history.len();
    if n <= patience {
        return false;
    }
    let past = best_history[n - 1 - patience];
    past - best_history[n - 1] <= rel_tol * past.abs()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state has the wrong length");
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub learn_rate: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub rel_tol: f64,
    pub integration: IntegrationConfig,
    pub seed: u64,
    /// Run the affine stage before the deformable one.
    pub affine: bool,
    /// Optimize on the union bounding box of both masks grown by this many
    /// voxels; `None` optimizes on the whole grid.
    pub crop_margin: Option<usize>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DiffeocycInc2,
            weights: LossWeights::default(),
            learn_rate: 0.05,
            max_iters: 500,
            patience: 25,
            rel_tol: 1e-4,
            integration: IntegrationConfig::default(),
            seed: 0,
            affine: false,
            crop_margin: Some(4),
        }
    }
}

impl RegistrationConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.integration.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learn_rate.is_finite() && self.learn_rate > 0.0) {
            return bad(format!("learn_rate must be positive, got {}", self.learn_rate));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return bad(format!("rel_tol must be nonnegative, got {}", self.rel_tol));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub mode: Mode,
    pub affine: AffineTransform,
    /// Full-resolution incremental displacement fields of the forward path.
    pub forward_fields: Vec<VectorField3>,
    /// Incremental fields of the backward path; empty for non-cyclic modes.
    pub backward_fields: Vec<VectorField3>,
    pub composed_forward: VectorField3,
    pub composed_backward: Option<VectorField3>,
    /// S_B': the moving mask carried onto the fixed grid.
    pub warped_mask: Volume3,
    /// S_A': S_B' carried back along the backward path (cyclic modes).
    pub cyclic_mask: Option<Volume3>,
    pub loss_trace: Vec<LossBreakdown>,
    pub iterations_run: usize,
    /// Iteration whose parameters produced the returned fields.
    pub best_iteration: usize,
    /// Region the energy was optimized on, when cropped.
    pub crop: Option<BoundingBox>,
}

impl RegistrationResult {
    pub fn best_loss(&self) -> &LossBreakdown {
        &self.loss_trace[self.best_iteration]
    }

    /// Moving volume after the affine stage only.
    pub fn align(&self, vol: &Volume3) -> Result<Volume3> {
        if self.affine.is_identity() {
            Ok(vol.clone())
        } else {
            warp(vol, &self.affine.to_field(vol.grid())?)
        }
    }

    fn with_affine(&self, field: &VectorField3) -> Result<VectorField3> {
        if self.affine.is_identity() {
            Ok(field.clone())
        } else {
            compose(&self.affine.to_field(field.grid())?, field)
        }
    }

    /// Affine followed by the forward path, as a single displacement.
    pub fn total_forward(&self) -> Result<VectorField3> {
        self.with_affine(&self.composed_forward)
    }

    /// Forward then backward path (deformable part only); `None` for
    /// non-cyclic modes.
    pub fn cycle_field(&self) -> Result<Option<VectorField3>> {
        self.composed_backward
            .as_ref()
            .map(|b| compose(&self.composed_forward, b))
            .transpose()
    }

    /// Resamples a moving-space volume onto the fixed grid in one pass.
    pub fn warp_forward(&self, vol: &Volume3) -> Result<Volume3> {
        warp(vol, &self.total_forward()?)
    }

    /// Carries a moving-space volume around the cycle, landing in the
    /// affinely aligned moving frame.
    pub fn warp_cycle(&self, vol: &Volume3) -> Result<Option<Volume3>> {
        match self.cycle_field()? {
            Some(c) => Ok(Some(warp(vol, &self.with_affine(&c)?)?)),
            None => Ok(None),
        }
    }
}

/// Registers `moving` onto `fixed`, running the affine stage first when
/// `cfg.affine` is set.
pub fn register(moving: &Volume3, fixed: &Volume3, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let affine = if cfg.affine {
        affine_prereg(moving, fixed)?
    } else {
        AffineTransform::identity()
    };
    register_prealigned(moving, fixed, affine, cfg)
}

/// Deformable stage with a given affine pre-alignment.
pub fn register_prealigned(
    moving: &Volume3,
    fixed: &Volume3,
    affine: AffineTransform,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    affine.validate()?;
    moving.grid().ensure_conforms(fixed.grid())?;
    if moving.count_inside() == 0 || fixed.count_inside() == 0 {
        return Err(Error::EmptyMask);
    }
    let full = *fixed.grid();
    let aligned = if affine.is_identity() {
        moving.clone()
    } else {
        warp(moving, &affine.to_field(&full)?)?
    };
    let crop = match cfg.crop_margin {
        Some(m) => Some(
            BoundingBox::of_mask(&aligned)?
                .union(&BoundingBox::of_mask(fixed)?)
                .dilated(m, &full)
                .widened(&full),
        ),
        None => None,
    };
    let (mov_c, fix_c) = match &crop {
        Some(b) => (b.crop_volume(&aligned)?, b.crop_volume(fixed)?),
        None => (aligned, fixed.clone()),
    };
    let problem = EnergyProblem::new(mov_c, fix_c, cfg.mode, cfg.weights, cfg.integration)?;

    let mut params = problem.zero_params();
    let mut adam = AdamState::new(params.len());
    let mut best_total = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_iteration = 0;
    let mut history = Vec::new();
    let mut trace = Vec::new();
    for it in 0..cfg.max_iters {
        let (loss, grad) = problem.evaluate(&params)?;
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NumericalAbort { iteration: it, term });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort {
                iteration: it,
                term: "gradient",
            });
        }
        trace.push(loss);
        if loss.total < best_total {
            best_total = loss.total;
            best_params.copy_from_slice(&params);
            best_iteration = it;
        }
        history.push(best_total);
        if best_total <= 0.0 || stalled(&history, cfg.patience, cfg.rel_tol) || it + 1 == cfg.max_iters {
            break;
        }
        adam_step(&mut params, &grad, &mut adam, cfg.learn_rate);
    }

    let state = problem.forward(&best_params)?;
    let place = |f: &VectorField3| -> Result<VectorField3> {
        match &crop {
            Some(b) => b.embed_field(f, &full),
            None => Ok(f.clone()),
        }
    };
    let forward_fields = state.forward_fields().into_iter().map(place).collect::<Result<Vec<_>>>()?;
    let backward_fields = state.backward_fields().into_iter().map(place).collect::<Result<Vec<_>>>()?;
    let composed_forward = place(state.composed_forward())?;
    let composed_backward = state.composed_backward().map(place).transpose()?;
    drop(state);

    let mut result = RegistrationResult {
        mode: cfg.mode,
        affine,
        forward_fields,
        backward_fields,
        composed_forward,
        composed_backward,
        warped_mask: Volume3::zeros(full, moving.kind()),
        cyclic_mask: None,
        iterations_run: trace.len(),
        loss_trace: trace,
        best_iteration,
        crop,
    };
    result.warped_mask = result.warp_forward(moving)?;
    result.cyclic_mask = result.warp_cycle(moving)?;
    Ok(result)
}
