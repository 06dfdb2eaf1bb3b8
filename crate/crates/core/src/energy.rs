//! Registration energy and its gradient.
//!
//! The total energy is
//!
//! ```text
//! alpha * sim(S_B', S_B)
//!   + beta  * sum_k smooth(phi_k)
//!   + gamma * sum_k antifold(phi_k)
//!   + mu    * (inv(Phi_f, Phi_b) + inv(Phi_b, Phi_f))
//! ```
//!
//! where `phi_k` ranges over every incremental field of the active mode and
//! `Phi_f`, `Phi_b` are the composed forward and backward fields. All terms
//! are normalized per voxel. Parameters are half-resolution vector fields,
//! one per incremental field, forward fields first; diffeomorphic modes treat
//! them as stationary velocities, direct mode as displacements.
//!
//! The gradient is accumulated by hand through the fixed graph
//! (integration, upsampling, composition, warping, losses).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    partial_axis, partial_axis_adjoint, upsample2x, upsample2x_adjoint, FieldKind, Grid, Stencil,
    Vec3, VectorField3, Volume3,
};
use crate::transforms::{
    add3, compose, compose_adjoint, for_each_voxel, integrate_adjoint, integrate_tape, jt_mul,
    warp, warp_adjoint, IntegrationConfig,
};

/// Soft-Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.8,
            gamma: 1.0,
            mu: 0.4,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, mu: f64) -> Result<Self> {
        let w = Self {
            alpha,
            beta,
            gamma,
            mu,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.mu];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub smooth: f64,
    pub antifold: f64,
    pub inv: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(sim: f64, smooth: f64, antifold: f64, inv: f64, w: &LossWeights) -> Self {
        Self {
            sim,
            smooth,
            antifold,
            inv,
            total: w.alpha * sim + w.beta * smooth + w.gamma * antifold + w.mu * inv,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("sim", self.sim),
            ("smooth", self.smooth),
            ("antifold", self.antifold),
            ("inv", self.inv),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// The five registration configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Displacement parameters used without integration; smoothness only.
    Direct,
    Diffeo,
    DiffeoInc2,
    DiffeocycInc1,
    DiffeocycInc2,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Direct,
        Mode::Diffeo,
        Mode::DiffeoInc2,
        Mode::DiffeocycInc1,
        Mode::DiffeocycInc2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Diffeo => "diffeo",
            Mode::DiffeoInc2 => "diffeo_inc2",
            Mode::DiffeocycInc1 => "diffeocyc_inc1",
            Mode::DiffeocycInc2 => "diffeocyc_inc2",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Incremental fields per path.
    pub fn steps(&self) -> usize {
        match self {
            Mode::DiffeoInc2 | Mode::DiffeocycInc2 => 2,
            _ => 1,
        }
    }

    pub fn cyclic(&self) -> bool {
        matches!(self, Mode::DiffeocycInc1 | Mode::DiffeocycInc2)
    }

    pub fn diffeomorphic(&self) -> bool {
        !matches!(self, Mode::Direct)
    }

    pub fn uses_antifold(&self) -> bool {
        self.diffeomorphic()
    }

    pub fn field_count(&self) -> usize {
        self.steps() * if self.cyclic() { 2 } else { 1 }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean over voxels of the squared Frobenius norm of the field gradient.
pub fn loss_smooth(phi: &VectorField3) -> f64 {
    let dims = phi.grid().dims;
    let partials = [0, 1, 2].map(|a| partial_axis(phi.data(), &dims, a));
    smooth_from_partials(&partials)
}

fn smooth_from_partials(partials: &[Vec<Vec3>; 3]) -> f64 {
    let n = partials[0].len();
    let mut sum = 0.0;
    for d in partials {
        for v in d {
            sum += v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        }
    }
    sum / n as f64
}

/// `1 - soft Dice` between a (soft) warped mask and the fixed mask.
pub fn loss_sim(warped: &Volume3, fixed: &Volume3) -> Result<f64> {
    warped.grid().ensure_conforms(fixed.grid())?;
    Ok(1.0 - soft_dice_parts(warped.data(), fixed.data()).0)
}

/// `1 - soft Dice` and its derivative with respect to each warped value.
pub(crate) fn sim_with_grad(warped: &[f64], fixed: &[f64]) -> (f64, Vec<f64>) {
    let (dice, den) = soft_dice_parts(warped, fixed);
    let g = fixed.iter().map(|&bp| -(2.0 * bp - dice) / den).collect();
    (1.0 - dice, g)
}

/// Returns (dice, denominator).
fn soft_dice_parts(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (x, y) in a.iter().zip(b) {
        inter += x * y;
        sa += x;
        sb += y;
    }
    let den = sa + sb + DICE_EPS;
    ((2.0 * inter + DICE_EPS) / den, den)
}

/// Penalty on diagonal derivatives at or below -1, normalized per voxel.
pub fn loss_antifold(phi: &VectorField3) -> f64 {
    let dims = phi.grid().dims;
    let partials = [0, 1, 2].map(|a| partial_axis(phi.data(), &dims, a));
    antifold_from_partials(&partials)
}

fn antifold_from_partials(partials: &[Vec<Vec3>; 3]) -> f64 {
    let n = partials[0].len();
    let mut sum = 0.0;
    for (axis, d) in partials.iter().enumerate() {
        for v in d {
            let x = v[axis];
            if x + 1.0 <= 0.0 {
                sum += x * x;
            }
        }
    }
    sum / n as f64
}

/// Mean squared distance between `forward` and its inverse estimate from
/// `backward`.
pub fn loss_inv(forward: &VectorField3, backward: &VectorField3) -> Result<f64> {
    forward.grid().ensure_conforms(backward.grid())?;
    Ok(inv_raw(forward.data(), backward.data(), &forward.grid().dims))
}

fn inv_raw(a: &[Vec3], b: &[Vec3], dims: &[usize; 3]) -> f64 {
    let mut sum = 0.0;
    for_each_voxel(dims, |idx, p| {
        let s = Stencil::locate(dims, add3(p, a[idx]));
        let r = add3(a[idx], s.sample_vector(b));
        sum += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    });
    sum / a.len() as f64
}

/// Accumulates the gradient of `scale * inv_raw(a, b)` into `ga`, `gb`.
fn inv_adjoint(a: &[Vec3], b: &[Vec3], dims: &[usize; 3], scale: f64, ga: &mut [Vec3], gb: &mut [Vec3]) {
    let k = 2.0 * scale / a.len() as f64;
    for_each_voxel(dims, |idx, p| {
        let s = Stencil::locate(dims, add3(p, a[idx]));
        let (v, j) = s.sample_vector_jacobian(b);
        let r = add3(a[idx], v).map(|c| c * k);
        ga[idx] = add3(ga[idx], add3(r, jt_mul(&j, r)));
        s.scatter_vector(r, gb);
    });
}

/// One incremental field and what is needed to differentiate through it.
#[derive(Clone, Debug)]
struct FieldRecord {
    /// Full-resolution displacement.
    fine: VectorField3,
    /// Scaling-and-squaring intermediates on the coarse grid (diffeomorphic
    /// modes only).
    tape: Option<Vec<Vec<Vec3>>>,
    partials: [Vec<Vec3>; 3],
}

/// Everything produced by one forward evaluation of the pipeline.
#[derive(Clone, Debug)]
pub struct PipelineState<'a> {
    mode: Mode,
    moving: &'a Volume3,
    fixed: &'a Volume3,
    coarse: Grid,
    fields: Vec<FieldRecord>,
    composed_forward: VectorField3,
    composed_backward: Option<VectorField3>,
    warped: Volume3,
}

impl<'a> PipelineState<'a> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn moving(&self) -> &Volume3 {
        self.moving
    }

    pub fn fixed(&self) -> &Volume3 {
        self.fixed
    }

    /// Incremental forward fields in application order.
    pub fn forward_fields(&self) -> Vec<&VectorField3> {
        self.fields[..self.mode.steps()].iter().map(|f| &f.fine).collect()
    }

    /// Incremental backward fields (empty for non-cyclic modes).
    pub fn backward_fields(&self) -> Vec<&VectorField3> {
        self.fields[self.mode.steps()..].iter().map(|f| &f.fine).collect()
    }

    pub fn composed_forward(&self) -> &VectorField3 {
        &self.composed_forward
    }

    pub fn composed_backward(&self) -> Option<&VectorField3> {
        self.composed_backward.as_ref()
    }

    /// The moving mask warped by the composed forward field (S_B').
    pub fn warped(&self) -> &Volume3 {
        &self.warped
    }

    fn check(&self) -> Result<()> {
        if self.fields.len() != self.mode.field_count() {
            return Err(Error::InconsistentState(format!(
                "mode {} needs {} fields, state holds {}",
                self.mode,
                self.mode.field_count(),
                self.fields.len()
            )));
        }
        if self.mode.cyclic() != self.composed_backward.is_some() {
            return Err(Error::InconsistentState(
                "backward path presence does not match the mode".into(),
            ));
        }
        Ok(())
    }
}

/// The energy of one image pair under one mode.
#[derive(Clone, Debug)]
pub struct EnergyProblem {
    moving: Volume3,
    fixed: Volume3,
    mode: Mode,
    weights: LossWeights,
    integration: IntegrationConfig,
    coarse: Grid,
}

impl EnergyProblem {
    pub fn new(
        moving: Volume3,
        fixed: Volume3,
        mode: Mode,
        weights: LossWeights,
        integration: IntegrationConfig,
    ) -> Result<Self> {
        moving.grid().ensure_conforms(fixed.grid())?;
        weights.validate()?;
        integration.validate()?;
        let coarse = moving.grid().coarse()?;
        Ok(Self {
            moving,
            fixed,
            mode,
            weights,
            integration,
            coarse,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn moving(&self) -> &Volume3 {
        &self.moving
    }

    pub fn fixed(&self) -> &Volume3 {
        &self.fixed
    }

    /// Grid the parameters live on.
    pub fn param_grid(&self) -> &Grid {
        &self.coarse
    }

    pub fn param_len(&self) -> usize {
        self.mode.field_count() * self.coarse.len() * 3
    }

    pub fn zero_params(&self) -> Vec<f64> {
        vec![0.0; self.param_len()]
    }

    /// Splits a flat parameter vector into per-field coarse vectors.
    pub fn split_params(&self, params: &[f64]) -> Result<Vec<Vec<Vec3>>> {
        if params.len() != self.param_len() {
            return Err(Error::InconsistentState(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                params.len()
            )));
        }
        Ok(params
            .chunks_exact(self.coarse.len() * 3)
            .map(|chunk| chunk.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect())
    }

    /// Builds every field, composes them and warps the moving mask.
    pub fn forward(&self, params: &[f64]) -> Result<PipelineState<'_>> {
        let fine_grid = *self.moving.grid();
        let dims = fine_grid.dims;
        let mut fields = Vec::with_capacity(self.mode.field_count());
        for v in self.split_params(params)? {
            let (coarse_disp, tape) = if self.mode.diffeomorphic() {
                let (tape, disp) = integrate_tape(&v, &self.coarse.dims, self.integration.squaring_steps);
                (disp, Some(tape))
            } else {
                (v, None)
            };
            let coarse = VectorField3::from_parts(self.coarse, coarse_disp, FieldKind::Displacement);
            let fine = upsample2x(&coarse, &fine_grid)?;
            let partials = [0, 1, 2].map(|a| partial_axis(fine.data(), &dims, a));
            fields.push(FieldRecord {
                fine,
                tape,
                partials,
            });
        }
        let steps = self.mode.steps();
        let compose_path = |recs: &[FieldRecord]| -> Result<VectorField3> {
            match recs {
                [only] => Ok(only.fine.clone()),
                [first, second] => compose(&first.fine, &second.fine),
                _ => unreachable!("at most two incremental fields per path"),
            }
        };
        let composed_forward = compose_path(&fields[..steps])?;
        let composed_backward = if self.mode.cyclic() {
            Some(compose_path(&fields[steps..])?)
        } else {
            None
        };
        let warped = warp(&self.moving, &composed_forward)?;
        Ok(PipelineState {
            mode: self.mode,
            moving: &self.moving,
            fixed: &self.fixed,
            coarse: self.coarse,
            fields,
            composed_forward,
            composed_backward,
            warped,
        })
    }

    /// Loss and gradient at `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<(LossBreakdown, Vec<f64>)> {
        let state = self.forward(params)?;
        let loss = loss_total(&state, &self.weights)?;
        let grad = grad_total(&state, &self.weights)?;
        Ok((loss, grad))
    }

    pub fn loss(&self, params: &[f64]) -> Result<LossBreakdown> {
        loss_total(&self.forward(params)?, &self.weights)
    }
}

/// Weighted total energy of an evaluated pipeline.
pub fn loss_total(state: &PipelineState<'_>, w: &LossWeights) -> Result<LossBreakdown> {
    state.check()?;
    let sim = loss_sim(&state.warped, state.fixed)?;
    let smooth: f64 = state.fields.iter().map(|f| smooth_from_partials(&f.partials)).sum();
    let antifold = if state.mode.uses_antifold() {
        state.fields.iter().map(|f| antifold_from_partials(&f.partials)).sum()
    } else {
        0.0
    };
    let inv = match &state.composed_backward {
        Some(b) => {
            let f = &state.composed_forward;
            let dims = f.grid().dims;
            inv_raw(f.data(), b.data(), &dims) + inv_raw(b.data(), f.data(), &dims)
        }
        None => 0.0,
    };
    Ok(LossBreakdown::weighted(sim, smooth, antifold, inv, w))
}

/// Gradient of the total energy with respect to the flat parameter vector.
///
/// The antifold gate is held fixed at its current value.
pub fn grad_total(state: &PipelineState<'_>, w: &LossWeights) -> Result<Vec<f64>> {
    state.check()?;
    let fine = *state.moving.grid();
    let dims = fine.dims;
    let n = fine.len();
    let steps = state.mode.steps();

    // Gradients with respect to the composed fields.
    let mut g_fwd = vec![[0.0; 3]; n];
    let mut g_bwd = vec![[0.0; 3]; n];

    if w.alpha != 0.0 {
        let (_, mut g_warp) = sim_with_grad(state.warped.data(), state.fixed.data());
        g_warp.iter_mut().for_each(|g| *g *= w.alpha);
        let gw = warp_adjoint(state.moving, &state.composed_forward, &g_warp);
        for (g, x) in g_fwd.iter_mut().zip(gw) {
            *g = add3(*g, x);
        }
    }

    if let (Some(b), true) = (&state.composed_backward, w.mu != 0.0) {
        let f = state.composed_forward.data();
        inv_adjoint(f, b.data(), &dims, w.mu, &mut g_fwd, &mut g_bwd);
        inv_adjoint(b.data(), f, &dims, w.mu, &mut g_bwd, &mut g_fwd);
    }

    // Distribute composed gradients onto incremental fields.
    let mut g_fields: Vec<Vec<Vec3>> = vec![vec![[0.0; 3]; n]; state.fields.len()];
    let mut paths = vec![(0usize, g_fwd)];
    if state.mode.cyclic() {
        paths.push((steps, g_bwd));
    }
    for (start, g) in paths {
        if steps == 1 {
            g_fields[start] = g;
        } else {
            let (head, tail) = g_fields.split_at_mut(start + 1);
            compose_adjoint(
                state.fields[start].fine.data(),
                state.fields[start + 1].fine.data(),
                &dims,
                &g,
                &mut head[start],
                &mut tail[0],
            );
        }
    }

    // Per-field regularizers.
    let inv_n = 1.0 / n as f64;
    for (rec, g) in state.fields.iter().zip(g_fields.iter_mut()) {
        for axis in 0..3 {
            let d = &rec.partials[axis];
            let mut scaled: Vec<Vec3> = d.iter().map(|v| v.map(|c| 2.0 * w.beta * inv_n * c)).collect();
            if state.mode.uses_antifold() && w.gamma != 0.0 {
                for (s, v) in scaled.iter_mut().zip(d) {
                    let x = v[axis];
                    if x + 1.0 <= 0.0 {
                        s[axis] += 2.0 * w.gamma * inv_n * x;
                    }
                }
            }
            partial_axis_adjoint(&scaled, &dims, axis, g);
        }
    }

    // Back to the coarse parameters.
    let mut out = Vec::with_capacity(state.fields.len() * state.coarse.len() * 3);
    for (rec, g) in state.fields.iter().zip(&g_fields) {
        let gc = upsample2x_adjoint(g, &fine, &state.coarse);
        let gv = match &rec.tape {
            Some(tape) => integrate_adjoint(tape, &state.coarse.dims, &gc),
            None => gc,
        };
        out.extend(gv.iter().flatten());
    }
    Ok(out)
}
