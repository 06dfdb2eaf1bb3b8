//! Operations on displacement fields: pull-back warping, scaling-and-squaring
//! integration of stationary velocities, composition, the resampling inverse
//! estimate used by the inverse-consistency term, and Jacobian analysis.
//!
//! A displacement field `phi` maps output voxel `p` to sampling position
//! `p + phi(p)`. The `*_adjoint` functions are the reverse-mode counterparts
//! used by the energy gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    gradient_central, Mat3, Stencil, Vec3, VectorField3, Volume3, VolumeKind,
};

pub const MAX_SQUARING_STEPS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub squaring_steps: u32,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { squaring_steps: 7 }
    }
}

impl IntegrationConfig {
    pub fn new(squaring_steps: u32) -> Result<Self> {
        let cfg = Self { squaring_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.squaring_steps > MAX_SQUARING_STEPS {
            return Err(Error::InvalidConfig(format!(
                "squaring_steps {} exceeds {MAX_SQUARING_STEPS}",
                self.squaring_steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Mean over the mask of the squared Frobenius norm of the field gradient.
    pub l2_norm_mean: f64,
    /// Mask voxels where `det(I + grad phi) <= 0`.
    pub nonpositive_count: usize,
    pub det_min: f64,
}

/// Calls `f(idx, p)` for every voxel with its integer position as floats.
#[inline]
pub(crate) fn for_each_voxel(dims: &[usize; 3], mut f: impl FnMut(usize, Vec3)) {
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                f(idx, [i as f64, j as f64, k as f64]);
                idx += 1;
            }
        }
    }
}

#[inline]
pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// `J^T g` for a 3x3 Jacobian `j[i][a]`.
#[inline]
pub(crate) fn jt_mul(j: &Mat3, g: Vec3) -> Vec3 {
    [
        j[0][0] * g[0] + j[1][0] * g[1] + j[2][0] * g[2],
        j[0][1] * g[0] + j[1][1] * g[1] + j[2][1] * g[2],
        j[0][2] * g[0] + j[1][2] * g[1] + j[2][2] * g[2],
    ]
}

/// Pull-back warp: `out(p) = vol(p + phi(p))`. Masks stay masks (soft).
pub fn warp(vol: &Volume3, phi: &VectorField3) -> Result<Volume3> {
    vol.grid().ensure_conforms(phi.grid())?;
    let dims = vol.grid().dims;
    let src = vol.data();
    let disp = phi.data();
    let mut out = vec![0.0; src.len()];
    for_each_voxel(&dims, |idx, p| {
        let s = Stencil::locate(&dims, add3(p, disp[idx]));
        out[idx] = s.sample_scalar(src);
    });
    if vol.kind() == VolumeKind::Mask {
        // Convex combinations of [0, 1] values can drift by an ulp.
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Volume3::from_parts(*vol.grid(), out, vol.kind()))
}

/// Gradient of `sum_p g(p) * warp(vol, phi)(p)` with respect to `phi`.
pub(crate) fn warp_adjoint(vol: &Volume3, phi: &VectorField3, g: &[f64]) -> Vec<Vec3> {
    let dims = vol.grid().dims;
    let src = vol.data();
    let disp = phi.data();
    let mut out = vec![[0.0; 3]; src.len()];
    for_each_voxel(&dims, |idx, p| {
        let gv = g[idx];
        if gv != 0.0 {
            let s = Stencil::locate(&dims, add3(p, disp[idx]));
            let (_, grad) = s.sample_scalar_grad(src);
            out[idx] = grad.map(|c| c * gv);
        }
    });
    out
}

/// `phi_c(p) = second(p) + first(p + second(p))`: warping by `phi_c` equals
/// warping by `first` and then by `second`.
pub fn compose(first: &VectorField3, second: &VectorField3) -> Result<VectorField3> {
    first.grid().ensure_conforms(second.grid())?;
    Ok(VectorField3::from_parts(
        *first.grid(),
        compose_raw(first.data(), second.data(), &first.grid().dims),
        second.kind(),
    ))
}

pub(crate) fn compose_raw(first: &[Vec3], second: &[Vec3], dims: &[usize; 3]) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; first.len()];
    for_each_voxel(dims, |idx, p| {
        let d2 = second[idx];
        let s = Stencil::locate(dims, add3(p, d2));
        out[idx] = add3(d2, s.sample_vector(first));
    });
    out
}

/// Reverse mode of `compose_raw`: accumulates into `g_first`, `g_second`.
pub(crate) fn compose_adjoint(
    first: &[Vec3],
    second: &[Vec3],
    dims: &[usize; 3],
    g: &[Vec3],
    g_first: &mut [Vec3],
    g_second: &mut [Vec3],
) {
    for_each_voxel(dims, |idx, p| {
        let gv = g[idx];
        let s = Stencil::locate(dims, add3(p, second[idx]));
        let (_, j) = s.sample_vector_jacobian(first);
        g_second[idx] = add3(g_second[idx], add3(gv, jt_mul(&j, gv)));
        s.scatter_vector(gv, g_first);
    });
}

/// Scaling and squaring. Returns the intermediates `u_0 .. u_{K-1}` (what
/// the adjoint reads) and the final displacement `u_K`.
pub(crate) fn integrate_tape(v: &[Vec3], dims: &[usize; 3], steps: u32) -> (Vec<Vec<Vec3>>, Vec<Vec3>) {
    let scale = 1.0 / f64::powi(2.0, steps as i32);
    let mut tape = Vec::with_capacity(steps as usize);
    let mut u: Vec<Vec3> = v.iter().map(|x| x.map(|c| c * scale)).collect();
    for _ in 0..steps {
        let next = compose_raw(&u, &u, dims);
        tape.push(std::mem::replace(&mut u, next));
    }
    (tape, u)
}

/// Gradient with respect to the velocity given the gradient `g` with respect
/// to the integrated displacement.
pub(crate) fn integrate_adjoint(tape: &[Vec<Vec3>], dims: &[usize; 3], g: &[Vec3]) -> Vec<Vec3> {
    let steps = tape.len();
    let mut gu = g.to_vec();
    for u in tape.iter().rev() {
        let mut prev = vec![[0.0; 3]; u.len()];
        for_each_voxel(dims, |idx, p| {
            let gv = gu[idx];
            let st = Stencil::locate(dims, add3(p, u[idx]));
            let (_, j) = st.sample_vector_jacobian(u);
            prev[idx] = add3(prev[idx], add3(gv, jt_mul(&j, gv)));
            st.scatter_vector(gv, &mut prev);
        });
        gu = prev;
    }
    let scale = 1.0 / f64::powi(2.0, steps as i32);
    for x in gu.iter_mut() {
        *x = x.map(|c| c * scale);
    }
    gu
}

/// Time-one flow of a stationary velocity field by scaling and squaring.
pub fn integrate_velocity(v: &VectorField3, cfg: &IntegrationConfig) -> Result<VectorField3> {
    cfg.validate()?;
    let (_, disp) = integrate_tape(v.data(), &v.grid().dims, cfg.squaring_steps);
    Ok(VectorField3::from_parts(
        *v.grid(),
        disp,
        crate::grid::FieldKind::Displacement,
    ))
}

/// Inverse estimate of `forward` from the opposite-direction field:
/// `phi~(p) = -backward(p + forward(p))`.
pub fn estimate_inverse_zeta(
    forward: &VectorField3,
    backward: &VectorField3,
) -> Result<VectorField3> {
    forward.grid().ensure_conforms(backward.grid())?;
    let dims = forward.grid().dims;
    let f = forward.data();
    let b = backward.data();
    let mut out = vec![[0.0; 3]; f.len()];
    for_each_voxel(&dims, |idx, p| {
        let s = Stencil::locate(&dims, add3(p, f[idx]));
        out[idx] = s.sample_vector(b).map(|c| -c);
    });
    Ok(VectorField3::from_parts(*forward.grid(), out, forward.kind()))
}

/// Determinant of `I + m`.
#[inline]
pub fn det_identity_plus(m: &Mat3) -> f64 {
    let a = [
        [1.0 + m[0][0], m[0][1], m[0][2]],
        [m[1][0], 1.0 + m[1][1], m[1][2]],
        [m[2][0], m[2][1], 1.0 + m[2][2]],
    ];
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Regularity statistics of `phi` over voxels where `mask > 0.5`.
pub fn jacobian_stats(phi: &VectorField3, mask: &Volume3) -> Result<JacobianStats> {
    phi.grid().ensure_conforms(mask.grid())?;
    let grads = gradient_central(phi);
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut nonpositive = 0usize;
    let mut det_min = f64::INFINITY;
    for (m, &w) in grads.iter().zip(mask.data()) {
        if w <= 0.5 {
            continue;
        }
        count += 1;
        sum += m.iter().flatten().map(|x| x * x).sum::<f64>();
        let det = det_identity_plus(m);
        if det <= 0.0 {
            nonpositive += 1;
        }
        det_min = det_min.min(det);
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(JacobianStats {
        l2_norm_mean: sum / count as f64,
        nonpositive_count: nonpositive,
        det_min,
    })
}
