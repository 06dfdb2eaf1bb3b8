//! Regular 3D grids, scalar volumes and vector fields.
//!
//! Voxels are stored x-fastest, z-slowest. Vector fields hold their three
//! components interleaved per voxel and are expressed in voxel units of the
//! grid they live on. Sampling clamps coordinates to the grid (border
//! replication) and derivatives use unit voxel steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Per-voxel Jacobian of a vector field, `m[i][j] = d phi^i / d x_j`.
pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "every dimension must be at least 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Half-resolution grid used for velocity parameters: `ceil(n / 2)` voxels
    /// per axis at twice the spacing.
    pub fn coarse(&self) -> Result<Grid> {
        let dims = self.dims.map(|n| n.div_ceil(2));
        Grid::new(dims, self.spacing.map(|s| 2.0 * s), self.origin)
    }

    /// Physical volume of one voxel in millilitres (spacing in mm).
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    /// Voxel dimensions and spacing agree; the origin is not compared.
    pub fn conforms(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()))
    }

    pub(crate) fn ensure_conforms(&self, other: &Grid) -> Result<()> {
        if self.conforms(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: format!("{:?} @ {:?}", self.dims, self.spacing),
                right: format!("{:?} @ {:?}", other.dims, other.spacing),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Velocity,
    Displacement,
}

/// Scalar image or (soft) mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f64>,
    kind: VolumeKind,
}

impl Volume3 {
    pub fn new(grid: Grid, data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} voxels, got {}",
                grid.len(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite voxel value {v}")));
        }
        if kind == VolumeKind::Mask {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidVolume(format!("mask value {v} outside [0, 1]")));
            }
        }
        Ok(Self { grid, data, kind })
    }

    /// Internal constructor for data that is valid by construction.
    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>, kind: VolumeKind) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data, kind }
    }

    pub fn zeros(grid: Grid, kind: VolumeKind) -> Self {
        Self::from_parts(grid, vec![0.0; grid.len()], kind)
    }

    pub fn from_fn(
        grid: Grid,
        kind: VolumeKind,
        mut f: impl FnMut([usize; 3]) -> f64,
    ) -> Result<Self> {
        let data = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self::new(grid, data, kind)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.grid, self.data, kind)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Binary mask of voxels above 0.5.
    pub fn thresholded(&self) -> Volume3 {
        let data = self
            .data
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect();
        Self::from_parts(self.grid, data, VolumeKind::Mask)
    }

    /// Number of voxels above 0.5.
    pub fn count_inside(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn sample(&self, p: Vec3) -> Result<f64> {
        sample_trilinear(self, p)
    }
}

/// Per-voxel 3-vector field in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField3 {
    grid: Grid,
    data: Vec<Vec3>,
    kind: FieldKind,
}

impl VectorField3 {
    pub fn new(grid: Grid, data: Vec<Vec3>, kind: FieldKind) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} vectors, got {}",
                grid.len(),
                data.len()
            )));
        }
        if data.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidVolume("non-finite vector component".into()));
        }
        Ok(Self { grid, data, kind })
    }

    pub(crate) fn from_parts(grid: Grid, data: Vec<Vec3>, kind: FieldKind) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data, kind }
    }

    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        Self::from_parts(grid, vec![[0.0; 3]; grid.len()], kind)
    }

    pub fn constant(grid: Grid, kind: FieldKind, value: Vec3) -> Self {
        Self::from_parts(grid, vec![value; grid.len()], kind)
    }

    pub fn from_fn(
        grid: Grid,
        kind: FieldKind,
        mut f: impl FnMut([usize; 3]) -> Vec3,
    ) -> Result<Self> {
        let data = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self::new(grid, data, kind)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Vec3> {
        self.data
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let data = self.data.iter().map(|v| v.map(|c| c * s)).collect();
        Self::from_parts(self.grid, data, self.kind)
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    /// Mean per-voxel Euclidean norm.
    pub fn mean_norm(&self) -> f64 {
        self.data.iter().map(|v| norm(*v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn sample(&self, p: Vec3) -> Result<Vec3> {
        sample_field_trilinear(self, p)
    }
}

#[inline]
pub(crate) fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Trilinear stencil of one sample position: the eight corner indices plus
/// fractional offsets. `live[a]` is false when the coordinate was clamped on
/// axis `a`, in which case the sample does not depend on it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub t: Vec3,
    pub live: [bool; 3],
}

/// Returns the lower corner, the step to the upper corner (0 or 1), the
/// fractional offset and whether the coordinate was inside the grid.
#[inline]
fn locate_axis(x: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let (xc, live) = if x < 0.0 {
        (0.0, false)
    } else if x > max {
        (max, false)
    } else {
        (x, true)
    };
    // xc >= 0, so truncation is floor
    let i0 = xc as usize;
    let step = usize::from(i0 + 1 < n);
    (i0, step, xc - i0 as f64, live)
}

impl Stencil {
    #[inline]
    pub fn locate(dims: &[usize; 3], p: Vec3) -> Self {
        let (i0, sx, tx, lx) = locate_axis(p[0], dims[0]);
        let (j0, sy, ty, ly) = locate_axis(p[1], dims[1]);
        let (k0, sz, tz, lz) = locate_axis(p[2], dims[2]);
        let sy = sy * dims[0];
        let sz = sz * dims[0] * dims[1];
        let b = i0 + dims[0] * j0 + dims[0] * dims[1] * k0;
        Self {
            idx: [
                b,
                b + sx,
                b + sy,
                b + sy + sx,
                b + sz,
                b + sz + sx,
                b + sz + sy,
                b + sz + sy + sx,
            ],
            t: [tx, ty, tz],
            live: [lx, ly, lz],
        }
    }

    /// Nested linear interpolation of eight corner values; exact for
    /// constant data and at grid points.
    #[inline]
    fn lerp8(&self, f: [f64; 8]) -> f64 {
        let [tx, ty, tz] = self.t;
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(f[0], f[1], tx);
        let c10 = lerp(f[2], f[3], tx);
        let c01 = lerp(f[4], f[5], tx);
        let c11 = lerp(f[6], f[7], tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    #[inline]
    pub fn weights(&self) -> [f64; 8] {
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        [
            ux * uy * uz,
            tx * uy * uz,
            ux * ty * uz,
            tx * ty * uz,
            ux * uy * tz,
            tx * uy * tz,
            ux * ty * tz,
            tx * ty * tz,
        ]
    }

    #[inline]
    pub fn sample_scalar(&self, data: &[f64]) -> f64 {
        self.lerp8(self.idx.map(|i| data[i]))
    }

    /// Value and position gradient; derivatives of the nested lerps, zero
    /// along clamped axes.
    #[inline]
    pub fn sample_scalar_grad(&self, data: &[f64]) -> (f64, Vec3) {
        Stencil::component_grad(&self.t, &self.live, self.idx.map(|i| data[i]))
    }

    #[inline]
    pub fn sample_vector(&self, data: &[Vec3]) -> Vec3 {
        let [tx, ty, tz] = self.t;
        #[inline(always)]
        fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
        }
        let i = &self.idx;
        let c00 = lerp(data[i[0]], data[i[1]], tx);
        let c10 = lerp(data[i[2]], data[i[3]], tx);
        let c01 = lerp(data[i[4]], data[i[5]], tx);
        let c11 = lerp(data[i[6]], data[i[7]], tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    /// Sampled vector and its spatial Jacobian `j[i][a] = d f^i / d x_a`.
    #[inline]
    pub fn sample_vector_jacobian(&self, data: &[Vec3]) -> (Vec3, Mat3) {
        let mut v = [0.0; 3];
        let mut j = [[0.0; 3]; 3];
        let i = &self.idx;
        let f = [i[0], i[1], i[2], i[3], i[4], i[5], i[6], i[7]].map(|k| data[k]);
        for c in 0..3 {
            let (value, grad) = Stencil::component_grad(&self.t, &self.live, [f[0][c], f[1][c], f[2][c], f[3][c], f[4][c], f[5][c], f[6][c], f[7][c]]);
            v[c] = value;
            j[c] = grad;
        }
        (v, j)
    }

    #[inline(always)]
    fn component_grad(t: &Vec3, live: &[bool; 3], f: [f64; 8]) -> (f64, Vec3) {
        let [tx, ty, tz] = *t;
        let (d00, d10, d01, d11) = (f[1] - f[0], f[3] - f[2], f[5] - f[4], f[7] - f[6]);
        let (c00, c10, c01, c11) = (f[0] + tx * d00, f[2] + tx * d10, f[4] + tx * d01, f[6] + tx * d11);
        let (e0, e1) = (c10 - c00, c11 - c01);
        let (c0, c1) = (c00 + ty * e0, c01 + ty * e1);
        let dx0 = d00 + ty * (d10 - d00);
        let dx1 = d01 + ty * (d11 - d01);
        (
            c0 + tz * (c1 - c0),
            [
                if live[0] { dx0 + tz * (dx1 - dx0) } else { 0.0 },
                if live[1] { e0 + tz * (e1 - e0) } else { 0.0 },
                if live[2] { c1 - c0 } else { 0.0 },
            ],
        )
    }

    /// Adjoint of `sample_vector`: spread `g` onto the eight corners.
    #[inline]
    pub fn scatter_vector(&self, g: Vec3, out: &mut [Vec3]) {
        let w = self.weights();
        for c in 0..8 {
            let o = &mut out[self.idx[c]];
            o[0] += w[c] * g[0];
            o[1] += w[c] * g[1];
            o[2] += w[c] * g[2];
        }
    }
}

#[inline]
fn check_point(p: Vec3) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteCoordinate(p))
    }
}

/// Trilinear interpolation at a continuous voxel coordinate, clamped to the grid.
pub fn sample_trilinear(vol: &Volume3, p: Vec3) -> Result<f64> {
    check_point(p)?;
    Ok(Stencil::locate(&vol.grid.dims, p).sample_scalar(&vol.data))
}

/// Componentwise trilinear interpolation of a vector field.
pub fn sample_field_trilinear(field: &VectorField3, p: Vec3) -> Result<Vec3> {
    check_point(p)?;
    Ok(Stencil::locate(&field.grid.dims, p).sample_vector(&field.data))
}

/// Derivative of every component along one axis: central differences in the
/// interior, one-sided at the two boundary voxels.
pub(crate) fn partial_axis(data: &[Vec3], dims: &[usize; 3], axis: usize) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; data.len()];
    for_each_difference(dims, axis, |idx, hi, lo, scale| {
        let (a, b) = (data[hi], data[lo]);
        out[idx] = [
            scale * (a[0] - b[0]),
            scale * (a[1] - b[1]),
            scale * (a[2] - b[2]),
        ];
    });
    out
}

/// Accumulates the transpose of `partial_axis` applied to `g` into `out`.
pub(crate) fn partial_axis_adjoint(g: &[Vec3], dims: &[usize; 3], axis: usize, out: &mut [Vec3]) {
    for_each_difference(dims, axis, |idx, hi, lo, scale| {
        let gv = g[idx];
        for c in 0..3 {
            let v = scale * gv[c];
            out[hi][c] += v;
            out[lo][c] -= v;
        }
    });
}

/// Visits every voxel with the two samples of its finite difference along
/// `axis`: central inside, one-sided at the ends.
#[inline(always)]
fn for_each_difference(dims: &[usize; 3], axis: usize, mut f: impl FnMut(usize, usize, usize, f64)) {
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let pos = [i, j, k][axis];
                if pos == 0 {
                    f(idx, idx + stride, idx, 1.0);
                } else if pos == n - 1 {
                    f(idx, idx, idx - stride, 1.0);
                } else {
                    f(idx, idx + stride, idx - stride, 0.5);
                }
                idx += 1;
            }
        }
    }
}

/// Per-voxel Jacobian of a vector field in voxel units (spacing not applied).
pub fn gradient_central(field: &VectorField3) -> Vec<Mat3> {
    let dims = field.grid.dims;
    let dx = partial_axis(&field.data, &dims, 0);
    let dy = partial_axis(&field.data, &dims, 1);
    let dz = partial_axis(&field.data, &dims, 2);
    (0..field.data.len())
        .map(|idx| {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                m[i] = [dx[idx][i], dy[idx][i], dz[idx][i]];
            }
            m
        })
        .collect()
}

/// Linear taps mapping fine index `i` to coarse samples around `(i - 0.5) / 2`.
fn upsample_taps(n_fine: usize, n_coarse: usize) -> Vec<(usize, usize, f64)> {
    (0..n_fine)
        .map(|i| {
            let (i0, step, t, _) = locate_axis((i as f64 - 0.5) / 2.0, n_coarse);
            (i0, i0 + step, t)
        })
        .collect()
}

fn resample_axis(
    data: &[Vec3],
    dims_in: [usize; 3],
    axis: usize,
    taps: &[(usize, usize, f64)],
) -> (Vec<Vec3>, [usize; 3]) {
    let mut dims_out = dims_in;
    dims_out[axis] = taps.len();
    let stride_in = [1, dims_in[0], dims_in[0] * dims_in[1]];
    let mut out = Vec::with_capacity(dims_out.iter().product());
    for k in 0..dims_out[2] {
        for j in 0..dims_out[1] {
            for i in 0..dims_out[0] {
                let mut pos = [i, j, k];
                let (a, b, t) = taps[pos[axis]];
                pos[axis] = a;
                let ia = pos[0] * stride_in[0] + pos[1] * stride_in[1] + pos[2] * stride_in[2];
                let ib = ia + stride_in[axis] * (b - a);
                let (va, vb) = (data[ia], data[ib]);
                out.push([
                    (1.0 - t) * va[0] + t * vb[0],
                    (1.0 - t) * va[1] + t * vb[1],
                    (1.0 - t) * va[2] + t * vb[2],
                ]);
            }
        }
    }
    (out, dims_out)
}

fn resample_axis_adjoint(
    g: &[Vec3],
    dims_out: [usize; 3],
    axis: usize,
    taps: &[(usize, usize, f64)],
    n_in: usize,
) -> (Vec<Vec3>, [usize; 3]) {
    let mut dims_in = dims_out;
    dims_in[axis] = n_in;
    let stride_in = [1, dims_in[0], dims_in[0] * dims_in[1]];
    let mut out = vec![[0.0; 3]; dims_in.iter().product()];
    let mut idx = 0;
    for k in 0..dims_out[2] {
        for j in 0..dims_out[1] {
            for i in 0..dims_out[0] {
                let mut pos = [i, j, k];
                let (a, b, t) = taps[pos[axis]];
                pos[axis] = a;
                let ia = pos[0] * stride_in[0] + pos[1] * stride_in[1] + pos[2] * stride_in[2];
                let ib = ia + stride_in[axis] * (b - a);
                let gv = g[idx];
                for c in 0..3 {
                    out[ia][c] += (1.0 - t) * gv[c];
                    out[ib][c] += t * gv[c];
                }
                idx += 1;
            }
        }
    }
    (out, dims_in)
}

fn check_upsample_target(coarse: &Grid, target: &Grid) -> Result<()> {
    let expected = target.dims.map(|n| n.div_ceil(2));
    if expected != coarse.dims {
        return Err(Error::GridMismatch {
            left: format!("coarse {:?}", coarse.dims),
            right: format!("target {:?} (needs coarse {:?})", target.dims, expected),
        });
    }
    Ok(())
}

/// Trilinear 2x upsampling onto `target`, whose half-resolution dims must
/// match the field. Values are doubled so they stay in voxel units of the
/// fine grid.
pub fn upsample2x(field: &VectorField3, target: &Grid) -> Result<VectorField3> {
    check_upsample_target(&field.grid, target)?;
    let mut data = field.data.clone();
    let mut dims = field.grid.dims;
    for axis in 0..3 {
        let taps = upsample_taps(target.dims[axis], field.grid.dims[axis]);
        (data, dims) = resample_axis(&data, dims, axis, &taps);
    }
    debug_assert_eq!(dims, target.dims);
    for v in data.iter_mut() {
        *v = v.map(|c| 2.0 * c);
    }
    Ok(VectorField3::from_parts(*target, data, field.kind))
}

/// Transpose of `upsample2x`: maps a fine-grid gradient to the coarse grid.
pub(crate) fn upsample2x_adjoint(g: &[Vec3], fine: &Grid, coarse: &Grid) -> Vec<Vec3> {
    let mut data = g.to_vec();
    let mut dims = fine.dims;
    for axis in (0..3).rev() {
        let taps = upsample_taps(fine.dims[axis], coarse.dims[axis]);
        (data, dims) = resample_axis_adjoint(&data, dims, axis, &taps, coarse.dims[axis]);
    }
    debug_assert_eq!(dims, coarse.dims);
    for v in data.iter_mut() {
        *v = v.map(|c| 2.0 * c);
    }
    data
}

/// Inclusive axis-aligned voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    /// Bounding box of voxels above 0.5.
    pub fn of_mask(mask: &Volume3) -> Result<Self> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &v) in mask.data.iter().enumerate() {
            if v > 0.5 {
                any = true;
                let c = mask.grid.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if any {
            Ok(Self { lo, hi })
        } else {
            Err(Error::EmptyMask)
        }
    }

    pub fn dilated(&self, margin: usize, grid: &Grid) -> Self {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].saturating_sub(margin);
            out.hi[a] = (self.hi[a].saturating_add(margin)).min(grid.dims[a] - 1);
        }
        out
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].min(other.lo[a]);
            out.hi[a] = self.hi[a].max(other.hi[a]);
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] <= self.hi[a])
    }

    /// Grows the box where needed so every axis spans at least two voxels.
    pub fn widened(&self, grid: &Grid) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if out.hi[a] == out.lo[a] {
                if out.hi[a] + 1 < grid.dims[a] {
                    out.hi[a] += 1;
                } else {
                    out.lo[a] -= 1;
                }
            }
        }
        out
    }

    fn subgrid(&self, grid: &Grid) -> Result<Grid> {
        let origin = [0, 1, 2].map(|a| grid.origin[a] + self.lo[a] as f64 * grid.spacing[a]);
        Grid::new(self.dims(), grid.spacing, origin)
    }

    pub fn crop_volume(&self, vol: &Volume3) -> Result<Volume3> {
        let sub = self.subgrid(&vol.grid)?;
        let data = (0..sub.len())
            .map(|idx| {
                let c = sub.coords(idx);
                vol.get(c[0] + self.lo[0], c[1] + self.lo[1], c[2] + self.lo[2])
            })
            .collect();
        Ok(Volume3::from_parts(sub, data, vol.kind))
    }

    pub fn crop_field(&self, field: &VectorField3) -> Result<VectorField3> {
        let sub = self.subgrid(&field.grid)?;
        let data = (0..sub.len())
            .map(|idx| {
                let c = sub.coords(idx);
                field.get(c[0] + self.lo[0], c[1] + self.lo[1], c[2] + self.lo[2])
            })
            .collect();
        Ok(VectorField3::from_parts(sub, data, field.kind))
    }

    /// Places a field defined on this box into `full`, zero elsewhere.
    pub fn embed_field(&self, field: &VectorField3, full: &Grid) -> Result<VectorField3> {
        if field.grid.dims != self.dims() {
            return Err(Error::GridMismatch {
                left: format!("{:?}", field.grid.dims),
                right: format!("box {:?}", self.dims()),
            });
        }
        let mut data = vec![[0.0; 3]; full.len()];
        for (idx, v) in field.data.iter().enumerate() {
            let c = field.grid.coords(idx);
            data[full.index(c[0] + self.lo[0], c[1] + self.lo[1], c[2] + self.lo[2])] = *v;
        }
        Ok(VectorField3::from_parts(*full, data, field.kind))
    }
}

/// Crops `vol` to the bounding box of `mask > 0.5` dilated by `margin`
/// voxels and clamped to the grid. Returns the crop and its voxel offset.
/// A box one voxel thick is widened to two so the crop is a valid grid.
pub fn crop_to_bbox(vol: &Volume3, mask: &Volume3, margin: usize) -> Result<(Volume3, [usize; 3])> {
    vol.grid.ensure_conforms(&mask.grid)?;
    let bbox = BoundingBox::of_mask(mask)?
        .dilated(margin, &vol.grid)
        .widened(&vol.grid);
    Ok((bbox.crop_volume(vol)?, bbox.lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> Grid {
        Grid::unit([n, n, n]).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_dims_and_spacing() {
        assert!(Grid::unit([1, 4, 4]).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, f64::NAN, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn coarse_grid_rounds_up() {
        let g = Grid::new([160, 160, 100], [1.5, 1.37, 2.0], [0.0; 3]).unwrap();
        let c = g.coarse().unwrap();
        assert_eq!(c.dims, [80, 80, 50]);
        assert_eq!(Grid::unit([13, 12, 3]).unwrap().coarse().unwrap().dims, [7, 6, 2]);
    }

    #[test]
    fn mask_values_are_validated() {
        let g = grid(2);
        assert!(Volume3::new(g, vec![0.5; 8], VolumeKind::Mask).is_ok());
        assert!(Volume3::new(g, vec![1.5; 8], VolumeKind::Mask).is_err());
        assert!(Volume3::new(g, vec![0.5; 7], VolumeKind::Mask).is_err());
        assert!(Volume3::new(g, vec![f64::INFINITY; 8], VolumeKind::Intensity).is_err());
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = Volume3::new(grid(5), vec![3.25; 125], VolumeKind::Intensity).unwrap();
        for p in [[0.3, 1.7, 2.2], [-4.0, 9.0, 2.5], [4.0, 4.0, 4.0]] {
            assert_eq!(sample_trilinear(&v, p).unwrap(), 3.25);
        }
    }

    #[test]
    fn sampling_is_exact_at_grid_points() {
        let v = Volume3::from_fn(grid(4), VolumeKind::Intensity, |[i, j, k]| {
            (i * 7 + j * 3 + k * k) as f64 * 0.37
        })
        .unwrap();
        for idx in 0..64 {
            let c = v.grid().coords(idx);
            let p = c.map(|x| x as f64);
            assert_eq!(sample_trilinear(&v, p).unwrap(), v.data()[idx]);
        }
    }

    #[test]
    fn alternating_cube_center_is_corner_mean() {
        // 2x2x2 volume, values alternate with parity of i+j+k.
        let v = Volume3::from_fn(grid(2), VolumeKind::Mask, |[i, j, k]| ((i + j + k) % 2) as f64)
            .unwrap();
        // Oracle: explicit weighted sum over the eight corners.
        let p = [0.5, 0.5, 0.5];
        let mut oracle = 0.0;
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let w = [i, j, k]
                        .iter()
                        .zip(p.iter())
                        .map(|(&b, &t)| if b == 1 { t } else { 1.0 - t })
                        .product::<f64>();
                    oracle += w * v.get(i, j, k);
                }
            }
        }
        assert_eq!(oracle, 0.5);
        assert_abs_diff_eq!(sample_trilinear(&v, p).unwrap(), oracle, epsilon = 1e-15);
        // Off-center point against the same oracle.
        let p = [0.2, 0.9, 0.35];
        let mut oracle = 0.0;
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let w = [i, j, k]
                        .iter()
                        .zip(p.iter())
                        .map(|(&b, &t)| if b == 1 { t } else { 1.0 - t })
                        .product::<f64>();
                    oracle += w * v.get(i, j, k);
                }
            }
        }
        assert_abs_diff_eq!(sample_trilinear(&v, p).unwrap(), oracle, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let v = Volume3::zeros(grid(3), VolumeKind::Intensity);
        assert!(matches!(
            sample_trilinear(&v, [f64::NAN, 0.0, 0.0]),
            Err(Error::NonFiniteCoordinate(_))
        ));
        let f = VectorField3::zeros(grid(3), FieldKind::Displacement);
        assert!(sample_field_trilinear(&f, [0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn field_sampling_reproduces_constant_and_linear_fields() {
        let g = grid(6);
        let zero = VectorField3::zeros(g, FieldKind::Displacement);
        assert_eq!(sample_field_trilinear(&zero, [1.3, 2.2, 4.9]).unwrap(), [0.0; 3]);
        let t = [0.4, -1.25, 2.0];
        let c = VectorField3::constant(g, FieldKind::Displacement, t);
        let s = sample_field_trilinear(&c, [0.7, 3.3, 5.0]).unwrap();
        for a in 0..3 {
            assert_abs_diff_eq!(s[a], t[a], epsilon = 1e-15);
        }
        let alpha = [0.3, -0.8, 1.1];
        let lin = VectorField3::from_fn(g, FieldKind::Displacement, |[i, j, k]| {
            [alpha[0] * i as f64, alpha[1] * j as f64, alpha[2] * k as f64]
        })
        .unwrap();
        let p = [2.37, 1.05, 4.61];
        let s = sample_field_trilinear(&lin, p).unwrap();
        for a in 0..3 {
            assert_abs_diff_eq!(s[a], alpha[a] * p[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_constant_is_zero_and_of_linear_is_slope() {
        let g = grid(5);
        let c = VectorField3::constant(g, FieldKind::Displacement, [1.0, 2.0, 3.0]);
        assert!(gradient_central(&c).iter().flatten().flatten().all(|&v| v == 0.0));
        let lin = VectorField3::from_fn(g, FieldKind::Displacement, |[i, _, _]| {
            [2.0 * i as f64, 0.0, 0.0]
        })
        .unwrap();
        for m in gradient_central(&lin) {
            assert_eq!(m, [[2.0, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
        }
    }

    #[test]
    fn partial_adjoint_is_transpose() {
        let g = Grid::unit([4, 3, 5]).unwrap();
        let n = g.len();
        let x: Vec<Vec3> = (0..n)
            .map(|i| [(i as f64 * 0.37).sin(), (i as f64).cos(), i as f64 * 0.01])
            .collect();
        let y: Vec<Vec3> = (0..n)
            .map(|i| [(i as f64 * 1.7).cos(), (i as f64 * 0.2).sin(), 1.0])
            .collect();
        for axis in 0..3 {
            let dx = partial_axis(&x, &g.dims, axis);
            let mut dty = vec![[0.0; 3]; n];
            partial_axis_adjoint(&y, &g.dims, axis, &mut dty);
            let lhs: f64 = dx.iter().zip(&y).map(|(a, b)| dot(*a, *b)).sum();
            let rhs: f64 = x.iter().zip(&dty).map(|(a, b)| dot(*a, *b)).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[test]
    fn upsample_zero_and_constant() {
        let fine = Grid::unit([8, 8, 8]).unwrap();
        let coarse = fine.coarse().unwrap();
        let z = upsample2x(&VectorField3::zeros(coarse, FieldKind::Displacement), &fine).unwrap();
        assert!(z.data().iter().all(|v| *v == [0.0; 3]));
        let c = VectorField3::constant(coarse, FieldKind::Displacement, [1.0, 0.0, 0.0]);
        let u = upsample2x(&c, &fine).unwrap();
        assert!(u.data().iter().all(|v| *v == [2.0, 0.0, 0.0]));
    }

    #[test]
    fn upsample_preserves_linear_slope() {
        let fine = Grid::unit([12, 10, 9]).unwrap();
        let coarse = fine.coarse().unwrap();
        let a = 0.3;
        // Coarse displacement a*c coarse voxels at coarse position c.
        let f = VectorField3::from_fn(coarse, FieldKind::Displacement, |[c, _, _]| {
            [a * c as f64, 0.0, 0.0]
        })
        .unwrap();
        let u = upsample2x(&f, &fine).unwrap();
        // Analytic: fine position i sits at coarse coordinate (i - 0.5)/2, the
        // value doubles, giving a*(i - 0.5) wherever no clamping happens.
        for i in 1..11 {
            let v = u.get(i, 3, 4)[0];
            assert_abs_diff_eq!(v, a * (i as f64 - 0.5), epsilon = 1e-12);
        }
        // Same physical slope: one fine voxel step changes displacement by a.
        assert_abs_diff_eq!(u.get(6, 0, 0)[0] - u.get(5, 0, 0)[0], a, epsilon = 1e-12);
    }

    #[test]
    fn upsample_rejects_wrong_target() {
        let f = VectorField3::zeros(Grid::unit([4, 4, 4]).unwrap(), FieldKind::Velocity);
        assert!(upsample2x(&f, &Grid::unit([10, 8, 8]).unwrap()).is_err());
        // Odd targets clip the doubled grid.
        assert!(upsample2x(&f, &Grid::unit([7, 8, 8]).unwrap()).is_ok());
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let fine = Grid::unit([7, 6, 5]).unwrap();
        let coarse = fine.coarse().unwrap();
        let x = VectorField3::from_fn(coarse, FieldKind::Velocity, |[i, j, k]| {
            [(i * j) as f64 * 0.1, k as f64 - 0.5, (i + 2 * k) as f64 * 0.3]
        })
        .unwrap();
        let y: Vec<Vec3> = (0..fine.len())
            .map(|i| [(i as f64 * 0.3).sin(), (i as f64 * 0.11).cos(), 0.5])
            .collect();
        let ux = upsample2x(&x, &fine).unwrap();
        let uty = upsample2x_adjoint(&y, &fine, &coarse);
        let lhs: f64 = ux.data().iter().zip(&y).map(|(a, b)| dot(*a, *b)).sum();
        let rhs: f64 = x.data().iter().zip(&uty).map(|(a, b)| dot(*a, *b)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn crop_single_voxel_with_margin() {
        let g = grid(12);
        let mask = Volume3::from_fn(g, VolumeKind::Mask, |c| {
            if c == [5, 5, 5] {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let (crop, off) = crop_to_bbox(&mask, &mask, 2).unwrap();
        assert_eq!(off, [3, 3, 3]);
        assert_eq!(crop.grid().dims, [5, 5, 5]);
        assert_eq!(crop.get(2, 2, 2), 1.0);
        assert_eq!(crop.grid().origin, [3.0, 3.0, 3.0]);
    }

    #[test]
    fn crop_full_mask_and_large_margin_is_identity() {
        let g = grid(6);
        let full = Volume3::new(g, vec![1.0; 216], VolumeKind::Mask).unwrap();
        let (crop, off) = crop_to_bbox(&full, &full, 0).unwrap();
        assert_eq!((crop.grid().dims, off), ([6, 6, 6], [0, 0, 0]));
        let one = Volume3::from_fn(g, VolumeKind::Mask, |c| if c == [1, 2, 3] { 1.0 } else { 0.0 })
            .unwrap();
        let (crop, off) = crop_to_bbox(&full, &one, 100).unwrap();
        assert_eq!((crop.grid().dims, off), ([6, 6, 6], [0, 0, 0]));
        assert_eq!(crop.data(), full.data());
    }

    #[test]
    fn crop_empty_mask_errors() {
        let g = grid(4);
        let empty = Volume3::zeros(g, VolumeKind::Mask);
        assert!(matches!(crop_to_bbox(&empty, &empty, 1), Err(Error::EmptyMask)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn crop_contains_every_mask_voxel(
                pts in proptest::collection::vec((0usize..9, 0usize..7, 0usize..8), 1..12),
                margin in 0usize..4,
            ) {
                let g = Grid::unit([9, 7, 8]).unwrap();
                let mask = Volume3::from_fn(g, VolumeKind::Mask, |c| {
                    if pts.iter().any(|&(i, j, k)| [i, j, k] == c) { 1.0 } else { 0.0 }
                }).unwrap();
                let (crop, off) = crop_to_bbox(&mask, &mask, margin).unwrap();
                prop_assert_eq!(crop.count_inside(), pts.iter().collect::<std::collections::BTreeSet<_>>().len());
                for &(i, j, k) in &pts {
                    prop_assert_eq!(crop.get(i - off[0], j - off[1], k - off[2]), 1.0);
                }
            }

            #[test]
            fn trilinear_reproduces_separably_linear_functions(
                a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0,
                x in 0.0f64..5.0, y in 0.0f64..5.0, z in 0.0f64..5.0,
            ) {
                let g = grid(6);
                let f = |p: [f64; 3]| a + b * p[0] + c * p[1] * p[2] + d * p[0] * p[1] * p[2];
                let v = Volume3::from_fn(g, VolumeKind::Intensity, |q| f(q.map(|u| u as f64))).unwrap();
                let s = sample_trilinear(&v, [x, y, z]).unwrap();
                prop_assert!((s - f([x, y, z])).abs() < 1e-10);
            }
        }
    }
}
