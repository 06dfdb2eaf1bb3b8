//! Alignment, content, regularity, cycle and tumor-wise evaluation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::RegistrationResult;
use crate::grid::{BoundingBox, Volume3, VolumeKind};
use crate::phantom::PhantomPair;
use crate::transforms::jacobian_stats;
use crate::{Error, Result};

pub const MI_BINS: usize = 32;
pub const MATCH_THRESHOLD: f64 = 0.10;
/// Margin around the liver pair that bounds the ncc/mi region.
pub const CONTENT_MARGIN: usize = 8;

fn inside(v: f64) -> bool {
    v > 0.5
}

/// Dice overlap of two masks thresholded at 0.5; two empty masks score 1.
pub fn dsc(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.grid().ensure_conforms(b.grid())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (inside(x), inside(y));
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

fn masked_pairs<'a>(a: &'a Volume3, b: &'a Volume3, mask: &'a Volume3) -> Result<Vec<(f64, f64)>> {
    a.grid().ensure_conforms(b.grid())?;
    a.grid().ensure_conforms(mask.grid())?;
    let pairs: Vec<(f64, f64)> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .filter(|(_, &m)| inside(m))
        .map(|((&x, &y), _)| (x, y))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(pairs)
}

/// Global zero-mean normalized cross-correlation over the mask.
pub fn ncc(a: &Volume3, b: &Volume3, mask: &Volume3) -> Result<f64> {
    let pairs = masked_pairs(a, b, mask)?;
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn bin_indices(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Vec<usize> {
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .map(|v| {
            if span > 0.0 {
                (((v - lo) / span * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Plug-in mutual information (nats) of the joint histogram of intensities,
/// each min-max normalized within the mask.
pub fn mi(a: &Volume3, b: &Volume3, mask: &Volume3, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidConfig("mi needs at least one bin".into()));
    }
    let pairs = masked_pairs(a, b, mask)?;
    let ia = bin_indices(pairs.iter().map(|p| p.0), bins);
    let ib = bin_indices(pairs.iter().map(|p| p.1), bins);
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c > 0 {
                let pxy = c as f64 / n;
                total += pxy * (pxy * n * n / (pa[x] as f64 * pb[y] as f64)).ln();
            }
        }
    }
    Ok(total.max(0.0))
}

/// Mean absolute difference between an image and its cyclic reconstruction
/// over the mask.
pub fn cycle_l1(a: &Volume3, a_cyc: &Volume3, mask: &Volume3) -> Result<f64> {
    let pairs = masked_pairs(a, a_cyc, mask)?;
    Ok(pairs.iter().map(|(x, y)| (x - y).abs()).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorInstance {
    pub id: usize,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_ml: f64,
}

/// 26-connected components of `mask > 0.5`, labeled in raster order.
pub fn components(mask: &Volume3) -> Vec<TumorInstance> {
    let g = *mask.grid();
    let d = g.dims;
    let mut label = vec![usize::MAX; g.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..g.len() {
        if !inside(mask.data()[seed]) || label[seed] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[seed] = id;
        queue.push_back(seed);
        let mut voxels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            voxels.push(idx);
            let c = g.coords(idx);
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let n = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                        if (0..3).any(|a| n[a] < 0 || n[a] >= d[a] as i64) {
                            continue;
                        }
                        let nidx = g.index(n[0] as usize, n[1] as usize, n[2] as usize);
                        if label[nidx] == usize::MAX && inside(mask.data()[nidx]) {
                            label[nidx] = id;
                            queue.push_back(nidx);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        let volume_ml = voxels.len() as f64 * g.voxel_volume_ml();
        out.push(TumorInstance { id, voxels, volume_ml });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorMatch {
    pub fixed_id: usize,
    pub inclusion: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub tumors: Vec<TumorMatch>,
    pub matched: usize,
    pub total: usize,
    /// Mean inclusion over matched tumors; 0 when nothing matched.
    pub mean_inclusion: f64,
}

/// For every fixed tumor, the best coverage by a single warped tumor.
pub fn match_tumors(warped: &Volume3, fixed: &Volume3) -> Result<MatchSummary> {
    warped.grid().ensure_conforms(fixed.grid())?;
    let moving = components(warped);
    let mut owner = vec![usize::MAX; warped.grid().len()];
    for t in &moving {
        for &v in &t.voxels {
            owner[v] = t.id;
        }
    }
    let mut tumors = Vec::new();
    for t in components(fixed) {
        let mut overlap = vec![0usize; moving.len()];
        for &v in &t.voxels {
            if owner[v] != usize::MAX {
                overlap[owner[v]] += 1;
            }
        }
        let best = overlap.iter().copied().max().unwrap_or(0);
        let inclusion = best as f64 / t.voxels.len() as f64;
        tumors.push(TumorMatch {
            fixed_id: t.id,
            inclusion,
            matched: inclusion > MATCH_THRESHOLD,
        });
    }
    let matched: Vec<f64> = tumors.iter().filter(|t| t.matched).map(|t| t.inclusion).collect();
    let mean_inclusion = if matched.is_empty() {
        0.0
    } else {
        matched.iter().sum::<f64>() / matched.len() as f64
    };
    Ok(MatchSummary {
        matched: matched.len(),
        total: tumors.len(),
        tumors,
        mean_inclusion,
    })
}

/// Tumor burden in mL.
pub fn burden_ml(mask: &Volume3) -> f64 {
    mask.count_inside() as f64 * mask.grid().voxel_volume_ml()
}

pub fn relative_error(pre_ml: f64, post_ml: f64) -> Result<f64> {
    if pre_ml <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok((post_ml - pre_ml).abs() / pre_ml)
}

pub fn burden_relative_error(pre: &Volume3, post: &Volume3) -> Result<f64> {
    pre.grid().ensure_conforms(post.grid())?;
    relative_error(burden_ml(pre), burden_ml(post))
}

/// Burden error of each moving-image tumor carried by the registration.
pub fn per_tumor_burden_errors(result: &RegistrationResult, moving_tumors: &Volume3) -> Result<Vec<f64>> {
    let g = *moving_tumors.grid();
    components(moving_tumors)
        .iter()
        .map(|t| {
            let mut data = vec![0.0; g.len()];
            t.voxels.iter().for_each(|&v| data[v] = 1.0);
            let single = Volume3::new(g, data, VolumeKind::Mask)?;
            let post = result.warp_forward(&single)?.thresholded();
            relative_error(t.volume_ml, burden_ml(&post))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub ncc: f64,
    pub mi: f64,
    /// Mean squared Frobenius norm of the composed forward field's gradient
    /// inside the fixed liver mask.
    pub grad_l2: f64,
    /// `None` for modes without a backward path.
    pub cycle_l1: Option<f64>,
    pub folds: usize,
    pub matched_tumors: (usize, usize),
    pub mean_inclusion_ratio: f64,
    /// `None` when the moving image has no tumor.
    pub burden_relative_error: Option<f64>,
}

/// Everything the evaluation reads besides the registration itself.
#[derive(Clone, Copy, Debug)]
pub struct EvalInputs<'a> {
    pub moving_image: &'a Volume3,
    pub fixed_image: &'a Volume3,
    pub moving_mask: &'a Volume3,
    pub fixed_mask: &'a Volume3,
    pub moving_tumors: Option<&'a Volume3>,
    pub fixed_tumors: Option<&'a Volume3>,
}

impl PhantomPair {
    pub fn eval_inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            moving_image: &self.image_a,
            fixed_image: &self.image_b,
            moving_mask: &self.mask_a,
            fixed_mask: &self.mask_b,
            moving_tumors: Some(&self.tumors_a),
            fixed_tumors: Some(&self.tumors_b),
        }
    }
}

/// Box around both livers, as a mask.
pub fn content_region(a: &Volume3, b: &Volume3) -> Result<Volume3> {
    let g = *a.grid();
    let bbox = BoundingBox::of_mask(a)?
        .union(&BoundingBox::of_mask(b)?)
        .dilated(CONTENT_MARGIN, &g);
    Volume3::from_fn(g, VolumeKind::Mask, |c| if bbox.contains(c) { 1.0 } else { 0.0 })
}

pub fn report(inputs: &EvalInputs<'_>, result: &RegistrationResult) -> Result<MetricsReport> {
    let warped_mask = result.warp_forward(inputs.moving_mask)?;
    let dsc = dsc(&warped_mask, inputs.fixed_mask)?;

    let warped_image = result.warp_forward(inputs.moving_image)?;
    let region = content_region(&warped_mask.thresholded(), inputs.fixed_mask)?;
    let ncc = ncc(&warped_image, inputs.fixed_image, &region)?;
    let mi = mi(&warped_image, inputs.fixed_image, &region, MI_BINS)?;

    let stats = jacobian_stats(&result.composed_forward, inputs.fixed_mask)?;

    let cycle_l1 = match result.warp_cycle(inputs.moving_image)? {
        Some(cyc) => {
            let aligned = result.align(inputs.moving_image)?;
            let liver = result.align(inputs.moving_mask)?;
            Some(cycle_l1(&aligned, &cyc, &liver)?)
        }
        None => None,
    };

    let (matches, burden) = match (inputs.moving_tumors, inputs.fixed_tumors) {
        (Some(tm), Some(tf)) => {
            let warped = result.warp_forward(tm)?.thresholded();
            let burden = if tm.count_inside() > 0 {
                Some(burden_relative_error(tm, &warped)?)
            } else {
                None
            };
            (Some(match_tumors(&warped, tf)?), burden)
        }
        (Some(tm), None) if tm.count_inside() > 0 => {
            let warped = result.warp_forward(tm)?.thresholded();
            (None, Some(burden_relative_error(tm, &warped)?))
        }
        _ => (None, None),
    };
    let (matched_tumors, mean_inclusion_ratio) = match &matches {
        Some(m) => ((m.matched, m.total), m.mean_inclusion),
        None => ((0, 0), 0.0),
    };

    Ok(MetricsReport {
        dsc,
        ncc,
        mi,
        grad_l2: stats.l2_norm_mean,
        cycle_l1,
        folds: stats.nonpositive_count,
        matched_tumors,
        mean_inclusion_ratio,
        burden_relative_error: burden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid {
        Grid::unit([8, 8, 8]).unwrap()
    }

    fn mask(f: impl Fn([usize; 3]) -> bool) -> Volume3 {
        Volume3::from_fn(grid(), VolumeKind::Mask, |c| if f(c) { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn dsc_basic_counts() {
        let a = mask(|c| c[0] < 4);
        let b = mask(|c| c[0] >= 4);
        let half = mask(|c| c[0] >= 2 && c[0] < 6);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        assert_eq!(dsc(&a, &half).unwrap(), 0.5);
        let empty = mask(|_| false);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn ncc_needs_variance() {
        let flat = Volume3::zeros(grid(), VolumeKind::Intensity);
        let all = mask(|_| true);
        assert!(matches!(ncc(&flat, &flat, &all), Err(Error::ZeroVariance)));
    }

    #[test]
    fn checkerboard_mi_is_ln2() {
        let board = Volume3::from_fn(grid(), VolumeKind::Intensity, |c| ((c[0] + c[1] + c[2]) % 2) as f64).unwrap();
        let all = mask(|_| true);
        assert_abs_diff_eq!(mi(&board, &board, &all, MI_BINS).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let flat = Volume3::zeros(grid(), VolumeKind::Intensity);
        assert_eq!(mi(&flat, &flat, &all, MI_BINS).unwrap(), 0.0);
    }

    #[test]
    fn components_split_on_gaps_and_join_on_corners() {
        let two = mask(|c| c == [1, 1, 1] || c == [5, 5, 5]);
        assert_eq!(components(&two).len(), 2);
        let diagonal = mask(|c| c == [1, 1, 1] || c == [2, 2, 2]);
        assert_eq!(components(&diagonal).len(), 1);
    }

    #[test]
    fn match_two_fixed_one_half_covered() {
        let fixed = mask(|c| (c[0] < 2 && c[1] < 2 && c[2] < 2) || (c[0] >= 6 && c[1] >= 6 && c[2] >= 6));
        let warped = mask(|c| c[0] < 1 && c[1] < 2 && c[2] < 2);
        let s = match_tumors(&warped, &fixed).unwrap();
        assert_eq!((s.matched, s.total), (1, 2));
        assert_abs_diff_eq!(s.mean_inclusion, 0.5);
    }

    #[test]
    fn zero_pre_burden_is_an_error() {
        let empty = mask(|_| false);
        assert!(burden_relative_error(&empty, &mask(|_| true)).is_err());
    }
}
