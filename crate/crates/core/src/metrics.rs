//! Overlap, surface-distance and landmark metrics.

use crate::error::{RegError, Result};
use crate::transform::DisplacementField;
use crate::volume::{sample_with, Border, GridSpec, LabelMap, LandmarkSet};

pub use crate::transform::ndv_metric;

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `(label, score)` for every label present in either map, ascending.
    pub per_label: Vec<(u32, f64)>,
    /// Unweighted mean over `per_label`; `None` when both maps are all
    /// background.
    pub mean: Option<f64>,
}

pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceReport> {
    a.grid().ensure_same(b.grid(), "dice")?;
    let mut labels = a.labels();
    labels.extend(b.labels());
    labels.sort_unstable();
    labels.dedup();
    let per_label: Vec<(u32, f64)> = labels
        .iter()
        .map(|&l| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                na += usize::from(x == l);
                nb += usize::from(y == l);
                both += usize::from(x == l && y == l);
            }
            (l, 2.0 * both as f64 / (na + nb) as f64)
        })
        .collect();
    let mean = (!per_label.is_empty()).then(|| per_label.iter().map(|p| p.1).sum::<f64>() / per_label.len() as f64);
    Ok(DiceReport { per_label, mean })
}

/// Voxels of `label` with at least one 6-neighbour outside it; faces of the
/// image count as outside.
pub fn surface_mask(labels: &LabelMap, label: u32) -> Vec<bool> {
    let grid = labels.grid();
    let data = labels.data();
    let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    (0..grid.len())
        .map(|i| {
            if data[i] != label {
                return false;
            }
            let c = grid.coords(i);
            (0..3).any(|a| {
                c[a] == 0 || c[a] + 1 == grid.dims[a] || data[i - stride[a]] != label || data[i + stride[a]] != label
            })
        })
        .collect()
}

/// Lower envelope of parabolas `w²(p − q)² + f(q)` over the finite
/// entries of `f`, written into `out`.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let w2 = w * w;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w2 * (q * q) as f64;
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[last] + w2 * (last * last) as f64)) / (2.0 * w2 * (q - last) as f64);
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = w2 * d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `mask`.
pub fn squared_distance_transform(mask: &[bool], grid: &GridSpec) -> Vec<f64> {
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = grid.dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..grid.len() {
            if grid.coords(start)[axis] != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = dist[start + k * stride[axis]];
            }
            edt_line(&line, grid.spacing[axis], &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                dist[start + k * stride[axis]] = *o;
            }
        }
    }
    dist
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn directed_p95(from: &[bool], to_sq: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.iter().zip(to_sq).filter(|(f, _)| **f).map(|(_, s)| s.sqrt()).collect();
    d.sort_by(f64::total_cmp);
    percentile(&d, 0.95)
}

/// 95th-percentile symmetric surface distance of one label, in mm.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "hd95")?;
    let sa = surface_mask(a, label);
    let sb = surface_mask(b, label);
    if !sa.contains(&true) || !sb.contains(&true) {
        return Err(RegError::EmptyLabel(label));
    }
    let grid = a.grid();
    let da = squared_distance_transform(&sa, grid);
    let db = squared_distance_transform(&sb, grid);
    Ok(directed_p95(&sa, &db).max(directed_p95(&sb, &da)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tre {
    /// No landmarks were given; there is nothing to measure.
    NotApplicable,
    Value { mean: f64, per_landmark: Vec<f64> },
}

/// Target registration error of `fixed + d(fixed)` against `moving`, in mm.
pub fn tre(fixed: &LandmarkSet, moving: &LandmarkSet, d: &DisplacementField) -> Result<Tre> {
    if fixed.len() != moving.len() {
        return Err(RegError::LengthMismatch(fixed.len(), moving.len()));
    }
    if fixed.is_empty() {
        return Ok(Tre::NotApplicable);
    }
    let grid = d.grid();
    let per_landmark = fixed
        .points
        .iter()
        .zip(&moving.points)
        .enumerate()
        .map(|(index, (x, y))| {
            let p = grid.world_to_voxel(*x);
            let inside = (0..3).all(|a| p[a] >= -1e-9 && p[a] <= (grid.dims[a] - 1) as f64 + 1e-9);
            if !inside {
                return Err(RegError::OutOfExtent { index, point: *x });
            }
            let dist2: f64 = (0..3)
                .map(|a| {
                    let u = sample_with(&d.comps()[a], grid.dims, p, Border::Clamp);
                    (x[a] + u - y[a]).powi(2)
                })
                .sum();
            Ok(dist2.sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_landmark.iter().sum::<f64>() / per_landmark.len() as f64;
    Ok(Tre::Value { mean, per_landmark })
}
