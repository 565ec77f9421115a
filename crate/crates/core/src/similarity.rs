//! Similarity terms: windowed normalized cross-correlation, the MIND
//! self-similarity descriptor, correlation cost volumes and vector-field
//! attention.

use crate::error::{RegError, Result};
use crate::transform::{zeros_comps, Comps, DisplacementField, LossWithGrad};
use crate::volume::{displaced, sample, warp_data, warp_data_backward, GridSpec, Volume};

/// Added to both local variances in LNCC.
pub const LNCC_EPS: f64 = 1e-5;

/// The six axis-aligned unit offsets of the MIND search region.
pub const MIND_OFFSETS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

// ---------------------------------------------------------------------------
// Box filtering
// ---------------------------------------------------------------------------

/// Sum over the cube of half-width `r` around each voxel, truncated at the
/// borders (no padding).
pub(crate) fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let s = stride[axis];
        let mut next = vec![0.0; cur.len()];
        for start in 0..cur.len() {
            // only visit the first voxel of every line along `axis`
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| cur[start + k * s]));
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for &v in &line {
                acc += v;
                prefix.push(acc);
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(n);
                next[start + k * s] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn box_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let axis_count = |k: usize, n: usize| ((k + r + 1).min(n) - k.saturating_sub(r)) as f64;
    let grid_len = dims[0] * dims[1] * dims[2];
    (0..grid_len)
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            axis_count(x, dims[0]) * axis_count(y, dims[1]) * axis_count(z, dims[2])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// LNCC
// ---------------------------------------------------------------------------

pub(crate) struct LnccTerms {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    pub grad_m: Vec<f64>,
}

fn centered(data: &[f64]) -> Vec<f64> {
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter().map(|v| v - mean).collect()
}

/// `1 - mean(NCC)` over truncated cubic windows, optionally with gradients
/// with respect to both images.
pub(crate) fn lncc_terms(f: &[f64], m: &[f64], dims: [usize; 3], window: usize, need_grad: bool) -> LnccTerms {
    let r = window / 2;
    let n = f.len();
    let f = centered(f);
    let m = centered(m);
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
    let fm: Vec<f64> = f.iter().zip(&m).map(|(a, b)| a * b).collect();
    let sf = box_sum(&f, dims, r);
    let sm = box_sum(&m, dims, r);
    let sff = box_sum(&ff, dims, r);
    let smm = box_sum(&mm, dims, r);
    let sfm = box_sum(&fm, dims, r);
    let cnt = box_counts(dims, r);

    let mut total = 0.0;
    // per-voxel adjoint coefficients for the window sums
    let (mut a_f, mut a_ff, mut a_m, mut a_mm, mut a_fm) = if need_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        Default::default()
    };
    let g = -1.0 / n as f64;
    for i in 0..n {
        let c = cnt[i];
        let mf = sf[i] / c;
        let mmv = sm[i] / c;
        let cov = sfm[i] / c - mf * mmv;
        let vf = (sff[i] / c - mf * mf).max(0.0) + LNCC_EPS;
        let vm = (smm[i] / c - mmv * mmv).max(0.0) + LNCC_EPS;
        let inv = 1.0 / (vf * vm).sqrt();
        let ncc = cov * inv;
        total += ncc;
        if need_grad {
            let d_cov = g * inv;
            let d_vf = g * -0.5 * ncc / vf;
            let d_vm = g * -0.5 * ncc / vm;
            a_fm[i] = d_cov / c;
            a_f[i] = (-d_cov * mmv - 2.0 * d_vf * mf) / c;
            a_m[i] = (-d_cov * mf - 2.0 * d_vm * mmv) / c;
            a_ff[i] = d_vf / c;
            a_mm[i] = d_vm / c;
        }
    }
    let loss = 1.0 - total / n as f64;
    if !need_grad {
        return LnccTerms {
            loss,
            grad_f: Vec::new(),
            grad_m: Vec::new(),
        };
    }
    // truncated cube windows are symmetric, so the adjoint of a box sum is
    // again a box sum
    let b_f = box_sum(&a_f, dims, r);
    let b_ff = box_sum(&a_ff, dims, r);
    let b_m = box_sum(&a_m, dims, r);
    let b_mm = box_sum(&a_mm, dims, r);
    let b_fm = box_sum(&a_fm, dims, r);
    let grad_f = (0..n).map(|i| b_f[i] + 2.0 * f[i] * b_ff[i] + m[i] * b_fm[i]).collect();
    let grad_m = (0..n).map(|i| b_m[i] + 2.0 * m[i] * b_mm[i] + f[i] * b_fm[i]).collect();
    LnccTerms { loss, grad_f, grad_m }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        Err(RegError::BadWindow(window))
    } else {
        Ok(())
    }
}

/// Local NCC loss `1 - mean(NCC)` with the gradient with respect to `m`.
pub fn lncc_loss(f: &Volume, m: &Volume, window: usize) -> Result<LossWithGrad<Vec<f64>>> {
    f.grid().ensure_same(m.grid(), "lncc_loss")?;
    check_window(window)?;
    let t = lncc_terms(f.data(), m.data(), f.grid().dims, window, true);
    Ok(LossWithGrad {
        value: t.loss,
        grad: t.grad_m,
    })
}

/// LNCC window for a pyramid level counted from the finest (0 → 7, 1 → 5,
/// coarser → 3).
pub fn lncc_window_for_level(from_finest: usize) -> usize {
    match from_finest {
        0 => 7,
        1 => 5,
        _ => 3,
    }
}

// ---------------------------------------------------------------------------
// MIND
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MindConfig {
    pub patch_radius: usize,
    /// Variance floor as a fraction of the mean patch distance.
    pub variance_floor: f64,
    /// Absolute lower bound on the floor.
    pub variance_floor_abs: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            variance_floor: 1e-6,
            variance_floor_abs: 1e-12,
        }
    }
}

/// Six max-normalized MIND channels with values in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    grid: GridSpec,
    channels: [Vec<f64>; 6],
}

impl DescriptorField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> &[Vec<f64>; 6] {
        &self.channels
    }

    pub fn at(&self, i: usize) -> [f64; 6] {
        std::array::from_fn(|c| self.channels[c][i])
    }
}

/// Mean patch distance `D(x, r)` for every offset, computed on a
/// clamp-extended copy of the image with separable box sums.
fn patch_distances(vol: &Volume, p: usize) -> [Vec<f64>; 6] {
    let grid = vol.grid();
    let [nx, ny, nz] = grid.dims;
    let pad = p + 1;
    let pd = [nx + 2 * pad, ny + 2 * pad, nz + 2 * pad];
    let plen = pd[0] * pd[1] * pd[2];
    let clamp = |v: usize, n: usize| v.saturating_sub(pad).min(n - 1);
    let mut padded = Vec::with_capacity(plen);
    for z in 0..pd[2] {
        for y in 0..pd[1] {
            for x in 0..pd[0] {
                padded.push(vol.get(clamp(x, nx), clamp(y, ny), clamp(z, nz)));
            }
        }
    }
    let stride = [1isize, pd[0] as isize, (pd[0] * pd[1]) as isize];
    let patch = ((2 * p + 1) as f64).powi(3);
    MIND_OFFSETS.map(|r| {
        let shift: isize = (0..3).map(|a| r[a] * stride[a]).sum();
        let mut sq = vec![0.0; plen];
        for z in 0..pd[2] {
            for y in 0..pd[1] {
                for x in 0..pd[0] {
                    let c = [x, y, z];
                    let inside = (0..3).all(|a| {
                        let q = c[a] as isize + r[a];
                        q >= 0 && (q as usize) < pd[a]
                    });
                    if inside {
                        let i = x + pd[0] * (y + pd[1] * z);
                        let j = (i as isize + shift) as usize;
                        sq[i] = (padded[i] - padded[j]).powi(2);
                    }
                }
            }
        }
        let sums = box_sum(&sq, pd, p);
        let mut out = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = (x + pad) + pd[0] * ((y + pad) + pd[1] * (z + pad));
                    out.push(sums[i] / patch);
                }
            }
        }
        out
    })
}

/// MIND descriptor over the six-neighbourhood with uniform cubic patches.
pub fn mind_descriptor(vol: &Volume, cfg: &MindConfig) -> DescriptorField {
    let grid = *vol.grid();
    let n = grid.len();
    let p = cfg.patch_radius.max(1);
    let dist = patch_distances(vol, p);
    let mean_dist = dist.iter().flatten().sum::<f64>() / (6 * n) as f64;
    let floor = (cfg.variance_floor * mean_dist).max(cfg.variance_floor_abs);
    let mut channels: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let var = (dist.iter().map(|d| d[i]).sum::<f64>() / 6.0).max(floor);
        let mut vals = [0.0; 6];
        for c in 0..6 {
            vals[c] = (-dist[c][i] / var).exp();
        }
        let peak = vals.iter().copied().fold(f64::MIN, f64::max);
        for c in 0..6 {
            channels[c][i] = vals[c] / peak;
        }
    }
    DescriptorField { grid, channels }
}

/// Mean squared channel difference between `a ∘ φ_a` and `b ∘ φ_b`
/// (identity where the field is `None`), with gradients for both fields.
pub(crate) fn descriptor_ssd(
    a: &DescriptorField,
    a_field: Option<&Comps>,
    b: &DescriptorField,
    b_field: &Comps,
    need_grad: bool,
) -> (f64, Option<Comps>, Option<Comps>) {
    let grid = a.grid;
    let n = grid.len();
    let norm = 1.0 / (6 * n) as f64;
    let mut loss = 0.0;
    let mut g_a = a_field.map(|_| zeros_comps(n)).filter(|_| need_grad);
    let mut g_b = need_grad.then(|| zeros_comps(n));
    for c in 0..6 {
        let wa = match a_field {
            Some(f) => warp_data(&a.channels[c], &grid, f),
            None => a.channels[c].clone(),
        };
        let wb = warp_data(&b.channels[c], &grid, b_field);
        let diff: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x - y).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        if need_grad {
            let gb_out: Vec<f64> = diff.iter().map(|d| -2.0 * norm * d).collect();
            let gb = warp_data_backward(&b.channels[c], &grid, b_field, &gb_out);
            crate::transform::add_assign_comps(g_b.as_mut().expect("grad buffer"), &gb);
            if let (Some(f), Some(acc)) = (a_field, g_a.as_mut()) {
                let ga_out: Vec<f64> = diff.iter().map(|d| 2.0 * norm * d).collect();
                let ga = warp_data_backward(&a.channels[c], &grid, f, &ga_out);
                crate::transform::add_assign_comps(acc, &ga);
            }
        }
    }
    (loss * norm, g_a, g_b)
}

/// `mean((df - dm ∘ φ)^2)` over voxels and channels, with the gradient with
/// respect to the displacement.
pub fn mind_loss(
    df: &DescriptorField,
    dm: &DescriptorField,
    d: &DisplacementField,
) -> Result<LossWithGrad<DisplacementField>> {
    df.grid.ensure_same(&dm.grid, "mind_loss")?;
    df.grid.ensure_same(d.grid(), "mind_loss")?;
    let (value, _, g) = descriptor_ssd(df, None, dm, d.comps(), true);
    Ok(LossWithGrad {
        value,
        grad: DisplacementField::from_comps_unchecked(df.grid, g.expect("requested")),
    })
}

// ---------------------------------------------------------------------------
// Correlation and vector-field attention
// ---------------------------------------------------------------------------

/// Inputs a correlation volume can be built from.
pub trait CorrelationFeatures {
    fn grid(&self) -> &GridSpec;
    /// Feature vector at voxel coordinate `c`.
    fn feature(&self, c: [usize; 3]) -> Vec<f64>;
}

impl CorrelationFeatures for DescriptorField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn feature(&self, c: [usize; 3]) -> Vec<f64> {
        self.at(self.grid.index(c[0], c[1], c[2])).to_vec()
    }
}

/// Intensities enter as their clamped 3×3×3 neighbourhood, so the
/// normalized inner product is a local standardized correlation.
impl CorrelationFeatures for Volume {
    fn grid(&self) -> &GridSpec {
        Volume::grid(self)
    }

    fn feature(&self, c: [usize; 3]) -> Vec<f64> {
        let dims = Volume::grid(self).dims;
        let mut out = Vec::with_capacity(27);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let q = [dx, dy, dz];
                    let p: [usize; 3] = std::array::from_fn(|a| {
                        (c[a] as isize + q[a]).clamp(0, dims[a] as isize - 1) as usize
                    });
                    out.push(self.get(p[0], p[1], p[2]));
                }
            }
        }
        out
    }
}

/// Candidate displacements for every voxel with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    grid: GridSpec,
    radius: usize,
    offsets: Vec<[i32; 3]>,
    values: Vec<Vec<f64>>,
}

impl CostVolume {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Offsets in voxels, x fastest.
    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// `values()[k][i]` scores offset `k` at voxel `i`.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn from_parts(grid: GridSpec, radius: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        let offsets = cube_offsets(radius);
        if values.len() != offsets.len() || values.iter().any(|v| v.len() != grid.len()) {
            return Err(RegError::BadData("cost volume shape mismatch".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RegError::BadData("cost volume contains non-finite values".into()));
        }
        Ok(Self {
            grid,
            radius,
            offsets,
            values,
        })
    }

    /// Index of the best-scoring offset at voxel `i` (first on ties).
    pub fn argmax(&self, i: usize) -> [i32; 3] {
        let mut best = 0;
        for k in 1..self.values.len() {
            if self.values[k][i] > self.values[best][i] {
                best = k;
            }
        }
        self.offsets[best]
    }
}

fn cube_offsets(radius: usize) -> Vec<[i32; 3]> {
    let r = radius as i32;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(3));
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Pearson correlation between two feature vectors; 0 when either is flat.
pub(crate) fn normalized_inner(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Scores every offset in the `(2r+1)^3` cube by the normalized inner
/// product of `a` at `x` and `b` at `x + o` (clamped).
pub fn correlation_volume<F: CorrelationFeatures>(a: &F, b: &F, radius: usize) -> Result<CostVolume> {
    a.grid().ensure_same(b.grid(), "correlation_volume")?;
    if radius < 1 {
        return Err(RegError::BadConfig("correlation radius must be >= 1".into()));
    }
    let grid = *a.grid();
    let offsets = cube_offsets(radius);
    let fa: Vec<Vec<f64>> = (0..grid.len()).map(|i| a.feature(grid.coords(i))).collect();
    let fb: Vec<Vec<f64>> = (0..grid.len()).map(|i| b.feature(grid.coords(i))).collect();
    let values = offsets
        .iter()
        .map(|o| {
            (0..grid.len())
                .map(|i| {
                    let c = grid.coords(i);
                    let q: [usize; 3] = std::array::from_fn(|k| {
                        (c[k] as i64 + o[k] as i64).clamp(0, grid.dims[k] as i64 - 1) as usize
                    });
                    normalized_inner(&fa[i], &fb[grid.index(q[0], q[1], q[2])])
                })
                .collect()
        })
        .collect();
    Ok(CostVolume {
        grid,
        radius,
        offsets,
        values,
    })
}

/// Softmax-weighted mean of the candidate offsets, converted to mm.
pub fn vfa_displacement(cv: &CostVolume, temperature: f64) -> Result<DisplacementField> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RegError::BadConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let grid = cv.grid;
    let n = grid.len();
    let mut comps = zeros_comps(n);
    for i in 0..n {
        let peak = cv.values.iter().map(|v| v[i]).fold(f64::MIN, f64::max);
        let mut wsum = 0.0;
        let mut acc = [0.0; 3];
        for (k, o) in cv.offsets.iter().enumerate() {
            let w = ((cv.values[k][i] - peak) / temperature).exp();
            wsum += w;
            for a in 0..3 {
                acc[a] += w * o[a] as f64;
            }
        }
        for a in 0..3 {
            comps[a][i] = acc[a] / wsum * grid.spacing[a];
        }
    }
    Ok(DisplacementField::from_comps_unchecked(grid, comps))
}

/// Samples every channel of `df` through `d`.
pub fn warp_descriptor(df: &DescriptorField, d: &DisplacementField) -> Result<DescriptorField> {
    df.grid.ensure_same(d.grid(), "warp_descriptor")?;
    let channels = std::array::from_fn(|c| {
        (0..df.grid.len())
            .map(|i| sample(&df.channels[c], df.grid.dims, displaced(&df.grid, i, d.comps())))
            .collect()
    });
    Ok(DescriptorField {
        grid: df.grid,
        channels,
    })
}
