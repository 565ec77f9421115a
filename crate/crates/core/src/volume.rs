//! Volumes on axis-aligned grids, trilinear sampling with clamp-to-edge
//! borders, warping and resolution pyramids.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`.

use crate::error::{RegError, Result};
use crate::transform::{Comps, DisplacementField};

/// Axis-aligned voxel grid. `world(x) = origin + x ⊙ spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(RegError::BadGrid(format!("all dims must be >= 2, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(RegError::BadGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(RegError::BadGrid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spacing grid at the origin.
    ///
    /// Panics if any dimension is below 2.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], [0.0; 3]).expect("unit grid needs dims >= 2")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + p[a] * self.spacing[a])
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (w[a] - self.origin[a]) / self.spacing[a])
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(RegError::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Grid produced by one 2× mean-pooling step.
    pub fn halved(&self) -> GridSpec {
        GridSpec {
            dims: self.dims.map(|n| n.div_ceil(2)),
            spacing: self.spacing.map(|s| 2.0 * s),
            origin: std::array::from_fn(|a| self.origin[a] + 0.5 * self.spacing[a]),
        }
    }
}

/// 3D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(RegError::BadData(format!(
                "expected {} voxels, got {}",
                grid.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RegError::BadData("volume contains non-finite values".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self { grid, data }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub(crate) fn from_raw(grid: GridSpec, data: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` voxelwise. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Integer label image; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: GridSpec,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: GridSpec, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(RegError::BadData(format!(
                "expected {} voxels, got {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> u32) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self { grid, data }
    }

    /// Converts a volume holding non-negative integral values.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let data = vol
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(RegError::BadData(format!("{v} is not a valid label")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: *vol.grid(),
            data,
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_raw(self.grid, self.data.iter().map(|&l| l as f64).collect())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted distinct non-background labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Landmarks in world coordinates (mm).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(RegError::BadData("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Sampling kernels
// ---------------------------------------------------------------------------

/// How positions outside `[0, dim-1]` are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Border {
    /// Clamp to the edge voxel (images).
    Clamp,
    /// Continue the edge cell linearly (displacement fields).
    Extend,
}

/// Cell lookup along one axis: lower corner, fractional weight of the upper
/// corner, and whether the position derivative is non-zero (not clamped).
/// Integer positions resolve to the cell on their left, so `t == 1` there.
#[inline]
fn axis_cell(p: f64, n: usize, border: Border) -> (usize, f64, bool) {
    let hi = (n - 1) as f64;
    if p <= 0.0 {
        return match border {
            Border::Clamp => (0, 0.0, p == 0.0),
            Border::Extend => (0, p, true),
        };
    }
    if p >= hi {
        return match border {
            Border::Clamp => (n - 2, 1.0, p == hi),
            Border::Extend => (n - 2, p - (n - 2) as f64, true),
        };
    }
    let i0 = p.ceil() as usize - 1;
    (i0, p - i0 as f64, true)
}

struct Cell {
    base: usize,
    t: [f64; 3],
    live: [bool; 3],
}

#[inline]
fn cell(dims: [usize; 3], p: [f64; 3], border: Border) -> Cell {
    let (x0, tx, lx) = axis_cell(p[0], dims[0], border);
    let (y0, ty, ly) = axis_cell(p[1], dims[1], border);
    let (z0, tz, lz) = axis_cell(p[2], dims[2], border);
    Cell {
        base: x0 + dims[0] * (y0 + dims[1] * z0),
        t: [tx, ty, tz],
        live: [lx, ly, lz],
    }
}

#[inline]
fn corners(data: &[f64], dims: [usize; 3], base: usize) -> [f64; 8] {
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    [
        data[base],
        data[base + 1],
        data[base + sy],
        data[base + sy + 1],
        data[base + sz],
        data[base + sz + 1],
        data[base + sz + sy],
        data[base + sz + sy + 1],
    ]
}

/// Trilinear sample at a continuous voxel position, clamped to the border.
#[inline]
pub(crate) fn sample(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    sample_with(data, dims, p, Border::Clamp)
}

#[inline]
pub(crate) fn sample_with(data: &[f64], dims: [usize; 3], p: [f64; 3], border: Border) -> f64 {
    let c = cell(dims, p, border);
    let k = corners(data, dims, c.base);
    let [tx, ty, tz] = c.t;
    let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let c00 = ux * k[0] + tx * k[1];
    let c10 = ux * k[2] + tx * k[3];
    let c01 = ux * k[4] + tx * k[5];
    let c11 = ux * k[6] + tx * k[7];
    let c0 = uy * c00 + ty * c10;
    let c1 = uy * c01 + ty * c11;
    uz * c0 + tz * c1
}

/// Sample plus its derivative with respect to the (voxel-unit) position.
#[inline]
pub(crate) fn sample_grad(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    sample_grad_with(data, dims, p, Border::Clamp)
}

#[inline]
pub(crate) fn sample_grad_with(data: &[f64], dims: [usize; 3], p: [f64; 3], border: Border) -> (f64, [f64; 3]) {
    let c = cell(dims, p, border);
    let k = corners(data, dims, c.base);
    let [tx, ty, tz] = c.t;
    let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let c00 = ux * k[0] + tx * k[1];
    let c10 = ux * k[2] + tx * k[3];
    let c01 = ux * k[4] + tx * k[5];
    let c11 = ux * k[6] + tx * k[7];
    let c0 = uy * c00 + ty * c10;
    let c1 = uy * c01 + ty * c11;
    let value = uz * c0 + tz * c1;

    let gx = if c.live[0] {
        uz * (uy * (k[1] - k[0]) + ty * (k[3] - k[2])) + tz * (uy * (k[5] - k[4]) + ty * (k[7] - k[6]))
    } else {
        0.0
    };
    let gy = if c.live[1] {
        uz * (c10 - c00) + tz * (c11 - c01)
    } else {
        0.0
    };
    let gz = if c.live[2] { c1 - c0 } else { 0.0 };
    (value, [gx, gy, gz])
}

/// Adjoint of [`sample`] with respect to the data: adds `g` times each
/// corner weight into `acc`.
#[inline]
pub(crate) fn scatter_with(acc: &mut [f64], dims: [usize; 3], p: [f64; 3], g: f64, border: Border) {
    let c = cell(dims, p, border);
    let [tx, ty, tz] = c.t;
    let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let b = c.base;
    acc[b] += g * ux * uy * uz;
    acc[b + 1] += g * tx * uy * uz;
    acc[b + sy] += g * ux * ty * uz;
    acc[b + sy + 1] += g * tx * ty * uz;
    acc[b + sz] += g * ux * uy * tz;
    acc[b + sz + 1] += g * tx * uy * tz;
    acc[b + sz + sy] += g * ux * ty * tz;
    acc[b + sz + sy + 1] += g * tx * ty * tz;
}

/// Continuous voxel position reached from voxel `i` by displacement `d` (mm).
#[inline]
pub(crate) fn displaced(grid: &GridSpec, i: usize, d: &Comps) -> [f64; 3] {
    let c = grid.coords(i);
    std::array::from_fn(|a| c[a] as f64 + d[a][i] / grid.spacing[a])
}

/// `out(x) = data(x + d(x))`.
pub(crate) fn warp_data(data: &[f64], grid: &GridSpec, d: &Comps) -> Vec<f64> {
    (0..grid.len())
        .map(|i| sample(data, grid.dims, displaced(grid, i, d)))
        .collect()
}

/// Gradient of `Σ g_out(x) · data(x + d(x))` with respect to `d` (mm).
pub(crate) fn warp_data_backward(data: &[f64], grid: &GridSpec, d: &Comps, g_out: &[f64]) -> Comps {
    let n = grid.len();
    let mut g: Comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        if g_out[i] == 0.0 {
            continue;
        }
        let (_, dp) = sample_grad(data, grid.dims, displaced(grid, i, d));
        for a in 0..3 {
            g[a][i] = g_out[i] * dp[a] / grid.spacing[a];
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Trilinear interpolation at continuous voxel coordinate `p`; positions
/// outside `[0, dim-1]` are clamped to the border first.
pub fn trilinear_sample(vol: &Volume, p: [f64; 3]) -> f64 {
    sample(&vol.data, vol.grid.dims, p)
}

/// Resamples `vol` through `φ(x) = x + d(x)`.
pub fn warp_volume(vol: &Volume, d: &DisplacementField) -> Result<Volume> {
    vol.grid.ensure_same(d.grid(), "warp_volume")?;
    Ok(Volume::from_raw(vol.grid, warp_data(&vol.data, &vol.grid, d.comps())))
}

/// Nearest-neighbour warp for label maps.
pub fn warp_labels(labels: &LabelMap, d: &DisplacementField) -> Result<LabelMap> {
    labels.grid.ensure_same(d.grid(), "warp_labels")?;
    let grid = labels.grid;
    let data = (0..grid.len())
        .map(|i| {
            let p = displaced(&grid, i, d.comps());
            let q: [usize; 3] =
                std::array::from_fn(|a| p[a].round().clamp(0.0, (grid.dims[a] - 1) as f64) as usize);
            labels.data[grid.index(q[0], q[1], q[2])]
        })
        .collect();
    Ok(LabelMap { grid, data })
}

/// 2×2×2 mean pooling. Odd trailing slices are averaged on their own.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let [nx, ny, nz] = vol.grid.dims;
    if nx < 4 || ny < 4 || nz < 4 {
        return Err(RegError::TooSmall(format!(
            "downsample2 needs every dim >= 4, got {:?}",
            vol.grid.dims
        )));
    }
    let out_grid = vol.grid.halved();
    let [ox, oy, oz] = out_grid.dims;
    let mut data = Vec::with_capacity(out_grid.len());
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut sum = 0.0;
                let mut count = 0usize;
                for zz in 2 * z..(2 * z + 2).min(nz) {
                    for yy in 2 * y..(2 * y + 2).min(ny) {
                        for xx in 2 * x..(2 * x + 2).min(nx) {
                            sum += vol.get(xx, yy, zz);
                            count += 1;
                        }
                    }
                }
                data.push(sum / count as f64);
            }
        }
    }
    Ok(Volume::from_raw(out_grid, data))
}

/// Resolution pyramid, coarsest level first; the last element is `vol`.
pub fn build_pyramid(vol: &Volume, levels: usize) -> Result<Vec<Volume>> {
    if levels == 0 {
        return Err(RegError::BadConfig("pyramid needs at least one level".into()));
    }
    let mut pyramid = vec![vol.clone()];
    for _ in 1..levels {
        let next = downsample2(pyramid.last().expect("non-empty"))?;
        pyramid.push(next);
    }
    pyramid.reverse();
    Ok(pyramid)
}

pub(crate) fn upsample_comps(src: &Comps, src_grid: &GridSpec, target: &GridSpec) -> Result<Comps> {
    if target.halved().dims != src_grid.dims {
        return Err(RegError::GridMismatch(format!(
            "cannot upsample {:?} onto {:?}",
            src_grid.dims, target.dims
        )));
    }
    let n = target.len();
    let mut out: Comps = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let c = target.coords(i);
        let w = target.voxel_to_world(c.map(|v| v as f64));
        let p = src_grid.world_to_voxel(w);
        for a in 0..3 {
            out[a].push(sample_with(&src[a], src_grid.dims, p, Border::Extend));
        }
    }
    Ok(out)
}

/// Trilinear upsampling of a displacement field onto the next finer grid.
/// Values are in mm, so magnitudes are kept.
pub fn upsample_field(d: &DisplacementField, target: &GridSpec) -> Result<DisplacementField> {
    let comps = upsample_comps(d.comps(), d.grid(), target)?;
    Ok(DisplacementField::from_comps_unchecked(*target, comps))
}

/// Affine min-max rescaling onto `[0, 255]`.
pub fn normalize_intensity(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if hi <= lo {
        return Err(RegError::ConstantVolume);
    }
    let scale = 255.0 / (hi - lo);
    let data = vol
        .data
        .iter()
        .map(|&v| ((v - lo) * scale).clamp(0.0, 255.0))
        .collect();
    Ok(Volume::from_raw(vol.grid, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn ramp_x(grid: GridSpec) -> Volume {
        Volume::from_fn(grid, |[x, _, _]| x as f64)
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = Volume::constant(GridSpec::unit([4, 5, 3]), 7.0);
        for p in [[0.3, 1.7, 2.2], [-4.0, 10.0, 0.5], [3.0, 4.0, 2.0]] {
            assert_eq!(trilinear_sample(&v, p), 7.0);
        }
    }

    #[test]
    fn voxel_centers_return_voxel_values() {
        let v = synth::random_volume(GridSpec::unit([5, 4, 6]), 3);
        for i in 0..v.grid().len() {
            let c = v.grid().coords(i).map(|x| x as f64);
            assert_eq!(trilinear_sample(&v, c), v.data()[i]);
        }
    }

    #[test]
    fn cube_center_is_corner_average() {
        let grid = GridSpec::unit([2, 2, 2]);
        let v = Volume::from_fn(grid, |[x, y, z]| (x + 2 * y + 4 * z) as f64);
        let expected: f64 = (0..8).map(|k| k as f64).sum::<f64>() / 8.0;
        assert_eq!(expected, 3.5);
        assert!((trilinear_sample(&v, [0.5, 0.5, 0.5]) - expected).abs() < 1e-15);
    }

    #[test]
    fn sampling_clamps_outside() {
        let v = ramp_x(GridSpec::unit([4, 3, 3]));
        assert_eq!(trilinear_sample(&v, [-2.0, 1.0, 1.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [9.5, 1.0, 1.0]), 3.0);
    }

    #[test]
    fn sample_grad_matches_finite_differences_off_grid() {
        let v = synth::random_volume(GridSpec::unit([6, 6, 6]), 11);
        let p = [2.31, 3.77, 1.42];
        let (_, g) = sample_grad(v.data(), v.grid().dims, p);
        for a in 0..3 {
            let h = 1e-6;
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            let fd = (trilinear_sample(&v, pp) - trilinear_sample(&v, pm)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
    }

    #[test]
    fn integer_positions_use_left_cell_derivative() {
        let v = Volume::from_fn(GridSpec::unit([5, 2, 2]), |[x, _, _]| (x * x) as f64);
        let (_, g) = sample_grad(v.data(), v.grid().dims, [2.0, 0.5, 0.5]);
        // left cell [1,2]: 4 - 1
        assert_eq!(g[0], 3.0);
    }

    #[test]
    fn scatter_is_adjoint_of_sample() {
        let grid = GridSpec::unit([5, 4, 6]);
        let v = synth::random_volume(grid, 5);
        let p = [1.3, 2.9, 4.4];
        let mut acc = vec![0.0; grid.len()];
        scatter_with(&mut acc, grid.dims, p, 1.0, Border::Clamp);
        let dot: f64 = acc.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        assert!((dot - trilinear_sample(&v, p)).abs() < 1e-12);
    }

    #[test]
    fn zero_warp_is_exact_identity() {
        let v = synth::random_volume(GridSpec::unit([7, 6, 5]), 1);
        let d = DisplacementField::zeros(*v.grid());
        assert_eq!(warp_volume(&v, &d).unwrap(), v);
    }

    #[test]
    fn unit_translation_shifts_ramp() {
        let grid = GridSpec::new([8, 4, 4], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = ramp_x(grid);
        let d = DisplacementField::constant(grid, [2.0, 0.0, 0.0]);
        let w = warp_volume(&v, &d).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..7 {
                    assert_eq!(w.get(x, y, z), x as f64 + 1.0);
                }
            }
        }
    }

    #[test]
    fn warp_matches_scalar_loop() {
        let grid = GridSpec::new([8, 8, 8], [1.0, 1.5, 0.8], [3.0, -1.0, 2.0]).unwrap();
        let v = synth::random_volume(grid, 9);
        let d = synth::smooth_displacement(grid, 2.0, 17);
        let w = warp_volume(&v, &d).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = grid.index(x, y, z);
                    let p = [
                        x as f64 + d.comps()[0][i] / 1.0,
                        y as f64 + d.comps()[1][i] / 1.5,
                        z as f64 + d.comps()[2][i] / 0.8,
                    ];
                    assert_eq!(w.data()[i], trilinear_sample(&v, p));
                }
            }
        }
    }

    #[test]
    fn warp_rejects_grid_mismatch() {
        let v = Volume::constant(GridSpec::unit([4, 4, 4]), 1.0);
        let d = DisplacementField::zeros(GridSpec::unit([4, 4, 5]));
        assert!(matches!(warp_volume(&v, &d), Err(RegError::GridMismatch(_))));
    }

    #[test]
    fn downsample_ramp() {
        let v = ramp_x(GridSpec::unit([4, 4, 4]));
        let d = downsample2(&v).unwrap();
        assert_eq!(d.grid().dims, [2, 2, 2]);
        assert_eq!(d.grid().spacing, [2.0; 3]);
        assert_eq!(d.grid().origin, [0.5; 3]);
        for z in 0..2 {
            for y in 0..2 {
                assert_eq!(d.get(0, y, z), 0.5);
                assert_eq!(d.get(1, y, z), 2.5);
            }
        }
    }

    #[test]
    fn downsample_odd_dim_keeps_remainder() {
        let v = ramp_x(GridSpec::unit([5, 4, 4]));
        let d = downsample2(&v).unwrap();
        assert_eq!(d.grid().dims, [3, 2, 2]);
        assert_eq!(d.get(2, 0, 0), 4.0);
        assert!(matches!(
            downsample2(&Volume::constant(GridSpec::unit([3, 8, 8]), 0.0)),
            Err(RegError::TooSmall(_))
        ));
    }

    #[test]
    fn downsample_constant_and_mean() {
        let c = Volume::constant(GridSpec::unit([6, 4, 8]), 4.25);
        assert!(downsample2(&c).unwrap().data().iter().all(|&v| v == 4.25));
        let v = synth::random_volume(GridSpec::unit([8, 6, 10]), 2);
        let m = downsample2(&v).unwrap().mean();
        assert!((m - v.mean()).abs() <= 1e-6 * v.mean().abs());
    }

    #[test]
    fn pyramid_shapes() {
        let v = synth::random_volume(GridSpec::unit([32, 32, 32]), 4);
        assert_eq!(build_pyramid(&v, 1).unwrap(), vec![v.clone()]);
        let p = build_pyramid(&v, 3).unwrap();
        let dims: Vec<_> = p.iter().map(|l| l.grid().dims).collect();
        assert_eq!(dims, vec![[8; 3], [16; 3], [32; 3]]);
        assert_eq!(p[2], v);
        for level in &p {
            assert!((level.mean() - v.mean()).abs() < 1e-9);
        }
        assert_eq!(build_pyramid(&v, 5).unwrap()[0].grid().dims, [2; 3]);
        assert!(matches!(build_pyramid(&v, 6), Err(RegError::TooSmall(_))));
    }

    #[test]
    fn upsample_constant_and_linear() {
        let fine = GridSpec::new([8, 6, 10], [1.0, 2.0, 0.5], [1.0, 2.0, 3.0]).unwrap();
        let coarse = fine.halved();
        let zero = upsample_field(&DisplacementField::zeros(coarse), &fine).unwrap();
        assert!(zero.comps().iter().flatten().all(|&v| v == 0.0));
        let c = upsample_field(&DisplacementField::constant(coarse, [3.0, 0.0, 0.0]), &fine).unwrap();
        assert!(c.comps()[0].iter().all(|&v| (v - 3.0).abs() < 1e-15));

        let lin = |w: [f64; 3]| 0.3 * w[0] - 1.0;
        let src = DisplacementField::from_fn(coarse, |p| {
            let w = coarse.voxel_to_world(p.map(|v| v as f64));
            [lin(w), 0.0, 0.0]
        });
        let up = upsample_field(&src, &fine).unwrap();
        for i in 0..fine.len() {
            let c = fine.coords(i);
            let w = fine.voxel_to_world(c.map(|v| v as f64));
            assert!((up.comps()[0][i] - lin(w)).abs() < 1e-6);
        }
        assert!(matches!(
            upsample_field(&src, &GridSpec::unit([12, 6, 10])),
            Err(RegError::GridMismatch(_))
        ));
    }

    #[test]
    fn normalize_maps_to_byte_range() {
        let grid = GridSpec::unit([3, 2, 2]);
        let v = Volume::from_fn(grid, |[x, _, _]| 10.0 + 10.0 * x as f64);
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.get(0, 0, 0), 0.0);
        assert_eq!(n.get(1, 0, 0), 127.5);
        assert_eq!(n.get(2, 0, 0), 255.0);
        let same = Volume::from_fn(grid, |[x, _, _]| if x == 0 { 0.0 } else { 255.0 });
        assert_eq!(normalize_intensity(&same).unwrap(), same);
        assert!(matches!(
            normalize_intensity(&Volume::constant(grid, 3.0)),
            Err(RegError::ConstantVolume)
        ));
    }

    #[test]
    fn warp_labels_nearest() {
        let grid = GridSpec::unit([4, 2, 2]);
        let l = LabelMap::from_fn(grid, |[x, _, _]| x as u32);
        let d = DisplacementField::constant(grid, [0.6, 0.0, 0.0]);
        let w = warp_labels(&l, &d).unwrap();
        assert_eq!(&w.data()[..4], &[1, 2, 3, 3]);
    }
}
