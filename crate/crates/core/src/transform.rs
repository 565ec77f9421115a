//! Stationary velocity fields and the displacement fields they generate.
//!
//! `exp_velocity` integrates a velocity by scaling and squaring, so the
//! inverse of `exp(v)` is `exp(-v)` by construction. The private `*_backward`
//! functions are the reverse-mode adjoints used by the optimizer.

use crate::error::{RegError, Result};
use crate::volume::{displaced, sample_grad_with, sample_with, scatter_with, Border, GridSpec, Volume};

/// Three component arrays, one per axis, each grid-shaped.
pub(crate) type Comps = [Vec<f64>; 3];

pub(crate) fn zeros_comps(n: usize) -> Comps {
    [vec![0.0; n], vec![0.0; n], vec![0.0; n]]
}

pub(crate) fn scaled_comps(c: &Comps, s: f64) -> Comps {
    c.clone().map(|v| v.into_iter().map(|x| x * s).collect())
}

pub(crate) fn add_assign_comps(acc: &mut Comps, other: &Comps) {
    for a in 0..3 {
        for (x, y) in acc[a].iter_mut().zip(&other[a]) {
            *x += *y;
        }
    }
}

fn check_comps(grid: &GridSpec, comps: &Comps) -> Result<()> {
    if comps.iter().any(|c| c.len() != grid.len()) {
        return Err(RegError::BadData(format!(
            "field components must hold {} values",
            grid.len()
        )));
    }
    if comps.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RegError::BadData("field contains non-finite values".into()));
    }
    Ok(())
}

macro_rules! vector_field {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            grid: GridSpec,
            comps: Comps,
        }

        impl $name {
            pub fn new(grid: GridSpec, comps: [Vec<f64>; 3]) -> Result<Self> {
                check_comps(&grid, &comps)?;
                Ok(Self { grid, comps })
            }

            #[allow(dead_code)]
            pub(crate) fn from_comps_unchecked(grid: GridSpec, comps: Comps) -> Self {
                debug_assert!(comps.iter().all(|c| c.len() == grid.len()));
                Self { grid, comps }
            }

            pub fn zeros(grid: GridSpec) -> Self {
                Self { grid, comps: zeros_comps(grid.len()) }
            }

            /// The same vector (mm) at every voxel.
            pub fn constant(grid: GridSpec, value: [f64; 3]) -> Self {
                let n = grid.len();
                Self { grid, comps: value.map(|v| vec![v; n]) }
            }

            pub fn from_fn(grid: GridSpec, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
                let mut comps = zeros_comps(grid.len());
                for i in 0..grid.len() {
                    let v = f(grid.coords(i));
                    for a in 0..3 {
                        comps[a][i] = v[a];
                    }
                }
                Self { grid, comps }
            }

            pub fn grid(&self) -> &GridSpec {
                &self.grid
            }

            pub fn comps(&self) -> &[Vec<f64>; 3] {
                &self.comps
            }

            pub fn into_comps(self) -> [Vec<f64>; 3] {
                self.comps
            }

            pub fn at(&self, i: usize) -> [f64; 3] {
                [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
            }

            pub fn scaled(&self, s: f64) -> Self {
                Self { grid: self.grid, comps: scaled_comps(&self.comps, s) }
            }

            /// Per-voxel Euclidean norm in voxel units.
            pub fn voxel_norms(&self) -> Vec<f64> {
                (0..self.grid.len())
                    .map(|i| {
                        (0..3)
                            .map(|a| (self.comps[a][i] / self.grid.spacing[a]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            }

            pub fn max_norm_voxels(&self) -> f64 {
                self.voxel_norms().into_iter().fold(0.0, f64::max)
            }

            pub fn mean_norm_voxels(&self) -> f64 {
                self.voxel_norms().iter().sum::<f64>() / self.grid.len() as f64
            }
        }
    };
}

vector_field!(
    /// Stationary velocity in mm per unit flow time.
    VelocityField
);
vector_field!(
    /// Dense displacement in mm; `φ(x) = x + d(x)`.
    DisplacementField
);

impl VelocityField {
    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// `out(x) = inner(x) + outer(x + inner(x))`, i.e. `φ_outer ∘ φ_inner`.
/// Fields are continued linearly past the grid edge.
pub(crate) fn compose_comps(outer: &Comps, inner: &Comps, grid: &GridSpec) -> Comps {
    let n = grid.len();
    let mut out = zeros_comps(n);
    for i in 0..n {
        let q = displaced(grid, i, inner);
        for a in 0..3 {
            out[a][i] = inner[a][i] + sample_with(&outer[a], grid.dims, q, Border::Extend);
        }
    }
    out
}

/// Adjoint of [`compose_comps`]: returns `(grad_outer, grad_inner)`.
pub(crate) fn compose_backward(outer: &Comps, inner: &Comps, grid: &GridSpec, g: &Comps) -> (Comps, Comps) {
    let n = grid.len();
    let mut g_outer = zeros_comps(n);
    let mut g_inner = g.clone();
    for i in 0..n {
        let q = displaced(grid, i, inner);
        let gi = [g[0][i], g[1][i], g[2][i]];
        if gi == [0.0; 3] {
            continue;
        }
        let mut dq = [0.0; 3];
        for k in 0..3 {
            if gi[k] == 0.0 {
                continue;
            }
            let (_, dk) = sample_grad_with(&outer[k], grid.dims, q, Border::Extend);
            for a in 0..3 {
                dq[a] += gi[k] * dk[a];
            }
            scatter_with(&mut g_outer[k], grid.dims, q, gi[k], Border::Extend);
        }
        for a in 0..3 {
            g_inner[a][i] += dq[a] / grid.spacing[a];
        }
    }
    (g_outer, g_inner)
}

/// `φ_first ∘ φ_second`: `result(x) = d2(x) + d1(x + d2(x))`.
pub fn compose(d1: &DisplacementField, d2: &DisplacementField) -> Result<DisplacementField> {
    d1.grid.ensure_same(&d2.grid, "compose")?;
    Ok(DisplacementField::from_comps_unchecked(
        d1.grid,
        compose_comps(&d1.comps, &d2.comps, &d1.grid),
    ))
}

// ---------------------------------------------------------------------------
// Scaling and squaring
// ---------------------------------------------------------------------------

/// Intermediate fields of one exponential, kept for the adjoint.
pub(crate) struct ExpTape {
    grid: GridSpec,
    /// `states[k]` is the field before squaring `k`.
    states: Vec<Comps>,
}

/// Runs `steps` self-compositions starting from `d0`.
pub(crate) fn exp_forward(d0: Comps, grid: &GridSpec, steps: usize) -> (Comps, ExpTape) {
    let mut states = Vec::with_capacity(steps);
    let mut d = d0;
    for _ in 0..steps {
        let next = compose_comps(&d, &d, grid);
        states.push(d);
        d = next;
    }
    (
        d,
        ExpTape {
            grid: *grid,
            states,
        },
    )
}

/// Gradient with respect to the initial field `d0` of [`exp_forward`].
pub(crate) fn exp_backward(tape: &ExpTape, mut g: Comps) -> Comps {
    for d in tape.states.iter().rev() {
        let (g_outer, mut g_inner) = compose_backward(d, d, &tape.grid, &g);
        add_assign_comps(&mut g_inner, &g_outer);
        g = g_inner;
    }
    g
}

/// Scaling and squaring: `d0 = v / 2^steps`, then `steps` self-compositions.
/// `exp_velocity(&v.negated(), steps)` is the inverse transform.
pub fn exp_velocity(v: &VelocityField, steps: usize) -> DisplacementField {
    let scale = 0.5f64.powi(steps as i32);
    let (d, _) = exp_forward(scaled_comps(&v.comps, scale), &v.grid, steps);
    DisplacementField::from_comps_unchecked(v.grid, d)
}

/// Inverts a displacement field by fixed-point iteration
/// `w(y) = -d(y + w(y))`. Converges for fields whose voxel-unit Jacobian
/// deviation stays below 1.
pub fn invert_displacement(d: &DisplacementField, iters: usize) -> DisplacementField {
    let grid = d.grid;
    let mut w = scaled_comps(&d.comps, -1.0);
    for _ in 0..iters {
        let mut next = zeros_comps(grid.len());
        for i in 0..grid.len() {
            let q = displaced(&grid, i, &w);
            for a in 0..3 {
                next[a][i] = -sample_with(&d.comps[a], grid.dims, q, Border::Extend);
            }
        }
        w = next;
    }
    DisplacementField::from_comps_unchecked(grid, w)
}

// ---------------------------------------------------------------------------
// Jacobian determinant and NDV
// ---------------------------------------------------------------------------

/// Finite-difference stencil along one axis: `(plus, minus, weight)` so the
/// derivative is `weight * (u[plus] - u[minus])`.
#[inline]
fn stencil(c: usize, n: usize) -> (usize, usize, f64) {
    if c == 0 {
        (1, 0, 1.0)
    } else if c == n - 1 {
        (n - 1, n - 2, 1.0)
    } else {
        (c + 1, c - 1, 0.5)
    }
}

fn ensure_jacobian_dims(grid: &GridSpec) -> Result<()> {
    if grid.dims.iter().any(|&n| n < 3) {
        return Err(RegError::TooSmall(format!(
            "Jacobian needs every dim >= 3, got {:?}",
            grid.dims
        )));
    }
    Ok(())
}

/// Jacobian matrix `∂φ/∂x` (voxel units) at voxel `i`.
#[inline]
fn jacobian_at(comps: &Comps, grid: &GridSpec, i: usize) -> [[f64; 3]; 3] {
    let c = grid.coords(i);
    let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut m = [[0.0; 3]; 3];
    for j in 0..3 {
        let (p, q, w) = stencil(c[j], grid.dims[j]);
        let ip = i + p * stride[j] - c[j] * stride[j];
        let iq = i + q * stride[j] - c[j] * stride[j];
        for r in 0..3 {
            let du = (comps[r][ip] - comps[r][iq]) / grid.spacing[r];
            m[r][j] = w * du + if r == j { 1.0 } else { 0.0 };
        }
    }
    m
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `∂det/∂m[r][j]`.
#[inline]
fn cofactors(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

pub(crate) fn jacobian_dets(comps: &Comps, grid: &GridSpec) -> Vec<f64> {
    (0..grid.len()).map(|i| det3(&jacobian_at(comps, grid, i))).collect()
}

/// Adds `Σ_i g_det[i] · ∂J_i/∂d` into `acc`.
pub(crate) fn jacobian_backward(comps: &Comps, grid: &GridSpec, g_det: &[f64], acc: &mut Comps) {
    let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    for i in 0..grid.len() {
        if g_det[i] == 0.0 {
            continue;
        }
        let m = jacobian_at(comps, grid, i);
        let cof = cofactors(&m);
        let c = grid.coords(i);
        for j in 0..3 {
            let (p, q, w) = stencil(c[j], grid.dims[j]);
            let ip = i + p * stride[j] - c[j] * stride[j];
            let iq = i + q * stride[j] - c[j] * stride[j];
            for r in 0..3 {
                let g = g_det[i] * cof[r][j] * w / grid.spacing[r];
                acc[r][ip] += g;
                acc[r][iq] -= g;
            }
        }
    }
}

/// Determinant of `∂φ/∂x` in voxel units: central differences inside,
/// one-sided on the faces. The identity map gives 1.
pub fn jacobian_det(d: &DisplacementField) -> Result<Volume> {
    ensure_jacobian_dims(&d.grid)?;
    Volume::new(d.grid, jacobian_dets(&d.comps, &d.grid))
}

/// Mean negative part of the Jacobian determinant, as a fraction.
pub fn ndv_metric(d: &DisplacementField) -> Result<f64> {
    ensure_jacobian_dims(&d.grid)?;
    let dets = jacobian_dets(&d.comps, &d.grid);
    Ok(dets.iter().map(|&j| (-j).max(0.0)).sum::<f64>() / dets.len() as f64)
}

/// A scalar loss together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWithGrad<G> {
    pub value: f64,
    pub grad: G,
}

pub(crate) fn ndv_loss_comps(comps: &Comps, grid: &GridSpec, acc: Option<&mut Comps>, weight: f64) -> f64 {
    let dets = jacobian_dets(comps, grid);
    let n = dets.len() as f64;
    let value = dets.iter().map(|&j| (-j).max(0.0).powi(2)).sum::<f64>() / n;
    if let Some(acc) = acc {
        if weight != 0.0 && value > 0.0 {
            let g: Vec<f64> = dets.iter().map(|&j| weight * -2.0 * (-j).max(0.0) / n).collect();
            jacobian_backward(comps, grid, &g, acc);
        }
    }
    value
}

/// Mean squared negative part of the Jacobian determinant. The gradient is
/// zero wherever `J >= 0`.
pub fn ndv_loss(d: &DisplacementField) -> Result<LossWithGrad<DisplacementField>> {
    ensure_jacobian_dims(&d.grid)?;
    let mut grad = zeros_comps(d.grid.len());
    let value = ndv_loss_comps(&d.comps, &d.grid, Some(&mut grad), 1.0);
    Ok(LossWithGrad {
        value,
        grad: DisplacementField::from_comps_unchecked(d.grid, grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn reversal(grid: GridSpec) -> DisplacementField {
        let n = grid.dims[0] as f64;
        DisplacementField::from_fn(grid, |[x, _, _]| {
            [(n - 1.0 - 2.0 * x as f64) * grid.spacing[0], 0.0, 0.0]
        })
    }

    fn max_diff(a: &DisplacementField, b: &DisplacementField) -> f64 {
        let g = a.grid();
        (0..g.len())
            .map(|i| {
                (0..3)
                    .map(|k| ((a.comps()[k][i] - b.comps()[k][i]) / g.spacing[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn exp_of_zero_is_zero() {
        let v = VelocityField::zeros(GridSpec::unit([5, 5, 5]));
        let d = exp_velocity(&v, 6);
        assert!(d.comps().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn exp_of_constant_is_translation() {
        let grid = GridSpec::new([6, 5, 4], [1.0, 2.0, 1.5], [0.0; 3]).unwrap();
        for steps in [0, 1, 4, 7] {
            let d = exp_velocity(&VelocityField::constant(grid, [1.25, -0.5, 0.75]), steps);
            for (k, want) in [1.25, -0.5, 0.75].into_iter().enumerate() {
                assert!(d.comps()[k].iter().all(|&x| (x - want).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn exp_inverse_residual_is_small() {
        // on 8³ a 2-voxel field is a quarter of the grid and trilinear
        // resampling alone leaves ~0.2 voxel, so the small grid uses 0.5
        for (n, amp) in [(8, 0.5), (16, 2.0), (32, 2.0)] {
            let grid = GridSpec::unit([n; 3]);
            for seed in 0..3 {
                let v = synth::smooth_velocity(grid, amp, seed);
                let fwd = exp_velocity(&v, 6);
                let inv = exp_velocity(&v.negated(), 6);
                let res = compose(&fwd, &inv).unwrap().max_norm_voxels();
                assert!(res <= 0.05, "n={n} amp={amp} seed={seed}: {res}");
            }
        }
    }

    #[test]
    fn compose_identity_and_translations() {
        let grid = GridSpec::unit([6, 6, 6]);
        let d = synth::smooth_displacement(grid, 1.5, 8);
        let z = DisplacementField::zeros(grid);
        assert_eq!(compose(&d, &z).unwrap(), d);
        assert_eq!(compose(&z, &d).unwrap(), d);
        let a = DisplacementField::constant(grid, [1.0, 0.5, -0.25]);
        let b = DisplacementField::constant(grid, [0.5, -1.0, 0.25]);
        let ab = compose(&a, &b).unwrap();
        for k in 0..3 {
            let want = a.comps()[k][0] + b.comps()[k][0];
            assert!(ab.comps()[k].iter().all(|&x| (x - want).abs() < 1e-12));
        }
        let other = DisplacementField::zeros(GridSpec::unit([6, 6, 7]));
        assert!(matches!(compose(&a, &other), Err(RegError::GridMismatch(_))));
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let grid = GridSpec::new([8, 8, 8], [1.0, 1.2, 0.9], [0.0; 3]).unwrap();
        let d1 = synth::smooth_displacement(grid, 2.0, 1);
        // shifted so that points near the +x face land outside the grid
        let mut c2 = synth::smooth_displacement(grid, 2.0, 2).comps().clone();
        c2[0].iter_mut().for_each(|v| *v += 1.3);
        let d2 = DisplacementField::new(grid, c2).unwrap();
        let c = compose(&d1, &d2).unwrap();
        // trilinear weights of the nearest in-range cell, extrapolating past the edge
        let extended = |data: &[f64], p: [f64; 3]| -> f64 {
            let mut total = 0.0;
            let base: [usize; 3] = std::array::from_fn(|a| (p[a].floor().max(0.0) as usize).min(grid.dims[a] - 2));
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    idx[a] = base[a] + bit;
                    let t = p[a] - base[a] as f64;
                    w *= if bit == 1 { t } else { 1.0 - t };
                }
                total += w * data[grid.index(idx[0], idx[1], idx[2])];
            }
            total
        };
        let mut outside = 0;
        for i in 0..grid.len() {
            let x = grid.coords(i).map(|v| v as f64);
            // φ2(x) in voxel coordinates, then φ1 at that point.
            let p2: [f64; 3] = std::array::from_fn(|a| x[a] + d2.comps()[a][i] / grid.spacing[a]);
            if (0..3).any(|a| p2[a] < 0.0 || p2[a] > (grid.dims[a] - 1) as f64) {
                outside += 1;
            }
            for a in 0..3 {
                let phi1 = p2[a] + extended(d1.comps()[a].as_slice(), p2) / grid.spacing[a];
                let want = (phi1 - x[a]) * grid.spacing[a];
                assert!((c.comps()[a][i] - want).abs() < 1e-12);
            }
        }
        assert!(outside > 0, "oracle should exercise the extension");
    }

    #[test]
    fn compose_extends_affine_fields_exactly() {
        // an affine map composed with a translation that leaves the grid
        let grid = GridSpec::unit([6, 6, 6]);
        let lin = DisplacementField::from_fn(grid, |p| [0.1 * p[0] as f64 - 0.2, 0.05 * p[2] as f64, 0.0]);
        let shift = DisplacementField::constant(grid, [3.0, -2.0, 1.0]);
        let c = compose(&lin, &shift).unwrap();
        for i in 0..grid.len() {
            let p = grid.coords(i).map(|v| v as f64);
            let q = [p[0] + 3.0, p[1] - 2.0, p[2] + 1.0];
            let want = [3.0 + 0.1 * q[0] - 0.2, -2.0 + 0.05 * q[2], 1.0];
            for a in 0..3 {
                assert!((c.comps()[a][i] - want[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semigroup_property() {
        let grid = GridSpec::unit([8, 8, 8]);
        let v = synth::smooth_velocity(grid, 2.0, 21);
        let whole = exp_velocity(&v, 6);
        let half = exp_velocity(&v.scaled(0.5), 6);
        let twice = compose(&half, &half).unwrap();
        assert!(max_diff(&whole, &twice) <= 0.02);
    }

    #[test]
    fn jacobian_cases() {
        let grid = GridSpec::new([6, 5, 7], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let j = jacobian_det(&DisplacementField::zeros(grid)).unwrap();
        assert!(j.data().iter().all(|&v| v == 1.0));

        let s = 1.3;
        let scaling = DisplacementField::from_fn(grid, |c| {
            std::array::from_fn(|a| (s - 1.0) * c[a] as f64 * grid.spacing[a])
        });
        let j = jacobian_det(&scaling).unwrap();
        assert!(j.data().iter().all(|&v| (v - s * s * s).abs() < 1e-12));

        let j = jacobian_det(&reversal(grid)).unwrap();
        assert!(j.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));

        let small = DisplacementField::zeros(GridSpec::unit([2, 5, 5]));
        assert!(matches!(jacobian_det(&small), Err(RegError::TooSmall(_))));
    }

    #[test]
    fn ndv_cases() {
        let grid = GridSpec::unit([6, 6, 6]);
        assert_eq!(ndv_metric(&DisplacementField::zeros(grid)).unwrap(), 0.0);
        let rev = reversal(grid);
        let dets = jacobian_det(&rev).unwrap();
        let oracle = dets.data().iter().map(|&j| if j < 0.0 { -j } else { 0.0 }).sum::<f64>()
            / grid.len() as f64;
        assert_eq!(ndv_metric(&rev).unwrap(), oracle);
        assert!((oracle - 1.0).abs() < 1e-12);

        let v = synth::smooth_velocity(grid, 1.0, 4);
        assert_eq!(ndv_metric(&exp_velocity(&v, 6)).unwrap(), 0.0);
    }

    #[test]
    fn ndv_loss_values() {
        let grid = GridSpec::unit([6, 6, 6]);
        let z = ndv_loss(&DisplacementField::zeros(grid)).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.comps().iter().flatten().all(|&g| g == 0.0));
        let rev = ndv_loss(&reversal(grid)).unwrap();
        assert!((rev.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndv_loss_gradient_matches_finite_differences() {
        let grid = GridSpec::new([7, 6, 6], [1.0, 1.3, 0.8], [0.0; 3]).unwrap();
        // a strongly folded field
        let d = synth::smooth_displacement(grid, 5.0, 12);
        let base = ndv_loss(&d).unwrap();
        assert!(base.value > 0.0, "field should fold");
        let mut rng = synth::rng(99);
        let mut checked = 0;
        for _ in 0..400 {
            let i = rand::RngExt::random_range(&mut rng, 0..grid.len());
            let a = rand::RngExt::random_range(&mut rng, 0..3);
            let g = base.grad.comps()[a][i];
            if g.abs() < 1e-6 {
                continue;
            }
            let h = 1e-6;
            let mut cp = d.clone().into_comps();
            cp[a][i] += h;
            let lp = ndv_loss(&DisplacementField::new(grid, cp.clone()).unwrap()).unwrap().value;
            cp[a][i] -= 2.0 * h;
            let lm = ndv_loss(&DisplacementField::new(grid, cp).unwrap()).unwrap().value;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-3 * g.abs().max(fd.abs()), "{fd} vs {g}");
            checked += 1;
            if checked == 32 {
                break;
            }
        }
        assert!(checked >= 16);
    }

    #[test]
    fn exp_backward_matches_finite_differences() {
        let grid = GridSpec::new([6, 6, 6], [1.0, 1.5, 1.0], [0.0; 3]).unwrap();
        let v = synth::smooth_velocity(grid, 2.0, 5);
        let w = synth::smooth_displacement(grid, 1.0, 6);
        let steps = 4;
        let scale = 0.5f64.powi(steps);
        let objective = |u: &Comps| -> f64 {
            let (d, _) = exp_forward(scaled_comps(u, scale), &grid, steps as usize);
            (0..3).map(|a| d[a].iter().zip(&w.comps()[a]).map(|(x, y)| x * y).sum::<f64>()).sum()
        };
        let (_, tape) = exp_forward(scaled_comps(v.comps(), scale), &grid, steps as usize);
        let g = scaled_comps(&exp_backward(&tape, w.comps().clone()), scale);
        let mut rng = synth::rng(3);
        for _ in 0..24 {
            let i = rand::RngExt::random_range(&mut rng, 0..grid.len());
            let a = rand::RngExt::random_range(&mut rng, 0..3);
            let h = 1e-4;
            let mut up = v.comps().clone();
            up[a][i] += h;
            let lp = objective(&up);
            up[a][i] -= 2.0 * h;
            let lm = objective(&up);
            let fd = (lp - lm) / (2.0 * h);
            let an = g[a][i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6), "{fd} vs {an}");
        }
    }

    #[test]
    fn fixed_point_inverse() {
        let grid = GridSpec::unit([10, 10, 10]);
        let v = synth::smooth_velocity(grid, 1.0, 7);
        let d = exp_velocity(&v, 6);
        let inv = invert_displacement(&d, 30);
        let exact = exp_velocity(&v.negated(), 6);
        let diff = max_diff(&inv, &exact);
        assert!(diff < 0.05, "{diff}");
    }
}
