//! Smoothness and group-consistency penalties and the weighted total loss
//! `λ1·sim + λ2·smooth + λ3·gc + λ4·ndv`.

use crate::error::{RegError, Result};
use crate::transform::{compose_backward, compose_comps, zeros_comps, Comps, DisplacementField, LossWithGrad};
use crate::volume::GridSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl LossWeights {
    /// Weights for the NCC similarity: (1, 1, 40, 1e-5).
    pub const NCC: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 40.0,
        lambda4: 1e-5,
    };

    /// Weights for the MIND similarity: (10, 1, 40, 1e-5).
    pub const MIND: LossWeights = LossWeights {
        lambda1: 10.0,
        lambda2: 1.0,
        lambda3: 40.0,
        lambda4: 1e-5,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(RegError::BadConfig(format!("loss weights must be finite and >= 0: {all:?}")))
        }
    }
}

fn ensure_dims(grid: &GridSpec) -> Result<()> {
    if grid.dims.iter().any(|&n| n < 3) {
        return Err(RegError::TooSmall(format!(
            "regularizer needs every dim >= 3, got {:?}",
            grid.dims
        )));
    }
    Ok(())
}

/// Diffusion energy: for each of the nine (component, axis) pairs the mean
/// squared forward difference in voxel units, averaged over the nine pairs.
/// Adds `weight · ∂loss/∂d` into `acc` when given.
pub(crate) fn diffusion_comps(comps: &Comps, grid: &GridSpec, acc: Option<&mut Comps>, weight: f64) -> f64 {
    let stride = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut total = 0.0;
    let mut acc = acc;
    for axis in 0..3 {
        let n = grid.dims[axis];
        let count = (grid.len() / n * (n - 1)) as f64;
        let norm = 1.0 / (9.0 * count);
        for c in 0..3 {
            let inv_s = 1.0 / grid.spacing[c];
            let u = &comps[c];
            let mut sum = 0.0;
            for i in 0..grid.len() {
                if grid.coords(i)[axis] + 1 == n {
                    continue;
                }
                let j = i + stride[axis];
                let diff = (u[j] - u[i]) * inv_s;
                sum += diff * diff;
                if let Some(acc) = acc.as_deref_mut() {
                    let g = weight * 2.0 * norm * diff * inv_s;
                    acc[c][j] += g;
                    acc[c][i] -= g;
                }
            }
            total += sum * norm;
        }
    }
    total
}

/// Mean squared forward difference of `d` in voxel units, with gradient.
pub fn diffusion_loss(d: &DisplacementField) -> Result<LossWithGrad<DisplacementField>> {
    ensure_dims(d.grid())?;
    let mut grad = zeros_comps(d.grid().len());
    let value = diffusion_comps(d.comps(), d.grid(), Some(&mut grad), 1.0);
    Ok(LossWithGrad {
        value,
        grad: DisplacementField::from_comps_unchecked(*d.grid(), grad),
    })
}

pub(crate) struct GcTerms {
    pub value: f64,
    pub grads: Option<[Comps; 3]>,
}

/// Two-hop cycle residual `mean ‖(φ_BC ∘ φ_AB)(x) − φ_AC(x)‖²` in voxel
/// units; gradients are ordered (AB, BC, AC) and scaled by `weight`.
pub(crate) fn group_consistency_comps(
    ab: &Comps,
    bc: &Comps,
    ac: &Comps,
    grid: &GridSpec,
    need_grad: bool,
    weight: f64,
) -> GcTerms {
    let n = grid.len();
    let chain = compose_comps(bc, ab, grid);
    let mut value = 0.0;
    let mut resid = zeros_comps(n);
    for a in 0..3 {
        let s2 = grid.spacing[a] * grid.spacing[a];
        for i in 0..n {
            let r = chain[a][i] - ac[a][i];
            value += r * r / s2;
            resid[a][i] = weight * 2.0 * r / (s2 * n as f64);
        }
    }
    value /= n as f64;
    if !need_grad {
        return GcTerms { value, grads: None };
    }
    let (g_bc, g_ab) = compose_backward(bc, ab, grid, &resid);
    let g_ac = resid.map(|v| v.into_iter().map(|x| -x).collect());
    GcTerms {
        value,
        grads: Some([g_ab, g_bc, g_ac]),
    }
}

/// Gradients of the group-consistency loss for each of its three fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GcGradients {
    pub ab: DisplacementField,
    pub bc: DisplacementField,
    pub ac: DisplacementField,
}

/// Group consistency over an ordered triplet: `compose(d_bc, d_ab)` should
/// match `d_ac`.
pub fn group_consistency_loss(
    d_ab: &DisplacementField,
    d_bc: &DisplacementField,
    d_ac: &DisplacementField,
) -> Result<LossWithGrad<GcGradients>> {
    let grid = *d_ab.grid();
    grid.ensure_same(d_bc.grid(), "group_consistency_loss")?;
    grid.ensure_same(d_ac.grid(), "group_consistency_loss")?;
    let t = group_consistency_comps(d_ab.comps(), d_bc.comps(), d_ac.comps(), &grid, true, 1.0);
    let [ab, bc, ac] = t.grads.expect("requested");
    Ok(LossWithGrad {
        value: t.value,
        grad: GcGradients {
            ab: DisplacementField::from_comps_unchecked(grid, ab),
            bc: DisplacementField::from_comps_unchecked(grid, bc),
            ac: DisplacementField::from_comps_unchecked(grid, ac),
        },
    })
}

/// `λ1·sim + λ2·smooth + λ3·gc + λ4·ndv`.
pub fn total_loss(sim: f64, smooth: f64, gc: f64, ndv: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("sim", sim), ("smooth", smooth), ("gc", gc), ("ndv", ndv)] {
        if !v.is_finite() {
            return Err(RegError::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(w.lambda1 * sim + w.lambda2 * smooth + w.lambda3 * gc + w.lambda4 * ndv)
}
