//! Seeded synthetic volumes and smooth fields for tests, the gradient
//! harness and the browser demo.

use std::f64::consts::PI;

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};

use crate::transform::{exp_velocity, DisplacementField, VelocityField};
use crate::volume::{normalize_intensity, GridSpec, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent uniform voxels on `[0, 255)`.
pub fn random_volume(grid: GridSpec, seed: u64) -> Volume {
    let mut r = rng(seed);
    Volume::from_fn(grid, |_| r.random_range(0.0..255.0))
}

/// Analytic sum of Gaussian blobs in voxel coordinates.
struct Blobs {
    items: Vec<([f64; 3], f64, f64)>,
}

impl Blobs {
    fn new(grid: &GridSpec, seed: u64) -> Self {
        let mut r = rng(seed);
        let count = (grid.len() / 50).max(8);
        let items = (0..count)
            .map(|_| {
                let c = std::array::from_fn(|a| r.random_range(0.0..grid.dims[a] as f64));
                let radius = r.random_range(0.8..1.8);
                let amp = r.random_range(0.3..1.0);
                (c, radius, amp)
            })
            .collect();
        Self { items }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.items
            .iter()
            .map(|(c, radius, amp)| {
                let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                amp * (-d2 / (2.0 * radius * radius)).exp()
            })
            .sum()
    }
}

/// Sum of Gaussian blobs with random centres, radii and amplitudes,
/// rescaled onto `[0, 255]`.
pub fn blob_volume(grid: GridSpec, seed: u64) -> Volume {
    let blobs = Blobs::new(&grid, seed);
    let vol = Volume::from_fn(grid, |p| blobs.eval(p.map(|v| v as f64)));
    normalize_intensity(&vol).expect("blob volume is not constant")
}

fn smooth_comps(grid: GridSpec, max_voxels: f64, seed: u64) -> [Vec<f64>; 3] {
    let mut r = rng(seed);
    // products of half-period sines with k in {1, 2} per axis, amplitudes
    // falling off as 1/(kx·ky·kz)²; every mode vanishes on the boundary faces
    let mut modes = Vec::with_capacity(8);
    for kz in 1..=2 {
        for ky in 1..=2 {
            for kx in 1..=2 {
                let k = [kx as f64, ky as f64, kz as f64];
                let damp = 1.0 / (k[0] * k[1] * k[2]).powi(2);
                let amp: [f64; 3] = std::array::from_fn(|_| damp * r.random_range(-1.0..1.0));
                modes.push((k, amp));
            }
        }
    }
    let n = grid.len();
    let mut comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let c = grid.coords(i);
        for (k, amp) in &modes {
            let s: f64 = (0..3)
                .map(|a| (PI * k[a] * c[a] as f64 / (grid.dims[a] - 1) as f64).sin())
                .product();
            for a in 0..3 {
                comps[a][i] += amp[a] * s;
            }
        }
    }
    let peak = (0..n)
        .map(|i| (0..3).map(|a| comps[a][i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { max_voxels / peak } else { 0.0 };
    for a in 0..3 {
        for v in &mut comps[a] {
            *v *= scale * grid.spacing[a];
        }
    }
    comps
}

/// Low-frequency random velocity, zero on the boundary faces, whose largest
/// voxel-unit norm is `max_voxels`.
pub fn smooth_velocity(grid: GridSpec, max_voxels: f64, seed: u64) -> VelocityField {
    VelocityField::new(grid, smooth_comps(grid, max_voxels, seed)).expect("finite field")
}

/// Like [`smooth_velocity`] but used directly as a displacement.
pub fn smooth_displacement(grid: GridSpec, max_voxels: f64, seed: u64) -> DisplacementField {
    DisplacementField::new(grid, smooth_comps(grid, max_voxels, seed)).expect("finite field")
}

/// A registration problem with a known answer: `fixed = moving ∘ φ_truth`
/// (evaluated analytically), so the ideal forward displacement is `truth`.
#[derive(Clone, Debug)]
pub struct KnownWarp {
    pub fixed: Volume,
    pub moving: Volume,
    pub velocity: VelocityField,
    pub truth: DisplacementField,
}

pub fn known_warp(grid: GridSpec, max_voxels: f64, seed: u64) -> KnownWarp {
    let blobs = Blobs::new(&grid, seed);
    let raw = Volume::from_fn(grid, |p| blobs.eval(p.map(|v| v as f64)));
    let (lo, hi) = raw.min_max();
    let moving = normalize_intensity(&raw).expect("blob volume is not constant");
    let velocity = smooth_velocity(grid, max_voxels, seed.wrapping_add(0x9e37_79b9));
    let truth = exp_velocity(&velocity, 6);
    // the fixed image samples the analytic blobs at the warped positions, so
    // it carries no interpolation blur
    let fixed = Volume::from_fn(grid, |p| {
        let i = grid.index(p[0], p[1], p[2]);
        let q = std::array::from_fn(|a| p[a] as f64 + truth.comps()[a][i] / grid.spacing[a]);
        (blobs.eval(q) - lo) / (hi - lo) * 255.0
    });
    KnownWarp {
        fixed,
        moving,
        velocity,
        truth,
    }
}

/// Mean voxel-unit distance between two displacement fields.
pub fn mean_endpoint_error(a: &DisplacementField, b: &DisplacementField) -> f64 {
    let g = a.grid();
    (0..g.len())
        .map(|i| {
            (0..3)
                .map(|k| ((a.comps()[k][i] - b.comps()[k][i]) / g.spacing[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / g.len() as f64
}
