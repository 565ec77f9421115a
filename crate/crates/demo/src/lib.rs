//! Browser bindings for a few regkit operations. Every volume is a
//! synthetic blob image and every result comes back as the middle axial
//! slice, one byte per pixel.

use regkit::augment::{accept_lut, apply_lut, build_lut, pchip_eval, sample_curve, uniform_histogram, IntensityLut};
use regkit::optimizer::{register_pair, RegistrationConfig, SimilarityKind};
use regkit::similarity::{mind_descriptor, MindConfig};
use regkit::synth::{self, mean_endpoint_error};
use regkit::{DisplacementField, GridSpec, Volume};
use wasm_bindgen::prelude::*;

fn mid_slice(data: &[f64], dims: [usize; 3], lo: f64, hi: f64) -> Vec<u8> {
    let z = dims[2] / 2;
    let plane = dims[0] * dims[1];
    let span = if hi > lo { hi - lo } else { 1.0 };
    data[z * plane..(z + 1) * plane]
        .iter()
        .map(|v| (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8)
        .collect()
}

fn volume_slice(vol: &Volume) -> Vec<u8> {
    mid_slice(vol.data(), vol.grid().dims, 0.0, 255.0)
}

fn blobs(size: usize, seed: u32) -> Volume {
    let v = synth::blob_volume(GridSpec::unit([size; 3]), u64::from(seed));
    v.map(f64::round).expect("finite blob intensities")
}

#[wasm_bindgen]
pub struct Augmented {
    size: usize,
    table: Vec<u8>,
    curve: Vec<f64>,
    knots: Vec<f64>,
    accepted: bool,
    original: Vec<u8>,
    remapped: Vec<u8>,
}

#[wasm_bindgen]
impl Augmented {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// 256-entry lookup table.
    #[wasm_bindgen(getter)]
    pub fn table(&self) -> Vec<u8> {
        self.table.clone()
    }

    /// The unrounded curve at every integer intensity.
    #[wasm_bindgen(getter)]
    pub fn curve(&self) -> Vec<f64> {
        self.curve.clone()
    }

    /// Knot positions interleaved as x0, y0, x1, y1, ...
    #[wasm_bindgen(getter)]
    pub fn knots(&self) -> Vec<f64> {
        self.knots.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn accepted(&self) -> bool {
        self.accepted
    }

    #[wasm_bindgen(getter)]
    pub fn original(&self) -> Vec<u8> {
        self.original.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn remapped(&self) -> Vec<u8> {
        self.remapped.clone()
    }
}

/// Samples a random PCHIP intensity curve and remaps a blob slice with it.
#[wasm_bindgen]
pub fn augment(seed: u32, n_knots: usize, tau: f64) -> Result<Augmented, JsError> {
    let curve = sample_curve(u64::from(seed), n_knots)?;
    let lut = build_lut(&curve);
    let accepted = accept_lut(&lut, &uniform_histogram(), tau)?;
    let vol = blobs(48, seed);
    let out = apply_lut(&vol, &lut)?;
    let samples = (0..256)
        .map(|k| pchip_eval(&curve, f64::from(k)))
        .collect::<Result<Vec<_>, _>>()?;
    let knots = curve.knots_x().iter().zip(curve.knots_y()).flat_map(|(x, y)| [*x, *y]).collect();
    Ok(Augmented {
        size: 48,
        table: lut.table().to_vec(),
        curve: samples,
        knots,
        accepted,
        original: volume_slice(&vol),
        remapped: volume_slice(&out),
    })
}

/// One MIND channel (0..6) of a blob image, optionally contrast-inverted
/// first. Channel values lie in [0, 1].
#[wasm_bindgen]
pub fn mind_channel(seed: u32, channel: usize, inverted: bool, patch_radius: usize) -> Result<Vec<u8>, JsError> {
    if channel >= 6 {
        return Err(JsError::new("channel must be in 0..6"));
    }
    let mut vol = blobs(48, seed);
    if inverted {
        vol = apply_lut(&vol, &IntensityLut::inversion())?;
    }
    let cfg = MindConfig {
        patch_radius: patch_radius.max(1),
        ..MindConfig::default()
    };
    let desc = mind_descriptor(&vol, &cfg);
    Ok(mid_slice(&desc.channels()[channel], vol.grid().dims, 0.0, 1.0))
}

/// Blob slice used as the MIND input, for display next to the channel.
#[wasm_bindgen]
pub fn blob_slice(seed: u32, inverted: bool) -> Result<Vec<u8>, JsError> {
    let mut vol = blobs(48, seed);
    if inverted {
        vol = apply_lut(&vol, &IntensityLut::inversion())?;
    }
    Ok(volume_slice(&vol))
}

#[wasm_bindgen]
pub struct Registration {
    size: usize,
    fixed: Vec<u8>,
    moving: Vec<u8>,
    warped: Vec<u8>,
    jacobian: Vec<u8>,
    epe_before: f64,
    epe_after: f64,
    ndv: f64,
    trace: Vec<f64>,
}

#[wasm_bindgen]
impl Registration {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn fixed(&self) -> Vec<u8> {
        self.fixed.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn moving(&self) -> Vec<u8> {
        self.moving.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn warped(&self) -> Vec<u8> {
        self.warped.clone()
    }

    /// Jacobian determinant of the forward map, 0.5..1.5 mapped onto 0..255.
    #[wasm_bindgen(getter)]
    pub fn jacobian(&self) -> Vec<u8> {
        self.jacobian.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn epe_before(&self) -> f64 {
        self.epe_before
    }

    #[wasm_bindgen(getter)]
    pub fn epe_after(&self) -> f64 {
        self.epe_after
    }

    #[wasm_bindgen(getter)]
    pub fn ndv(&self) -> f64 {
        self.ndv
    }

    /// Loss per accepted iterate, all levels concatenated.
    #[wasm_bindgen(getter)]
    pub fn trace(&self) -> Vec<f64> {
        self.trace.clone()
    }
}

/// Registers a blob image against a copy warped by a random smooth field.
/// `sim` is `ncc` or `mind`.
#[wasm_bindgen]
pub fn register(seed: u32, sim: &str, invert_moving: bool, amplitude: f64, iters: usize) -> Result<Registration, JsError> {
    let similarity = match sim {
        "ncc" => SimilarityKind::Lncc,
        "mind" => SimilarityKind::Mind,
        other => return Err(JsError::new(&format!("unknown similarity `{other}`"))),
    };
    let size = 24;
    let grid = GridSpec::unit([size; 3]);
    let p = synth::known_warp(grid, amplitude, u64::from(seed));
    let fixed = p.fixed.map(f64::round)?;
    let mut moving = p.moving.map(f64::round)?;
    if invert_moving {
        moving = apply_lut(&moving, &IntensityLut::inversion())?;
    }
    let mut cfg = RegistrationConfig::new(similarity);
    cfg.levels = 2;
    cfg.iters_per_level = vec![iters, iters.div_ceil(2)];
    let r = register_pair(&fixed, &moving, &cfg)?;
    let jac = regkit::transform::jacobian_det(&r.forward)?;
    Ok(Registration {
        size,
        fixed: volume_slice(&fixed),
        moving: volume_slice(&moving),
        warped: volume_slice(&r.warped_moving),
        jacobian: mid_slice(jac.data(), grid.dims, 0.5, 1.5),
        epe_before: mean_endpoint_error(&DisplacementField::zeros(grid), &p.truth),
        epe_after: mean_endpoint_error(&r.forward, &p.truth),
        ndv: r.final_ndv,
        trace: r.loss_trace.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_have_the_right_size() {
        assert_eq!(blob_slice(3, false).unwrap().len(), 48 * 48);
        assert_eq!(mind_channel(3, 5, true, 1).unwrap().len(), 48 * 48);
        let a = augment(9, 6, 0.25).unwrap();
        assert_eq!((a.table().len(), a.curve().len(), a.knots().len()), (256, 256, 12));
        assert_eq!((a.table()[0], a.table()[255]), (0, 255));
    }

    #[test]
    fn inverted_slice_mirrors_intensities() {
        let a = blob_slice(1, false).unwrap();
        let b = blob_slice(1, true).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| u16::from(*x) + u16::from(*y) == 255));
    }

    #[test]
    fn small_registration_improves() {
        let r = register(2, "mind", false, 2.0, 30).unwrap();
        assert!(r.epe_after() < r.epe_before());
        assert_eq!(r.warped().len(), 24 * 24);
        assert_eq!(r.ndv(), 0.0);
    }
}
