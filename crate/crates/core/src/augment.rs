//! Random intensity remapping: shape-preserving cubic curves through random
//! knots, discretized to 256-entry lookup tables.

use rand::rngs::ChaCha8Rng;
use rand::{Rng, RngExt, SeedableRng};

use crate::error::{RegError, Result};
use crate::volume::Volume;

/// Cubic Hermite curve on `[0, 255]` with Fritsch–Carlson slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct PchipCurve {
    knots_x: Vec<f64>,
    knots_y: Vec<f64>,
    slopes: Vec<f64>,
}

/// Secant slopes and interval widths.
fn secants(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta = (0..h.len()).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    (h, delta)
}

/// Shape-preserving derivatives at each knot.
///
/// Interior knots take the weighted harmonic mean of the neighbouring
/// secants when they agree in sign and zero otherwise. The end slopes use
/// the one-sided three-point formula, zeroed when its sign disagrees with
/// the first secant and capped at three times that secant when the data
/// turns.
pub fn pchip_slopes(knots_x: &[f64], knots_y: &[f64]) -> Result<Vec<f64>> {
    let n = knots_x.len();
    if n < 2 || knots_y.len() != n || knots_x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RegError::BadKnots);
    }
    if knots_x.iter().chain(knots_y).any(|v| !v.is_finite()) {
        return Err(RegError::BadKnots);
    }
    let (h, delta) = secants(knots_x, knots_y);
    if n == 2 {
        return Ok(vec![delta[0]; 2]);
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    Ok(d)
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

impl PchipCurve {
    /// Builds a curve over knots spanning `[0, 255]` exactly, with values in
    /// `[0, 255]` and the ends pinned to 0 and 255.
    pub fn new(knots_x: Vec<f64>, knots_y: Vec<f64>) -> Result<Self> {
        let slopes = pchip_slopes(&knots_x, &knots_y)?;
        let n = knots_x.len();
        if knots_x[0] != 0.0 || knots_x[n - 1] != 255.0 {
            return Err(RegError::BadKnots);
        }
        if knots_y[0] != 0.0 || knots_y[n - 1] != 255.0 || knots_y.iter().any(|y| !(0.0..=255.0).contains(y)) {
            return Err(RegError::BadKnots);
        }
        Ok(Self {
            knots_x,
            knots_y,
            slopes,
        })
    }

    pub fn identity(n_knots: usize) -> Result<Self> {
        if n_knots < 2 {
            return Err(RegError::BadKnotCount(n_knots));
        }
        let x = uniform_knots(n_knots);
        Self::new(x.clone(), x)
    }

    pub fn knots_x(&self) -> &[f64] {
        &self.knots_x
    }

    pub fn knots_y(&self) -> &[f64] {
        &self.knots_y
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    fn piece(&self, x: f64) -> usize {
        // index of the interval [x_k, x_{k+1}] holding x; the last knot
        // belongs to the final interval
        let k = self.knots_x.partition_point(|&kx| kx <= x);
        k.saturating_sub(1).min(self.knots_x.len() - 2)
    }

    fn check_domain(x: f64) -> Result<()> {
        if (0.0..=255.0).contains(&x) {
            Ok(())
        } else {
            Err(RegError::OutOfDomain(x))
        }
    }

    /// Derivative of piece `k` at local parameter `t ∈ [0, 1]`.
    pub fn piece_derivative(&self, k: usize, t: f64) -> f64 {
        let h = self.knots_x[k + 1] - self.knots_x[k];
        let (y0, y1) = (self.knots_y[k], self.knots_y[k + 1]);
        let (m0, m1) = (self.slopes[k], self.slopes[k + 1]);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * h * m0
            + (6.0 * t - 6.0 * t2) * y1
            + (3.0 * t2 - 2.0 * t) * h * m1)
            / h
    }

    /// Left and right derivatives at interior knot `k`, each taken from its
    /// own Hermite piece.
    pub fn knot_derivatives(&self, k: usize) -> (f64, f64) {
        assert!(k >= 1 && k + 1 < self.knots_x.len(), "interior knot expected");
        (self.piece_derivative(k - 1, 1.0), self.piece_derivative(k, 0.0))
    }
}

pub fn pchip_eval(curve: &PchipCurve, x: f64) -> Result<f64> {
    PchipCurve::check_domain(x)?;
    let k = curve.piece(x);
    let (x0, x1) = (curve.knots_x[k], curve.knots_x[k + 1]);
    let (y0, y1) = (curve.knots_y[k], curve.knots_y[k + 1]);
    if x == x0 {
        return Ok(y0);
    }
    if x == x1 {
        return Ok(y1);
    }
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    Ok((2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + t) * h * curve.slopes[k]
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - t2) * h * curve.slopes[k + 1])
}

fn uniform_knots(n: usize) -> Vec<f64> {
    (0..n).map(|i| 255.0 * i as f64 / (n - 1) as f64).collect()
}

/// Random curve with `n_knots` evenly spaced knots, fixed ends and
/// independent uniform interior values.
pub fn sample_curve(seed: u64, n_knots: usize) -> Result<PchipCurve> {
    sample_curve_with_rng(&mut ChaCha8Rng::seed_from_u64(seed), n_knots)
}

pub fn sample_curve_with_rng<R: Rng + ?Sized>(rng: &mut R, n_knots: usize) -> Result<PchipCurve> {
    if n_knots < 3 {
        return Err(RegError::BadKnotCount(n_knots));
    }
    let x = uniform_knots(n_knots);
    let mut y = Vec::with_capacity(n_knots);
    y.push(0.0);
    for _ in 1..n_knots - 1 {
        y.push(rng.random_range(0.0..=255.0));
    }
    y.push(255.0);
    PchipCurve::new(x, y)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntensityLut {
    table: [u8; 256],
}

impl IntensityLut {
    /// Any table is representable; LUTs built from curves additionally fix
    /// 0 and 255.
    pub fn new(table: [u8; 256]) -> Self {
        Self { table }
    }

    pub fn identity() -> Self {
        Self::new(std::array::from_fn(|v| v as u8))
    }

    pub fn inversion() -> Self {
        Self::new(std::array::from_fn(|v| 255 - v as u8))
    }

    pub fn table(&self) -> &[u8; 256] {
        &self.table
    }

    pub fn fixes_endpoints(&self) -> bool {
        self.table[0] == 0 && self.table[255] == 255
    }
}

pub fn build_lut(curve: &PchipCurve) -> IntensityLut {
    let table = std::array::from_fn(|v| {
        let g = pchip_eval(curve, v as f64).expect("integer intensities are in the domain");
        g.clamp(0.0, 255.0).round() as u8
    });
    IntensityLut::new(table)
}

pub fn uniform_histogram() -> Vec<f64> {
    vec![1.0 / 256.0; 256]
}

/// Normalized histogram of a volume on `[0, 255]`, values rounded to the
/// nearest bin.
pub fn histogram(vol: &Volume) -> Result<Vec<f64>> {
    let mut hist = vec![0.0; 256];
    for &v in vol.data() {
        hist[lut_index(v)?] += 1.0;
    }
    let n = vol.data().len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

fn check_histogram(hist: &[f64]) -> Result<()> {
    let ok = hist.len() == 256
        && hist.iter().all(|h| h.is_finite() && *h >= 0.0)
        && (hist.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(RegError::BadHistogram)
    }
}

/// Pushes `ref_hist` through the table; the LUT is rejected when any output
/// bin other than 0 collects more than `tau` of the mass.
pub fn accept_lut(lut: &IntensityLut, ref_hist: &[f64], tau: f64) -> Result<bool> {
    check_histogram(ref_hist)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(RegError::BadConfig(format!("tau must lie in [0, 1], got {tau}")));
    }
    let mut out = [0.0; 256];
    for (v, &m) in ref_hist.iter().enumerate() {
        out[lut.table[v] as usize] += m;
    }
    Ok(out[1..].iter().all(|&m| m <= tau))
}

fn lut_index(v: f64) -> Result<usize> {
    if !(-0.5..=255.5).contains(&v) {
        return Err(RegError::OutOfRange(v));
    }
    Ok(v.round().clamp(0.0, 255.0) as usize)
}

/// `out(x) = table[round(vol(x))]`.
pub fn apply_lut(vol: &Volume, lut: &IntensityLut) -> Result<Volume> {
    let data = vol
        .data()
        .iter()
        .map(|&v| lut_index(v).map(|i| lut.table[i] as f64))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(*vol.grid(), data)
}

#[derive(Clone, Debug)]
pub struct LutBank {
    pub luts: Vec<IntensityLut>,
    /// Curves behind each accepted LUT, in the same order.
    pub curves: Vec<PchipCurve>,
    pub rejected: usize,
}

/// Draws curves from one seeded stream until `n` LUTs pass [`accept_lut`].
pub fn generate_bank(n: usize, seed: u64, n_knots: usize, ref_hist: &[f64], tau: f64) -> Result<LutBank> {
    if n == 0 {
        return Err(RegError::BadConfig("bank size must be >= 1".into()));
    }
    check_histogram(ref_hist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = LutBank {
        luts: Vec::with_capacity(n),
        curves: Vec::with_capacity(n),
        rejected: 0,
    };
    let mut streak = 0;
    while bank.luts.len() < n {
        let curve = sample_curve_with_rng(&mut rng, n_knots)?;
        let lut = build_lut(&curve);
        if accept_lut(&lut, ref_hist, tau)? {
            bank.luts.push(lut);
            bank.curves.push(curve);
            streak = 0;
        } else {
            bank.rejected += 1;
            streak += 1;
            if streak >= 100 * n {
                return Err(RegError::RejectionOverflow {
                    accepted: bank.luts.len(),
                    rejected: streak,
                });
            }
        }
    }
    Ok(bank)
}

/// Largest gap between left and right derivatives over the interior knots.
pub fn c1_gap(curve: &PchipCurve) -> f64 {
    (1..curve.knots_x.len() - 1)
        .map(|k| {
            let (l, r) = curve.knot_derivatives(k);
            (l - r).abs()
        })
        .fold(0.0, f64::max)
}

/// Sweeps every interval at `step` and reports whether the curve is
/// monotone wherever its two knots are, within `tol`.
pub fn shape_preserved(curve: &PchipCurve, step: f64, tol: f64) -> bool {
    let (x, y) = (&curve.knots_x, &curve.knots_y);
    (0..x.len() - 1).all(|k| {
        let sign = (y[k + 1] - y[k]).signum();
        if y[k + 1] == y[k] {
            // flat interval: both slopes are zero, so the piece is constant
            return sweep(curve, x[k], x[k + 1], step).all(|g| (g - y[k]).abs() <= tol);
        }
        let mut prev = y[k];
        sweep(curve, x[k], x[k + 1], step).all(|g| {
            let ok = sign * (g - prev) >= -tol;
            prev = g;
            ok
        })
    })
}

fn sweep(curve: &PchipCurve, a: f64, b: f64, step: f64) -> impl Iterator<Item = f64> + '_ {
    let n = ((b - a) / step).ceil() as usize;
    (0..=n).map(move |i| pchip_eval(curve, (a + i as f64 * step).min(b)).expect("inside domain"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::DisplacementField;
    use crate::volume::{warp_volume, GridSpec};
    use proptest::prelude::*;

    #[test]
    fn slopes_linear_and_flat() {
        let x = uniform_knots(6);
        assert!(pchip_slopes(&x, &x).unwrap().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        let y = [0.0, 40.0, 40.0, 200.0, 220.0, 255.0];
        let d = pchip_slopes(&x, &y).unwrap();
        assert_eq!((d[1], d[2]), (0.0, 0.0));
        assert!(matches!(pchip_slopes(&[0.0, 10.0, 10.0], &[0.0, 1.0, 2.0]), Err(RegError::BadKnots)));
        assert!(matches!(pchip_slopes(&[0.0], &[0.0]), Err(RegError::BadKnots)));
    }

    #[test]
    fn interior_slope_matches_harmonic_formula() {
        let (x, y) = ([0.0, 51.0, 102.0], [0.0, 100.0, 110.0]);
        let d = pchip_slopes(&x, &y).unwrap();
        // equal widths reduce the weighted mean to 2 / (1/δ0 + 1/δ1)
        let (s0, s1) = (100.0 / 51.0, 10.0 / 51.0);
        let want = 2.0 / (1.0 / s0 + 1.0 / s1);
        assert!((d[1] - want).abs() < 1e-14);
        // three-point end formula: (3δ0 − δ1)/2 = (300 − 10)/102
        assert!((d[0] - 290.0 / 102.0).abs() < 1e-14);
    }

    #[test]
    fn end_slope_is_zeroed_or_capped() {
        // formula gives a negative slope against a positive secant
        let d = pchip_slopes(&[0.0, 1.0, 2.0], &[0.0, 0.1, 5.0]).unwrap();
        assert_eq!(d[0], 0.0);
        // turning data caps the end slope at 3δ0
        let d = pchip_slopes(&[0.0, 10.0, 11.0], &[0.0, 10.0, 0.0]).unwrap();
        assert!((d[0] - 3.0 * 1.0).abs() < 1e-15, "{}", d[0]);
    }

    #[test]
    fn eval_hits_knots_and_identity() {
        let c = sample_curve(3, 6).unwrap();
        for (x, y) in c.knots_x().iter().zip(c.knots_y()) {
            assert_eq!(pchip_eval(&c, *x).unwrap(), *y);
        }
        let id = PchipCurve::identity(6).unwrap();
        for i in 0..=1020 {
            let x = i as f64 * 0.25;
            assert!((pchip_eval(&id, x).unwrap() - x).abs() < 1e-12);
        }
        assert!(matches!(pchip_eval(&c, 255.5), Err(RegError::OutOfDomain(_))));
        assert!(matches!(pchip_eval(&c, -1e-9), Err(RegError::OutOfDomain(_))));
    }

    #[test]
    fn sampled_curve_layout() {
        let c = sample_curve(11, 6).unwrap();
        assert_eq!(c.knots_x(), &[0.0, 51.0, 102.0, 153.0, 204.0, 255.0]);
        assert_eq!((c.knots_y()[0], c.knots_y()[5]), (0.0, 255.0));
        assert_eq!(c, sample_curve(11, 6).unwrap());
        assert_ne!(c, sample_curve(12, 6).unwrap());
        assert!(matches!(sample_curve(1, 2), Err(RegError::BadKnotCount(2))));
    }

    #[test]
    fn lut_matches_pointwise_evaluation() {
        assert_eq!(build_lut(&PchipCurve::identity(6).unwrap()), IntensityLut::identity());
        let c = sample_curve(5, 6).unwrap();
        let lut = build_lut(&c);
        for v in 0..256 {
            let g = pchip_eval(&c, v as f64).unwrap();
            let g = g.clamp(0.0, 255.0);
            // half away from zero, written out
            let want = if g - g.floor() >= 0.5 { g.floor() + 1.0 } else { g.floor() };
            assert_eq!(lut.table()[v] as f64, want);
        }
        assert!(lut.fixes_endpoints());
    }

    #[test]
    fn acceptance_rules() {
        let hist = uniform_histogram();
        assert!(accept_lut(&IntensityLut::identity(), &hist, 0.25).unwrap());
        let mut collapse = [255u8; 256];
        collapse[0] = 0;
        assert!(!accept_lut(&IntensityLut::new(collapse), &hist, 0.25).unwrap());
        // background mass may pile up freely
        let mut to_zero = [0u8; 256];
        to_zero[255] = 255;
        assert!(accept_lut(&IntensityLut::new(to_zero), &hist, 0.25).unwrap());
        assert!(matches!(accept_lut(&IntensityLut::identity(), &[0.5; 256], 0.25), Err(RegError::BadHistogram)));
        assert!(matches!(accept_lut(&IntensityLut::identity(), &hist[..255], 0.25), Err(RegError::BadHistogram)));
    }

    #[test]
    fn acceptance_matches_accumulation_oracle() {
        let hist = uniform_histogram();
        let mut rejected = 0;
        for seed in 0..200 {
            let lut = build_lut(&sample_curve(seed, 6).unwrap());
            let mut worst: f64 = 0.0;
            for b in 1..256 {
                let mass: f64 = (0..256).filter(|&v| lut.table()[v] as usize == b).map(|v| hist[v]).sum();
                worst = worst.max(mass);
            }
            for tau in [0.01, 0.02, 0.05, 0.25] {
                let want = worst <= tau;
                assert_eq!(accept_lut(&lut, &hist, tau).unwrap(), want);
                rejected += usize::from(!want);
            }
        }
        assert!(rejected > 0 && rejected < 800, "{rejected}");
    }

    #[test]
    fn apply_identity_inversion_and_range() {
        let grid = GridSpec::unit([4, 4, 4]);
        let ramp = Volume::from_fn(grid, |[x, y, z]| (x + 4 * y + 16 * z) as f64 * 4.0 + 0.3);
        let id = apply_lut(&ramp, &IntensityLut::identity()).unwrap();
        assert!(id.data().iter().zip(ramp.data()).all(|(a, b)| *a == b.round()));
        let inv = apply_lut(&ramp, &IntensityLut::inversion()).unwrap();
        assert!(inv.data().iter().zip(ramp.data()).all(|(a, b)| *a == 255.0 - b.round()));
        let edge = Volume::from_fn(grid, |[x, ..]| if x == 0 { -0.5 } else { 255.5 });
        let e = apply_lut(&edge, &IntensityLut::identity()).unwrap();
        assert_eq!((e.get(0, 0, 0), e.get(1, 0, 0)), (0.0, 255.0));
        let bad = Volume::from_fn(grid, |[x, ..]| if x == 0 { -0.6 } else { 0.0 });
        assert!(matches!(apply_lut(&bad, &IntensityLut::identity()), Err(RegError::OutOfRange(_))));
    }

    #[test]
    fn apply_matches_voxel_loop() {
        let vol = crate::synth::random_volume(GridSpec::unit([6, 5, 4]), 2);
        let lut = build_lut(&sample_curve(8, 6).unwrap());
        let out = apply_lut(&vol, &lut).unwrap();
        for (i, &v) in vol.data().iter().enumerate() {
            let idx = (v + 0.5).floor() as usize;
            assert_eq!(out.data()[i], lut.table()[idx] as f64);
        }
    }

    #[test]
    fn bank_is_deterministic_and_vacuous_tau() {
        let hist = uniform_histogram();
        let a = generate_bank(40, 9, 6, &hist, 0.25).unwrap();
        let b = generate_bank(40, 9, 6, &hist, 0.25).unwrap();
        assert_eq!(a.luts, b.luts);
        assert_eq!(a.rejected, b.rejected);
        let c = generate_bank(40, 10, 6, &hist, 0.25).unwrap();
        assert_ne!(a.luts, c.luts);
        let one = generate_bank(1, 4, 6, &hist, 1.0).unwrap();
        let first = build_lut(&sample_curve_with_rng(&mut ChaCha8Rng::seed_from_u64(4), 6).unwrap());
        assert_eq!((one.luts[0].clone(), one.rejected), (first, 0));
    }

    #[test]
    fn bank_overflows_when_nothing_passes() {
        // tau 0 with a point-mass histogram on a non-background bin: every
        // LUT keeps 255 fixed, so bin 255 always holds all the mass
        let mut hist = vec![0.0; 256];
        hist[255] = 1.0;
        match generate_bank(2, 1, 6, &hist, 0.0) {
            Err(RegError::RejectionOverflow { accepted: 0, rejected: 200 }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn sampled_curves_are_c1_and_shape_preserving(seed in any::<u64>(), n in 3usize..10) {
            let c = sample_curve(seed, n).unwrap();
            prop_assert!(c1_gap(&c) <= 1e-9);
            prop_assert!(shape_preserved(&c, 0.25, 1e-9));
            let lut = build_lut(&c);
            prop_assert!(lut.fixes_endpoints());
        }

        #[test]
        fn monotone_runs_stay_inside_knot_range(seed in any::<u64>()) {
            let c = sample_curve(seed, 6).unwrap();
            let (x, y) = (c.knots_x(), c.knots_y());
            for k in 0..5 {
                let (lo, hi) = (y[k].min(y[k + 1]), y[k].max(y[k + 1]));
                for g in sweep(&c, x[k], x[k + 1], 0.25) {
                    prop_assert!(g >= lo - 1e-9 && g <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn lut_commutes_with_plateau_warps(seed in any::<u64>(), shift in prop::array::uniform3(-2i32..=2)) {
            // integer plateaus and whole-voxel shifts: interpolation never
            // mixes two plateaus
            let grid = GridSpec::new([6, 5, 4], [1.5, 1.0, 2.0], [0.0; 3]).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let vol = Volume::from_fn(grid, |_| r.random_range(0..=255) as f64);
            let d = DisplacementField::constant(grid, std::array::from_fn(|a| shift[a] as f64 * grid.spacing[a]));
            let lut = build_lut(&sample_curve(seed, 6).unwrap());
            let a = apply_lut(&warp_volume(&vol, &d).unwrap(), &lut).unwrap();
            let b = warp_volume(&apply_lut(&vol, &lut).unwrap(), &d).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
