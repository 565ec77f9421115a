//! Coarse-to-fine instance optimization of stationary velocity fields.
//!
//! Each pyramid level minimizes `λ1·sim + λ2·smooth + λ4·ndv` (plus
//! `λ3·gc` for triplets) over a velocity grid with analytic gradients
//! through scaling-and-squaring, warping and the similarity term. The
//! inverse transform is `exp(-v)`, so inverse consistency holds by
//! construction.
//!
//! Symmetric mode compares `F ∘ exp(-v/2)` with `M ∘ exp(v/2)`; the full
//! forward map is one extra squaring of the half map, i.e. `exp(v)` with
//! `exp_steps` squarings.
//!
//! All loops run single-threaded in a fixed voxel order, so traces are
//! bitwise reproducible.

use rand::RngExt;

use crate::error::{RegError, Result};
use crate::regularize::{diffusion_comps, group_consistency_comps, LossWeights};
use crate::similarity::{
    correlation_volume, descriptor_ssd, lncc_terms, lncc_window_for_level, mind_descriptor, vfa_displacement,
    DescriptorField, MindConfig,
};
use crate::synth;
use crate::transform::{
    add_assign_comps, compose_backward, compose_comps, exp_backward, exp_forward, ndv_loss_comps, ndv_metric,
    scaled_comps, zeros_comps, Comps, DisplacementField, ExpTape, VelocityField,
};
use crate::volume::{
    build_pyramid, normalize_intensity, upsample_comps, warp_data, warp_data_backward, warp_volume, GridSpec,
    Volume,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Lncc,
    Mind,
}

impl SimilarityKind {
    pub fn default_weights(self) -> LossWeights {
        match self {
            SimilarityKind::Lncc => LossWeights::NCC,
            SimilarityKind::Mind => LossWeights::MIND,
        }
    }
}

/// Adam-style update with step halving on loss increase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    /// Initial step in voxels at every level.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Halvings tried before a step is rejected.
    pub max_retries: usize,
    /// Gaussian width in voxels applied to the gradient before the moment
    /// update; 0 disables.
    pub grad_sigma: f64,
    /// Gaussian width in voxels applied to the normalized update; 0 disables.
    pub update_sigma: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_retries: 5,
            grad_sigma: 5.0,
            update_sigma: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Coarsest level first.
    pub iters_per_level: Vec<usize>,
    pub similarity: SimilarityKind,
    pub weights: LossWeights,
    pub step_rule: StepRule,
    pub exp_steps: usize,
    pub symmetric: bool,
    pub vfa_init: bool,
    pub vfa_radius: usize,
    pub vfa_temperature: f64,
    /// Gaussian sigma, in coarse voxels, applied to the VFA field before use.
    pub vfa_sigma: f64,
    pub mind: MindConfig,
    pub seed: u64,
}

impl RegistrationConfig {
    pub fn new(similarity: SimilarityKind) -> Self {
        Self {
            levels: 3,
            iters_per_level: vec![100, 60, 20],
            similarity,
            weights: similarity.default_weights(),
            step_rule: StepRule::default(),
            exp_steps: 6,
            symmetric: true,
            vfa_init: false,
            vfa_radius: 2,
            vfa_temperature: 0.1,
            vfa_sigma: 1.5,
            mind: MindConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(RegError::BadConfig("levels must be >= 1".into()));
        }
        if self.iters_per_level.len() != self.levels {
            return Err(RegError::BadConfig(format!(
                "{} iteration counts given for {} levels",
                self.iters_per_level.len(),
                self.levels
            )));
        }
        if self.symmetric && self.exp_steps == 0 {
            return Err(RegError::BadConfig("symmetric mode needs exp_steps >= 1".into()));
        }
        let r = &self.step_rule;
        if !(r.step_size > 0.0 && (0.0..1.0).contains(&r.beta1) && (0.0..1.0).contains(&r.beta2) && r.epsilon > 0.0)
            || !(r.grad_sigma >= 0.0 && r.update_sigma >= 0.0)
        {
            return Err(RegError::BadConfig(format!("invalid step rule {r:?}")));
        }
        if self.vfa_init && (self.vfa_radius == 0 || !(self.vfa_temperature > 0.0) || !(self.vfa_sigma >= 0.0)) {
            return Err(RegError::BadConfig("vfa init needs radius >= 1, temperature > 0 and sigma >= 0".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug)]
pub struct RegResult {
    pub velocity: VelocityField,
    pub forward: DisplacementField,
    pub inverse: DisplacementField,
    pub warped_moving: Volume,
    /// Per level (coarsest first): the objective before the first iteration
    /// followed by its value after every iteration.
    pub loss_trace: Vec<Vec<f64>>,
    pub final_ndv: f64,
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub ab: RegResult,
    pub bc: RegResult,
    pub ac: RegResult,
    /// Group-consistency term per level and iteration, laid out like
    /// `loss_trace`.
    pub gc_trace: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Per-level objective
// ---------------------------------------------------------------------------

enum SimData {
    Lncc { window: usize },
    Mind { fixed: DescriptorField, moving: DescriptorField },
}

pub(crate) struct PairLevel {
    grid: GridSpec,
    fixed: Vec<f64>,
    moving: Vec<f64>,
    sim: SimData,
    weights: LossWeights,
    symmetric: bool,
    exp_steps: usize,
}

struct Half {
    field: Comps,
    tape: ExpTape,
    grad: Comps,
}

pub(crate) struct PairEval {
    /// `λ1·sim + λ2·smooth + λ4·ndv`.
    loss: f64,
    full: Comps,
    plus: Half,
    minus: Option<Half>,
    /// Gradient with respect to `full` from the regularizers.
    grad_full: Comps,
}

impl PairLevel {
    fn new(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig, from_finest: usize) -> Self {
        let sim = match cfg.similarity {
            SimilarityKind::Lncc => SimData::Lncc {
                window: lncc_window_for_level(from_finest),
            },
            SimilarityKind::Mind => SimData::Mind {
                fixed: mind_descriptor(fixed, &cfg.mind),
                moving: mind_descriptor(moving, &cfg.mind),
            },
        };
        Self {
            grid: *fixed.grid(),
            fixed: fixed.data().to_vec(),
            moving: moving.data().to_vec(),
            sim,
            weights: cfg.weights,
            symmetric: cfg.symmetric,
            exp_steps: cfg.exp_steps,
        }
    }

    /// Scale applied to `v` to obtain the initial field of the half (or
    /// full) exponential, and the number of squarings it runs.
    fn exp_schedule(&self) -> (f64, usize) {
        if self.symmetric {
            let steps = self.exp_steps - 1;
            (0.5 * 0.5f64.powi(steps as i32), steps)
        } else {
            (0.5f64.powi(self.exp_steps as i32), self.exp_steps)
        }
    }

    pub(crate) fn forward(&self, v: &Comps, need_grad: bool) -> PairEval {
        let grid = &self.grid;
        let n = grid.len();
        let (scale, steps) = self.exp_schedule();
        let (dp, tp) = exp_forward(scaled_comps(v, scale), grid, steps);
        let minus = self
            .symmetric
            .then(|| exp_forward(scaled_comps(v, -scale), grid, steps));
        let full = if self.symmetric {
            compose_comps(&dp, &dp, grid)
        } else {
            dp.clone()
        };

        let w = self.weights;
        let mut g_plus = zeros_comps(n);
        let mut g_minus = minus.as_ref().map(|_| zeros_comps(n));
        let sim = match &self.sim {
            SimData::Lncc { window } => {
                let wm = warp_data(&self.moving, grid, &dp);
                let wf = match &minus {
                    Some((dm, _)) => warp_data(&self.fixed, grid, dm),
                    None => self.fixed.clone(),
                };
                let t = lncc_terms(&wf, &wm, grid.dims, *window, need_grad);
                if need_grad {
                    let gm: Vec<f64> = t.grad_m.iter().map(|g| w.lambda1 * g).collect();
                    g_plus = warp_data_backward(&self.moving, grid, &dp, &gm);
                    if let (Some((dm, _)), Some(acc)) = (&minus, g_minus.as_mut()) {
                        let gf: Vec<f64> = t.grad_f.iter().map(|g| w.lambda1 * g).collect();
                        *acc = warp_data_backward(&self.fixed, grid, dm, &gf);
                    }
                }
                t.loss
            }
            SimData::Mind { fixed, moving } => {
                let (value, ga, gb) = descriptor_ssd(fixed, minus.as_ref().map(|(dm, _)| dm), moving, &dp, need_grad);
                if need_grad {
                    g_plus = scaled_comps(&gb.expect("requested"), w.lambda1);
                    if let (Some(ga), Some(acc)) = (ga, g_minus.as_mut()) {
                        *acc = scaled_comps(&ga, w.lambda1);
                    }
                }
                value
            }
        };

        let mut grad_full = zeros_comps(if need_grad { n } else { 0 });
        let (smooth, ndv) = if need_grad {
            let s = diffusion_comps(&full, grid, Some(&mut grad_full), w.lambda2);
            let d = ndv_loss_comps(&full, grid, Some(&mut grad_full), w.lambda4);
            (s, d)
        } else {
            (diffusion_comps(&full, grid, None, 0.0), ndv_loss_comps(&full, grid, None, 0.0))
        };
        let loss = w.lambda1 * sim + w.lambda2 * smooth + w.lambda4 * ndv;
        PairEval {
            loss,
            full,
            plus: Half {
                field: dp,
                tape: tp,
                grad: g_plus,
            },
            minus: minus.map(|(field, tape)| Half {
                field,
                tape,
                grad: g_minus.expect("allocated with minus"),
            }),
            grad_full,
        }
    }

    /// Gradient with respect to `v`, optionally adding an extra gradient on
    /// the full forward field.
    pub(crate) fn backward(&self, eval: PairEval, extra_full: Option<&Comps>) -> Comps {
        let grid = &self.grid;
        let (scale, _) = self.exp_schedule();
        let mut g_full = eval.grad_full;
        if let Some(extra) = extra_full {
            add_assign_comps(&mut g_full, extra);
        }
        let mut g_plus = eval.plus.grad;
        if self.symmetric {
            let (g_outer, g_inner) = compose_backward(&eval.plus.field, &eval.plus.field, grid, &g_full);
            add_assign_comps(&mut g_plus, &g_outer);
            add_assign_comps(&mut g_plus, &g_inner);
        } else {
            add_assign_comps(&mut g_plus, &g_full);
        }
        let mut gv = scaled_comps(&exp_backward(&eval.plus.tape, g_plus), scale);
        if let Some(minus) = eval.minus {
            let gm = exp_backward(&minus.tape, minus.grad);
            add_assign_comps(&mut gv, &scaled_comps(&gm, -scale));
        }
        gv
    }
}

// ---------------------------------------------------------------------------
// Step rule
// ---------------------------------------------------------------------------

struct Adam {
    m: Comps,
    v: Comps,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: zeros_comps(n),
            v: zeros_comps(n),
            t: 0,
        }
    }

    /// Updates the moments with `g` and returns the normalized direction.
    fn direction(&mut self, g: &Comps, rule: &StepRule) -> Comps {
        self.t += 1;
        let bc1 = 1.0 - rule.beta1.powi(self.t);
        let bc2 = 1.0 - rule.beta2.powi(self.t);
        let mut dir = zeros_comps(g[0].len());
        for a in 0..3 {
            for i in 0..g[a].len() {
                let gi = g[a][i];
                self.m[a][i] = rule.beta1 * self.m[a][i] + (1.0 - rule.beta1) * gi;
                self.v[a][i] = rule.beta2 * self.v[a][i] + (1.0 - rule.beta2) * gi * gi;
                let mh = self.m[a][i] / bc1;
                let vh = self.v[a][i] / bc2;
                dir[a][i] = mh / (vh.sqrt() + rule.epsilon);
            }
        }
        dir
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let mut out = vec![0.0; cur.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let base = i - pos as usize * stride;
            *o = kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(w, k)| w * cur[base + (pos + k).clamp(0, n - 1) as usize * stride])
                .sum();
        }
        cur = out;
    }
    cur
}

fn smooth_comps(c: Comps, dims: [usize; 3], sigma: f64) -> Comps {
    if sigma <= 0.0 {
        return c;
    }
    c.map(|x| gaussian_blur(&x, dims, sigma))
}

fn step(v: &Comps, dir: &Comps, lr: f64, spacing: &[f64; 3]) -> Comps {
    std::array::from_fn(|a| {
        let s = lr * spacing[a];
        v[a].iter().zip(&dir[a]).map(|(x, d)| x - s * d).collect()
    })
}

// ---------------------------------------------------------------------------
// Level loop shared by pairs and triplets
// ---------------------------------------------------------------------------

struct LevelOutcome {
    traces: Vec<Vec<f64>>,
    gc_trace: Vec<f64>,
}

/// Optimizes `vs[k]` against `pairs[k]`. With `gc_weight = Some(λ3)` the
/// three fields are coupled through the (AB, BC, AC) cycle penalty; steps are
/// accepted block by block so every accepted step lowers the total.
fn optimize_level(
    pairs: &[PairLevel],
    vs: &mut [Comps],
    iters: usize,
    rule: &StepRule,
    gc_weight: Option<f64>,
    level: usize,
) -> Result<LevelOutcome> {
    let k_fields = pairs.len();
    let grid = pairs[0].grid;
    let n = grid.len();
    let mut adams: Vec<Adam> = (0..k_fields).map(|_| Adam::new(n)).collect();
    let mut lrs = vec![rule.step_size; k_fields];
    let coupled = gc_weight.filter(|&w| w > 0.0);

    let gc_value = |fulls: &[&Comps]| -> f64 {
        group_consistency_comps(fulls[0], fulls[1], fulls[2], &grid, false, 0.0).value
    };

    let mut evals: Vec<PairEval> = pairs.iter().zip(vs.iter()).map(|(p, v)| p.forward(v, true)).collect();
    let mut traces: Vec<Vec<f64>> = evals.iter().map(|e| vec![e.loss]).collect();
    let mut gc_trace = Vec::new();
    if gc_weight.is_some() {
        let fulls: Vec<&Comps> = evals.iter().map(|e| &e.full).collect();
        gc_trace.push(gc_value(&fulls));
    }
    for (k, e) in evals.iter().enumerate() {
        if !e.loss.is_finite() {
            return Err(RegError::NonFiniteLoss { level, iter: 0 });
        }
        let _ = k;
    }

    for iter in 0..iters {
        // gradients at the current iterate
        let extras: Option<[Comps; 3]> = coupled.and_then(|w| {
            group_consistency_comps(&evals[0].full, &evals[1].full, &evals[2].full, &grid, true, w).grads
        });
        let mut losses: Vec<f64> = evals.iter().map(|e| e.loss).collect();
        let mut fulls: Vec<Comps> = Vec::with_capacity(k_fields);
        let mut grads = Vec::with_capacity(k_fields);
        for (k, e) in evals.drain(..).enumerate() {
            fulls.push(e.full.clone());
            grads.push(pairs[k].backward(e, extras.as_ref().map(|x| &x[k])));
        }
        let mut gc_cur = coupled.map(|_| gc_value(&[&fulls[0], &fulls[1], &fulls[2]]));

        for k in 0..k_fields {
            let g = smooth_comps(std::mem::take(&mut grads[k]), grid.dims, rule.grad_sigma);
            let dir = smooth_comps(adams[k].direction(&g, rule), grid.dims, rule.update_sigma);
            for _attempt in 0..=rule.max_retries {
                let cand = step(&vs[k], &dir, lrs[k], &grid.spacing);
                let e = pairs[k].forward(&cand, false);
                let (accept, gc_new) = match (coupled, gc_cur) {
                    (Some(w), Some(cur)) => {
                        let mut trial: Vec<&Comps> = fulls.iter().collect();
                        trial[k] = &e.full;
                        let g = gc_value(&trial);
                        let delta = (e.loss - losses[k]) + w * (g - cur);
                        (delta.is_finite() && delta <= 0.0, Some(g))
                    }
                    _ => (e.loss.is_finite() && e.loss <= losses[k], None),
                };
                if accept {
                    vs[k] = cand;
                    losses[k] = e.loss;
                    fulls[k] = e.full;
                    if gc_new.is_some() {
                        gc_cur = gc_new;
                    }
                    break;
                }
                lrs[k] *= 0.5;
            }
        }

        evals = pairs.iter().zip(vs.iter()).map(|(p, v)| p.forward(v, true)).collect();
        for (k, e) in evals.iter().enumerate() {
            if !e.loss.is_finite() {
                return Err(RegError::NonFiniteLoss { level, iter: iter + 1 });
            }
            traces[k].push(e.loss);
        }
        if gc_weight.is_some() {
            let f: Vec<&Comps> = evals.iter().map(|e| &e.full).collect();
            gc_trace.push(gc_value(&f));
        }
    }
    Ok(LevelOutcome { traces, gc_trace })
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

fn prepare(vols: &[&Volume], cfg: &RegistrationConfig) -> Result<Vec<Vec<Volume>>> {
    cfg.validate()?;
    let grid = vols[0].grid();
    for v in &vols[1..] {
        grid.ensure_same(v.grid(), "registration inputs")?;
    }
    vols.iter()
        .map(|v| {
            let norm = normalize_intensity(v)?;
            build_pyramid(&norm, cfg.levels)
        })
        .collect()
}

fn vfa_initial(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<Comps> {
    let df = mind_descriptor(fixed, &cfg.mind);
    let dm = mind_descriptor(moving, &cfg.mind);
    let cv = correlation_volume(&df, &dm, cfg.vfa_radius)?;
    let d = vfa_displacement(&cv, cfg.vfa_temperature)?;
    Ok(smooth_comps(d.into_comps(), fixed.grid().dims, cfg.vfa_sigma))
}

fn finish(fixed_grid: &GridSpec, moving: &Volume, v: Comps, cfg: &RegistrationConfig, trace: Vec<Vec<f64>>) -> Result<RegResult> {
    let velocity = VelocityField::new(*fixed_grid, v)?;
    let forward = crate::transform::exp_velocity(&velocity, cfg.exp_steps);
    let inverse = crate::transform::exp_velocity(&velocity.negated(), cfg.exp_steps);
    let warped_moving = warp_volume(moving, &forward)?;
    let final_ndv = if fixed_grid.dims.iter().all(|&n| n >= 3) {
        ndv_metric(&forward)?
    } else {
        0.0
    };
    Ok(RegResult {
        velocity,
        forward,
        inverse,
        warped_moving,
        loss_trace: trace,
        final_ndv,
    })
}

/// Registers `moving` onto `fixed`. The forward field satisfies
/// `warped_moving(x) = moving(x + forward(x))`.
pub fn register_pair(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<RegResult> {
    let pyr = prepare(&[fixed, moving], cfg)?;
    let mut v: Option<Comps> = None;
    let mut trace = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let (f, m) = (&pyr[0][level], &pyr[1][level]);
        let grid = *f.grid();
        let mut current = match v.take() {
            None if cfg.vfa_init => vfa_initial(f, m, cfg)?,
            None => zeros_comps(grid.len()),
            Some(prev) => upsample_comps(&prev, pyr[0][level - 1].grid(), &grid)?,
        };
        let pair = PairLevel::new(f, m, cfg, cfg.levels - 1 - level);
        let out = optimize_level(
            std::slice::from_ref(&pair),
            std::slice::from_mut(&mut current),
            cfg.iters_per_level[level],
            &cfg.step_rule,
            None,
            level,
        )?;
        trace.push(out.traces.into_iter().next().expect("one field"));
        v = Some(current);
    }
    finish(fixed.grid(), moving, v.expect("at least one level"), cfg, trace)
}

/// Jointly registers the ordered triplet (A→B, B→C, A→C) with the cycle
/// penalty `λ3 · gc`.
pub fn register_group(a: &Volume, b: &Volume, c: &Volume, cfg: &RegistrationConfig) -> Result<GroupResult> {
    let pyr = prepare(&[a, b, c], cfg)?;
    // (fixed, moving) pyramid indices for AB, BC, AC
    let roles = [(0usize, 1usize), (1, 2), (0, 2)];
    let mut vs: Option<Vec<Comps>> = None;
    let mut traces: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
    let mut gc_trace = Vec::new();
    for level in 0..cfg.levels {
        let grid = *pyr[0][level].grid();
        let mut current: Vec<Comps> = match vs.take() {
            None => roles
                .iter()
                .map(|&(f, m)| {
                    if cfg.vfa_init {
                        vfa_initial(&pyr[f][level], &pyr[m][level], cfg)
                    } else {
                        Ok(zeros_comps(grid.len()))
                    }
                })
                .collect::<Result<_>>()?,
            Some(prev) => prev
                .iter()
                .map(|p| upsample_comps(p, pyr[0][level - 1].grid(), &grid))
                .collect::<Result<_>>()?,
        };
        let pairs: Vec<PairLevel> = roles
            .iter()
            .map(|&(f, m)| PairLevel::new(&pyr[f][level], &pyr[m][level], cfg, cfg.levels - 1 - level))
            .collect();
        let out = optimize_level(
            &pairs,
            &mut current,
            cfg.iters_per_level[level],
            &cfg.step_rule,
            Some(cfg.weights.lambda3),
            level,
        )?;
        for (k, t) in out.traces.into_iter().enumerate() {
            traces[k].push(t);
        }
        gc_trace.push(out.gc_trace);
        vs = Some(current);
    }
    let mut vs = vs.expect("at least one level").into_iter();
    let mut traces = traces.into_iter();
    let mut next = |moving: &Volume| -> Result<RegResult> {
        finish(
            a.grid(),
            moving,
            vs.next().expect("three fields"),
            cfg,
            traces.next().expect("three traces"),
        )
    };
    let ab = next(b)?;
    let bc = next(c)?;
    let ac = next(c)?;
    Ok(GroupResult { ab, bc, ac, gc_trace })
}

// ---------------------------------------------------------------------------
// Gradient harness
// ---------------------------------------------------------------------------

/// A seeded 8³ problem: three images related by smooth warps and three
/// generic velocity fields.
pub(crate) struct GradProblem {
    pub pairs: Vec<PairLevel>,
    pub velocities: Vec<Comps>,
    pub gc_weight: Option<f64>,
    grid: GridSpec,
}

impl GradProblem {
    pub(crate) fn new(cfg: &RegistrationConfig, seed: u64) -> Result<Self> {
        let grid = GridSpec::unit([8, 8, 8]);
        let mut rng = synth::rng(seed);
        let base = synth::blob_volume(grid, seed);
        let images: Vec<Volume> = (0..3)
            .map(|k| {
                let d = synth::smooth_displacement(grid, 1.0, seed.wrapping_add(10 + k));
                let warped = warp_volume(&base, &d).expect("same grid");
                let noisy = warped
                    .data()
                    .iter()
                    .map(|v| v + rng.random_range(-8.0..8.0))
                    .collect();
                normalize_intensity(&Volume::new(grid, noisy).expect("finite")).expect("textured")
            })
            .collect();
        let coupled = cfg.weights.lambda3 > 0.0;
        let roles: &[(usize, usize)] = if coupled { &[(0, 1), (1, 2), (0, 2)] } else { &[(0, 1)] };
        let pairs = roles
            .iter()
            .map(|&(f, m)| PairLevel::new(&images[f], &images[m], cfg, 0))
            .collect();
        let velocities = (0..roles.len())
            .map(|k| {
                let mut v = synth::smooth_velocity(grid, 1.2, seed.wrapping_add(20 + k as u64)).into_comps();
                for c in v.iter_mut().flatten() {
                    *c += rng.random_range(-0.15..0.15);
                }
                v
            })
            .collect();
        Ok(Self {
            pairs,
            velocities,
            gc_weight: coupled.then_some(cfg.weights.lambda3),
            grid,
        })
    }

    pub(crate) fn objective(&self, vs: &[Comps]) -> f64 {
        let evals: Vec<PairEval> = self.pairs.iter().zip(vs).map(|(p, v)| p.forward(v, false)).collect();
        let mut total: f64 = evals.iter().map(|e| e.loss).sum();
        if let Some(w) = self.gc_weight {
            total += w * group_consistency_comps(&evals[0].full, &evals[1].full, &evals[2].full, &self.grid, false, 0.0)
                .value;
        }
        total
    }

    pub(crate) fn gradient(&self, vs: &[Comps]) -> Vec<Comps> {
        let evals: Vec<PairEval> = self.pairs.iter().zip(vs).map(|(p, v)| p.forward(v, true)).collect();
        let extras = self.gc_weight.and_then(|w| {
            group_consistency_comps(&evals[0].full, &evals[1].full, &evals[2].full, &self.grid, true, w).grads
        });
        evals
            .into_iter()
            .enumerate()
            .map(|(k, e)| self.pairs[k].backward(e, extras.as_ref().map(|x| &x[k])))
            .collect()
    }
}

/// Relative error used by [`gradient_check`]: `|a - n| / max(|a|, |n|)`,
/// with components whose both values fall below `1e-12` counted as exact.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic gradient of the full level objective (pairwise
/// terms, plus the cycle penalty when `λ3 > 0`) against central
/// differences on `n_components` random velocity entries of a seeded 8³
/// problem. Returns the largest relative error.
pub fn gradient_check(cfg: &RegistrationConfig, n_components: usize, seed: u64) -> Result<f64> {
    cfg.validate()?;
    if n_components == 0 {
        return Err(RegError::BadConfig("n_components must be >= 1".into()));
    }
    let problem = GradProblem::new(cfg, seed)?;
    let grads = problem.gradient(&problem.velocities);
    let mut rng = synth::rng(seed ^ 0x5eed);
    let h = 1e-4; // voxels; unit spacing
    let mut worst: f64 = 0.0;
    for _ in 0..n_components {
        let k = rng.random_range(0..problem.velocities.len());
        let a = rng.random_range(0..3);
        let i = rng.random_range(0..problem.grid.len());
        let mut vs = problem.velocities.clone();
        vs[k][a][i] += h;
        let lp = problem.objective(&vs);
        vs[k][a][i] -= 2.0 * h;
        let lm = problem.objective(&vs);
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(relative_error(grads[k][a][i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(sim: SimilarityKind) -> RegistrationConfig {
        let mut cfg = RegistrationConfig::new(sim);
        cfg.levels = 2;
        cfg.iters_per_level = vec![30, 15];
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = RegistrationConfig::new(SimilarityKind::Lncc);
        assert!(cfg.validate().is_ok());
        cfg.iters_per_level = vec![1, 2];
        assert!(matches!(cfg.validate(), Err(RegError::BadConfig(_))));
        let mut cfg = RegistrationConfig::new(SimilarityKind::Mind);
        cfg.weights.lambda2 = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RegistrationConfig::new(SimilarityKind::Mind);
        cfg.exp_steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradient_check_both_similarities() {
        for sim in [SimilarityKind::Lncc, SimilarityKind::Mind] {
            let cfg = RegistrationConfig::new(sim);
            let err = gradient_check(&cfg, 24, 3).unwrap();
            assert!(err <= 1e-3, "{sim:?}: {err}");
        }
    }

    #[test]
    fn gradient_check_asymmetric_pair() {
        let mut cfg = RegistrationConfig::new(SimilarityKind::Lncc);
        cfg.symmetric = false;
        cfg.weights.lambda3 = 0.0;
        assert!(gradient_check(&cfg, 24, 4).unwrap() <= 1e-3);
    }

    #[test]
    fn identical_images_are_stationary_at_zero() {
        for sim in [SimilarityKind::Lncc, SimilarityKind::Mind] {
            let mut cfg = RegistrationConfig::new(sim);
            cfg.weights.lambda2 = 0.0;
            cfg.weights.lambda4 = 0.0;
            let grid = GridSpec::unit([8, 8, 8]);
            let img = synth::blob_volume(grid, 6);
            let pair = PairLevel::new(&img, &img, &cfg, 0);
            let zero = zeros_comps(grid.len());
            let e = pair.forward(&zero, true);
            let g = pair.backward(e, None);
            let norm = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 1e-8, "{sim:?}: {norm}");
        }
    }

    #[test]
    fn self_registration_stays_at_identity() {
        let grid = GridSpec::unit([16, 16, 16]);
        let img = synth::blob_volume(grid, 2);
        for sim in [SimilarityKind::Lncc, SimilarityKind::Mind] {
            let r = register_pair(&img, &img, &small_cfg(sim)).unwrap();
            assert!(r.forward.mean_norm_voxels() <= 0.1);
            for t in &r.loss_trace {
                assert!(t.last().unwrap() <= &t[0]);
            }
        }
    }

    #[test]
    fn traces_are_monotone() {
        let grid = GridSpec::unit([16, 16, 16]);
        let p = synth::known_warp(grid, 2.0, 5);
        let r = register_pair(&p.fixed, &p.moving, &small_cfg(SimilarityKind::Lncc)).unwrap();
        for t in &r.loss_trace {
            for w in t.windows(2) {
                assert!(w[1] <= w[0] + 1e-4);
            }
        }
        assert!(synth::mean_endpoint_error(&r.forward, &p.truth) < synth::mean_endpoint_error(
            &DisplacementField::zeros(grid),
            &p.truth
        ));
    }

    #[test]
    fn result_inverse_is_exp_of_negated_velocity() {
        let grid = GridSpec::unit([16, 16, 16]);
        let p = synth::known_warp(grid, 2.0, 8);
        let r = register_pair(&p.fixed, &p.moving, &small_cfg(SimilarityKind::Mind)).unwrap();
        let inv = crate::transform::exp_velocity(&r.velocity.negated(), 6);
        assert_eq!(inv, r.inverse);
    }

    #[test]
    fn registration_is_deterministic() {
        let grid = GridSpec::unit([16, 16, 16]);
        let p = synth::known_warp(grid, 2.0, 9);
        let cfg = small_cfg(SimilarityKind::Lncc);
        let a = register_pair(&p.fixed, &p.moving, &cfg).unwrap();
        let b = register_pair(&p.fixed, &p.moving, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.forward, b.forward);
    }

    #[test]
    fn vfa_init_starts_closer() {
        let grid = GridSpec::unit([16, 16, 16]);
        let p = synth::known_warp(grid, 2.0, 3);
        let mut cfg = small_cfg(SimilarityKind::Mind);
        cfg.vfa_init = true;
        let r = register_pair(&p.fixed, &p.moving, &cfg).unwrap();
        let e = synth::mean_endpoint_error(&r.forward, &p.truth);
        let e0 = synth::mean_endpoint_error(&DisplacementField::zeros(grid), &p.truth);
        assert!(r.final_ndv == 0.0);
        assert!(e < e0);
    }

    #[test]
    fn grid_mismatch_and_constant_inputs() {
        let a = synth::blob_volume(GridSpec::unit([16, 16, 16]), 1);
        let b = synth::blob_volume(GridSpec::unit([16, 16, 17]), 1);
        let cfg = small_cfg(SimilarityKind::Lncc);
        assert!(matches!(register_pair(&a, &b, &cfg), Err(RegError::GridMismatch(_))));
        let c = Volume::constant(GridSpec::unit([16, 16, 16]), 1.0);
        assert!(matches!(register_pair(&a, &c, &cfg), Err(RegError::ConstantVolume)));
    }
}

