//! The `regkit` command line.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! data errors (unreadable or malformed files, mismatched grids, ...).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::augment::{accept_lut, apply_lut, generate_bank, histogram, uniform_histogram};
use crate::error::{RegError, Result};
use crate::io;
use crate::metrics::{dice, hd95, tre, Tre};
use crate::optimizer::{gradient_check, register_group, register_pair, RegistrationConfig, SimilarityKind};
use crate::regularize::group_consistency_loss;
use crate::transform::{compose, invert_displacement, jacobian_det, ndv_metric};
use crate::volume::{normalize_intensity, warp_labels, warp_volume};

#[derive(Parser, Debug)]
#[command(name = "regkit", version, about = "Diffeomorphic 3D registration toolkit")]
struct Cli {
    /// key = value file whose entries act as flags given before the command
    /// line ones.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving image onto a fixed image.
    #[command(args_override_self = true)]
    Register(RegisterArgs),
    /// Jointly register an ordered triplet A, B, C.
    #[command(args_override_self = true)]
    RegisterGroup(GroupArgs),
    /// Resample a volume or label map through a displacement field.
    #[command(args_override_self = true)]
    Warp(WarpArgs),
    /// Fixed-point inverse of a displacement field.
    #[command(args_override_self = true)]
    Invert(InvertArgs),
    /// out(x) = d2(x) + d1(x + d2(x)).
    #[command(args_override_self = true)]
    Compose(ComposeArgs),
    /// Jacobian determinant map and NDV.
    #[command(args_override_self = true)]
    Jacobian(JacobianArgs),
    #[command(subcommand)]
    Metrics(MetricsCommand),
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Finite-difference check of the registration gradient.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sim {
    Ncc,
    Mind,
}

impl From<Sim> for SimilarityKind {
    fn from(s: Sim) -> Self {
        match s {
            Sim::Ncc => SimilarityKind::Lncc,
            Sim::Mind => SimilarityKind::Mind,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct RegOptions {
    #[arg(long, value_enum, default_value = "ncc")]
    sim: Sim,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Iterations per level, coarsest first.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set)]
    iters: Option<Vec<usize>>,
    /// Similarity weight (default 1 for ncc, 10 for mind).
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    l3: Option<f64>,
    #[arg(long)]
    l4: Option<f64>,
    #[arg(long, value_enum, default_value = "on")]
    symmetric: OnOff,
    #[arg(long)]
    vfa_init: bool,
    #[arg(long, default_value_t = 6)]
    exp_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RegOptions {
    fn config(&self) -> Result<RegistrationConfig> {
        let mut cfg = RegistrationConfig::new(self.sim.into());
        cfg.levels = self.levels;
        cfg.iters_per_level = match &self.iters {
            Some(v) => v.clone(),
            None => {
                let d = RegistrationConfig::new(self.sim.into()).iters_per_level;
                // defaults for the finest levels, 100 for any extra coarse ones
                (0..self.levels).map(|k| {
                    let from_finest = self.levels - 1 - k;
                    d.get(d.len().wrapping_sub(1 + from_finest)).copied().unwrap_or(100)
                })
                .collect()
            }
        };
        let w = &mut cfg.weights;
        for (slot, v) in [(&mut w.lambda1, self.l1), (&mut w.lambda2, self.l2), (&mut w.lambda3, self.l3), (&mut w.lambda4, self.l4)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        cfg.symmetric = matches!(self.symmetric, OnOff::On);
        cfg.vfa_init = self.vfa_init;
        cfg.exp_steps = self.exp_steps;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[command(flatten)]
    opts: RegOptions,
    #[arg(long)]
    out_disp: Option<PathBuf>,
    #[arg(long)]
    out_inv: Option<PathBuf>,
    #[arg(long)]
    out_warped: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GroupArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    c: PathBuf,
    #[command(flatten)]
    opts: RegOptions,
    #[arg(long)]
    out_ab: Option<PathBuf>,
    #[arg(long)]
    out_bc: Option<PathBuf>,
    #[arg(long)]
    out_ac: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map (nearest-neighbour).
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    iters: usize,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long)]
    d1: PathBuf,
    #[arg(long)]
    d2: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct JacobianArgs {
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum MetricsCommand {
    #[command(args_override_self = true)]
    Dice {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    #[command(args_override_self = true)]
    Hd95 {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        label: u32,
    },
    #[command(args_override_self = true)]
    Tre {
        #[arg(long)]
        fixed_pts: PathBuf,
        #[arg(long)]
        moving_pts: PathBuf,
        #[arg(long)]
        disp: PathBuf,
    },
    #[command(args_override_self = true)]
    Ndv {
        #[arg(long)]
        disp: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum AugmentCommand {
    /// Generate a bank of accepted LUTs.
    #[command(args_override_self = true)]
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        knots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `uniform` or a volume whose histogram is the reference.
        #[arg(long, default_value = "uniform")]
        ref_hist: String,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remap a volume through a LUT.
    #[command(args_override_self = true)]
    Apply {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rescale the input onto [0, 255] first.
        #[arg(long)]
        normalize: bool,
    },
    /// Report whether a LUT passes the saturation test.
    #[command(args_override_self = true)]
    Check {
        #[arg(long)]
        lut: PathBuf,
        #[arg(long, default_value = "uniform")]
        ref_hist: String,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
    },
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ncc")]
    sim: Sim,
    #[arg(long, default_value_t = 64)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    symmetric: OnOff,
}

/// Six significant digits.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-5..6).contains(&e) {
        format!("{:.*}", (5 - e) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

fn fmt_pct(fraction: f64) -> String {
    format!("{:.6}%", fraction * 100.0)
}

enum Failure {
    Usage(String),
    Data(RegError),
}

impl From<RegError> for Failure {
    fn from(e: RegError) -> Self {
        match e {
            RegError::BadConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(RegError::io("<stdout>", e))
    }
}

/// Number of leading subcommand tokens (1 or 2) in `argv[1..]`.
fn command_depth(argv: &[OsString]) -> usize {
    match argv.get(1).and_then(|a| a.to_str()) {
        Some("metrics" | "augment") => 2,
        _ => 1,
    }
}

fn find_config(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Turns config entries into flags for the selected subcommand.
fn config_flags(argv: &[OsString], entries: &[(String, String)]) -> std::result::Result<Vec<OsString>, String> {
    let depth = command_depth(argv);
    let mut cmd = Cli::command();
    for k in 0..depth {
        let Some(name) = argv.get(1 + k).and_then(|a| a.to_str()) else {
            return Ok(Vec::new());
        };
        let Some(sub) = cmd.find_subcommand(name) else {
            return Ok(Vec::new());
        };
        cmd = sub.clone();
    }
    let mut out = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err("config files cannot include other config files".into());
        }
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("config key `{key}` is not a flag of this command"))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => out.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(format!("config key `{key}` takes true or false")),
            }
        } else {
            out.push(OsString::from(format!("--{key}")));
            out.push(OsString::from(value));
        }
    }
    Ok(out)
}

/// Runs the command line `argv` (program name first), writing reports to
/// `out` and diagnostics to stderr. Returns the exit code.
pub fn run(argv: Vec<OsString>, out: &mut dyn Write) -> i32 {
    let argv = match find_config(&argv) {
        None => argv,
        Some(path) => {
            let entries = match io::read_config(&path) {
                Ok(e) => e,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            };
            match config_flags(&argv, &entries) {
                Ok(flags) => {
                    let at = 1 + command_depth(&argv);
                    let mut full = argv[..at.min(argv.len())].to_vec();
                    full.extend(flags);
                    full.extend(argv.iter().skip(at).cloned());
                    full
                }
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return 1;
                }
            }
        }
    };
    let cli = match Cli::command().try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn ref_hist(spec: &str) -> Result<Vec<f64>> {
    if spec == "uniform" {
        Ok(uniform_histogram())
    } else {
        histogram(&normalize_intensity(&io::read_volume(spec)?)?)
    }
}

fn write_opt(path: &Option<PathBuf>, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    path.as_deref().map_or(Ok(()), f)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Register(a) => {
            let cfg = a.opts.config()?;
            let fixed = io::read_volume(&a.fixed)?;
            let moving = io::read_volume(&a.moving)?;
            let r = register_pair(&fixed, &moving, &cfg)?;
            for (level, t) in r.loss_trace.iter().enumerate() {
                let last = t.last().copied().unwrap_or(f64::NAN);
                writeln!(out, "level {level} iters {} loss {} -> {}", t.len() - 1, fmt6(t[0]), fmt6(last))?;
            }
            writeln!(out, "mean_disp_voxels {}", fmt6(r.forward.mean_norm_voxels()))?;
            writeln!(out, "max_disp_voxels {}", fmt6(r.forward.max_norm_voxels()))?;
            writeln!(out, "ndv {}", fmt_pct(r.final_ndv))?;
            write_opt(&a.out_disp, |p| io::write_displacement(p, &r.forward))?;
            write_opt(&a.out_inv, |p| io::write_displacement(p, &r.inverse))?;
            write_opt(&a.out_warped, |p| io::write_volume(p, &r.warped_moving))?;
        }
        Command::RegisterGroup(a) => {
            let cfg = a.opts.config()?;
            let (va, vb, vc) = (io::read_volume(&a.a)?, io::read_volume(&a.b)?, io::read_volume(&a.c)?);
            let g = register_group(&va, &vb, &vc, &cfg)?;
            for (name, r) in [("ab", &g.ab), ("bc", &g.bc), ("ac", &g.ac)] {
                let last = r.loss_trace.last().and_then(|t| t.last()).copied().unwrap_or(f64::NAN);
                writeln!(out, "{name} loss {} ndv {}", fmt6(last), fmt_pct(r.final_ndv))?;
            }
            let gc = group_consistency_loss(&g.ab.forward, &g.bc.forward, &g.ac.forward)?.value;
            writeln!(out, "gc {}", fmt6(gc))?;
            write_opt(&a.out_ab, |p| io::write_displacement(p, &g.ab.forward))?;
            write_opt(&a.out_bc, |p| io::write_displacement(p, &g.bc.forward))?;
            write_opt(&a.out_ac, |p| io::write_displacement(p, &g.ac.forward))?;
        }
        Command::Warp(a) => {
            let d = io::read_displacement(&a.disp)?;
            if a.labels {
                io::write_labels(&a.out, &warp_labels(&io::read_labels(&a.input)?, &d)?)?;
            } else {
                io::write_volume(&a.out, &warp_volume(&io::read_volume(&a.input)?, &d)?)?;
            }
        }
        Command::Invert(a) => {
            let d = io::read_displacement(&a.disp)?;
            let inv = invert_displacement(&d, a.iters);
            let resid = compose(&d, &inv)?.max_norm_voxels();
            writeln!(out, "residual_max_voxels {}", fmt6(resid))?;
            io::write_displacement(&a.out, &inv)?;
        }
        Command::Compose(a) => {
            let c = compose(&io::read_displacement(&a.d1)?, &io::read_displacement(&a.d2)?)?;
            io::write_displacement(&a.out, &c)?;
        }
        Command::Jacobian(a) => {
            let d = io::read_displacement(&a.disp)?;
            let j = jacobian_det(&d)?;
            let (lo, hi) = j.min_max();
            writeln!(out, "jacobian_min {}", fmt6(lo))?;
            writeln!(out, "jacobian_max {}", fmt6(hi))?;
            writeln!(out, "ndv {}", fmt_pct(ndv_metric(&d)?))?;
            write_opt(&a.out, |p| io::write_volume(p, &j))?;
        }
        Command::Metrics(m) => match m {
            MetricsCommand::Dice { a, b } => {
                let r = dice(&io::read_labels(a)?, &io::read_labels(b)?)?;
                for (label, v) in &r.per_label {
                    writeln!(out, "label {label} {}", fmt6(*v))?;
                }
                match r.mean {
                    Some(m) => writeln!(out, "mean {}", fmt6(m))?,
                    None => writeln!(out, "mean n/a")?,
                }
            }
            MetricsCommand::Hd95 { a, b, label } => {
                let v = hd95(&io::read_labels(a)?, &io::read_labels(b)?, label)?;
                writeln!(out, "hd95 {}", fmt6(v))?;
            }
            MetricsCommand::Tre { fixed_pts, moving_pts, disp } => {
                let r = tre(&io::read_landmarks(fixed_pts)?, &io::read_landmarks(moving_pts)?, &io::read_displacement(disp)?)?;
                match r {
                    Tre::NotApplicable => writeln!(out, "tre n/a")?,
                    Tre::Value { mean, per_landmark } => {
                        for (k, v) in per_landmark.iter().enumerate() {
                            writeln!(out, "landmark {k} {}", fmt6(*v))?;
                        }
                        writeln!(out, "tre {}", fmt6(mean))?;
                    }
                }
            }
            MetricsCommand::Ndv { disp } => {
                writeln!(out, "{}", fmt_pct(ndv_metric(&io::read_displacement(disp)?)?))?;
            }
        },
        Command::Augment(a) => match a {
            AugmentCommand::Gen { n, knots, seed, ref_hist: h, tau, out: dir } => {
                let hist = ref_hist(&h)?;
                let bank = generate_bank(n, seed, knots, &hist, tau)?;
                std::fs::create_dir_all(&dir).map_err(|e| RegError::io(&dir, e))?;
                let width = n.saturating_sub(1).to_string().len().max(4);
                for (k, lut) in bank.luts.iter().enumerate() {
                    io::write_lut(dir.join(format!("lut_{k:0width$}.lut")), lut)?;
                }
                writeln!(out, "accepted {}", bank.luts.len())?;
                writeln!(out, "rejected {}", bank.rejected)?;
            }
            AugmentCommand::Apply { input, lut, out: path, normalize } => {
                let mut vol = io::read_volume(input)?;
                if normalize {
                    vol = normalize_intensity(&vol)?;
                }
                io::write_volume(path, &apply_lut(&vol, &io::read_lut(lut)?)?)?;
            }
            AugmentCommand::Check { lut, ref_hist: h, tau } => {
                let lut = io::read_lut(lut)?;
                writeln!(out, "fixes_endpoints {}", lut.fixes_endpoints())?;
                writeln!(out, "accepted {}", accept_lut(&lut, &ref_hist(&h)?, tau)?)?;
            }
        },
        Command::Gradcheck(a) => {
            let mut cfg = RegistrationConfig::new(a.sim.into());
            cfg.symmetric = matches!(a.symmetric, OnOff::On);
            cfg.seed = a.seed;
            let err = gradient_check(&cfg, a.components, a.seed)?;
            writeln!(out, "max_relative_error {}", fmt6(err))?;
        }
    }
    Ok(())
}
