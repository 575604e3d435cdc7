//! Direct integration of the lattice equation on a truncated box.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::disorder::{assemble_H, DisorderError, DisorderRealization};
use crate::field::{reconstruct_u, CoeffField};
use crate::lattice::{ElementaryRegion, LatticeBox};
use crate::spectral::symmetric_eigen;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error("norm drift {drift:e} exceeds 1e-2; retry with a smaller dt (now {dt})")]
    Unstable { drift: f64, dt: f64 },
    #[error("invalid evolution config: {0}")]
    Invalid(String),
    #[error("initial state has {got} entries, box has {want} sites")]
    ShapeMismatch { got: usize, want: usize },
    #[error("box radius {have} too small: need {need} to hold the solution and its tail")]
    BoxTooSmall { have: u32, need: u32 },
    #[error(transparent)]
    Disorder(#[from] DisorderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    /// Strang splitting: exact linear propagator and exact nonlinear phase.
    Split,
    /// Classical fourth-order Runge–Kutta.
    Rk4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionConfig {
    /// Spatial box.
    pub bx: LatticeBox,
    pub eps: f64,
    pub delta: f64,
    pub p: u32,
    pub t_end: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub samples: usize,
    pub checkpoints: usize,
}

impl EvolutionConfig {
    pub fn new(bx: LatticeBox, eps: f64, delta: f64, p: u32, t_end: f64, dt: f64) -> Self {
        EvolutionConfig {
            bx,
            eps,
            delta,
            p,
            t_end,
            dt,
            integrator: Integrator::Split,
            samples: 200,
            checkpoints: 10,
        }
    }

    pub fn validate(&self) -> Result<(), EvolveError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EvolveError::Invalid("dt must be positive".into()));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(EvolveError::Invalid("t_end must be nonnegative".into()));
        }
        if self.samples == 0 {
            return Err(EvolveError::Invalid("samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionReport {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub energies: Vec<f64>,
    /// ‖u‖² on each ℓ∞ shell |j|∞ = r around the box center, per sample.
    pub shells: Vec<Vec<f64>>,
    /// (t, state) at evenly spaced checkpoints, including the final time.
    pub checkpoints: Vec<(f64, Vec<Complex64>)>,
    pub norm_drift: f64,
    pub energy_drift: f64,
    pub final_state: Vec<Complex64>,
}

impl EvolutionReport {
    /// ‖u(t_i)‖² outside the cube of radius R.
    pub fn tail_mass(&self, r: u32, sample: usize) -> f64 {
        self.shells[sample].iter().skip(r as usize + 1).sum()
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::from("t,norm2,energy\n");
        for i in 0..self.times.len() {
            writeln!(s, "{:e},{:e},{:e}", self.times[i], self.norms[i], self.energies[i]).unwrap();
        }
        s
    }
}

/// Linear part εΔ + V on the box with Dirichlet boundary, plus the
/// nonlinearity parameters.
struct System {
    h: DMatrix<f64>,
    delta: f64,
    p: u32,
    shell: Vec<usize>,
}

impl System {
    fn new(cfg: &EvolutionConfig, pot: &DisorderRealization) -> Result<Self, EvolveError> {
        let region = ElementaryRegion::from_box(cfg.bx.clone());
        let op = assemble_H(cfg.eps, pot, &region)?;
        let shell = cfg
            .bx
            .enumerate()
            .iter()
            .map(|j| {
                j.iter()
                    .zip(&cfg.bx.center)
                    .map(|(a, c)| (a - c).unsigned_abs() as usize)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        Ok(System {
            h: op.matrix,
            delta: cfg.delta,
            p: cfg.p,
            shell,
        })
    }

    fn rhs(&self, u: &[Complex64]) -> Vec<Complex64> {
        let n = u.len();
        let mi = Complex64::new(0.0, -1.0);
        (0..n)
            .map(|i| {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    let hik = self.h[(i, k)];
                    if hik != 0.0 {
                        acc += u[k] * hik;
                    }
                }
                acc += u[i] * (self.delta * u[i].norm_sqr().powi(self.p as i32));
                acc * mi
            })
            .collect()
    }

    fn energy(&self, u: &[Complex64]) -> f64 {
        let n = u.len();
        let mut e = 0.0;
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let hik = self.h[(i, k)];
                if hik != 0.0 {
                    acc += u[k] * hik;
                }
            }
            e += (u[i].conj() * acc).re;
            e += self.delta / (self.p as f64 + 1.0) * u[i].norm_sqr().powi(self.p as i32 + 1);
        }
        e
    }

    fn shells(&self, u: &[Complex64]) -> Vec<f64> {
        let rmax = self.shell.iter().copied().max().unwrap_or(0);
        let mut s = vec![0.0; rmax + 1];
        for (i, z) in u.iter().enumerate() {
            s[self.shell[i]] += z.norm_sqr();
        }
        s
    }
}

/// e^{−iHτ} as a dense complex matrix.
fn propagator(h: &DMatrix<f64>, tau: f64) -> Vec<Complex64> {
    let n = h.nrows();
    let (vals, vecs) = symmetric_eigen(h);
    let phases: Vec<Complex64> = vals.iter().map(|&l| Complex64::from_polar(1.0, -l * tau)).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, ph) in phases.iter().enumerate() {
                acc += ph * (vecs[(i, m)] * vecs[(k, m)]);
            }
            out[i * n + k] = acc;
        }
    }
    out
}

fn apply(mat: &[Complex64], u: &[Complex64], out: &mut [Complex64]) {
    let n = u.len();
    for i in 0..n {
        let row = &mat[i * n..(i + 1) * n];
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b) in row.iter().zip(u) {
            acc += a * b;
        }
        out[i] = acc;
    }
}

fn nonlinear_phase(u: &mut [Complex64], delta: f64, p: u32, tau: f64) {
    if delta == 0.0 {
        return;
    }
    for z in u.iter_mut() {
        let w = delta * z.norm_sqr().powi(p as i32);
        *z *= Complex64::from_polar(1.0, -w * tau);
    }
}

fn rk4_step(sys: &System, u: &mut Vec<Complex64>, h: f64) {
    let k1 = sys.rhs(u);
    let shift = |k: &[Complex64], s: f64| -> Vec<Complex64> { u.iter().zip(k).map(|(a, b)| a + b * s).collect() };
    let k2 = sys.rhs(&shift(&k1, h / 2.0));
    let k3 = sys.rhs(&shift(&k2, h / 2.0));
    let k4 = sys.rhs(&shift(&k3, h));
    for i in 0..u.len() {
        u[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
    }
}

/// Integrate i∂ₜu = (εΔ + V)u + δ|u|^{2p}u, calling `observe(t, u)` at each sample.
pub fn integrate_with<F>(
    u0: &[Complex64],
    pot: &DisorderRealization,
    cfg: &EvolutionConfig,
    mut observe: F,
) -> Result<EvolutionReport, EvolveError>
where
    F: FnMut(f64, &[Complex64]),
{
    cfg.validate()?;
    let n = cfg.bx.cardinality();
    if u0.len() != n {
        return Err(EvolveError::ShapeMismatch { got: u0.len(), want: n });
    }
    let sys = System::new(cfg, pot)?;
    let interval = cfg.t_end / cfg.samples as f64;
    let steps_per = if interval > 0.0 { (interval / cfg.dt).ceil().max(1.0) as usize } else { 0 };
    let h = if steps_per > 0 { interval / steps_per as f64 } else { 0.0 };
    let (half, full) = match cfg.integrator {
        Integrator::Split => (propagator(&sys.h, h / 2.0), propagator(&sys.h, h)),
        Integrator::Rk4 => (Vec::new(), Vec::new()),
    };
    let ck_every = if cfg.checkpoints == 0 { usize::MAX } else { (cfg.samples / cfg.checkpoints).max(1) };

    let mut u = u0.to_vec();
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    let mut report = EvolutionReport {
        times: Vec::with_capacity(cfg.samples + 1),
        norms: Vec::with_capacity(cfg.samples + 1),
        energies: Vec::with_capacity(cfg.samples + 1),
        shells: Vec::with_capacity(cfg.samples + 1),
        checkpoints: Vec::new(),
        norm_drift: 0.0,
        energy_drift: 0.0,
        final_state: Vec::new(),
    };
    let record = |t: f64, u: &[Complex64], report: &mut EvolutionReport| {
        report.times.push(t);
        report.norms.push(u.iter().map(|z| z.norm_sqr()).sum());
        report.energies.push(sys.energy(u));
        report.shells.push(sys.shells(u));
    };
    record(0.0, &u, &mut report);
    observe(0.0, &u);
    if cfg.checkpoints > 0 {
        report.checkpoints.push((0.0, u.clone()));
    }
    for s in 1..=cfg.samples {
        match cfg.integrator {
            _ if steps_per == 0 => {}
            Integrator::Split => {
                // Consecutive half steps merge into full linear steps.
                apply(&half, &u, &mut scratch);
                std::mem::swap(&mut u, &mut scratch);
                for k in 0..steps_per {
                    nonlinear_phase(&mut u, sys.delta, sys.p, h);
                    let m = if k + 1 == steps_per { &half } else { &full };
                    apply(m, &u, &mut scratch);
                    std::mem::swap(&mut u, &mut scratch);
                }
            }
            Integrator::Rk4 => {
                for _ in 0..steps_per {
                    rk4_step(&sys, &mut u, h);
                }
            }
        }
        let t = s as f64 * interval;
        record(t, &u, &mut report);
        observe(t, &u);
        let drift = (report.norms[s] - report.norms[0]).abs();
        if !(drift <= 1e-2) {
            return Err(EvolveError::Unstable { drift, dt: h });
        }
        if s % ck_every == 0 || s == cfg.samples {
            if cfg.checkpoints > 0 && report.checkpoints.last().map_or(true, |c| c.0 < t) {
                report.checkpoints.push((t, u.clone()));
            }
        }
    }
    report.norm_drift = report.norms.iter().map(|x| (x - report.norms[0]).abs()).fold(0.0, f64::max);
    report.energy_drift = report
        .energies
        .iter()
        .map(|x| (x - report.energies[0]).abs())
        .fold(0.0, f64::max);
    report.final_state = u;
    Ok(report)
}

pub fn integrate(
    u0: &[Complex64],
    pot: &DisorderRealization,
    cfg: &EvolutionConfig,
) -> Result<EvolutionReport, EvolveError> {
    integrate_with(u0, pot, cfg, |_, _| {})
}

/// The Fourier solution evaluated on the box at time t.
pub fn reconstruct_on_box(y: &CoeffField, omega: &[f64], bx: &LatticeBox, t: f64) -> Vec<Complex64> {
    bx.enumerate().iter().map(|j| reconstruct_u(y, omega, j, t)).collect()
}

/// Box radius needed around `y`: its spatial support plus ⌈3/α⌉.
pub fn required_radius(y: &CoeffField, alpha: f64) -> u32 {
    let nu = y.dims.nu;
    let support = y.bx().radii[nu..].iter().copied().max().unwrap_or(0);
    let margin = if alpha.is_finite() && alpha > 0.0 { (3.0 / alpha).ceil() as u32 } else { 0 };
    support + margin
}

/// sup over samples of ‖reconstruct_u(·,t) − u(t)‖₂ on the box.
pub fn compare_quasiperiodic(
    y: &CoeffField,
    omega: &[f64],
    alpha: f64,
    pot: &DisorderRealization,
    cfg: &EvolutionConfig,
) -> Result<(f64, EvolutionReport), EvolveError> {
    let need = required_radius(y, alpha);
    let have = cfg.bx.radii.iter().copied().min().unwrap_or(0);
    if have < need || cfg.bx.center.iter().any(|&c| c != 0) {
        return Err(EvolveError::BoxTooSmall { have, need });
    }
    let u0 = reconstruct_on_box(y, omega, &cfg.bx, 0.0);
    let mut worst: f64 = 0.0;
    let report = integrate_with(&u0, pot, cfg, |t, u| {
        let exact = reconstruct_on_box(y, omega, &cfg.bx, t);
        let err: f64 = exact.iter().zip(u).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        worst = worst.max(err);
    })?;
    Ok((worst, report))
}

/// (R, max over samples of the tail mass outside radius R).
pub fn localization_profile(report: &EvolutionReport, radii: &[u32]) -> Vec<(u32, f64)> {
    radii
        .iter()
        .map(|&r| {
            let m = (0..report.times.len())
                .map(|s| report.tail_mass(r, s))
                .fold(0.0, f64::max);
            (r, m)
        })
        .collect()
}
