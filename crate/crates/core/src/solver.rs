//! Modified Newton iteration on growing boxes, alternated with the explicit
//! frequency update.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::disorder::DisorderRealization;
use crate::field::{
    decay_fit, eval_F, eval_F_on, nonlinear_terms, residual_support, CoeffField, FieldError,
    Pinning, Residual,
};
use crate::lattice::{l1, Dims, ElementaryRegion, LatticeBox};
use crate::linop::{
    assemble_T, invert_covering, invert_dense, m0_schedule, CoveringPlan, InverseReport,
    LinearizedOp, LinopError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("amplitude a_{0} is zero")]
    ZeroAmplitude(usize),
    #[error("invalid solver configuration: {key}: {msg}")]
    InvalidConfig { key: &'static str, msg: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Linop(#[from] LinopError),
}

fn invalid(key: &'static str, msg: impl Into<String>) -> SolverError {
    SolverError::InvalidConfig {
        key,
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub dims: Dims,
    /// Scale base M.
    pub m: u32,
    pub max_stage: u32,
    pub p: u32,
    pub eps: f64,
    pub delta: f64,
    pub amplitudes: Vec<f64>,
    /// Resonant spatial sites j_k.
    pub resonant: Vec<Vec<i32>>,
    pub residual_target: f64,
    pub condition_cap: f64,
    /// Largest region (in sites) inverted densely.
    pub dense_cap: usize,
    /// Cap on the box radius; stages beyond it repeat Newton on the capped box.
    pub max_radius: Option<u32>,
    /// Exponent C of the patch size M₀ = ⌈(log N)^{C/2}⌉.
    pub patch_exponent: f64,
    /// c′ in the check |ω − 𝒱| ≤ c′(ε + δ).
    pub freq_constant: f64,
}

impl SolverConfig {
    /// Default desk instance: d = ν = 1, p = 1, a = 0.1, M = 4, boxes up to 16.
    pub fn desk(eps: f64, delta: f64) -> Self {
        SolverConfig {
            dims: Dims { d: 1, nu: 1 },
            m: 4,
            max_stage: 8,
            p: 1,
            eps,
            delta,
            amplitudes: vec![0.1],
            resonant: vec![vec![0]],
            residual_target: 1e-11,
            condition_cap: 1e12,
            dense_cap: 6000,
            max_radius: Some(16),
            patch_exponent: 4.0,
            freq_constant: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let dims = self.dims;
        if dims.d == 0 || dims.nu == 0 {
            return Err(invalid("dims", "d and nu must be positive"));
        }
        if self.p == 0 {
            return Err(invalid("p", "must be at least 1"));
        }
        if self.m < 2 || self.m <= 2 * self.p {
            return Err(invalid("M", format!("need M ≥ 2 and M > 2p, got M={}", self.m)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", "must be finite and nonnegative"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta", "must be finite and nonnegative"));
        }
        if self.amplitudes.len() != dims.nu {
            return Err(invalid("amplitudes", format!("need {} values", dims.nu)));
        }
        if let Some(k) = self.amplitudes.iter().position(|&a| a == 0.0 || !a.is_finite()) {
            return Err(invalid("amplitudes", format!("a_{k} must be finite and nonzero")));
        }
        if self.amplitudes.iter().map(|a| a.abs()).sum::<f64>() >= 1.0 {
            return Err(invalid("amplitudes", "Σ|a_k| must be below 1"));
        }
        if self.resonant.len() != dims.nu || self.resonant.iter().any(|j| j.len() != dims.d) {
            return Err(invalid("resonant", format!("need {} sites of dimension {}", dims.nu, dims.d)));
        }
        for (a, ja) in self.resonant.iter().enumerate() {
            if self.resonant[..a].contains(ja) {
                return Err(invalid("resonant", "sites must be distinct"));
            }
            if l1(ja) > self.m as u64 {
                return Err(invalid("resonant", "sites must lie within radius M"));
            }
        }
        if !(self.residual_target > 0.0) {
            return Err(invalid("residual_target", "must be positive"));
        }
        if !(self.condition_cap > 1.0) {
            return Err(invalid("condition_cap", "must exceed 1"));
        }
        if self.dense_cap == 0 {
            return Err(invalid("dense_cap", "must be positive"));
        }
        if let Some(r) = self.max_radius {
            if r == 0 {
                return Err(invalid("max_radius", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn pinning(&self) -> Pinning {
        Pinning {
            resonant: self.resonant.clone(),
            amplitudes: self.amplitudes.clone(),
        }
    }

    /// Box radius of stage i: min(M^i, max_radius), at least the resonant radius.
    pub fn stage_radius(&self, i: u32) -> u32 {
        let mut r: u64 = 1;
        for _ in 0..i {
            r = r.saturating_mul(self.m as u64);
        }
        let head = self
            .resonant
            .iter()
            .flat_map(|j| j.iter().map(|x| x.unsigned_abs() as u64))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut r = r.max(head);
        if let Some(cap) = self.max_radius {
            r = r.min(cap as u64);
        }
        r.min(u32::MAX as u64) as u32
    }

    /// Unperturbed frequencies 𝒱 = (v_{j_k}).
    pub fn unperturbed(&self, pot: &DisorderRealization) -> Result<Vec<f64>, SolverError> {
        self.resonant
            .iter()
            .map(|j| {
                pot.value(j)
                    .ok_or_else(|| invalid("resonant", format!("site {j:?} outside potential box")))
            })
            .collect()
    }
}

/// ω_k = ([(εΔ + V)û](j_k, −e_k) + δ[(û*v̂)^{*p}*û](j_k, −e_k)) / a_k.
pub fn q_update(
    y: &CoeffField,
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
) -> Result<Vec<f64>, SolverError> {
    let dims = y.dims;
    if let Some(k) = y.pinning.amplitudes.iter().position(|&a| a == 0.0) {
        return Err(SolverError::ZeroAmplitude(k));
    }
    let nonlin = if delta != 0.0 {
        Some(nonlinear_terms(y)?.0)
    } else {
        None
    };
    let s = y.pinning.s_points(dims);
    let mut omega = Vec::with_capacity(dims.nu);
    for (k, sk) in s.iter().enumerate() {
        let j = dims.spatial(sk);
        let vj = pot
            .value(j)
            .ok_or_else(|| FieldError::PotentialTooSmall(j.to_vec()))?;
        let mut lap = 0.0;
        if eps != 0.0 {
            let mut q = sk.clone();
            for a in dims.nu..dims.total() {
                for sgn in [-1, 1] {
                    q[a] = sk[a] + sgn;
                    lap += y.u.get(&q);
                }
                q[a] = sk[a];
            }
        }
        let a = y.pinning.amplitudes[k];
        let mut rest = eps * lap;
        if let Some(nl) = &nonlin {
            rest += delta * nl.get(sk);
        }
        omega.push(vj * (y.u.get(sk) / a) + rest / a);
    }
    Ok(omega)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SolveStatus {
    Converged,
    Resonant {
        stage: u32,
        condition: f64,
        detail: String,
    },
    Stagnated,
    BudgetExceeded,
}

impl SolveStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "Converged",
            SolveStatus::Resonant { .. } => "Resonant",
            SolveStatus::Stagnated => "Stagnated",
            SolveStatus::BudgetExceeded => "BudgetExceeded",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub stage: u32,
    pub radius: u32,
    pub y: CoeffField,
    pub omega: Vec<f64>,
    pub kappa: f64,
    pub delta_step: f64,
    pub alpha: f64,
    pub reports: Vec<InverseReport>,
}

/// One row of the per-stage table.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: u32,
    pub radius: u32,
    pub kappa: f64,
    pub delta_step: f64,
    pub alpha: f64,
    pub omega_error: f64,
    /// Condition of the operator inverted to leave this stage (0 if none).
    pub condition: f64,
    /// δ_i < √(ε+δ) M^{−(4/3)^i}.
    pub delta_on_schedule: bool,
    /// κ_i < √(ε+δ) M^{−(4/3)^{i+2}}.
    pub kappa_on_schedule: bool,
}

/// Post-convergence checks of the solution form.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub pinning_error: f64,
    pub symmetry_error: f64,
    pub alpha_final: f64,
    pub alpha_stage1: f64,
    pub decay_stable: bool,
    /// Σ_{(j,n)∉S} e^{(α/2)(|n|+|j|)}|û(j,n)|.
    pub weighted_sum: f64,
    pub weighted_ok: bool,
    pub omega_error: f64,
    pub omega_ok: bool,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub state: SolverState,
    pub table: Vec<StageRecord>,
    pub vcal: Vec<f64>,
    pub diagnostics: Option<Diagnostics>,
}

impl SolveOutcome {
    /// Stage table as CSV (no header metadata).
    pub fn stage_table(&self) -> String {
        let mut s = String::from("stage,N,kappa,delta,alpha,omega_error,condition\n");
        for r in &self.table {
            writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.stage, r.radius, r.kappa, r.delta_step, r.alpha, r.omega_error, r.condition
            )
            .unwrap();
        }
        s
    }

    /// Measured exponent b in κ_{i+1} ≈ C κ_i^b over consecutive stages with κ ≤ 1e−3.
    pub fn measured_b(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .table
            .windows(2)
            .filter(|w| w[0].kappa <= 1e-3 && w[0].kappa > 0.0 && w[1].kappa > 0.0)
            .map(|w| (w[0].kappa.ln(), w[1].kappa.ln()))
            .collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        crate::field::ls_line(&xs, &ys).map(|(b, _)| b)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Full-lattice residual norm off S ∪ −S.
pub fn full_residual(
    y: &CoeffField,
    omega: &[f64],
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
) -> Result<Residual, SolverError> {
    let bx = residual_support(y);
    Ok(eval_F_on(y, omega, eps, delta, pot, &bx)?)
}

/// Newton correction Δ = −T⁻¹F on the unknowns of `t`.
fn newton_correction(
    y: &CoeffField,
    omega: &[f64],
    t: &LinearizedOp,
    cfg: &SolverConfig,
    pot: &DisorderRealization,
    inner: &LatticeBox,
) -> Result<(Vec<f64>, InverseReport), SolverError> {
    let f = eval_F(y, omega, cfg.eps, cfg.delta, pot)?;
    let m = t.nsites();
    let mut rhs = vec![0.0; 2 * m];
    for (i, p) in t.sites.points.iter().enumerate() {
        rhs[i] = -f.u.get(p);
        rhs[i + m] = -f.v.get(p);
    }
    if m <= cfg.dense_cap {
        let (inv, rep) = invert_dense(&t.op)?;
        Ok((inv.apply(&rhs), rep))
    } else {
        let n = t.region.base.max_radius();
        let m0 = m0_schedule(n, cfg.patch_exponent);
        let plan = CoveringPlan {
            inner: inner.clone(),
            m0,
            patch_radius: m0,
        };
        let (cov, rep) = invert_covering(&t.op, &plan)?;
        Ok((cov.apply(&rhs), rep))
    }
}

/// Stage-0 state for `cfg`.
pub fn initial_state(cfg: &SolverConfig, pot: &DisorderRealization) -> Result<SolverState, SolverError> {
    let r = cfg.stage_radius(0);
    let bx = LatticeBox::centered_cube(cfg.dims.total(), r);
    let y = CoeffField::initial(cfg.dims, cfg.p, cfg.pinning(), bx);
    Ok(SolverState {
        stage: 0,
        radius: r,
        omega: cfg.unperturbed(pot)?,
        kappa: f64::NAN,
        delta_step: 0.0,
        alpha: f64::INFINITY,
        y,
        reports: Vec::new(),
    })
}

/// One Newton stage: q-update, assemble, solve, update on box `radius`.
pub fn newton_step(
    state: &SolverState,
    pot: &DisorderRealization,
    cfg: &SolverConfig,
    radius: u32,
) -> Result<SolverState, (SolverError, f64)> {
    let omega = q_update(&state.y, cfg.eps, cfg.delta, pot).map_err(|e| (e, f64::NAN))?;
    let bx = LatticeBox::centered_cube(cfg.dims.total(), radius);
    let y = state.y.reshaped(&bx);
    let t = assemble_T(
        &y,
        &omega,
        0.0,
        cfg.eps,
        cfg.delta,
        pot,
        &ElementaryRegion::from_box(bx.clone()),
    )
    .map_err(|e| (e.into(), f64::NAN))?;
    let (dy, rep) = newton_correction(&y, &omega, &t, cfg, pot, state.y.bx())
        .map_err(|e| (e, f64::INFINITY))?;
    if !(rep.condition <= cfg.condition_cap) {
        return Err((
            SolverError::Linop(LinopError::Singular {
                row: 0,
                pivot: 1.0 / rep.condition,
            }),
            rep.condition,
        ));
    }
    let m = t.nsites();
    let mut next = y;
    for (i, p) in t.sites.points.iter().enumerate() {
        next.u.set(p, next.u.get(p) + dy[i]);
        next.v.set(p, next.v.get(p) + dy[i + m]);
    }
    next.pin();
    let mut reports = state.reports.clone();
    reports.push(rep);
    Ok(SolverState {
        stage: state.stage + 1,
        radius,
        omega,
        kappa: f64::NAN,
        delta_step: dy.iter().map(|v| v * v).sum::<f64>().sqrt(),
        alpha: f64::INFINITY,
        y: next,
        reports,
    })
}

pub fn solve(cfg: &SolverConfig, pot: &DisorderRealization) -> Result<SolveOutcome, SolverError> {
    solve_from(cfg, pot, None)
}

/// Solve, optionally warm-starting from a field (re-pinned to `cfg`'s amplitudes).
pub fn solve_from(
    cfg: &SolverConfig,
    pot: &DisorderRealization,
    start: Option<&CoeffField>,
) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let vcal = cfg.unperturbed(pot)?;
    let mut state = initial_state(cfg, pot)?;
    if let Some(y) = start {
        let mut y = y.clone();
        y.pinning = cfg.pinning();
        y.pin();
        state.radius = y.bx().max_radius();
        state.y = y;
    }
    let scale = (cfg.eps + cfg.delta).sqrt();
    let mf = cfg.m as f64;
    let mut table: Vec<StageRecord> = Vec::new();
    let mut last_condition = 0.0;
    let status = loop {
        let i = state.stage;
        state.omega = q_update(&state.y, cfg.eps, cfg.delta, pot)?;
        state.kappa = full_residual(&state.y, &state.omega, cfg.eps, cfg.delta, pot)?.norm_off_pinned();
        state.alpha = decay_fit(&state.y).alpha;
        let ex = (4.0f64 / 3.0).powi(i as i32);
        table.push(StageRecord {
            stage: i,
            radius: state.radius,
            kappa: state.kappa,
            delta_step: state.delta_step,
            alpha: state.alpha,
            omega_error: max_abs_diff(&state.omega, &vcal),
            condition: last_condition,
            delta_on_schedule: state.delta_step < scale * mf.powf(-ex),
            kappa_on_schedule: state.kappa < scale * mf.powf(-ex * 16.0 / 9.0),
        });
        if state.kappa <= cfg.residual_target {
            break SolveStatus::Converged;
        }
        if i >= 2 && state.kappa > 0.9 * table[i as usize - 2].kappa {
            break SolveStatus::Stagnated;
        }
        if i >= cfg.max_stage {
            break SolveStatus::BudgetExceeded;
        }
        let radius = cfg.stage_radius(i + 1).max(state.radius);
        match newton_step(&state, pot, cfg, radius) {
            Ok(next) => {
                last_condition = next.reports.last().map_or(0.0, |r| r.condition);
                state = next;
            }
            Err((SolverError::Linop(e), condition)) => {
                break SolveStatus::Resonant {
                    stage: i,
                    condition,
                    detail: e.to_string(),
                };
            }
            Err((e, _)) => return Err(e),
        }
    };
    let diagnostics = (status == SolveStatus::Converged).then(|| diagnose(cfg, &state, &table, &vcal));
    Ok(SolveOutcome {
        status,
        state,
        table,
        vcal,
        diagnostics,
    })
}

fn diagnose(cfg: &SolverConfig, state: &SolverState, table: &[StageRecord], vcal: &[f64]) -> Diagnostics {
    let y = &state.y;
    let dims = y.dims;
    let alpha_final = state.alpha;
    let alpha_stage1 = table.get(1).map_or(alpha_final, |r| r.alpha);
    let s = y.pinning.s_points(dims);
    let mut weighted = 0.0;
    for (i, p) in y.bx().enumerate().iter().enumerate() {
        let c = y.u.data[i].abs();
        if c == 0.0 || s.contains(p) {
            continue;
        }
        weighted += if alpha_final.is_finite() {
            (0.5 * alpha_final * l1(p) as f64).exp() * c
        } else {
            f64::INFINITY
        };
    }
    let omega_error = max_abs_diff(&state.omega, vcal);
    Diagnostics {
        pinning_error: y.pinning_error(),
        symmetry_error: y.conjugate_symmetry_error(),
        alpha_final,
        alpha_stage1,
        decay_stable: alpha_final >= 0.5 * alpha_stage1,
        weighted_sum: weighted,
        weighted_ok: weighted <= (cfg.eps + cfg.delta).sqrt(),
        omega_error,
        omega_ok: omega_error <= cfg.freq_constant * (cfg.eps + cfg.delta),
    }
}

/// One grid point of a continuation sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub vcal: Vec<f64>,
    pub status: SolveStatus,
    pub omega: Vec<f64>,
}

/// Independent solves over a grid of 𝒱 values (set on the resonant sites).
pub fn continuation_sweep(
    cfg: &SolverConfig,
    pot: &DisorderRealization,
    grid: &[Vec<f64>],
    warm_start: bool,
) -> Result<Vec<SweepPoint>, SolverError> {
    cfg.validate()?;
    let run = |vcal: &Vec<f64>, start: Option<&CoeffField>| -> Result<(SweepPoint, Option<CoeffField>), SolverError> {
        let mut pot = pot.clone();
        for (j, &v) in cfg.resonant.iter().zip(vcal) {
            pot.set_override(j, v)
                .map_err(|_| invalid("resonant", "site outside potential box"))?;
        }
        let out = solve_from(cfg, &pot, start)?;
        let y = (out.status == SolveStatus::Converged).then(|| out.state.y.clone());
        Ok((
            SweepPoint {
                vcal: vcal.clone(),
                status: out.status,
                omega: out.state.omega,
            },
            y,
        ))
    };
    if warm_start {
        let mut out = Vec::with_capacity(grid.len());
        let mut prev: Option<CoeffField> = None;
        for v in grid {
            let (pt, y) = run(v, prev.as_ref())?;
            prev = y.or(prev);
            out.push(pt);
        }
        Ok(out)
    } else {
        grid.par_iter()
            .map(|v| run(v, None).map(|r| r.0))
            .collect()
    }
}

/// Newton iterates for a scalar equation f(x) = 0.
pub fn newton_scalar<F, D>(f: F, df: D, x0: f64, iters: usize) -> Vec<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut xs = vec![x0];
    let mut x = x0;
    for _ in 0..iters {
        x -= f(x) / df(x);
        xs.push(x);
    }
    xs
}
