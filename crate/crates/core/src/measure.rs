//! Bad-θ sets: Diophantine checks, the exact step-0 exclusion set and grid
//! scans of the goodness tests.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::disorder::DisorderRealization;
use crate::field::{CoeffField, FieldError, Pinning};
use crate::lattice::{l1, l1_dist, Dims, ElementaryRegion, LatticeBox};
use crate::linop::{assemble_T, factor_blocks, fit_rate, power_norm, BlockInverse, LinopError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("invalid parameter {key}: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Linop(#[from] LinopError),
}

fn invalid(key: &'static str, msg: impl Into<String>) -> MeasureError {
    MeasureError::Invalid {
        key,
        msg: msg.into(),
    }
}

/// ‖x‖_T: distance to the nearest integer.
pub fn torus_norm(x: f64) -> f64 {
    (x - x.round()).abs()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiophantineParams {
    /// Exponent A.
    pub a: f64,
    pub c: f64,
    /// Range bound N.
    pub n: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiophantineCheck {
    pub ok: bool,
    /// (n, ‖n·ω‖_T, c/|n|^A) with the smallest ratio of the two.
    pub worst: Option<(Vec<i32>, f64, f64)>,
}

/// Exhaustive check of ‖n·ω‖_T ≥ c/|n|^A over n ∈ [−N,N]^ν \ {0}, |n| the ℓ¹ norm.
pub fn check_diophantine(omega: &[f64], params: &DiophantineParams) -> Result<DiophantineCheck, MeasureError> {
    if !(params.a > 0.0) {
        return Err(invalid("A", "must be positive"));
    }
    if !(params.c > 0.0) {
        return Err(invalid("c", "must be positive"));
    }
    if omega.is_empty() {
        return Err(invalid("omega", "must be nonempty"));
    }
    let bx = LatticeBox::centered_cube(omega.len(), params.n);
    let mut ok = true;
    let mut worst: Option<(Vec<i32>, f64, f64)> = None;
    let mut worst_ratio = f64::INFINITY;
    for n in bx.enumerate() {
        let size = l1(&n);
        if size == 0 {
            continue;
        }
        let dot: f64 = n.iter().zip(omega).map(|(&k, w)| k as f64 * w).sum();
        let dist = torus_norm(dot);
        let bound = params.c / (size as f64).powf(params.a);
        if dist < bound {
            ok = false;
        }
        let ratio = dist / bound;
        if ratio < worst_ratio {
            worst_ratio = ratio;
            worst = Some((n, dist, bound));
        }
    }
    Ok(DiophantineCheck { ok, worst })
}

/// Sorted, disjoint closed intervals.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IntervalUnion {
    pub intervals: Vec<(f64, f64)>,
}

impl IntervalUnion {
    /// Exact merge of arbitrary closed intervals.
    pub fn from_intervals(mut raw: Vec<(f64, f64)>) -> Self {
        raw.retain(|(a, b)| a <= b);
        raw.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        IntervalUnion { intervals: out }
    }

    pub fn length(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        let i = self.intervals.partition_point(|iv| iv.1 < x);
        i < self.intervals.len() && self.intervals[i].0 <= x
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step0Exclusion {
    pub union: IntervalUnion,
    /// r = 2 max(e^{−M^β}, (ε+δ)^{1/2}).
    pub radius: f64,
    /// 4(2M+1)^{d+ν} max(e^{−M^β}, (ε+δ)^{1/2}).
    pub bound: f64,
}

/// θ where |θ + n·ω + v_j| ≤ r (u-rows) or |θ + n·ω − v_j| ≤ r (v-rows) for
/// some (j,n) ∈ [−M,M]^{d+ν} \ (S ∪ −S).
pub fn step0_exclusion(
    m: u32,
    beta: f64,
    eps: f64,
    delta: f64,
    omega: &[f64],
    pot: &DisorderRealization,
    pinning: &Pinning,
) -> Result<Step0Exclusion, MeasureError> {
    let nu = omega.len();
    let d = pot.dim();
    let dims = Dims { d, nu };
    let scale = (-(m as f64).powf(beta)).exp().max((eps + delta).sqrt());
    let r = 2.0 * scale;
    let bx = LatticeBox::centered_cube(dims.total(), m);
    let mut raw = Vec::new();
    for p in bx.enumerate() {
        if pinning.is_pinned(dims, &p) {
            continue;
        }
        let j = dims.spatial(&p);
        let v = pot
            .value(j)
            .ok_or_else(|| FieldError::PotentialTooSmall(j.to_vec()))?;
        let nw: f64 = dims.frequency(&p).iter().zip(omega).map(|(&n, w)| n as f64 * w).sum();
        for c in [-nw - v, -nw + v] {
            raw.push((c - r, c + r));
        }
    }
    Ok(Step0Exclusion {
        union: IntervalUnion::from_intervals(raw),
        radius: r,
        bound: 4.0 * ((2 * m + 1) as f64).powi(dims.total() as i32) * scale,
    })
}

/// Symmetric grid {i·step : |i| ≤ K}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaGrid {
    pub half_width: f64,
    pub step: f64,
}

impl ThetaGrid {
    pub fn count(&self) -> usize {
        2 * (self.half_width / self.step).ceil() as usize + 1
    }

    pub fn point(&self, i: usize) -> f64 {
        let k = (self.half_width / self.step).ceil() as i64;
        (i as i64 - k) as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count()).map(|i| self.point(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    /// Scale N: region [−N,N]^{d+ν}.
    pub n: u32,
    pub beta: f64,
    pub gamma: f64,
    /// None: proven-sufficient window at step 1e−4.
    pub grid: Option<ThetaGrid>,
    /// Norm threshold; None means e^{N^β}.
    pub norm_cap: Option<f64>,
    pub dense_cap: usize,
}

impl ScanParams {
    pub fn new(n: u32, beta: f64, gamma: f64) -> Self {
        ScanParams {
            n,
            beta,
            gamma,
            grid: None,
            norm_cap: None,
            dense_cap: 6000,
        }
    }

    pub fn cap(&self) -> f64 {
        self.norm_cap
            .unwrap_or_else(|| (self.n as f64).powf(self.beta).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaScan {
    pub n: u32,
    pub beta: f64,
    pub gamma: f64,
    pub grid: ThetaGrid,
    pub thetas: Vec<f64>,
    /// ‖T^θ⁻¹‖₂, or its upper bound √(‖·‖₁‖·‖∞) when that is below the cap
    /// (+∞ when singular).
    pub norms: Vec<f64>,
    /// Fitted off-diagonal rate (NaN when not evaluated).
    pub rates: Vec<f64>,
    pub bad_mask: Vec<bool>,
    pub measure_estimate: f64,
}

impl ThetaScan {
    /// Number of maximal runs of consecutive bad points.
    pub fn bad_runs(&self) -> usize {
        let mut runs = 0;
        let mut prev = false;
        for &b in &self.bad_mask {
            if b && !prev {
                runs += 1;
            }
            prev = b;
        }
        runs
    }

    pub fn table(&self) -> String {
        let mut s = String::from("theta,norm,rate,bad\n");
        for i in 0..self.thetas.len() {
            writeln!(
                s,
                "{:e},{:e},{:e},{}",
                self.thetas[i], self.norms[i], self.rates[i], self.bad_mask[i] as u8
            )
            .unwrap();
        }
        s
    }
}

/// Half-width beyond which every row of T^θ is diagonally dominant by 1.
pub fn default_half_width(y: &CoeffField, omega: &[f64], eps: f64, delta: f64, pot: &DisorderRealization, n: u32) -> Result<f64, MeasureError> {
    let region = ElementaryRegion::from_box(LatticeBox::centered_cube(y.dims.total(), n));
    let t = assemble_T(y, omega, 0.0, eps, delta, pot, &region)?;
    let mut w: f64 = 0.0;
    for row in &t.op.rows {
        w = w.max(row.iter().map(|&(_, v)| v.abs()).sum::<f64>());
    }
    Ok(w + 1.0)
}

/// Grid scan of the norm and decay tests for T_N^θ(y).
pub fn theta_scan(
    y: &CoeffField,
    omega: &[f64],
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
    params: &ScanParams,
) -> Result<ThetaScan, MeasureError> {
    let dims = y.dims;
    let region = ElementaryRegion::from_box(LatticeBox::centered_cube(dims.total(), params.n));
    let sites = region.cardinality();
    if sites > params.dense_cap {
        return Err(LinopError::TooLarge {
            sites,
            cap: params.dense_cap,
        }
        .into());
    }
    let grid = match params.grid {
        Some(g) => g,
        None => ThetaGrid {
            half_width: default_half_width(y, omega, eps, delta, pot, params.n)?,
            step: 1e-4,
        },
    };
    if !(grid.step > 0.0) || !(grid.half_width >= 0.0) {
        return Err(invalid("grid", "need step > 0 and half_width ≥ 0"));
    }
    let cap = params.cap();
    let window = params.n as f64 / 10.0;
    // The coupling pattern does not depend on θ.
    let t0 = assemble_T(y, omega, 0.0, eps, delta, pot, &region)?;
    let comps = t0.op.components();
    let pairs: Vec<Vec<(usize, usize, f64)>> = comps
        .iter()
        .map(|idx| {
            let mut out = Vec::new();
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    let d = l1_dist(&t0.op.row_sites[i], &t0.op.row_sites[j]) as f64;
                    if d > window {
                        out.push((a, b, d));
                    }
                }
            }
            out
        })
        .collect();
    let thetas = grid.points();
    let evals: Vec<(f64, f64, bool)> = thetas
        .par_iter()
        .map(|&theta| -> Result<(f64, f64, bool), MeasureError> {
            let t = assemble_T(y, omega, theta, eps, delta, pot, &region)?;
            let inv = match factor_blocks(&t.op, &comps) {
                Ok(inv) => inv,
                Err(LinopError::Singular { .. }) => return Ok((f64::INFINITY, f64::NAN, true)),
                Err(e) => return Err(e.into()),
            };
            let norm = certified_norm(&inv, cap);
            if norm >= cap {
                return Ok((norm, f64::NAN, true));
            }
            let rate = block_rate(&inv, &pairs);
            Ok((norm, rate, rate < params.gamma))
        })
        .collect::<Result<_, _>>()?;
    let norms: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let rates: Vec<f64> = evals.iter().map(|e| e.1).collect();
    let bad_mask: Vec<bool> = evals.iter().map(|e| e.2).collect();
    let bad = bad_mask.iter().filter(|&&b| b).count();
    Ok(ThetaScan {
        n: params.n,
        beta: params.beta,
        gamma: params.gamma,
        grid,
        thetas,
        norms,
        rates,
        bad_mask,
        measure_estimate: grid.step * bad as f64,
    })
}

/// ‖G‖₂ per block, replaced by the bound √(‖G‖₁‖G‖∞) when that already
/// clears the cap.
fn certified_norm(inv: &BlockInverse, cap: f64) -> f64 {
    let mut norm: f64 = 0.0;
    for b in &inv.blocks {
        let g = &b.inv;
        let n1 = (0..g.ncols())
            .map(|c| g.column(c).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let ni = (0..g.nrows())
            .map(|r| g.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let upper = (n1 * ni).sqrt();
        norm = norm.max(if upper < cap { upper } else { power_norm(g, 50) });
    }
    norm
}

/// Same fit as `BlockInverse::decay`, over precomputed block pairs.
fn block_rate(inv: &BlockInverse, pairs: &[Vec<(usize, usize, f64)>]) -> f64 {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (blk, ps) in inv.blocks.iter().zip(pairs) {
        for &(a, b, d) in ps {
            let g = blk.inv[(a, b)].abs();
            if g > 1e-300 {
                xs.push(d);
                ys.push(-g.ln());
            }
        }
    }
    fit_rate(&xs, &ys)
}

/// Fitted σ in mes B(N) ≈ C e^{−N^σ}, over σ ∈ (0, 4] by least squares in log scale.
///
/// Returns (σ, ln C) or None with fewer than two positive measures.
pub fn fit_sigma(ns: &[u32], measures: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(measures)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&n, &m)| (n as f64, m.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sse = |s: f64| -> (f64, f64) {
        let c = pts.iter().map(|(n, l)| l + n.powf(s)).sum::<f64>() / pts.len() as f64;
        let e = pts.iter().map(|(n, l)| (l - (c - n.powf(s))).powi(2)).sum();
        (e, c)
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for k in 1..=4000 {
        let s = k as f64 * 1e-3;
        let (e, c) = sse(s);
        if e < best.0 {
            best = (e, s, c);
        }
    }
    Some((best.1, best.2))
}
