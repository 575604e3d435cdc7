//! Spectral statistics of the linear operator H = εΔ + V on finite regions.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::disorder::{assemble_H, derive_seed, DisorderError, DisorderRealization, Distribution};
use crate::field::ls_line;
use crate::lattice::{l1_dist, ElementaryRegion, SiteIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("region has {sites} sites, above the dense cap {cap}")]
    TooLarge { sites: usize, cap: usize },
    #[error("energy {energy} is within {gap:e} of the spectrum")]
    NotResolvent { energy: f64, gap: f64 },
    #[error("region pair {0} overlaps")]
    Overlap(usize),
    #[error("need at least 100 trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Disorder(#[from] DisorderError),
}

pub const DENSE_EIG_CAP: usize = 4000;

#[derive(Clone, Debug)]
pub struct EigenData {
    pub region: ElementaryRegion,
    pub sites: SiteIndex,
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal columns, matching `values`.
    pub vectors: DMatrix<f64>,
    /// Argmax site of each eigenvector.
    pub centers: Vec<Vec<i32>>,
}

impl EigenData {
    /// max over pairs of ‖Hψ − μψ‖ / max(|μ|, 1).
    pub fn residual(&self, h: &DMatrix<f64>) -> f64 {
        let hv = h * &self.vectors;
        let mut worst: f64 = 0.0;
        for (c, &mu) in self.values.iter().enumerate() {
            let r = (hv.column(c) - self.vectors.column(c) * mu).norm();
            worst = worst.max(r / mu.abs().max(1.0));
        }
        worst
    }

    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        (g - DMatrix::identity(self.values.len(), self.values.len())).amax()
    }

    /// Fitted decay rate of each eigenvector about its center.
    ///
    /// Only vectors whose center is at least `margin` from every face of the
    /// region's bounding box are fitted; entries below `floor`·max are dropped.
    pub fn decay_rates(&self, margin: u32, floor: f64) -> Vec<f64> {
        let bx = &self.region.base;
        let mut out = Vec::new();
        for (c, center) in self.centers.iter().enumerate() {
            let inside = (0..bx.dim()).all(|a| {
                center[a] - bx.lo(a) >= margin as i32 && bx.hi(a) - center[a] >= margin as i32
            });
            if !inside {
                continue;
            }
            let col = self.vectors.column(c);
            let top = col.amax();
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (i, j) in self.sites.points.iter().enumerate() {
                let v = col[i].abs();
                let dist = l1_dist(j, center);
                if dist > 0 && v > floor * top {
                    xs.push(dist as f64);
                    ys.push(-(v / top).ln());
                }
            }
            if let Some((s, _)) = fit_through_origin(&xs, &ys) {
                out.push(s);
            }
        }
        out
    }
}

/// Slope of y = s·x by least squares.
pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    Some((sxy / sxx, 0.0))
}

pub fn eig_region(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
) -> Result<EigenData, SpectralError> {
    eig_region_capped(eps, pot, region, DENSE_EIG_CAP)
}

pub fn eig_region_capped(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
    cap: usize,
) -> Result<EigenData, SpectralError> {
    let n = region.cardinality();
    if n > cap {
        return Err(SpectralError::TooLarge { sites: n, cap });
    }
    let h = assemble_H(eps, pot, region)?;
    let (evals, evecs) = symmetric_eigen(&h.matrix);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| evals[a].total_cmp(&evals[b]));
    let values: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    let mut centers = Vec::with_capacity(n);
    for (c, &i) in order.iter().enumerate() {
        let col = evecs.column(i);
        vectors.set_column(c, &col);
        centers.push(h.sites.points[col.iamax()].clone());
    }
    Ok(EigenData {
        region: region.clone(),
        sites: h.sites,
        values,
        vectors,
        centers,
    })
}

/// Eigenvalues and orthonormal eigenvectors of a symmetric matrix.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let evd = fm
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("symmetric eigensolver failed to converge");
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = (0..n).map(|i| s[i]).collect();
    (values, DMatrix::from_fn(n, n, |i, j| u[(i, j)]))
}

/// (H_Λ − E)⁻¹ with its site index.
pub fn green(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
    energy: f64,
) -> Result<(SiteIndex, DMatrix<f64>), SpectralError> {
    let eig = eig_region(eps, pot, region)?;
    let gap = eig
        .values
        .iter()
        .map(|mu| (mu - energy).abs())
        .fold(f64::INFINITY, f64::min);
    if gap < 1e-12 {
        return Err(SpectralError::NotResolvent { energy, gap });
    }
    let h = assemble_H(eps, pot, region)?;
    let n = h.sites.len();
    let shifted = h.matrix - DMatrix::identity(n, n) * energy;
    let g = shifted
        .lu()
        .try_inverse()
        .ok_or(SpectralError::NotResolvent { energy, gap: 0.0 })?;
    let g = (&g + g.transpose()) * 0.5;
    Ok((h.sites, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularityReport {
    pub energy: f64,
    pub m: f64,
    pub regular: bool,
    /// (j, j′, |G(j,j′)|, e^{−m|j−j′|}) maximizing |G| / bound.
    pub worst_pair: Option<(Vec<i32>, Vec<i32>, f64, f64)>,
}

/// Side length L of the region's bounding box.
fn side(region: &ElementaryRegion) -> u64 {
    let bx = &region.base;
    (0..bx.dim()).map(|a| bx.width(a) as u64 - 1).max().unwrap_or(0)
}

pub fn check_regular(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
    energy: f64,
    m: f64,
) -> Result<RegularityReport, SpectralError> {
    let (sites, g) = green(eps, pot, region, energy)?;
    let l = side(region);
    let bx = &region.base;
    let on_ring = |j: &[i32]| (0..bx.dim()).any(|a| j[a] == bx.lo(a) || j[a] == bx.hi(a));
    let all_pairs = l <= 30;
    let mut regular = true;
    let mut worst: Option<(Vec<i32>, Vec<i32>, f64, f64)> = None;
    let mut worst_log = f64::NEG_INFINITY;
    for (a, ja) in sites.points.iter().enumerate() {
        if !all_pairs && !on_ring(ja) {
            continue;
        }
        for (b, jb) in sites.points.iter().enumerate() {
            let dist = l1_dist(ja, jb);
            if 4 * dist <= l {
                continue;
            }
            let gv = g[(a, b)].abs();
            let log_ratio = gv.ln() + m * dist as f64;
            if log_ratio > 0.0 {
                regular = false;
            }
            if log_ratio > worst_log {
                worst_log = log_ratio;
                worst = Some((ja.clone(), jb.clone(), gv, (-m * dist as f64).exp()));
            }
        }
    }
    Ok(RegularityReport {
        energy,
        m,
        regular,
        worst_pair: worst,
    })
}

/// Fitted decay rate of |G(E; j, j′)| in |j − j′| over pairs beyond L/4.
pub fn green_rate(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
    energy: f64,
) -> Result<f64, SpectralError> {
    let (sites, g) = green(eps, pot, region, energy)?;
    let l = side(region);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (a, ja) in sites.points.iter().enumerate() {
        for (b, jb) in sites.points.iter().enumerate() {
            let dist = l1_dist(ja, jb);
            let gv = g[(a, b)].abs();
            if 4 * dist > l && gv > 0.0 {
                xs.push(dist as f64);
                ys.push(-gv.ln());
            }
        }
    }
    Ok(ls_line(&xs, &ys).map_or(f64::INFINITY, |(s, _)| s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationStats {
    /// dist(σ(H_{Λ(i)}), σ(H_{Λ(j)})) per pair.
    pub gaps: Vec<f64>,
    pub threshold: f64,
    pub violations: usize,
    pub fraction: f64,
}

fn disjoint(a: &ElementaryRegion, b: &ElementaryRegion) -> bool {
    let (small, big) = if a.cardinality() <= b.cardinality() { (a, b) } else { (b, a) };
    small.enumerate().iter().all(|j| !big.contains(j))
}

fn spectral_gap(a: &[f64], b: &[f64]) -> f64 {
    // Both ascending: merge walk.
    let (mut i, mut k, mut best) = (0, 0, f64::INFINITY);
    while i < a.len() && k < b.len() {
        best = best.min((a[i] - b[k]).abs());
        if a[i] < b[k] {
            i += 1;
        } else {
            k += 1;
        }
    }
    best
}

/// Pairwise spectral distances against the threshold e^{−L^β}.
pub fn separation_stat(
    eps: f64,
    pot: &DisorderRealization,
    pairs: &[(ElementaryRegion, ElementaryRegion)],
    beta: f64,
) -> Result<SeparationStats, SpectralError> {
    let mut gaps = Vec::with_capacity(pairs.len());
    let mut violations = 0;
    let mut threshold = f64::INFINITY;
    for (i, (a, b)) in pairs.iter().enumerate() {
        if !disjoint(a, b) {
            return Err(SpectralError::Overlap(i));
        }
        let ea = eig_region(eps, pot, a)?;
        let eb = eig_region(eps, pot, b)?;
        let gap = spectral_gap(&ea.values, &eb.values);
        let l = side(a).max(side(b)) as f64;
        let t = (-l.powf(beta)).exp();
        threshold = threshold.min(t);
        if gap <= t {
            violations += 1;
        }
        gaps.push(gap);
    }
    let fraction = if pairs.is_empty() {
        0.0
    } else {
        violations as f64 / pairs.len() as f64
    };
    Ok(SeparationStats {
        gaps,
        threshold,
        violations,
        fraction,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WegnerStats {
    pub kappas: Vec<f64>,
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    pub trials: usize,
    /// Least-squares slope of Prob against κ through the origin.
    pub slope: f64,
    /// 2|S|‖g‖_∞ (C = 2 for the one-site law).
    pub bound_slope: f64,
}

impl WegnerStats {
    /// Binomial standard deviation of each estimate.
    pub fn sigma(&self, i: usize) -> f64 {
        let p = self.probs[i];
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Empirical Prob{dist(E, σ(H_S)) ≤ κ} over independent realizations on S.
pub fn wegner_stat(
    eps: f64,
    dist: &Distribution,
    region: &ElementaryRegion,
    energy: f64,
    kappas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<WegnerStats, SpectralError> {
    if trials < 100 {
        return Err(SpectralError::TooFewTrials(trials));
    }
    let bx = region.base.clone();
    let dists: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<f64, SpectralError> {
            let s = derive_seed(seed, &format!("wegner/{t}"));
            let pot = DisorderRealization::sample(*dist, bx.clone(), s);
            let e = eig_region(eps, &pot, region)?;
            Ok(e
                .values
                .iter()
                .map(|mu| (mu - energy).abs())
                .fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> = kappas
        .iter()
        .map(|&k| dists.iter().filter(|&&d| d <= k).count())
        .collect();
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let slope = fit_through_origin(kappas, &probs).map_or(0.0, |s| s.0);
    Ok(WegnerStats {
        kappas: kappas.to_vec(),
        counts,
        probs,
        trials,
        slope,
        bound_slope: 2.0 * region.cardinality() as f64 * dist.density_sup(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationBand {
    /// |i − i′| in the ℓ¹ metric on (n, center).
    pub distance: u64,
    pub count: usize,
    pub median: f64,
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Separation117 {
    pub bands: Vec<SeparationBand>,
    /// Smallest distance from which every band median is at least 10.
    pub cutoff: Option<u64>,
}

/// Ratios |λ_i − λ_{i′}| / |K(i,i′)| for λ_i = n·ω + μ over n ∈ [−n_radius, n_radius]^ν.
///
/// K(i,i′) = Σ_ℓ φ_i(ℓ) e^{−chi_rate·|ℓ|} φ_{i′}(ℓ); pairs with K = 0 give +∞.
pub fn separation_1_17(
    eps: f64,
    pot: &DisorderRealization,
    omega: &[f64],
    region: &ElementaryRegion,
    n_radius: u32,
    chi_rate: f64,
) -> Result<Separation117, SpectralError> {
    let eig = eig_region(eps, pot, region)?;
    let nvec = eig.values.len();
    let chi: Vec<f64> = eig
        .sites
        .points
        .iter()
        .map(|l| (-chi_rate * crate::lattice::l1(l) as f64).exp())
        .collect();
    let mut kmat = DMatrix::zeros(nvec, nvec);
    for a in 0..nvec {
        for b in a..nvec {
            let mut s = 0.0;
            for (i, c) in chi.iter().enumerate() {
                s += eig.vectors[(i, a)] * c * eig.vectors[(i, b)];
            }
            kmat[(a, b)] = s;
            kmat[(b, a)] = s;
        }
    }
    let nu = omega.len();
    let nbox = crate::lattice::LatticeBox::centered_cube(nu, n_radius);
    let ns = nbox.enumerate();
    let l = side(region) + 2 * n_radius as u64 * nu as u64;
    let mut by_band: Vec<Vec<f64>> = vec![Vec::new(); l as usize + 1];
    let label = |n: &[i32], c: usize| -> Vec<i32> {
        let mut v = n.to_vec();
        v.extend_from_slice(&eig.centers[c]);
        v
    };
    for (ia, na) in ns.iter().enumerate() {
        let wa: f64 = na.iter().zip(omega).map(|(&n, w)| n as f64 * w).sum();
        for a in 0..nvec {
            let la = wa + eig.values[a];
            let pa = label(na, a);
            for (ib, nb) in ns.iter().enumerate() {
                let wb: f64 = nb.iter().zip(omega).map(|(&n, w)| n as f64 * w).sum();
                for b in 0..nvec {
                    if (ib, b) <= (ia, a) {
                        continue;
                    }
                    let dist = l1_dist(&pa, &label(nb, b));
                    if dist == 0 || dist > l {
                        continue;
                    }
                    let k = kmat[(a, b)].abs();
                    let gap = (la - wb - eig.values[b]).abs();
                    let ratio = if k == 0.0 { f64::INFINITY } else { gap / k };
                    by_band[dist as usize].push(ratio);
                }
            }
        }
    }
    let mut bands = Vec::new();
    for (dist, mut rs) in by_band.into_iter().enumerate() {
        if rs.is_empty() {
            continue;
        }
        rs.sort_by(f64::total_cmp);
        bands.push(SeparationBand {
            distance: dist as u64,
            count: rs.len(),
            median: rs[rs.len() / 2],
            min: rs[0],
        });
    }
    let mut cutoff = None;
    for band in bands.iter().rev() {
        if band.median >= 10.0 {
            cutoff = Some(band.distance);
        } else {
            break;
        }
    }
    Ok(Separation117 { bands, cutoff })
}
