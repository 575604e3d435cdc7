//! Linearized operators T^θ(y) = D^θ + δS(y) and their inversion.
//!
//! Three inversion strategies are provided: dense LU (split over the
//! connected components of the sparsity pattern), the resolvent-identity
//! covering iteration, and Schur complement reduction onto a bad set.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::disorder::DisorderRealization;
use crate::field::{convolve_n, convolve_power, CoeffField, Component, FieldError};
use crate::lattice::{l1_dist, Dims, ElementaryRegion, LatticeBox, SiteIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinopError {
    #[error("numerically singular operator: pivot {pivot:e} at row {row}")]
    Singular { row: usize, pivot: f64 },
    #[error("potential does not cover spatial site {0:?}")]
    PotentialTooSmall(Vec<i32>),
    #[error("region has {sites} sites, above the dense cap {cap}")]
    TooLarge { sites: usize, cap: usize },
    #[error("covering contraction factor {factor} is not below 1/2")]
    NoContraction { factor: f64 },
    #[error("site {0:?} has no admissible window")]
    PatchMissing(Vec<i32>),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Row-sparse real matrix whose rows carry lattice points.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOp {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub row_sites: Vec<Vec<i32>>,
}

impl SparseOp {
    /// Build from unsorted triplets; duplicates are summed in insertion order.
    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>, row_sites: Vec<Vec<i32>>) -> Self {
        assert_eq!(rows.len(), row_sites.len());
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(r.len());
            for &(c, v) in r.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            *r = merged;
        }
        SparseOp { rows, row_sites }
    }

    pub fn from_dense(m: &DMatrix<f64>, row_sites: Vec<Vec<i32>>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)]))
                    .collect()
            })
            .collect();
        SparseOp { rows, row_sites }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                m[(i, c)] = v;
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .fold(0.0, |m, e| m.max(e.1.abs()))
    }

    /// max column sum.
    pub fn norm_1(&self) -> f64 {
        let mut col = vec![0.0; self.dim()];
        for r in &self.rows {
            for &(c, v) in r {
                col[c] += v.abs();
            }
        }
        col.into_iter().fold(0.0, f64::max)
    }

    pub fn norm_inf(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|e| e.1.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().all(|&(c, v)| self.get(c, i) == v))
    }

    /// Principal submatrix on the given rows (in that order).
    pub fn submatrix(&self, idx: &[usize]) -> SparseOp {
        let mut pos = HashMap::with_capacity(idx.len());
        for (a, &i) in idx.iter().enumerate() {
            pos.insert(i, a);
        }
        let rows = idx
            .iter()
            .map(|&i| {
                self.rows[i]
                    .iter()
                    .filter_map(|&(c, v)| pos.get(&c).map(|&b| (b, v)))
                    .collect()
            })
            .collect();
        SparseOp {
            rows,
            row_sites: idx.iter().map(|&i| self.row_sites[i].clone()).collect(),
        }
    }

    /// Connected components of the symmetrized nonzero pattern, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.dim();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, _) in r {
                let a = find(&mut parent, i);
                let b = find(&mut parent, c);
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    /// Largest ℓ∞ coordinate span among the row sites.
    pub fn diameter(&self) -> u64 {
        let Some(first) = self.row_sites.first() else {
            return 0;
        };
        (0..first.len())
            .map(|a| {
                let lo = self.row_sites.iter().map(|p| p[a]).min().unwrap();
                let hi = self.row_sites.iter().map(|p| p[a]).max().unwrap();
                (hi - lo) as u64
            })
            .max()
            .unwrap_or(0)
    }

    /// Coordinate dump "row-site ; col-site ; value".
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                s.push_str(&format!(
                    "{:?}#{} ; {:?}#{} ; {:?}\n",
                    self.row_sites[i], i, self.row_sites[c], c, v
                ));
            }
        }
        s
    }
}

/// T^θ(y) restricted to a region with S ∪ −S removed. Rows: u-block, then v-block.
#[derive(Clone, Debug)]
pub struct LinearizedOp {
    pub dims: Dims,
    pub region: ElementaryRegion,
    pub sites: SiteIndex,
    pub omega: Vec<f64>,
    pub theta: f64,
    pub eps: f64,
    pub delta: f64,
    pub op: SparseOp,
}

impl LinearizedOp {
    pub fn nsites(&self) -> usize {
        self.sites.len()
    }

    pub fn u_row(&self, p: &[i32]) -> Option<usize> {
        self.sites.get(p)
    }

    pub fn v_row(&self, p: &[i32]) -> Option<usize> {
        self.sites.get(p).map(|i| i + self.nsites())
    }

    /// Row indices of both components at the given sites.
    pub fn rows_of_sites(&self, sites: &[Vec<i32>]) -> Vec<usize> {
        let mut rows: Vec<usize> = sites
            .iter()
            .filter_map(|p| self.sites.get(p))
            .flat_map(|i| [i, i + self.nsites()])
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

/// Convolution kernels of S(y) on their exact boxes.
struct Kernels {
    diag: Component,
    uu: Component,
    vv: Component,
}

fn kernels(y: &CoeffField) -> Result<Kernels, FieldError> {
    let p = y.p;
    let w = convolve_n(&y.u, &y.v)?;
    let wp1 = convolve_power(&w, p - 1)?;
    let wp = convolve_n(&wp1, &w)?;
    let uu = convolve_n(&convolve_n(&wp1, &y.u)?, &y.u)?;
    let vv = convolve_n(&convolve_n(&wp1, &y.v)?, &y.v)?;
    Ok(Kernels { diag: wp, uu, vv })
}

#[allow(non_snake_case)]
pub fn assemble_T(
    y: &CoeffField,
    omega: &[f64],
    theta: f64,
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
) -> Result<LinearizedOp, LinopError> {
    let dims = y.dims;
    let nu = dims.nu;
    let pts: Vec<Vec<i32>> = region
        .enumerate()
        .into_iter()
        .filter(|p| !y.is_pinned(p))
        .collect();
    let sites = SiteIndex::new(pts);
    let m = sites.len();
    let ker = if delta != 0.0 { Some(kernels(y)?) } else { None };
    let pf = y.p as f64;

    // Unknown sites grouped by spatial coordinate.
    let mut by_j: HashMap<Vec<i32>, Vec<usize>> = HashMap::new();
    for (i, p) in sites.points.iter().enumerate() {
        by_j.entry(dims.spatial(p).to_vec()).or_default().push(i);
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 2 * m];
    let mut diff = vec![0; dims.total()];
    for (i, p) in sites.points.iter().enumerate() {
        let j = dims.spatial(p);
        let vj = pot
            .value(j)
            .ok_or_else(|| LinopError::PotentialTooSmall(j.to_vec()))?;
        let nw: f64 = dims
            .frequency(p)
            .iter()
            .zip(omega)
            .map(|(&n, &w)| n as f64 * w)
            .sum::<f64>()
            + theta;
        rows[i].push((i, nw + vj));
        rows[i + m].push((i + m, -nw + vj));
        if eps != 0.0 {
            let mut q = p.clone();
            for a in nu..dims.total() {
                for s in [-1, 1] {
                    q[a] = p[a] + s;
                    if let Some(k) = sites.get(&q) {
                        rows[i].push((k, eps));
                        rows[i + m].push((k + m, eps));
                    }
                }
                q[a] = p[a];
            }
        }
        if let Some(ker) = &ker {
            diff[nu..].copy_from_slice(j);
            for &k in &by_j[j] {
                let q = &sites.points[k];
                for a in 0..nu {
                    diff[a] = p[a] - q[a];
                }
                let w = ker.diag.get(&diff);
                if w != 0.0 {
                    rows[i].push((k, delta * (pf + 1.0) * w));
                    rows[i + m].push((k + m, delta * (pf + 1.0) * w));
                }
                let guu = ker.uu.get(&diff);
                if guu != 0.0 {
                    rows[i].push((k + m, delta * pf * guu));
                }
                let gvv = ker.vv.get(&diff);
                if gvv != 0.0 {
                    rows[i + m].push((k, delta * pf * gvv));
                }
            }
        }
    }
    let mut row_sites = sites.points.clone();
    row_sites.extend(sites.points.iter().cloned());
    Ok(LinearizedOp {
        dims,
        region: region.clone(),
        sites,
        omega: omega.to_vec(),
        theta,
        eps,
        delta,
        op: SparseOp::from_rows(rows, row_sites),
    })
}

/// Summary of an inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseReport {
    pub norm_inv: f64,
    pub offdiag_rate: f64,
    pub max_entry_beyond: f64,
    pub condition: f64,
}

/// Dense inverse of one connected block.
#[derive(Clone, Debug)]
pub struct Block {
    pub idx: Vec<usize>,
    pub inv: DMatrix<f64>,
}

/// Inverse of a block-diagonal (after permutation) operator.
#[derive(Clone, Debug)]
pub struct BlockInverse {
    pub n: usize,
    pub blocks: Vec<Block>,
    locate: Vec<(usize, usize)>,
}

impl BlockInverse {
    fn new(n: usize, blocks: Vec<Block>) -> Self {
        let mut locate = vec![(0, 0); n];
        for (b, blk) in blocks.iter().enumerate() {
            for (l, &i) in blk.idx.iter().enumerate() {
                locate[i] = (b, l);
            }
        }
        BlockInverse { n, blocks, locate }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (bi, li) = self.locate[i];
        let (bj, lj) = self.locate[j];
        if bi != bj {
            0.0
        } else {
            self.blocks[bi].inv[(li, lj)]
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for blk in &self.blocks {
            let xb = DVector::from_iterator(blk.idx.len(), blk.idx.iter().map(|&i| x[i]));
            let yb = &blk.inv * xb;
            for (l, &i) in blk.idx.iter().enumerate() {
                y[i] = yb[l];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for blk in &self.blocks {
            for (a, &i) in blk.idx.iter().enumerate() {
                for (b, &j) in blk.idx.iter().enumerate() {
                    m[(i, j)] = blk.inv[(a, b)];
                }
            }
        }
        m
    }

    pub fn norm_1(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                (0..b.inv.ncols())
                    .map(|c| b.inv.column(c).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn norm_inf(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                (0..b.inv.nrows())
                    .map(|r| b.inv.row(r).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// 2-norm by 50 power iterations on GᵀG, per block.
    pub fn norm_2(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| power_norm(&b.inv, 50))
            .fold(0.0, f64::max)
    }

    /// Decay statistics over entries with site distance above `window`.
    pub fn decay(&self, sites: &[Vec<i32>], window: f64) -> (f64, f64) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut max_beyond: f64 = 0.0;
        for blk in &self.blocks {
            for (a, &i) in blk.idx.iter().enumerate() {
                for (b, &j) in blk.idx.iter().enumerate() {
                    let d = l1_dist(&sites[i], &sites[j]) as f64;
                    if d <= window {
                        continue;
                    }
                    let g = blk.inv[(a, b)].abs();
                    max_beyond = max_beyond.max(g);
                    if g > 1e-300 {
                        xs.push(d);
                        ys.push(-g.ln());
                    }
                }
            }
        }
        (fit_rate(&xs, &ys), max_beyond)
    }
}

/// Least-squares rate; +∞ when no usable data.
pub fn fit_rate(xs: &[f64], ys: &[f64]) -> f64 {
    match crate::field::ls_line(xs, ys) {
        Some((slope, _)) => slope,
        None if xs.is_empty() => f64::INFINITY,
        // All pairs at a single distance: rate through the origin.
        None => {
            let sx: f64 = xs.iter().sum();
            ys.iter().sum::<f64>() / sx
        }
    }
}

pub fn power_norm(g: &DMatrix<f64>, iters: usize) -> f64 {
    let n = g.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i + 1) as f64).sin());
    x /= x.norm();
    let mut est = 0.0;
    for _ in 0..iters {
        let y = g * &x;
        let z = g.tr_mul(&y);
        let nz = z.norm();
        if nz == 0.0 {
            return y.norm();
        }
        est = nz.sqrt();
        x = z / nz;
    }
    est
}

fn pivot_tol(op: &SparseOp) -> f64 {
    (8.0 * f64::EPSILON * op.max_abs()).max(1e-300)
}

fn invert_block(op: &SparseOp, idx: Vec<usize>, tol: f64) -> Result<Block, LinopError> {
    let k = idx.len();
    if k == 1 {
        let d = op.get(idx[0], idx[0]);
        if d.abs() < tol {
            return Err(LinopError::Singular { row: idx[0], pivot: d });
        }
        return Ok(Block {
            idx,
            inv: DMatrix::from_element(1, 1, 1.0 / d),
        });
    }
    let sub = op.submatrix(&idx).to_dense();
    let lu = sub.lu();
    let u = lu.u();
    for r in 0..k {
        if u[(r, r)].abs() < tol {
            return Err(LinopError::Singular {
                row: idx[r],
                pivot: u[(r, r)],
            });
        }
    }
    let inv = lu.try_inverse().ok_or(LinopError::Singular {
        row: idx[0],
        pivot: 0.0,
    })?;
    Ok(Block { idx, inv })
}

/// Inverse without the report.
pub fn factor(op: &SparseOp) -> Result<BlockInverse, LinopError> {
    factor_blocks(op, &op.components())
}

/// Factor with a precomputed partition of the rows into coupled groups.
pub fn factor_blocks(op: &SparseOp, comps: &[Vec<usize>]) -> Result<BlockInverse, LinopError> {
    let tol = pivot_tol(op);
    let blocks: Vec<Block> = comps
        .par_iter()
        .map(|idx| invert_block(op, idx.clone(), tol))
        .collect::<Result<_, _>>()?;
    Ok(BlockInverse::new(op.dim(), blocks))
}

/// Report with the decay window diam/10.
pub fn report(op: &SparseOp, inv: &BlockInverse) -> InverseReport {
    report_with_window(op, inv, op.diameter() as f64 / 10.0)
}

pub fn report_with_window(op: &SparseOp, inv: &BlockInverse, window: f64) -> InverseReport {
    let (rate, beyond) = inv.decay(&op.row_sites, window);
    InverseReport {
        norm_inv: inv.norm_2(),
        offdiag_rate: rate,
        max_entry_beyond: beyond,
        condition: op.norm_1() * inv.norm_1(),
    }
}

pub fn invert_dense(op: &SparseOp) -> Result<(BlockInverse, InverseReport), LinopError> {
    let inv = factor(op)?;
    let rep = report(op, &inv);
    Ok((inv, rep))
}

/// Dense inversion guarded by a site cap (two rows per site).
pub fn invert_dense_capped(
    op: &LinearizedOp,
    dense_cap: usize,
) -> Result<(BlockInverse, InverseReport), LinopError> {
    if op.nsites() > dense_cap {
        return Err(LinopError::TooLarge {
            sites: op.nsites(),
            cap: dense_cap,
        });
    }
    invert_dense(&op.op)
}

pub fn green_decay(op: &SparseOp) -> Result<InverseReport, LinopError> {
    Ok(invert_dense(op)?.1)
}

/// M₀ = ⌈(log N)^{C/2}⌉, at least 1.
pub fn m0_schedule(n: u32, c: f64) -> u32 {
    let l = (n.max(2) as f64).ln();
    (l.powf(c / 2.0).ceil() as u32).max(1)
}

/// Geometry of the covering strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct CoveringPlan {
    /// Inner box B_i (points).
    pub inner: LatticeBox,
    pub m0: u32,
    /// ℓ∞ radius of the patches; below `m0` no patch is admissible.
    pub patch_radius: u32,
}

/// Diagnostics of a covering inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct CoveringReport {
    /// ‖K‖_∞ of the fixed-point map X = G + K X.
    pub contraction: f64,
    /// c in contraction = e^{−c M₀} M₀^{D−1}.
    pub measured_c: f64,
    /// ‖G‖_∞ / (1 − contraction), an ∞-norm bound on T⁻¹.
    pub norm_bound: f64,
    pub windows: usize,
    pub inner_sites: usize,
}

/// X = G + K X, solved by iteration.
#[derive(Clone, Debug)]
pub struct CoveringInverse {
    pub n: usize,
    g: Vec<Vec<(usize, f64)>>,
    k: Vec<Vec<(usize, f64)>>,
    pub report: CoveringReport,
}

impl CoveringInverse {
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let gb: Vec<f64> = self
            .g
            .iter()
            .map(|r| r.iter().map(|&(c, v)| v * b[c]).sum())
            .collect();
        let scale = gb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut x = gb.clone();
        for _ in 0..500 {
            let next: Vec<f64> = self
                .k
                .iter()
                .zip(&gb)
                .map(|(r, g)| g + r.iter().map(|&(c, v)| v * x[c]).sum::<f64>())
                .collect();
            let change = next
                .iter()
                .zip(&x)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            x = next;
            if change <= 1e-17 * scale {
                break;
            }
        }
        x
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        // Row-major storage: the update X ← G + K X combines whole rows.
        let mut g = vec![0.0; n * n];
        for (i, r) in self.g.iter().enumerate() {
            for &(c, v) in r {
                g[i * n + c] = v;
            }
        }
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut x = g.clone();
        for _ in 0..500 {
            let mut next = g.clone();
            for (i, r) in self.k.iter().enumerate() {
                let dst = &mut next[i * n..(i + 1) * n];
                for &(c, v) in r {
                    let src = &x[c * n..(c + 1) * n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += v * s;
                    }
                }
            }
            let change = next
                .iter()
                .zip(&x)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            x = next;
            if change <= 1e-17 * scale {
                break;
            }
        }
        DMatrix::from_row_slice(n, n, &x)
    }
}

fn boundary_distance(k: &[i32], boundary: &[Vec<i32>]) -> u64 {
    boundary
        .iter()
        .map(|b| l1_dist(k, b))
        .min()
        .unwrap_or(u64::MAX)
}

/// Covering inverse of `op` following the window assignment of `plan`.
pub fn invert_covering(
    op: &SparseOp,
    plan: &CoveringPlan,
) -> Result<(CoveringInverse, InverseReport), LinopError> {
    let n = op.dim();
    let mut site_rows: HashMap<Vec<i32>, Vec<usize>> = HashMap::new();
    let mut sites: Vec<Vec<i32>> = Vec::new();
    for (i, p) in op.row_sites.iter().enumerate() {
        let e = site_rows.entry(p.clone()).or_default();
        if e.is_empty() {
            sites.push(p.clone());
        }
        e.push(i);
    }
    let in_ambient = |q: &[i32]| site_rows.contains_key(q);
    let dim = sites.first().map_or(0, |p| p.len());

    // Ambient bounding box, for clamping patch centers.
    let lo: Vec<i32> = (0..dim)
        .map(|a| sites.iter().map(|p| p[a]).min().unwrap())
        .collect();
    let hi: Vec<i32> = (0..dim)
        .map(|a| sites.iter().map(|p| p[a]).max().unwrap())
        .collect();

    // Windows: index 0 is the inner box, the rest are patches keyed by center.
    let mut windows: Vec<LatticeBox> = vec![plan.inner.clone()];
    let mut by_center: HashMap<Vec<i32>, usize> = HashMap::new();
    let mut boundaries: Vec<Option<Vec<Vec<i32>>>> = vec![None];
    let boundary_of = |bx: &LatticeBox| -> Vec<Vec<i32>> {
        let members: Vec<Vec<i32>> = sites.iter().filter(|p| bx.contains(p)).cloned().collect();
        crate::lattice::interior_boundary_by(&members, |q| bx.contains(q), in_ambient)
    };
    boundaries[0] = Some(boundary_of(&windows[0]));
    let mut assign: Vec<usize> = Vec::with_capacity(sites.len());
    let m0 = plan.m0 as u64;
    let r = plan.patch_radius as i32;
    for k in &sites {
        if plan.inner.contains(k)
            && boundary_distance(k, boundaries[0].as_ref().unwrap()) >= m0
        {
            assign.push(0);
            continue;
        }
        let center: Vec<i32> = (0..dim)
            .map(|a| {
                if hi[a] - lo[a] < 2 * r {
                    (lo[a] + hi[a]).div_euclid(2)
                } else {
                    k[a].clamp(lo[a] + r, hi[a] - r)
                }
            })
            .collect();
        let w = *by_center.entry(center.clone()).or_insert_with(|| {
            windows.push(LatticeBox::cube(center, r as u32));
            boundaries.push(None);
            windows.len() - 1
        });
        if boundaries[w].is_none() {
            boundaries[w] = Some(boundary_of(&windows[w]));
        }
        if !windows[w].contains(k) || boundary_distance(k, boundaries[w].as_ref().unwrap()) < m0 {
            return Err(LinopError::PatchMissing(k.clone()));
        }
        assign.push(w);
    }

    // Rows of each window, and the set of windows actually used.
    let mut used = vec![false; windows.len()];
    for &w in &assign {
        used[w] = true;
    }
    let window_rows: Vec<Vec<usize>> = windows
        .iter()
        .enumerate()
        .map(|(w, bx)| {
            if !used[w] {
                return Vec::new();
            }
            let mut rows: Vec<usize> = sites
                .iter()
                .filter(|p| bx.contains(p))
                .flat_map(|p| site_rows[p].iter().copied())
                .collect();
            rows.sort_unstable();
            rows
        })
        .collect();
    let inverses: Vec<Option<BlockInverse>> = window_rows
        .par_iter()
        .enumerate()
        .map(|(w, rows)| {
            if !used[w] {
                return Ok(None);
            }
            factor(&op.submatrix(rows)).map(Some)
        })
        .collect::<Result<_, _>>()?;

    let mut g: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut kmat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut acc = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut member = vec![false; n];
    for (si, k) in sites.iter().enumerate() {
        let w = assign[si];
        let rows = &window_rows[w];
        let inv = inverses[w].as_ref().unwrap();
        for &c in rows {
            member[c] = true;
        }
        let local: HashMap<usize, usize> = rows.iter().enumerate().map(|(l, &c)| (c, l)).collect();
        for &row in &site_rows[k] {
            let lr = local[&row];
            for (lc, &col) in rows.iter().enumerate() {
                let t_inv = inv.get(lr, lc);
                if t_inv == 0.0 {
                    continue;
                }
                g[row].push((col, t_inv));
                for &(c2, t) in &op.rows[col] {
                    if !member[c2] {
                        if acc[c2] == 0.0 {
                            touched.push(c2);
                        }
                        acc[c2] -= t_inv * t;
                    }
                }
            }
            touched.sort_unstable();
            for &c2 in &touched {
                if acc[c2] != 0.0 {
                    kmat[row].push((c2, acc[c2]));
                }
                acc[c2] = 0.0;
            }
            touched.clear();
        }
        for &c in rows {
            member[c] = false;
        }
    }
    let contraction = kmat
        .iter()
        .map(|r| r.iter().map(|e| e.1.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let m0f = plan.m0.max(1) as f64;
    let measured_c = if contraction > 0.0 {
        -(contraction / m0f.powi(dim as i32 - 1)).ln() / m0f
    } else {
        f64::INFINITY
    };
    if contraction >= 0.5 {
        return Err(LinopError::NoContraction {
            factor: contraction,
        });
    }
    let g_norm = g
        .iter()
        .map(|r| r.iter().map(|e| e.1.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let norm_bound = g_norm / (1.0 - contraction);
    let cov = CoveringInverse {
        n,
        g,
        k: kmat,
        report: CoveringReport {
            contraction,
            measured_c,
            norm_bound,
            windows: used.iter().filter(|&&u| u).count(),
            inner_sites: assign.iter().filter(|&&w| w == 0).count(),
        },
    };
    let rep = covering_report(op, &cov);
    Ok((cov, rep))
}

/// Report from a few probe columns (center and extreme sites).
fn covering_report(op: &SparseOp, cov: &CoveringInverse) -> InverseReport {
    let n = op.dim();
    let window = op.diameter() as f64 / 10.0;
    let mut probes: Vec<usize> = vec![0, n / 4, n / 2, (3 * n) / 4, n.saturating_sub(1)];
    probes.sort_unstable();
    probes.dedup();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut beyond: f64 = 0.0;
    for &c in probes.iter().filter(|&&c| c < n) {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = cov.apply(&e);
        for (i, v) in col.iter().enumerate() {
            let d = l1_dist(&op.row_sites[i], &op.row_sites[c]) as f64;
            if d > window {
                beyond = beyond.max(v.abs());
                if v.abs() > 1e-300 {
                    xs.push(d);
                    ys.push(-v.abs().ln());
                }
            }
        }
    }
    InverseReport {
        norm_inv: cov.report.norm_bound,
        offdiag_rate: fit_rate(&xs, &ys),
        max_entry_beyond: beyond,
        condition: op.norm_inf() * cov.report.norm_bound,
    }
}

/// A = T_bb − T_bg T_gg⁻¹ T_gb and the pieces needed to rebuild T⁻¹.
#[derive(Clone, Debug)]
pub struct SchurResult {
    pub a: DMatrix<f64>,
    pub bad: Vec<usize>,
    pub good: Vec<usize>,
    pub good_inverse: BlockInverse,
    pub good_report: InverseReport,
    /// T_gb (good rows, bad columns).
    pub coupling: DMatrix<f64>,
    /// T_bg (bad rows, good columns).
    pub coupling_bg: DMatrix<f64>,
}

impl SchurResult {
    /// Bound κ with ‖T⁻¹‖ ≤ κ‖A⁻¹‖, from ‖G⁻¹‖ and ‖T_gb‖.
    pub fn kappa(&self, a_inv_norm: f64) -> f64 {
        let g = self.good_report.norm_inv;
        let b = self.coupling.norm().max(self.coupling_bg.norm());
        if a_inv_norm == 0.0 {
            return f64::INFINITY;
        }
        (g + (1.0 + g * b).powi(2) * a_inv_norm) / a_inv_norm
    }

    /// Full T⁻¹ from A⁻¹ by the block-inverse formula, in original row order.
    pub fn reconstruct_inverse(&self) -> Result<DMatrix<f64>, LinopError> {
        let nb = self.bad.len();
        let ng = self.good.len();
        let n = nb + ng;
        let a_inv = if nb > 0 {
            self.a.clone().try_inverse().ok_or(LinopError::Singular {
                row: self.bad[0],
                pivot: 0.0,
            })?
        } else {
            DMatrix::zeros(0, 0)
        };
        let gi = self.good_inverse.to_dense();
        let gb = &gi * &self.coupling; // G⁻¹ T_gb
        let bg = &self.coupling_bg * &gi; // T_bg G⁻¹
        let mut out = DMatrix::zeros(n, n);
        let top_right = -(&gb * &a_inv);
        let bottom_left = -(&a_inv * &bg);
        let top_left = &gi + &gb * &a_inv * &bg;
        for (a, &i) in self.good.iter().enumerate() {
            for (b, &j) in self.good.iter().enumerate() {
                out[(i, j)] = top_left[(a, b)];
            }
            for (b, &j) in self.bad.iter().enumerate() {
                out[(i, j)] = top_right[(a, b)];
            }
        }
        for (a, &i) in self.bad.iter().enumerate() {
            for (b, &j) in self.good.iter().enumerate() {
                out[(i, j)] = bottom_left[(a, b)];
            }
            for (b, &j) in self.bad.iter().enumerate() {
                out[(i, j)] = a_inv[(a, b)];
            }
        }
        Ok(out)
    }
}

pub fn schur_reduce(op: &LinearizedOp, bad_sites: &[Vec<i32>]) -> Result<SchurResult, LinopError> {
    schur_reduce_rows(&op.op, &op.rows_of_sites(bad_sites))
}

pub fn schur_reduce_rows(op: &SparseOp, bad_rows: &[usize]) -> Result<SchurResult, LinopError> {
    let n = op.dim();
    let mut is_bad = vec![false; n];
    for &b in bad_rows {
        is_bad[b] = true;
    }
    let bad: Vec<usize> = (0..n).filter(|&i| is_bad[i]).collect();
    let good: Vec<usize> = (0..n).filter(|&i| !is_bad[i]).collect();
    let good_op = op.submatrix(&good);
    let (good_inverse, good_report) = if good.is_empty() {
        (
            BlockInverse::new(0, Vec::new()),
            InverseReport {
                norm_inv: 0.0,
                offdiag_rate: f64::INFINITY,
                max_entry_beyond: 0.0,
                condition: 0.0,
            },
        )
    } else {
        invert_dense(&good_op)?
    };
    let dense = op.to_dense();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| dense[(rows[a], cols[b])])
    };
    let t_bb = pick(&bad, &bad);
    let t_bg = pick(&bad, &good);
    let t_gb = pick(&good, &bad);
    let a = if good.is_empty() {
        t_bb
    } else {
        let gi = good_inverse.to_dense();
        &t_bb - &t_bg * gi * &t_gb
    };
    Ok(SchurResult {
        a,
        bad,
        good,
        good_inverse,
        good_report,
        coupling: t_gb,
        coupling_bg: t_bg,
    })
}

/// Data of the block resolvent estimate ‖G_Λ‖ < 2N²A.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolventBound {
    /// max_x ‖G_{W(x)}‖.
    pub a: f64,
    /// max_x max_{y ∈ ∂_*W(x)} |G_{W(x)}(x, y)|, playing the role of e^{−tN}.
    pub boundary_entry: f64,
    /// Largest ℓ¹ diameter of a window.
    pub n: u64,
    /// 2N²A when 4N²·boundary_entry ≤ 1/2.
    pub bound: Option<f64>,
}

/// Evaluate the block resolvent estimate for windows `window(x)` (intersected
/// with the sites of `op`). Couplings between sites are assumed to have
/// magnitude at most 1 and range 1.
pub fn resolvent_bound<F>(op: &SparseOp, window: F) -> Result<ResolventBound, LinopError>
where
    F: Fn(&[i32]) -> LatticeBox,
{
    let mut site_rows: HashMap<Vec<i32>, Vec<usize>> = HashMap::new();
    for (i, p) in op.row_sites.iter().enumerate() {
        site_rows.entry(p.clone()).or_default().push(i);
    }
    let in_ambient = |q: &[i32]| site_rows.contains_key(q);
    let mut cache: HashMap<LatticeBox, (Vec<usize>, BlockInverse, Vec<Vec<i32>>, f64)> =
        HashMap::new();
    let mut a: f64 = 0.0;
    let mut edge: f64 = 0.0;
    let mut n_diam = 0u64;
    let mut sites: Vec<&Vec<i32>> = site_rows.keys().collect();
    sites.sort();
    for x in sites {
        let bx = window(x);
        if !cache.contains_key(&bx) {
            let members: Vec<Vec<i32>> = op
                .row_sites
                .iter()
                .filter(|p| bx.contains(p))
                .cloned()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let boundary =
                crate::lattice::interior_boundary_by(&members, |q| bx.contains(q), in_ambient);
            let mut rows: Vec<usize> = members
                .iter()
                .flat_map(|p| site_rows[p].iter().copied())
                .collect();
            rows.sort_unstable();
            let inv = factor(&op.submatrix(&rows))?;
            let norm = inv.norm_2();
            cache.insert(bx.clone(), (rows, inv, boundary, norm));
        }
        let (rows, inv, boundary, norm) = &cache[&bx];
        a = a.max(*norm);
        let diam = (0..bx.dim()).map(|k| 2 * bx.radii[k] as u64).sum::<u64>();
        n_diam = n_diam.max(diam);
        let local: HashMap<usize, usize> = rows.iter().enumerate().map(|(l, &r)| (r, l)).collect();
        for &rx in &site_rows[x] {
            for yb in boundary {
                for &ry in &site_rows[yb] {
                    edge = edge.max(inv.get(local[&rx], local[&ry]).abs());
                }
            }
        }
    }
    let nf = n_diam as f64;
    let bound = (4.0 * nf * nf * edge <= 0.5).then_some(2.0 * nf * nf * a);
    Ok(ResolventBound {
        a,
        boundary_entry: edge,
        n: n_diam,
        bound,
    })
}
