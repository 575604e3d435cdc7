//! Index spaces for Z^{d+ν}: sites, boxes and elementary regions.
//!
//! Geometry works on plain coordinate vectors ("points"). A lattice site
//! (j, n) is stored as the point `n ++ j`, so plain lexicographic order on
//! points is the n-major site order used throughout the crate.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid dimensions d={d}, nu={nu}: both must be positive")]
    InvalidDims { d: usize, nu: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("region is not contained in the ambient region (site {0:?})")]
    NotContained(Vec<i32>),
}

/// Spatial dimension `d` and frequency dimension `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub nu: usize,
}

impl Dims {
    pub fn new(d: usize, nu: usize) -> Result<Self, LatticeError> {
        if d == 0 || nu == 0 {
            return Err(LatticeError::InvalidDims { d, nu });
        }
        Ok(Dims { d, nu })
    }

    pub fn total(&self) -> usize {
        self.d + self.nu
    }

    /// Point layout of a site: frequency coordinates first.
    pub fn point(&self, site: &LatticeSite) -> Vec<i32> {
        debug_assert_eq!(site.j.len(), self.d);
        debug_assert_eq!(site.n.len(), self.nu);
        let mut p = Vec::with_capacity(self.total());
        p.extend_from_slice(&site.n);
        p.extend_from_slice(&site.j);
        p
    }

    pub fn site(&self, point: &[i32]) -> LatticeSite {
        debug_assert_eq!(point.len(), self.total());
        LatticeSite {
            n: point[..self.nu].to_vec(),
            j: point[self.nu..].to_vec(),
        }
    }

    /// Spatial part of a point.
    pub fn spatial<'a>(&self, point: &'a [i32]) -> &'a [i32] {
        &point[self.nu..]
    }

    /// Frequency part of a point.
    pub fn frequency<'a>(&self, point: &'a [i32]) -> &'a [i32] {
        &point[..self.nu]
    }
}

/// A point (j, n) of Z^{d+ν}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatticeSite {
    pub j: Vec<i32>,
    pub n: Vec<i32>,
}

impl LatticeSite {
    pub fn new(j: Vec<i32>, n: Vec<i32>) -> Self {
        LatticeSite { j, n }
    }

    pub fn l1_norm(&self) -> u64 {
        l1(&self.j) + l1(&self.n)
    }
}

impl PartialOrd for LatticeSite {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LatticeSite {
    fn cmp(&self, other: &Self) -> Ordering {
        self.n.cmp(&other.n).then_with(|| self.j.cmp(&other.j))
    }
}

pub fn l1_norm(s: &LatticeSite) -> u64 {
    s.l1_norm()
}

pub fn l1(p: &[i32]) -> u64 {
    p.iter().map(|&x| x.unsigned_abs() as u64).sum()
}

pub fn l1_dist(a: &[i32], b: &[i32]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as i64 - y as i64).unsigned_abs())
        .sum()
}

pub fn linf_dist(a: &[i32], b: &[i32]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as i64 - y as i64).unsigned_abs())
        .max()
        .unwrap_or(0)
}

/// Hyper-rectangle {x : |x_a − c_a| ≤ r_a}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatticeBox {
    pub center: Vec<i32>,
    pub radii: Vec<u32>,
}

impl LatticeBox {
    pub fn new(center: Vec<i32>, radii: Vec<u32>) -> Self {
        assert_eq!(center.len(), radii.len(), "center/radii length mismatch");
        LatticeBox { center, radii }
    }

    pub fn cube(center: Vec<i32>, r: u32) -> Self {
        let radii = vec![r; center.len()];
        LatticeBox { center, radii }
    }

    pub fn centered_cube(dim: usize, r: u32) -> Self {
        LatticeBox::cube(vec![0; dim], r)
    }

    /// Box in Z^{d+ν} around a site, spatial radius `rj`, frequency radius `rn`.
    pub fn around(dims: Dims, site: &LatticeSite, rj: u32, rn: u32) -> Self {
        let mut radii = vec![rn; dims.nu];
        radii.extend(std::iter::repeat(rj).take(dims.d));
        LatticeBox::new(dims.point(site), radii)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lo(&self, axis: usize) -> i32 {
        self.center[axis] - self.radii[axis] as i32
    }

    pub fn hi(&self, axis: usize) -> i32 {
        self.center[axis] + self.radii[axis] as i32
    }

    pub fn width(&self, axis: usize) -> usize {
        2 * self.radii[axis] as usize + 1
    }

    pub fn max_radius(&self) -> u32 {
        self.radii.iter().copied().max().unwrap_or(0)
    }

    pub fn contains(&self, p: &[i32]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(&self.center)
                .zip(&self.radii)
                .all(|((&x, &c), &r)| (x as i64 - c as i64).unsigned_abs() <= r as u64)
    }

    pub fn contains_box(&self, other: &LatticeBox) -> bool {
        (0..self.dim()).all(|a| other.lo(a) >= self.lo(a) && other.hi(a) <= self.hi(a))
    }

    pub fn cardinality(&self) -> usize {
        (0..self.dim()).map(|a| self.width(a)).product()
    }

    /// Row-major (lexicographic) index of a point.
    pub fn index_of(&self, p: &[i32]) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = 0usize;
        for a in 0..self.dim() {
            idx = idx * self.width(a) + (p[a] - self.lo(a)) as usize;
        }
        Some(idx)
    }

    pub fn point_at(&self, mut idx: usize) -> Vec<i32> {
        let mut p = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let w = self.width(a);
            p[a] = self.lo(a) + (idx % w) as i32;
            idx /= w;
        }
        p
    }

    pub fn enumerate(&self) -> Vec<Vec<i32>> {
        (0..self.cardinality()).map(|i| self.point_at(i)).collect()
    }
}

/// R \ (R + k) for a box R and optional shift k.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ElementaryRegion {
    pub base: LatticeBox,
    pub cut: Option<Vec<i32>>,
}

impl ElementaryRegion {
    pub fn from_box(base: LatticeBox) -> Self {
        ElementaryRegion { base, cut: None }
    }

    pub fn with_cut(base: LatticeBox, shift: Vec<i32>) -> Self {
        assert_eq!(shift.len(), base.dim());
        ElementaryRegion { base, cut: Some(shift) }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn contains(&self, p: &[i32]) -> bool {
        if !self.base.contains(p) {
            return false;
        }
        match &self.cut {
            None => true,
            Some(k) => {
                let back: Vec<i32> = p.iter().zip(k).map(|(&x, &s)| x - s).collect();
                !self.base.contains(&back)
            }
        }
    }

    pub fn enumerate(&self) -> Vec<Vec<i32>> {
        self.base
            .enumerate()
            .into_iter()
            .filter(|p| self.contains(p))
            .collect()
    }

    pub fn cardinality(&self) -> usize {
        match self.cut {
            None => self.base.cardinality(),
            Some(_) => self.enumerate().len(),
        }
    }

    pub fn diameter_bound(&self) -> u64 {
        2 * self.base.max_radius() as u64
    }
}

/// Enumerate a region as lattice sites (n-major order).
pub fn enumerate(dims: Dims, region: &ElementaryRegion) -> Vec<LatticeSite> {
    region.enumerate().iter().map(|p| dims.site(p)).collect()
}

/// Unit ℓ¹ neighbors of a point.
pub fn neighbors(p: &[i32]) -> impl Iterator<Item = Vec<i32>> + '_ {
    (0..p.len()).flat_map(move |a| {
        [-1, 1].into_iter().map(move |s| {
            let mut q = p.to_vec();
            q[a] += s;
            q
        })
    })
}

/// Sites of `w` having an ℓ¹-neighbor in `ambient \ w`.
pub fn interior_boundary_by<W, A>(w_sites: &[Vec<i32>], in_w: W, in_ambient: A) -> Vec<Vec<i32>>
where
    W: Fn(&[i32]) -> bool,
    A: Fn(&[i32]) -> bool,
{
    w_sites
        .iter()
        .filter(|p| neighbors(p).any(|q| in_ambient(&q) && !in_w(&q)))
        .cloned()
        .collect()
}

pub fn interior_boundary(
    region: &ElementaryRegion,
    ambient: &ElementaryRegion,
) -> Result<Vec<Vec<i32>>, LatticeError> {
    if region.dim() != ambient.dim() {
        return Err(LatticeError::DimensionMismatch {
            expected: ambient.dim(),
            got: region.dim(),
        });
    }
    let sites = region.enumerate();
    if let Some(p) = sites.iter().find(|p| !ambient.contains(p)) {
        return Err(LatticeError::NotContained(p.clone()));
    }
    Ok(interior_boundary_by(
        &sites,
        |q| region.contains(q),
        |q| ambient.contains(q),
    ))
}

/// Ordered point list with a reverse index.
#[derive(Clone, Debug, Default)]
pub struct SiteIndex {
    pub points: Vec<Vec<i32>>,
    map: HashMap<Vec<i32>, usize>,
}

impl SiteIndex {
    pub fn new(points: Vec<Vec<i32>>) -> Self {
        let map = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        SiteIndex { points, map }
    }

    pub fn get(&self, p: &[i32]) -> Option<usize> {
        self.map.get(p).copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
