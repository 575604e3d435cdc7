//! Coefficient fields y = (û, v̂) on boxes of Z^{d+ν} and the nonlinear map F.
//!
//! Convolutions are exact: the output box of `x * z` carries the summed
//! frequency radii, so nothing is dropped until a caller restricts the
//! result to a smaller box.

use std::fmt::Write as _;

use num_complex::Complex64;
use thiserror::Error;

use crate::disorder::DisorderRealization;
use crate::lattice::{l1, Dims, LatticeBox, LatticeSite};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("convolution operands live on different spatial grids")]
    GridMismatch,
    #[error("potential does not cover spatial site {0:?}")]
    PotentialTooSmall(Vec<i32>),
    #[error("pinning data malformed: {0}")]
    BadPinning(String),
}

/// One real component (û or v̂) stored densely on a box, n-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub dims: Dims,
    pub bx: LatticeBox,
    pub data: Vec<f64>,
}

impl Component {
    pub fn zeros(dims: Dims, bx: LatticeBox) -> Self {
        assert_eq!(bx.dim(), dims.total());
        let data = vec![0.0; bx.cardinality()];
        Component { dims, bx, data }
    }

    /// δ_{n=0} at every spatial site of `bx`'s grid.
    pub fn unit(dims: Dims, bx: &LatticeBox) -> Self {
        let mut center = bx.center.clone();
        let mut radii = bx.radii.clone();
        for a in 0..dims.nu {
            center[a] = 0;
            radii[a] = 0;
        }
        let b = LatticeBox::new(center, radii);
        let data = vec![1.0; b.cardinality()];
        Component { dims, bx: b, data }
    }

    pub fn get(&self, p: &[i32]) -> f64 {
        self.bx.index_of(p).map_or(0.0, |i| self.data[i])
    }

    pub fn set(&mut self, p: &[i32], v: f64) {
        let i = self
            .bx
            .index_of(p)
            .unwrap_or_else(|| panic!("point {p:?} outside component box"));
        self.data[i] = v;
    }

    pub fn jsize(&self) -> usize {
        (self.dims.nu..self.dims.total())
            .map(|a| self.bx.width(a))
            .product()
    }

    pub fn nsize(&self) -> usize {
        (0..self.dims.nu).map(|a| self.bx.width(a)).product()
    }

    fn same_grid(&self, other: &Component) -> bool {
        self.dims == other.dims
            && (self.dims.nu..self.dims.total()).all(|a| {
                self.bx.center[a] == other.bx.center[a] && self.bx.radii[a] == other.bx.radii[a]
            })
    }

    /// Copy onto another box: restriction and zero extension in one.
    pub fn reshaped(&self, bx: &LatticeBox) -> Component {
        let mut out = Component::zeros(self.dims, bx.clone());
        if self.bx == *bx {
            out.data.copy_from_slice(&self.data);
            return out;
        }
        for (i, p) in self.bx.enumerate().iter().enumerate() {
            if self.data[i] != 0.0 {
                if let Some(k) = bx.index_of(p) {
                    out.data[k] = self.data[i];
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Offset of each n-index of `c`, relative to its own lower corner, in an
/// n-grid with strides `stride`.
fn n_offsets(c: &Component, stride: &[usize]) -> Vec<usize> {
    let nu = c.dims.nu;
    let n_box = LatticeBox::new(c.bx.center[..nu].to_vec(), c.bx.radii[..nu].to_vec());
    (0..n_box.cardinality())
        .map(|i| {
            let n = n_box.point_at(i);
            (0..nu).map(|a| (n[a] - n_box.lo(a)) as usize * stride[a]).sum()
        })
        .collect()
}

/// Exact convolution in n, pointwise in j.
pub fn convolve_n(x: &Component, z: &Component) -> Result<Component, FieldError> {
    if !x.same_grid(z) {
        return Err(FieldError::GridMismatch);
    }
    let dims = x.dims;
    let nu = dims.nu;
    let mut center = x.bx.center.clone();
    let mut radii = x.bx.radii.clone();
    for a in 0..nu {
        center[a] = x.bx.center[a] + z.bx.center[a];
        radii[a] = x.bx.radii[a] + z.bx.radii[a];
    }
    let out_box = LatticeBox::new(center, radii);
    let mut out = Component::zeros(dims, out_box);
    let mut stride = vec![1usize; nu];
    for a in (0..nu.saturating_sub(1)).rev() {
        stride[a] = stride[a + 1] * out.bx.width(a + 1);
    }
    // Output lower corner is lo_x + lo_z, so relative offsets simply add.
    let offx = n_offsets(x, &stride);
    let offz = n_offsets(z, &stride);
    let js = x.jsize();
    let mut xs: Vec<(usize, f64)> = Vec::new();
    let mut zs: Vec<(usize, f64)> = Vec::new();
    for jd in 0..js {
        xs.clear();
        zs.clear();
        for (ix, &o) in offx.iter().enumerate() {
            let v = x.data[ix * js + jd];
            if v != 0.0 {
                xs.push((o, v));
            }
        }
        if xs.is_empty() {
            continue;
        }
        for (iz, &o) in offz.iter().enumerate() {
            let v = z.data[iz * js + jd];
            if v != 0.0 {
                zs.push((o, v));
            }
        }
        for &(ox, xv) in &xs {
            for &(oz, zv) in &zs {
                out.data[(ox + oz) * js + jd] += xv * zv;
            }
        }
    }
    Ok(out)
}

/// w^{*k}, with w^{*0} the n-unit.
pub fn convolve_power(w: &Component, k: u32) -> Result<Component, FieldError> {
    let mut acc = Component::unit(w.dims, &w.bx);
    for _ in 0..k {
        acc = convolve_n(&acc, w)?;
    }
    Ok(acc)
}

/// Resonant set data: spatial sites j_k and amplitudes a_k.
#[derive(Clone, Debug, PartialEq)]
pub struct Pinning {
    pub resonant: Vec<Vec<i32>>,
    pub amplitudes: Vec<f64>,
}

impl Pinning {
    pub fn new(
        dims: Dims,
        resonant: Vec<Vec<i32>>,
        amplitudes: Vec<f64>,
    ) -> Result<Self, FieldError> {
        if resonant.len() != dims.nu || amplitudes.len() != dims.nu {
            return Err(FieldError::BadPinning(format!(
                "need exactly nu={} resonant sites and amplitudes",
                dims.nu
            )));
        }
        if resonant.iter().any(|j| j.len() != dims.d) {
            return Err(FieldError::BadPinning("resonant site of wrong dimension".into()));
        }
        Ok(Pinning {
            resonant,
            amplitudes,
        })
    }

    fn point(dims: Dims, j: &[i32], k: usize, sign: i32) -> Vec<i32> {
        let mut n = vec![0; dims.nu];
        n[k] = sign;
        dims.point(&LatticeSite::new(j.to_vec(), n))
    }

    /// S = {(j_k, −e_k)}.
    pub fn s_points(&self, dims: Dims) -> Vec<Vec<i32>> {
        (0..dims.nu)
            .map(|k| Self::point(dims, &self.resonant[k], k, -1))
            .collect()
    }

    /// −S = {(j_k, e_k)}.
    pub fn minus_s_points(&self, dims: Dims) -> Vec<Vec<i32>> {
        (0..dims.nu)
            .map(|k| Self::point(dims, &self.resonant[k], k, 1))
            .collect()
    }

    pub fn is_pinned(&self, dims: Dims, p: &[i32]) -> bool {
        let n = dims.frequency(p);
        let j = dims.spatial(p);
        if l1(n) != 1 {
            return false;
        }
        (0..dims.nu).any(|k| n[k].abs() == 1 && self.resonant[k] == j)
    }
}

/// y = (û, v̂) on a common box.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffField {
    pub dims: Dims,
    pub p: u32,
    pub pinning: Pinning,
    pub u: Component,
    pub v: Component,
}

impl CoeffField {
    /// The initial field: û = a_k on S, v̂ = a_k on −S, zero elsewhere.
    pub fn initial(dims: Dims, p: u32, pinning: Pinning, bx: LatticeBox) -> Self {
        let mut y = CoeffField {
            dims,
            p,
            u: Component::zeros(dims, bx.clone()),
            v: Component::zeros(dims, bx),
            pinning,
        };
        y.pin();
        y
    }

    pub fn bx(&self) -> &LatticeBox {
        &self.u.bx
    }

    /// Reset all entries on S ∪ −S to their initial values.
    pub fn pin(&mut self) {
        let s = self.pinning.s_points(self.dims);
        let ms = self.pinning.minus_s_points(self.dims);
        for k in 0..self.dims.nu {
            let a = self.pinning.amplitudes[k];
            self.u.set(&s[k], a);
            self.v.set(&ms[k], a);
            self.u.set(&ms[k], 0.0);
            self.v.set(&s[k], 0.0);
        }
    }

    pub fn reshaped(&self, bx: &LatticeBox) -> CoeffField {
        CoeffField {
            dims: self.dims,
            p: self.p,
            pinning: self.pinning.clone(),
            u: self.u.reshaped(bx),
            v: self.v.reshaped(bx),
        }
    }

    pub fn is_pinned(&self, p: &[i32]) -> bool {
        self.pinning.is_pinned(self.dims, p)
    }

    /// max |v̂(j,n) − û(j,−n)| over pairs inside the box.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let nu = self.dims.nu;
        let mut worst: f64 = 0.0;
        for (i, p) in self.bx().enumerate().iter().enumerate() {
            let mut q = p.clone();
            for x in q.iter_mut().take(nu) {
                *x = -*x;
            }
            if self.bx().contains(&q) {
                worst = worst.max((self.v.data[i] - self.u.get(&q)).abs());
            }
        }
        worst
    }

    /// Largest deviation from the pinned values.
    pub fn pinning_error(&self) -> f64 {
        let s = self.pinning.s_points(self.dims);
        let ms = self.pinning.minus_s_points(self.dims);
        (0..self.dims.nu)
            .map(|k| {
                let a = self.pinning.amplitudes[k];
                (self.u.get(&s[k]) - a)
                    .abs()
                    .max((self.v.get(&ms[k]) - a).abs())
                    .max(self.u.get(&ms[k]).abs())
                    .max(self.v.get(&s[k]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Largest |û|, |v̂| off S ∪ −S.
    pub fn max_off_pinned(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (i, p) in self.bx().enumerate().iter().enumerate() {
            if !self.is_pinned(p) {
                m = m.max(self.u.data[i].abs()).max(self.v.data[i].abs());
            }
        }
        m
    }

    /// Text table "j..., n..., uhat, vhat" in site order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let d = self.dims.d;
        let nu = self.dims.nu;
        let head: Vec<String> = (1..=d)
            .map(|a| format!("j{a}"))
            .chain((1..=nu).map(|a| format!("n{a}")))
            .collect();
        writeln!(s, "{},uhat,vhat", head.join(",")).unwrap();
        for (i, p) in self.bx().enumerate().iter().enumerate() {
            let site = self.dims.site(p);
            let coords: Vec<String> = site
                .j
                .iter()
                .chain(site.n.iter())
                .map(|x| x.to_string())
                .collect();
            writeln!(
                s,
                "{},{:?},{:?}",
                coords.join(","),
                self.u.data[i],
                self.v.data[i]
            )
            .unwrap();
        }
        s
    }
}

/// Nonlinear terms (û*v̂)^{*p}*û and (û*v̂)^{*p}*v̂ on their exact boxes.
pub fn nonlinear_terms(y: &CoeffField) -> Result<(Component, Component), FieldError> {
    let w = convolve_n(&y.u, &y.v)?;
    let wp = convolve_power(&w, y.p)?;
    Ok((convolve_n(&wp, &y.u)?, convolve_n(&wp, &y.v)?))
}

/// Both components of F on a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub u: Component,
    pub v: Component,
    pub pinning: Pinning,
}

impl Residual {
    /// ℓ² norm over both components off S ∪ −S.
    pub fn norm_off_pinned(&self) -> f64 {
        let dims = self.u.dims;
        let mut s = 0.0;
        for (i, p) in self.u.bx.enumerate().iter().enumerate() {
            if !self.pinning.is_pinned(dims, p) {
                s += self.u.data[i] * self.u.data[i] + self.v.data[i] * self.v.data[i];
            }
        }
        s.sqrt()
    }

    pub fn max_off_pinned(&self) -> f64 {
        let dims = self.u.dims;
        let mut m: f64 = 0.0;
        for (i, p) in self.u.bx.enumerate().iter().enumerate() {
            if !self.pinning.is_pinned(dims, p) {
                m = m.max(self.u.data[i].abs()).max(self.v.data[i].abs());
            }
        }
        m
    }
}

/// F(y) on y's own box.
#[allow(non_snake_case)]
pub fn eval_F(
    y: &CoeffField,
    omega: &[f64],
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
) -> Result<Residual, FieldError> {
    eval_F_on(y, omega, eps, delta, pot, &y.bx().clone())
}

/// Box of every site where F(y) can be nonzero.
pub fn residual_support(y: &CoeffField) -> LatticeBox {
    let nu = y.dims.nu;
    let mut bx = y.bx().clone();
    let grow = 2 * y.p + 1;
    for a in 0..bx.dim() {
        if a < nu {
            bx.center[a] *= grow as i32;
            bx.radii[a] *= grow;
        } else {
            bx.radii[a] += 1;
        }
    }
    bx
}

/// F(y) evaluated on an arbitrary box (y is zero outside its own box).
#[allow(non_snake_case)]
pub fn eval_F_on(
    y: &CoeffField,
    omega: &[f64],
    eps: f64,
    delta: f64,
    pot: &DisorderRealization,
    bx: &LatticeBox,
) -> Result<Residual, FieldError> {
    let dims = y.dims;
    let (nu_term, nv_term) = if delta != 0.0 {
        nonlinear_terms(y)?
    } else {
        (Component::zeros(dims, bx.clone()), Component::zeros(dims, bx.clone()))
    };
    let mut fu = Component::zeros(dims, bx.clone());
    let mut fv = Component::zeros(dims, bx.clone());
    let mut q = vec![0; dims.total()];
    for (i, p) in bx.enumerate().iter().enumerate() {
        let j = dims.spatial(p);
        let vj = pot
            .value(j)
            .ok_or_else(|| FieldError::PotentialTooSmall(j.to_vec()))?;
        let nw: f64 = dims
            .frequency(p)
            .iter()
            .zip(omega)
            .map(|(&n, &w)| n as f64 * w)
            .sum();
        let (mut lu, mut lv) = (0.0, 0.0);
        if eps != 0.0 {
            q.copy_from_slice(p);
            for a in dims.nu..dims.total() {
                for s in [-1, 1] {
                    q[a] = p[a] + s;
                    lu += y.u.get(&q);
                    lv += y.v.get(&q);
                }
                q[a] = p[a];
            }
        }
        let uy = y.u.get(p);
        let vy = y.v.get(p);
        fu.data[i] = (nw + vj) * uy + eps * lu + delta * nu_term.get(p);
        fv.data[i] = (-nw + vj) * vy + eps * lv + delta * nv_term.get(p);
    }
    Ok(Residual {
        u: fu,
        v: fv,
        pinning: y.pinning.clone(),
    })
}

/// Σ_n û(j, n) e^{i n·ω t}.
pub fn reconstruct_u(y: &CoeffField, omega: &[f64], j: &[i32], t: f64) -> Complex64 {
    let dims = y.dims;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, p) in y.bx().enumerate().iter().enumerate() {
        let c = y.u.data[i];
        if c == 0.0 || dims.spatial(p) != j {
            continue;
        }
        let phase: f64 = dims
            .frequency(p)
            .iter()
            .zip(omega)
            .map(|(&n, &w)| n as f64 * w)
            .sum::<f64>()
            * t;
        acc += Complex64::from_polar(c, phase);
    }
    acc
}

/// Least-squares exponential decay fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub alpha: f64,
    pub max_violation: f64,
}

/// Slope and intercept of the least-squares line through (x, y).
pub fn ls_line(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

pub fn decay_fit(y: &CoeffField) -> DecayFit {
    let dims = y.dims;
    let head = dims.total() as u64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut pts = Vec::new();
    for (i, p) in y.bx().enumerate().iter().enumerate() {
        if y.is_pinned(p) {
            continue;
        }
        let mag = y.u.data[i].abs().max(y.v.data[i].abs());
        if mag > 1e-300 {
            let k = l1(p);
            pts.push((k, mag));
            if k > head {
                xs.push(k as f64);
                ys.push(-mag.ln());
            }
        }
    }
    let alpha = match ls_line(&xs, &ys) {
        Some((slope, _)) => slope,
        None if pts.is_empty() => return DecayFit {
            alpha: f64::INFINITY,
            max_violation: 0.0,
        },
        None => f64::INFINITY,
    };
    let max_violation = if alpha.is_finite() {
        pts.iter()
            .map(|&(k, m)| m * (alpha * k as f64).exp() - 1.0)
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    DecayFit {
        alpha,
        max_violation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::Distribution;

    fn dims11() -> Dims {
        Dims::new(1, 1).unwrap()
    }

    /// Dense reference: out(j, n) = Σ_m x(j, m) z(j, n − m) over both boxes.
    fn dense_convolve(x: &Component, z: &Component, out_box: &LatticeBox) -> Component {
        let dims = x.dims;
        let mut out = Component::zeros(dims, out_box.clone());
        for (i, p) in out_box.enumerate().iter().enumerate() {
            let mut s = 0.0;
            for m in x.bx.enumerate() {
                if dims.spatial(&m) != dims.spatial(p) {
                    continue;
                }
                let mut r = p.clone();
                for a in 0..dims.nu {
                    r[a] = p[a] - m[a];
                }
                s += x.get(&m) * z.get(&r);
            }
            out.data[i] = s;
        }
        out
    }

    #[test]
    fn convolution_identity() {
        let dims = dims11();
        let bx = LatticeBox::centered_cube(2, 2);
        let mut x = Component::zeros(dims, bx.clone());
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let mut z = Component::zeros(dims, bx.clone());
        for j in -2..=2 {
            z.set(&[0, j], 1.0);
        }
        let c = convolve_n(&x, &z).unwrap().reshaped(&bx);
        assert_eq!(c, x);
    }

    #[test]
    fn single_term_product() {
        let dims = dims11();
        let bx = LatticeBox::centered_cube(2, 2);
        let mut x = Component::zeros(dims, bx.clone());
        let mut z = Component::zeros(dims, bx.clone());
        x.set(&[-1, 1], 0.3);
        z.set(&[1, 1], 0.3);
        let c = convolve_n(&x, &z).unwrap();
        for (i, p) in c.bx.enumerate().iter().enumerate() {
            let want = if p == &vec![0, 1] { 0.09 } else { 0.0 };
            assert!((c.data[i] - want).abs() < 1e-17);
        }
    }

    #[test]
    fn matches_dense_oracle_two_freqs() {
        let dims = Dims::new(1, 2).unwrap();
        let bx = LatticeBox::new(vec![0, 1, 0], vec![2, 1, 1]);
        let mut x = Component::zeros(dims, bx.clone());
        let mut z = Component::zeros(dims, bx.clone());
        for i in 0..x.data.len() {
            if i % 3 != 0 {
                x.data[i] = (i as f64 * 0.7).cos();
            }
            if i % 4 != 1 {
                z.data[i] = (i as f64 * 1.3).sin();
            }
        }
        let c = convolve_n(&x, &z).unwrap();
        let d = dense_convolve(&x, &z, &c.bx);
        for (a, b) in c.data.iter().zip(&d.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_mismatch() {
        let dims = dims11();
        let x = Component::zeros(dims, LatticeBox::centered_cube(2, 2));
        let z = Component::zeros(dims, LatticeBox::new(vec![0, 0], vec![2, 3]));
        assert_eq!(convolve_n(&x, &z), Err(FieldError::GridMismatch));
    }

    fn single_site_setup(v: f64) -> (CoeffField, DisorderRealization) {
        let dims = dims11();
        let pin = Pinning::new(dims, vec![vec![0]], vec![0.1]).unwrap();
        let y = CoeffField::initial(dims, 1, pin, LatticeBox::centered_cube(2, 3));
        let mut pot = DisorderRealization::sample(
            Distribution::default(),
            LatticeBox::centered_cube(1, 8),
            5,
        );
        pot.set_override(&[0], v).unwrap();
        (y, pot)
    }

    #[test]
    fn unperturbed_residual_vanishes() {
        let (y, pot) = single_site_setup(0.4);
        let f = eval_F(&y, &[0.4], 0.0, 0.0, &pot).unwrap();
        assert_eq!(f.u.max_abs(), 0.0);
        assert_eq!(f.v.max_abs(), 0.0);
    }

    #[test]
    fn breather_residual_vanishes_off_pinned() {
        let (y, pot) = single_site_setup(0.4);
        let delta = 1e-2;
        let w = 0.4 + delta * 0.01;
        let f = eval_F(&y, &[w], 0.0, delta, &pot).unwrap();
        assert!(f.max_off_pinned() < 1e-17);
        // The Q-equation site carries ω·a − (v + δa²)a = 0 too.
        assert!(f.u.get(&[-1, 0]).abs() < 1e-17);
    }

    #[test]
    fn reconstruct_examples() {
        let (mut y, _) = single_site_setup(0.4);
        let z = reconstruct_u(&y, &[0.7], &[0], 0.0);
        assert_eq!(z, Complex64::new(0.1, 0.0));
        assert_eq!(reconstruct_u(&y, &[0.7], &[1], 0.0), Complex64::new(0.0, 0.0));
        for t in [0.3, 5.0, 100.0] {
            assert!((reconstruct_u(&y, &[0.7], &[0], t).norm() - 0.1).abs() < 1e-15);
        }
        y.u.set(&[2, 0], 0.05);
        let t = 1.7;
        let want = Complex64::from_polar(0.1, -0.7 * t) + Complex64::from_polar(0.05, 1.4 * t);
        assert!((reconstruct_u(&y, &[0.7], &[0], t) - want).norm() < 1e-15);
    }

    #[test]
    fn decay_fit_exact_exponential() {
        let (mut y, _) = single_site_setup(0.4);
        for (i, p) in y.bx().enumerate().iter().enumerate() {
            if !y.is_pinned(p) {
                let v = (-0.7 * l1(p) as f64).exp();
                y.u.data[i] = v;
                y.v.data[i] = v;
            }
        }
        let fit = decay_fit(&y);
        assert!((fit.alpha - 0.7).abs() < 1e-9);
        assert!(fit.max_violation < 1e-12);
        let (y0, _) = single_site_setup(0.4);
        assert_eq!(decay_fit(&y0).alpha, f64::INFINITY);
    }
}
