//! Random potentials {v_j} and the linear operator H = εΔ + V.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lattice::{neighbors, ElementaryRegion, LatticeBox, SiteIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisorderError {
    #[error("invalid distribution [{lo}, {hi}]")]
    InvalidDistribution { lo: f64, hi: f64 },
    #[error("site {0:?} lies outside the potential box")]
    OutsideBox(Vec<i32>),
    #[error("malformed realization table, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Uniform law on [lo, hi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distribution {
    pub lo: f64,
    pub hi: f64,
}

impl Distribution {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, DisorderError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(DisorderError::InvalidDistribution { lo, hi });
        }
        Ok(Distribution { lo, hi })
    }

    /// ‖g̃‖_∞ of the density.
    pub fn density_sup(&self) -> f64 {
        1.0 / (self.hi - self.lo)
    }

    fn draw(&self, u: f64) -> f64 {
        // lo + 0·u keeps the degenerate law exact.
        let v = self.lo + (self.hi - self.lo) * u;
        v.min(self.hi)
    }
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution { lo: 0.0, hi: 1.0 }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    key.bytes()
        .fold(splitmix(seed), |h, b| splitmix(h ^ b as u64))
}

/// Key of a lattice site under `seed`.
pub fn site_key(seed: u64, j: &[i32]) -> u64 {
    j.iter().fold(splitmix(seed ^ 0x5851_f42d_4c95_7f2d), |h, &c| {
        splitmix(h ^ (c as i64 as u64))
    })
}

/// Uniform [0, 1) variate that depends only on (seed, j).
pub fn site_uniform(seed: u64, j: &[i32]) -> f64 {
    ChaCha8Rng::seed_from_u64(site_key(seed, j)).random::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisorderRealization {
    pub bx: LatticeBox,
    pub seed: u64,
    pub dist: Distribution,
    values: Vec<f64>,
    overrides: BTreeMap<Vec<i32>, f64>,
}

impl DisorderRealization {
    pub fn sample(dist: Distribution, bx: LatticeBox, seed: u64) -> Self {
        let values = bx
            .enumerate()
            .iter()
            .map(|j| dist.draw(site_uniform(seed, j)))
            .collect();
        DisorderRealization {
            bx,
            seed,
            dist,
            values,
            overrides: BTreeMap::new(),
        }
    }

    /// Explicit values on a box; used for constructed instances.
    pub fn from_values(bx: LatticeBox, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), bx.cardinality());
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        DisorderRealization {
            bx,
            seed: 0,
            dist: Distribution { lo, hi },
            overrides: BTreeMap::new(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    pub fn value(&self, j: &[i32]) -> Option<f64> {
        self.bx.index_of(j).map(|i| self.values[i])
    }

    /// Value at a site known to be inside the box.
    pub fn at(&self, j: &[i32]) -> f64 {
        self.value(j)
            .unwrap_or_else(|| panic!("site {j:?} outside potential box"))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn overrides(&self) -> &BTreeMap<Vec<i32>, f64> {
        &self.overrides
    }

    /// Set v_j independently of the generator (resonant-site parameters).
    pub fn set_override(&mut self, j: &[i32], v: f64) -> Result<(), DisorderError> {
        let i = self
            .bx
            .index_of(j)
            .ok_or_else(|| DisorderError::OutsideBox(j.to_vec()))?;
        self.values[i] = v;
        self.overrides.insert(j.to_vec(), v);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let join = |v: &[i32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let radii: Vec<i32> = self.bx.radii.iter().map(|&r| r as i32).collect();
        writeln!(s, "# seed = {}", self.seed).unwrap();
        writeln!(s, "# dist = uniform {:?} {:?}", self.dist.lo, self.dist.hi).unwrap();
        writeln!(s, "# box_center = {}", join(&self.bx.center)).unwrap();
        writeln!(s, "# box_radii = {}", join(&radii)).unwrap();
        for (j, v) in &self.overrides {
            writeln!(s, "# override = {} {:?}", join(j), v).unwrap();
        }
        for (j, v) in self.bx.enumerate().iter().zip(&self.values) {
            writeln!(s, "{} {:?}", join(j), v).unwrap();
        }
        s
    }

    /// Regenerate from the header (seed, dist, box, overrides).
    pub fn from_header(text: &str) -> Result<Self, DisorderError> {
        let h = parse_header(text)?;
        let mut r = DisorderRealization::sample(h.dist, h.bx, h.seed);
        for (j, v) in h.overrides {
            r.set_override(&j, v)?;
        }
        Ok(r)
    }

    /// Reload from the value rows; header supplies the box and metadata.
    pub fn from_table(text: &str) -> Result<Self, DisorderError> {
        let h = parse_header(text)?;
        let mut values = vec![f64::NAN; h.bx.cardinality()];
        let dim = h.bx.dim();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| DisorderError::Parse {
                line: ln + 1,
                msg: msg.to_string(),
            };
            if toks.len() != dim + 1 {
                return Err(err("wrong column count"));
            }
            let j: Vec<i32> = toks[..dim]
                .iter()
                .map(|t| t.parse().map_err(|_| err("bad coordinate")))
                .collect::<Result<_, _>>()?;
            let v: f64 = toks[dim].parse().map_err(|_| err("bad value"))?;
            let i = h.bx.index_of(&j).ok_or_else(|| err("site outside box"))?;
            values[i] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(DisorderError::Parse {
                line: 0,
                msg: "table does not cover the box".into(),
            });
        }
        Ok(DisorderRealization {
            bx: h.bx,
            seed: h.seed,
            dist: h.dist,
            values,
            overrides: h.overrides.into_iter().collect(),
        })
    }
}

struct Header {
    seed: u64,
    dist: Distribution,
    bx: LatticeBox,
    overrides: Vec<(Vec<i32>, f64)>,
}

fn parse_header(text: &str) -> Result<Header, DisorderError> {
    let mut seed = None;
    let mut dist = None;
    let mut center: Option<Vec<i32>> = None;
    let mut radii: Option<Vec<u32>> = None;
    let mut overrides = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else {
            continue;
        };
        let Some((key, val)) = rest.split_once('=') else {
            continue;
        };
        let err = |msg: &str| DisorderError::Parse {
            line: ln + 1,
            msg: format!("{}: {msg}", key.trim()),
        };
        let toks: Vec<&str> = val.split_whitespace().collect();
        match key.trim() {
            "seed" => seed = Some(val.trim().parse::<u64>().map_err(|_| err("bad integer"))?),
            "dist" => {
                if toks.len() != 3 || toks[0] != "uniform" {
                    return Err(err("expected `uniform lo hi`"));
                }
                let lo: f64 = toks[1].parse().map_err(|_| err("bad lo"))?;
                let hi: f64 = toks[2].parse().map_err(|_| err("bad hi"))?;
                dist = Some(Distribution::uniform(lo, hi)?);
            }
            "box_center" => {
                center = Some(
                    toks.iter()
                        .map(|t| t.parse().map_err(|_| err("bad coordinate")))
                        .collect::<Result<_, _>>()?,
                )
            }
            "box_radii" => {
                radii = Some(
                    toks.iter()
                        .map(|t| t.parse().map_err(|_| err("bad radius")))
                        .collect::<Result<_, _>>()?,
                )
            }
            "override" => {
                let (v, j) = toks.split_last().ok_or_else(|| err("empty override"))?;
                let j: Vec<i32> = j
                    .iter()
                    .map(|t| t.parse().map_err(|_| err("bad coordinate")))
                    .collect::<Result<_, _>>()?;
                overrides.push((j, v.parse().map_err(|_| err("bad value"))?));
            }
            _ => {}
        }
    }
    let missing = |k: &str| DisorderError::Parse {
        line: 0,
        msg: format!("missing header key `{k}`"),
    };
    let center = center.ok_or_else(|| missing("box_center"))?;
    let radii = radii.ok_or_else(|| missing("box_radii"))?;
    if center.len() != radii.len() {
        return Err(missing("box_radii of matching length"));
    }
    Ok(Header {
        seed: seed.ok_or_else(|| missing("seed"))?,
        dist: dist.ok_or_else(|| missing("dist"))?,
        bx: LatticeBox::new(center, radii),
        overrides,
    })
}

/// Dense restriction of εΔ + V to a spatial region.
#[derive(Clone, Debug)]
pub struct SpatialOperator {
    pub region: ElementaryRegion,
    pub eps: f64,
    pub sites: SiteIndex,
    pub matrix: DMatrix<f64>,
}

#[allow(non_snake_case)]
pub fn assemble_H(
    eps: f64,
    pot: &DisorderRealization,
    region: &ElementaryRegion,
) -> Result<SpatialOperator, DisorderError> {
    let sites = SiteIndex::new(region.enumerate());
    let n = sites.len();
    let mut m = DMatrix::zeros(n, n);
    for (a, j) in sites.points.iter().enumerate() {
        m[(a, a)] = pot.value(j).ok_or_else(|| DisorderError::OutsideBox(j.clone()))?;
        if eps != 0.0 {
            for q in neighbors(j) {
                if let Some(b) = sites.get(&q) {
                    m[(a, b)] = eps;
                }
            }
        }
    }
    Ok(SpatialOperator {
        region: region.clone(),
        eps,
        sites,
        matrix: m,
    })
}

/// [−2εd + lo, 2εd + hi].
pub fn spectrum_bounds(eps: f64, dist: &Distribution, d: usize) -> (f64, f64) {
    let w = 2.0 * eps * d as f64;
    (dist.lo - w, dist.hi + w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(r: u32) -> LatticeBox {
        LatticeBox::centered_cube(1, r)
    }

    #[test]
    fn degenerate_distribution() {
        let d = Distribution::uniform(0.5, 0.5).unwrap();
        let r = DisorderRealization::sample(d, line(5), 3);
        assert!(r.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn deterministic_and_keyed() {
        let d = Distribution::default();
        let a = DisorderRealization::sample(d, line(5), 11);
        let b = DisorderRealization::sample(d, line(5), 11);
        assert_eq!(a, b);
        let shifted = DisorderRealization::sample(d, LatticeBox::new(vec![3], vec![5]), 11);
        for j in -2..=5 {
            assert_eq!(a.value(&[j]), shifted.value(&[j]));
        }
        let other = DisorderRealization::sample(d, line(5), 12);
        assert_ne!(a.values(), other.values());
    }

    #[test]
    fn law_of_large_numbers() {
        let r = DisorderRealization::sample(Distribution::default(), line(4999), 7);
        let mean = r.values().iter().sum::<f64>() / r.values().len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!(r.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn table_roundtrip() {
        let mut r = DisorderRealization::sample(
            Distribution::uniform(-0.3, 1.7).unwrap(),
            LatticeBox::new(vec![1, -1], vec![2, 3]),
            99,
        );
        r.set_override(&[0, 0], 0.123456789012345).unwrap();
        let text = r.to_table();
        assert_eq!(DisorderRealization::from_header(&text).unwrap(), r);
        assert_eq!(DisorderRealization::from_table(&text).unwrap(), r);
    }

    #[test]
    fn assemble_examples() {
        let pot = DisorderRealization::sample(Distribution::default(), line(3), 1);
        let region = ElementaryRegion::from_box(LatticeBox::centered_cube(1, 1));
        let h0 = assemble_H(0.0, &pot, &region).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { pot.at(&[a as i32 - 1]) } else { 0.0 };
                assert_eq!(h0.matrix[(a, b)], want);
            }
        }
        let h = assemble_H(0.1, &pot, &region).unwrap();
        assert_eq!(h.matrix[(0, 1)], 0.1);
        assert_eq!(h.matrix[(1, 2)], 0.1);
        assert_eq!(h.matrix[(0, 2)], 0.0);
        let big = ElementaryRegion::from_box(LatticeBox::centered_cube(1, 4));
        assert_eq!(
            assemble_H(0.1, &pot, &big).unwrap_err(),
            DisorderError::OutsideBox(vec![-4])
        );
    }

    #[test]
    fn spectrum_bound_examples() {
        let u = Distribution::default();
        let (a, b) = spectrum_bounds(0.01, &u, 1);
        assert!((a + 0.02).abs() < 1e-15 && (b - 1.02).abs() < 1e-15);
        assert_eq!(spectrum_bounds(0.0, &u, 3), (0.0, 1.0));
        let (a, b) = spectrum_bounds(0.05, &u, 2);
        assert!((a + 0.2).abs() < 1e-15 && (b - 1.2).abs() < 1e-15);
    }
}
