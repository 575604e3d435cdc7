#![allow(dead_code)]

use dnls_core::disorder::{DisorderRealization, Distribution};
use dnls_core::field::{CoeffField, Pinning};
use dnls_core::lattice::{Dims, LatticeBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box of radius `rj` in space and `rn` in frequency, centered at 0.
pub fn field_box(dims: Dims, rj: u32, rn: u32) -> LatticeBox {
    let mut radii = vec![rn; dims.nu];
    radii.extend(std::iter::repeat(rj).take(dims.d));
    LatticeBox::new(vec![0; dims.total()], radii)
}

pub fn potential(d: usize, r: u32, seed: u64) -> DisorderRealization {
    DisorderRealization::sample(Distribution::default(), LatticeBox::centered_cube(d, r), seed)
}

pub fn pinning(dims: Dims, a: f64) -> Pinning {
    // Resonant sites spread along the first spatial axis.
    let resonant = (0..dims.nu)
        .map(|k| {
            let mut j = vec![0; dims.d];
            j[0] = k as i32;
            j
        })
        .collect();
    Pinning::new(dims, resonant, vec![a; dims.nu]).unwrap()
}

/// Random field with entries of size `scale`·e^{−|k|/2}, pinned.
pub fn random_field(
    dims: Dims,
    p: u32,
    rj: u32,
    rn: u32,
    scale: f64,
    symmetric: bool,
    seed: u64,
) -> CoeffField {
    let mut r = rng(seed);
    let bx = field_box(dims, rj, rn);
    let mut y = CoeffField::initial(dims, p, pinning(dims, 0.1), bx.clone());
    for (i, pt) in bx.enumerate().iter().enumerate() {
        let w = scale * (-0.5 * dnls_core::lattice::l1(pt) as f64).exp();
        y.u.data[i] = w * r.random_range(-1.0..1.0);
        y.v.data[i] = w * r.random_range(-1.0..1.0);
    }
    if symmetric {
        for (i, pt) in bx.enumerate().iter().enumerate() {
            let mut q = pt.clone();
            for x in q.iter_mut().take(dims.nu) {
                *x = -*x;
            }
            y.v.data[i] = y.u.get(&q);
        }
    }
    y.pin();
    y
}

pub fn rel_err(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}
