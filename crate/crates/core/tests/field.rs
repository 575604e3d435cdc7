mod common;

use common::*;
use dnls_core::field::*;
use dnls_core::lattice::{Dims, LatticeBox};
use proptest::prelude::*;

/// Component on n ∈ [c−rn, c+rn], j ∈ [−1, 1], from a value stream.
fn component(dims: Dims, center: i32, rn: u32, vals: &[f64]) -> Component {
    let mut c = vec![center; dims.nu];
    c.extend(std::iter::repeat(0).take(dims.d));
    let mut r = vec![rn; dims.nu];
    r.extend(std::iter::repeat(1).take(dims.d));
    let mut x = Component::zeros(dims, LatticeBox::new(c, r));
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = vals[i % vals.len()];
    }
    x
}

fn close(a: &Component, b: &Component) -> bool {
    a.bx == b.bx && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1e-13 * (1.0 + x.abs()))
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 7..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn convolution_commutes_and_associates(
        nu in 1usize..=2, a in values(), b in values(), c in values(),
        ca in -2i32..=2, cb in -2i32..=2, ra in 0u32..=2, rb in 0u32..=2,
    ) {
        let dims = Dims { d: 1, nu };
        let x = component(dims, ca, ra, &a);
        let y = component(dims, cb, rb, &b);
        let z = component(dims, 0, 1, &c);
        prop_assert!(close(&convolve_n(&x, &y).unwrap(), &convolve_n(&y, &x).unwrap()));
        let left = convolve_n(&convolve_n(&x, &y).unwrap(), &z).unwrap();
        let right = convolve_n(&x, &convolve_n(&y, &z).unwrap()).unwrap();
        prop_assert!(close(&left, &right));
    }

    #[test]
    fn unit_is_neutral_and_powers_add(a in values(), k in 0u32..=3, l in 0u32..=2) {
        let dims = Dims { d: 1, nu: 1 };
        let x = component(dims, 0, 1, &a);
        let unit = Component::unit(dims, &x.bx);
        prop_assert!(close(&convolve_n(&unit, &x).unwrap(), &x));
        let lhs = convolve_n(&convolve_power(&x, k).unwrap(), &convolve_power(&x, l).unwrap()).unwrap();
        let rhs = convolve_power(&x, k + l).unwrap();
        let bx = rhs.bx.clone();
        prop_assert!(close(&lhs.reshaped(&bx), &rhs));
    }

    #[test]
    fn symmetric_pairs_give_even_products(a in values(), nu in 1usize..=2) {
        // v(n) = u(−n) makes u * v even in n.
        let dims = Dims { d: 1, nu };
        let u = component(dims, 0, 2, &a);
        let mut v = u.clone();
        for p in u.bx.enumerate() {
            let mut q = p.clone();
            for x in q.iter_mut().take(nu) {
                *x = -*x;
            }
            v.set(&p, u.get(&q));
        }
        let w = convolve_n(&u, &v).unwrap();
        for p in w.bx.enumerate() {
            let mut q = p.clone();
            for x in q.iter_mut().take(nu) {
                *x = -*x;
            }
            prop_assert!((w.get(&p) - w.get(&q)).abs() <= 1e-14);
        }
    }

    #[test]
    fn linear_residual_without_nonlinearity(s1 in 0u64..1000, s2 in 0u64..1000, t in -2.0f64..2.0, eps in 0.0f64..0.3) {
        let dims = Dims { d: 1, nu: 1 };
        let pot = potential(1, 5, s1);
        let y1 = random_field(dims, 1, 2, 2, 0.1, false, s1);
        let y2 = random_field(dims, 1, 2, 2, 0.1, false, s2);
        let mut comb = y1.clone();
        for i in 0..comb.u.data.len() {
            comb.u.data[i] = y1.u.data[i] + t * y2.u.data[i];
            comb.v.data[i] = y1.v.data[i] + t * y2.v.data[i];
        }
        let omega = [0.37];
        let f1 = eval_F(&y1, &omega, eps, 0.0, &pot).unwrap();
        let f2 = eval_F(&y2, &omega, eps, 0.0, &pot).unwrap();
        let fc = eval_F(&comb, &omega, eps, 0.0, &pot).unwrap();
        for i in 0..fc.u.data.len() {
            prop_assert!((fc.u.data[i] - f1.u.data[i] - t * f2.u.data[i]).abs() <= 1e-14);
            prop_assert!((fc.v.data[i] - f1.v.data[i] - t * f2.v.data[i]).abs() <= 1e-14);
        }
    }

    #[test]
    fn symmetric_fields_have_symmetric_residuals(seed in 0u64..1000, delta in 0.0f64..0.5) {
        let dims = Dims { d: 1, nu: 1 };
        let pot = potential(1, 5, seed);
        let y = random_field(dims, 1, 2, 2, 0.1, true, seed);
        prop_assert!(y.conjugate_symmetry_error() <= 1e-15);
        let f = eval_F(&y, &[0.41], 0.05, delta, &pot).unwrap();
        for p in f.u.bx.enumerate() {
            let q = vec![-p[0], p[1]];
            prop_assert!((f.v.get(&p) - f.u.get(&q)).abs() <= 1e-14);
        }
    }
}
