use std::collections::HashSet;

use dnls_core::lattice::*;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = LatticeBox> {
    (1usize..=3)
        .prop_flat_map(|dim| (prop::collection::vec(-3i32..=3, dim), prop::collection::vec(0u32..=3, dim)))
        .prop_map(|(c, r)| LatticeBox::new(c, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_is_a_bijection(bx in boxes()) {
        let pts = bx.enumerate();
        prop_assert_eq!(pts.len(), bx.cardinality());
        let set: HashSet<_> = pts.iter().cloned().collect();
        prop_assert_eq!(set.len(), pts.len());
        for (i, p) in pts.iter().enumerate() {
            prop_assert!(bx.contains(p));
            prop_assert_eq!(bx.index_of(p), Some(i));
            prop_assert_eq!(&bx.point_at(i), p);
        }
    }

    #[test]
    fn cut_region_matches_brute_force(bx in boxes(), s in prop::collection::vec(-4i32..=4, 3)) {
        let shift: Vec<i32> = s[..bx.dim()].to_vec();
        let region = ElementaryRegion::with_cut(bx.clone(), shift.clone());
        let brute: Vec<Vec<i32>> = bx
            .enumerate()
            .into_iter()
            .filter(|p| {
                let back: Vec<i32> = p.iter().zip(&shift).map(|(a, b)| a - b).collect();
                !bx.contains(&back)
            })
            .collect();
        prop_assert_eq!(region.enumerate(), brute);
        prop_assert_eq!(region.cardinality(), region.enumerate().len());
        if shift.iter().all(|&x| x == 0) {
            prop_assert_eq!(region.cardinality(), 0);
        }
    }

    #[test]
    fn boundary_sites_touch_the_outside(inner_r in 0u32..=2, extra in 1u32..=2, dim in 1usize..=2) {
        let inner = ElementaryRegion::from_box(LatticeBox::centered_cube(dim, inner_r));
        let outer = ElementaryRegion::from_box(LatticeBox::centered_cube(dim, inner_r + extra));
        let b = interior_boundary(&inner, &outer).unwrap();
        for p in inner.enumerate() {
            let touches = neighbors(&p).any(|q| outer.contains(&q) && !inner.contains(&q));
            prop_assert_eq!(b.contains(&p), touches);
        }
        // In a box, exactly the sites on the outer shell touch the outside.
        let shell = inner.enumerate().iter().filter(|p| p.iter().any(|x| x.unsigned_abs() == inner_r)).count();
        prop_assert_eq!(b.len(), shell);
    }

    #[test]
    fn distances_are_metrics(
        a in prop::collection::vec(-5i32..=5, 3),
        b in prop::collection::vec(-5i32..=5, 3),
        c in prop::collection::vec(-5i32..=5, 3),
    ) {
        prop_assert_eq!(l1_dist(&a, &b), l1_dist(&b, &a));
        prop_assert!(l1_dist(&a, &c) <= l1_dist(&a, &b) + l1_dist(&b, &c));
        prop_assert!(linf_dist(&a, &c) <= linf_dist(&a, &b) + linf_dist(&b, &c));
        prop_assert!(linf_dist(&a, &b) <= l1_dist(&a, &b));
        prop_assert!(l1_dist(&a, &b) <= 3 * linf_dist(&a, &b));
        prop_assert_eq!(l1_dist(&a, &a), 0);
    }
}
