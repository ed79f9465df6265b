use formation_lab::geometry::{directed_hausdorff, formation_template, hausdorff, Point2};
use proptest::prelude::*;

fn oracle_directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut out = 0.0f64;
    for &(ax, ay) in a {
        let mut best = f64::INFINITY;
        for &(bx, by) in b {
            let d = (ax - bx).hypot(ay - by);
            if d < best {
                best = d;
            }
        }
        if best > out {
            out = best;
        }
    }
    out
}

fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
    v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
}

fn point_set() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..=10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matches_double_loop(a in point_set(), b in point_set()) {
        let (pa, pb) = (pts(&a), pts(&b));
        let ab = oracle_directed(&a, &b);
        let ba = oracle_directed(&b, &a);
        prop_assert_eq!(directed_hausdorff(&pa, &pb).unwrap(), ab);
        prop_assert_eq!(directed_hausdorff(&pb, &pa).unwrap(), ba);
        prop_assert_eq!(hausdorff(&pa, &pb).unwrap(), ab.max(ba));
    }

    #[test]
    fn metric_properties(a in point_set(), b in point_set(), dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
        let (pa, pb) = (pts(&a), pts(&b));
        prop_assert_eq!(hausdorff(&pa, &pa).unwrap(), 0.0);
        prop_assert_eq!(hausdorff(&pa, &pb).unwrap(), hausdorff(&pb, &pa).unwrap());
        let shift = Point2::new(dx, dy);
        let sa: Vec<Point2> = pa.iter().map(|&p| p + shift).collect();
        let sb: Vec<Point2> = pb.iter().map(|&p| p + shift).collect();
        let d = hausdorff(&pa, &pb).unwrap();
        prop_assert!((hausdorff(&sa, &sb).unwrap() - d).abs() <= 1e-9 * (1.0 + d));
    }
}

#[test]
fn empty_sets_are_rejected() {
    let a = pts(&[(0.0, 0.0)]);
    assert!(hausdorff(&a, &[]).is_err());
    assert!(directed_hausdorff(&[], &a).is_err());
}

#[test]
fn templates_exist_for_every_fleet_size() {
    for n in 5..=8 {
        let t = formation_template(n).unwrap();
        assert_eq!(t.n, n);
    }
    assert!(formation_template(4).is_err());
    assert!(formation_template(9).is_err());
}
