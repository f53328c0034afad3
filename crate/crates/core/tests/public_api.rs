use nalgebra::DVector;
use proptest::prelude::*;
use symflow_core::models::{join, FlowModel, MappingTorusModel, SpeedScale};
use symflow_core::sections::{build_proper_section, Direction};
use symflow_core::symbolic::{parry_entropy, scc_decompose, suspension_entropy, SymbolicShift};

fn torus_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y).rem_euclid(1.0);
            d.min(1.0 - d)
        })
        .fold(0.0, f64::max)
}

fn cat() -> MappingTorusModel {
    MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_is_a_group_action(u0 in 0.0..1.0f64, u1 in 0.0..1.0f64, h in 0.0..1.0f64,
                              s in -2.0..2.0f64, t in -2.0..2.0f64) {
        let m = cat();
        let x = join(&DVector::from_vec(vec![u0, u1]), h);
        let a = m.flow_at(&m.flow_at(&x, t).unwrap(), s).unwrap();
        let b = m.flow_at(&x, s + t).unwrap();
        prop_assert!(torus_gap(&m.normalize(&a).unwrap(), &m.normalize(&b).unwrap()) < 1e-9);
    }

    #[test]
    fn derivative_obeys_the_chain_rule(u0 in 0.0..1.0f64, u1 in 0.0..1.0f64, h in 0.0..1.0f64,
                                       s in -1.5..1.5f64, t in -1.5..1.5f64) {
        let m = cat();
        let x = join(&DVector::from_vec(vec![u0, u1]), h);
        let y = m.flow_at(&x, t).unwrap();
        let lhs = m.derivative_cocycle(&x, s + t).unwrap();
        let rhs = m.derivative_cocycle(&y, s).unwrap() * m.derivative_cocycle(&x, t).unwrap();
        prop_assert!((lhs - &rhs).norm() <= 1e-9 * rhs.norm().max(1.0));
    }

    #[test]
    fn poincare_returns_invert(u0 in 0.0..1.0f64, u1 in 0.0..1.0f64, j in 0usize..20) {
        let m = cat();
        let (sec, _) = build_proper_section(&m, 0.1).unwrap();
        let x = join(&DVector::from_vec(vec![u0, u1]), j as f64 * sec.spacing());
        let (y, r) = sec.poincare_return(&x, Direction::Forward).unwrap();
        prop_assert!(r > 0.0 && r < 0.1);
        let (z, _) = sec.poincare_return(&y, Direction::Backward).unwrap();
        prop_assert!(torus_gap(&z, &x) < 1e-12);
    }
}

#[test]
fn section_of_the_unit_cat_suspension() {
    let (sec, _) = build_proper_section(&cat(), 0.1).unwrap();
    assert_eq!(sec.slice_count(), 20);
    assert!((sec.spacing() - 0.05).abs() < 1e-15);
}

#[test]
fn full_shift_entropies() {
    for k in 2..6 {
        let shift = SymbolicShift::full(k);
        let comps = scc_decompose(&shift);
        assert_eq!(comps.len(), 1);
        let h = parry_entropy(&comps[0].shift).unwrap();
        assert!((h - (k as f64).ln()).abs() < 1e-12);
        let hs = suspension_entropy(&comps[0].shift, &vec![0.5; k]).unwrap();
        assert!((hs - 2.0 * (k as f64).ln()).abs() < 1e-12);
    }
}
