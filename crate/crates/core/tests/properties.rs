mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::*;
use sw_design::analytic::{cluster_mean_correlation, empirical_proportions, rho_from_e};
use sw_design::designspace::{enumerate_designs, DesignSpace, Restriction};
use sw_design::inference::{critical_value, per_hypothesis_power, Correction};
use sw_design::model::{is_identifiable, treatment_covariance, Design, InformationEngine, Sequence};
use sw_design::search::criterion_value;
use sw_design::{Criterion, VarianceComponents};

fn components() -> impl Strategy<Value = VarianceComponents> {
    (0.0..0.5f64, 0.0..0.3f64, 0.0..0.3f64, 0.2..2.0f64)
        .prop_map(|(c, t, s, e)| VarianceComponents::new(c, t, s, e).unwrap())
}

fn designs() -> impl Strategy<Value = Design> {
    (2usize..=3, 2usize..=5, 2usize..=5, 2usize..=6).prop_flat_map(|(arms, c, t, m)| {
        prop::collection::vec(prop::collection::vec(0..arms as u8, t), c)
            .prop_map(move |x| Design::new(m, arms, x).unwrap())
    })
}

fn identifiable() -> impl Strategy<Value = (Design, VarianceComponents)> {
    (designs(), components()).prop_filter("identifiable", |(d, vc)| is_identifiable(d, vc))
}

fn all_criteria(d: &Design, vc: &VarianceComponents) -> [f64; 3] {
    let s = treatment_covariance(d, vc).unwrap();
    [Criterion::D, Criterion::A, Criterion::E].map(|c| criterion_value(&s, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn row_order_does_not_change_covariance((d, vc) in identifiable(), seed in any::<u64>()) {
        let mut rows = d.allocation().to_vec();
        let n = rows.len();
        rows.rotate_left((seed as usize) % n);
        rows.reverse();
        let p = Design::new(d.m(), d.arms(), rows).unwrap();
        let a = treatment_covariance(&d, &vc).unwrap().lambda;
        let b = treatment_covariance(&p, &vc).unwrap().lambda;
        prop_assert!(max_rel_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn information_is_sum_of_sequence_contributions((d, vc) in identifiable()) {
        let engine = InformationEngine::new(d.m(), d.periods(), d.arms(), &vc).unwrap();
        let total = engine.information(d.allocation());
        let mut sum = engine.sequence_information(&d.allocation()[0]);
        for row in &d.allocation()[1..] {
            sum += engine.sequence_information(row);
        }
        prop_assert!(max_rel_diff(&total, &sum) < 1e-12);
    }

    #[test]
    fn more_measurements_never_hurt((d, vc) in identifiable()) {
        let bigger = d.with_m(d.m() + 1).unwrap();
        let a = all_criteria(&d, &vc);
        let b = all_criteria(&bigger, &vc);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*y <= *x * (1.0 + 1e-10), "{} -> {}", x, y);
        }
    }

    #[test]
    fn covariance_is_symmetric_positive_definite((d, vc) in identifiable()) {
        let l = treatment_covariance(&d, &vc).unwrap().lambda;
        prop_assert!(max_rel_diff(&l, &l.transpose()) < 1e-12);
        prop_assert!(l.clone().cholesky().is_some());
    }

    #[test]
    fn block_formula_matches_dense_oracle((d, vc) in identifiable()) {
        prop_assume!(d.m() * d.clusters() * d.periods() <= 30);
        let fast = treatment_covariance(&d, &vc).unwrap().lambda;
        prop_assert!(max_rel_diff(&fast, &brute_force_lambda(&d, &vc)) < 1e-9);
    }

    #[test]
    fn power_grows_with_effect_and_information(
        d1 in 0.0..3.0f64, d2 in 0.0..3.0f64, i1 in 0.1..50.0f64, i2 in 0.1..50.0f64, alpha in 0.001..0.2f64,
    ) {
        let e = critical_value(alpha, 1, Correction::None).unwrap();
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(per_hypothesis_power(lo, i1, e) <= per_hypothesis_power(hi, i1, e));
        let (lo, hi) = (i1.min(i2), i1.max(i2));
        prop_assert!(per_hypothesis_power(d1, lo, e) <= per_hypothesis_power(d1, hi, e));
    }

    #[test]
    fn bonferroni_divides_alpha(alpha in 0.001..0.5f64, q in 1usize..8) {
        let a = critical_value(alpha, q, Correction::Bonferroni).unwrap();
        let b = critical_value(alpha / q as f64, 1, Correction::None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cluster_mean_correlation_round_trips(m in 1usize..50, t in 1usize..20, rho in 0.0..1.0f64) {
        let e = cluster_mean_correlation(m, t, rho).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((rho_from_e(m, t, e).unwrap() - rho).abs() < 1e-10);
    }

    #[test]
    fn empirical_proportions_sum_to_one(t in 2usize..10, ones in prop::collection::vec(1usize..100, 2..12)) {
        let x: Vec<Sequence> = ones
            .iter()
            .map(|k| {
                let k = 1 + k % (t - 1);
                (0..t).map(|j| u8::from(j >= t - k)).collect()
            })
            .collect();
        let p = empirical_proportions(&x).unwrap();
        prop_assert_eq!(p.len(), t - 1);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn enumeration_is_unique_and_reproducible() {
    let space = DesignSpace::from_rules(
        3,
        3..=4,
        |_| vec![2, 3, 4],
        |_, t| (2..=12 / t).collect(),
        vec![Restriction::MonotoneNondecreasing, Restriction::Identifiable],
    )
    .unwrap();
    let vc = VarianceComponents::cross_sectional(1.0, 0.05).unwrap();
    let first: Vec<Design> = enumerate_designs(&space, &vc).collect();
    let second: Vec<Design> = enumerate_designs(&space, &vc).collect();
    assert_eq!(first, second);
    assert!(!first.is_empty());
    let keys: HashSet<(usize, Vec<Sequence>)> = first.iter().map(|d| (d.m(), d.allocation().to_vec())).collect();
    assert_eq!(keys.len(), first.len());
    for d in &first {
        assert!(d.allocation().windows(2).all(|w| w[0] <= w[1]));
        assert!(is_identifiable(d, &vc));
    }
}

#[test]
fn monotone_sequences_are_enumerated_in_lexicographic_order() {
    let space = DesignSpace::uniform(2, &[4], &[3], &[2], vec![Restriction::MonotoneNondecreasing]).unwrap();
    let vc = VarianceComponents::cross_sectional(1.0, 0.1).unwrap();
    let xs: Vec<Vec<Sequence>> = enumerate_designs(&space, &vc).map(|d| d.allocation().to_vec()).collect();
    assert!(xs.windows(2).all(|w| w[0] < w[1]));
}
