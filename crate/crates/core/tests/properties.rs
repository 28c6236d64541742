//! Property tests for invariants that hold over whole input families rather
//! than single examples.

use proptest::prelude::*;
use relsynth::data::{build_groups, load_relation, truncate, Database};
use relsynth::marginal::{l1_distance, lambda_useful, MarginalSpec, MarginalTable};
use relsynth::model::factor::logsumexp;
use relsynth::privacy::delta_admissible;
use relsynth::schema::{
    validate_schema, AttributeDef, DatabaseSchema, ForeignKeyDef, PrivacyClass, RelationSchema,
};

fn table(counts: Vec<f64>) -> MarginalTable {
    MarginalTable {
        spec: MarginalSpec::new(vec![0]),
        counts,
        noise_scale: 0.0,
        noisy: false,
    }
}

proptest! {
    /// Admissibility is monotone non-increasing in gamma: if the larger gamma
    /// is admissible, so is the smaller.
    #[test]
    fn admissibility_monotone(
        eps in 0.05f64..8.0,
        log_delta in -8.0f64..-2.0,
        g1 in 1e-6f64..10.0,
        g2 in 1e-6f64..10.0,
    ) {
        let delta = 10f64.powf(log_delta);
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        if delta_admissible(eps, delta, hi) {
            prop_assert!(delta_admissible(eps, delta, lo));
        }
    }

    /// L1 distance is symmetric, non-negative, and zero only on equal tables.
    #[test]
    fn l1_symmetric_nonnegative(a in prop::collection::vec(-50.0f64..50.0, 4), b in prop::collection::vec(-50.0f64..50.0, 4)) {
        let (ta, tb) = (table(a.clone()), table(b.clone()));
        let d1 = l1_distance(&ta, &tb).unwrap();
        let d2 = l1_distance(&tb, &ta).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert!(d1 >= 0.0);
        if a == b {
            prop_assert_eq!(d1, 0.0);
        }
    }

    /// Usefulness never flips off when n grows or sigma shrinks.
    #[test]
    fn usefulness_monotone(
        span in 1usize..1000,
        n in 1.0f64..1e6,
        extra in 0.0f64..1e5,
        sigma in 0.0f64..100.0,
        shrink in 0.0f64..1.0,
    ) {
        if lambda_useful(span, n, sigma, 20.0) {
            prop_assert!(lambda_useful(span, n + extra, sigma, 20.0));
            prop_assert!(lambda_useful(span, n, sigma * shrink, 20.0));
        }
    }

    /// logsumexp shifts exactly under a constant offset.
    #[test]
    fn logsumexp_shift_invariant(values in prop::collection::vec(-30.0f64..30.0, 1..12), k in -20.0f64..20.0) {
        let base = logsumexp(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + k).collect();
        prop_assert!((logsumexp(&shifted) - base - k).abs() < 1e-9);
    }
}

fn two_level_schema(tau: usize) -> DatabaseSchema {
    validate_schema(vec![
        RelationSchema {
            name: "parent".to_string(),
            privacy_class: PrivacyClass::PrimaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![AttributeDef {
                name: "x".to_string(),
                domain_size: 2,
                value_labels: None,
            }],
            foreign_keys: vec![],
        },
        RelationSchema {
            name: "child".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![AttributeDef {
                name: "y".to_string(),
                domain_size: 2,
                value_labels: None,
            }],
            foreign_keys: vec![ForeignKeyDef {
                child_relation: "child".to_string(),
                parent_relation: "parent".to_string(),
                child_fk_column: "parent_id".to_string(),
                max_multiplicity: tau,
            }],
        },
    ])
    .unwrap()
}

fn random_two_level(parents: usize, refs: Vec<usize>, tau: usize) -> Database {
    let schema = two_level_schema(tau);
    let parent_rows: Vec<Vec<String>> = (0..parents)
        .map(|i| vec![format!("p{i}"), (i % 2).to_string()])
        .collect();
    let child_rows: Vec<Vec<String>> = refs
        .iter()
        .enumerate()
        .map(|(i, &p)| vec![format!("c{i}"), (i % 2).to_string(), format!("p{p}")])
        .collect();
    let parent = load_relation(
        &schema,
        0,
        &["id".into(), "x".into()],
        parent_rows,
    )
    .unwrap();
    let child = load_relation(
        &schema,
        1,
        &["id".into(), "y".into(), "parent_id".into()],
        child_rows,
    )
    .unwrap();
    Database {
        schema,
        relations: vec![parent, child],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// After truncation every group respects the bound, truncation is
    /// idempotent, and grouping partitions the surviving child rows.
    #[test]
    fn truncate_bounds_idempotence_partition(
        parents in 1usize..8,
        refs in prop::collection::vec(0usize..8, 0..40),
        tau in 1usize..4,
    ) {
        let refs: Vec<usize> = refs.into_iter().filter(|&p| p < parents).collect();
        let db = random_two_level(parents, refs, tau);
        let fk = db.schema.private_fk_order()[0];

        let once = truncate(&db);
        let grouping = build_groups(&once, fk);
        prop_assert!(grouping.dangling_rows.is_empty());
        for g in &grouping.groups {
            prop_assert!(g.member_rows.len() <= tau);
        }
        // Partition: each surviving child row is in exactly one group.
        let n = once.relations[fk.child].n_rows();
        let mut seen = vec![0usize; n];
        for g in &grouping.groups {
            for &r in &g.member_rows {
                seen[r] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));

        let twice = truncate(&once);
        prop_assert_eq!(
            &twice.relations[fk.child].pk_values,
            &once.relations[fk.child].pk_values
        );
        prop_assert_eq!(
            &twice.relations[fk.parent].pk_values,
            &once.relations[fk.parent].pk_values
        );
    }

    /// The tuple multiplier never decreases when a path multiplicity grows.
    #[test]
    fn tuple_multiplier_monotone(tau in 1usize..6, bump in 1usize..4) {
        let a = two_level_schema(tau);
        let b = two_level_schema(tau + bump);
        let child_a = a.relation_index("child").unwrap();
        let child_b = b.relation_index("child").unwrap();
        prop_assert!(a.tuple_multiplier(child_a) <= b.tuple_multiplier(child_b));
    }
}
