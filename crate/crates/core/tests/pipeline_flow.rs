//! End-to-end modeling + synthesis on small planted benchmarks.

use relsynth::data::{build_groups, truncate, write_database, load_database};
use relsynth::eval::{chain_3level, public_parent, two_cluster_households};
use relsynth::pipeline::{default_delta, load_bundle, model_database, save_bundle, PipelineConfig};
use relsynth::privacy::PlanConfig;
use relsynth::synth::{synthesize, SynthOptions};

fn small_config(noiseless: bool, seed: u64) -> PipelineConfig {
    let plan = if noiseless {
        PlanConfig::noiseless()
    } else {
        let mut p = PlanConfig::new(4.0, 1e-5);
        p.t_em = 3;
        p.t_rounds = 1;
        p.n_candidates = 20;
        p
    };
    let mut config = PipelineConfig::new(plan, seed);
    config.plan.t_em = config.plan.t_em.min(3);
    config.fit_steps = 60;
    config.k_override = Some(2);
    config
}

#[test]
fn two_relation_flow_produces_valid_synthetic_database() {
    let (db, _) = two_cluster_households(150, 42);
    let db = truncate(&db);
    let config = small_config(false, 7);
    let bundle = model_database(&db, &config).unwrap();

    // One FK model plus one standalone model for the household relation.
    assert_eq!(bundle.fk_models.len(), 1);
    assert_eq!(bundle.standalone.len(), 1);
    assert!(bundle.ledger.within_budget());

    // Ledger equals the realized closed-form decomposition.
    let closed = bundle.closed_form_consumption();
    assert!(
        (bundle.ledger.total() - closed).abs() <= 1e-9 * closed.max(1.0),
        "ledger {} vs closed form {}",
        bundle.ledger.total(),
        closed
    );

    let (synth, report) = synthesize(&bundle, &db, &SynthOptions::default(), 99).unwrap();
    assert_eq!(report.exhausted_parents, 0);

    // Referential integrity and multiplicity.
    for (fk, def) in synth.schema.fk_edges() {
        let g = build_groups(&synth, fk);
        assert!(g.dangling_rows.is_empty(), "dangling references");
        assert!(g
            .groups
            .iter()
            .all(|grp| grp.member_rows.len() <= def.max_multiplicity));
    }
    // Latent scaffolding stripped.
    let household = synth.relation_by_name("household").unwrap();
    assert_eq!(household.width(), 2);
    assert!(household.n_rows() > 0);

    // Synthesis appends nothing to the ledger (post-processing).
    assert!(
        (bundle.ledger.total() - closed).abs() <= 1e-9 * closed.max(1.0),
        "synthesis must not consume budget"
    );

    // Every Gaussian draw goes through the ledger-aware API: each entry covers
    // at least one draw, and noiseless runs draw nothing.
    assert!(bundle.ledger.draws() >= bundle.ledger.entries().len() as u64);
    let noiseless = model_database(&db, &small_config(true, 7)).unwrap();
    assert_eq!(noiseless.ledger.draws(), 0);
    assert!(noiseless.ledger.entries().is_empty());
}

#[test]
fn bundle_round_trips_through_disk() {
    let (db, _) = two_cluster_households(80, 1);
    let db = truncate(&db);
    let config = small_config(false, 3);
    let bundle = model_database(&db, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();

    assert_eq!(loaded.fk_models.len(), bundle.fk_models.len());
    assert_eq!(
        loaded.fk_models[0].fkm.model.theta(),
        bundle.fk_models[0].fkm.model.theta()
    );
    assert!((loaded.ledger.total() - bundle.ledger.total()).abs() < 1e-12);

    // Synthesis from the reloaded bundle is identical.
    let (a, _) = synthesize(&bundle, &db, &SynthOptions::default(), 5).unwrap();
    let (b, _) = synthesize(&loaded, &db, &SynthOptions::default(), 5).unwrap();
    for (ra, rb) in a.relations.iter().zip(&b.relations) {
        assert_eq!(ra.pk_values, rb.pk_values);
        for r in 0..ra.n_rows() {
            assert_eq!(ra.row(r), rb.row(r));
        }
    }

    // Saving the loaded bundle reproduces the files byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    save_bundle(&loaded, dir2.path()).unwrap();
    for name in ["manifest.json", "ledger.json", "models/fk_0.json", "models/rel_0.json"] {
        let x = std::fs::read(dir.path().join(name)).unwrap();
        let y = std::fs::read(dir2.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs after a round trip");
    }
}

#[test]
fn multi_fk_diamond_flow_keeps_integrity() {
    let (db, _) = chain_3level(60, 11);
    let db = truncate(&db);
    let config = small_config(false, 13);
    let bundle = model_database(&db, &config).unwrap();
    assert_eq!(bundle.fk_models.len(), 4);

    let (synth, report) = synthesize(&bundle, &db, &SynthOptions::default(), 17).unwrap();
    for (fk, def) in synth.schema.fk_edges() {
        let g = build_groups(&synth, fk);
        assert!(g.dangling_rows.is_empty());
        assert!(g
            .groups
            .iter()
            .all(|grp| grp.member_rows.len() <= def.max_multiplicity));
    }
    // The restricted pass ran for the diamond's second FK out of r3.
    let r3 = synth.relation_by_name("r3").unwrap();
    assert!(r3.n_rows() > 0);
    // Both FK columns of every surviving r3 tuple are wired.
    for col in &r3.fk_columns {
        assert!(col.values.iter().all(|v| !v.is_empty()));
    }
    let _ = report;
}

#[test]
fn public_parent_flow_publishes_real_parent() {
    let (db, _) = public_parent(30, 19);
    let db = truncate(&db);
    let config = small_config(false, 23);
    let bundle = model_database(&db, &config).unwrap();
    // Standalone model over the augmented public relation.
    assert_eq!(bundle.standalone.len(), 1);
    let region_idx = db.schema.relation_index("region").unwrap();
    assert_eq!(bundle.standalone[0].relation, region_idx);
    // The later FK(household, region) model sees the latent columns attached
    // by the earlier FK(person, household): htype + z1 + z2 observed vars.
    let hh_fk = bundle
        .fk_models
        .iter()
        .find(|e| e.label.contains("household->region"))
        .unwrap();
    assert_eq!(hh_fk.fkm.model.universe().n_observed(), 3);
    // And the augmented public relation's model covers zone + one latent pair.
    assert_eq!(
        bundle.standalone[0].model.model.universe().n_observed(),
        3
    );

    let (synth, _) = synthesize(&bundle, &db, &SynthOptions::default(), 29).unwrap();
    // The public relation is the real one.
    let real_region = db.relation_by_name("region").unwrap();
    let synth_region = synth.relation_by_name("region").unwrap();
    assert_eq!(real_region.pk_values, synth_region.pk_values);
    for r in 0..real_region.n_rows() {
        assert_eq!(real_region.row(r), synth_region.row(r));
    }
    for (fk, def) in synth.schema.fk_edges() {
        let g = build_groups(&synth, fk);
        assert!(g.dangling_rows.is_empty());
        assert!(g
            .groups
            .iter()
            .all(|grp| grp.member_rows.len() <= def.max_multiplicity));
    }
}

#[test]
fn primary_only_database_gets_a_single_relation_model() {
    use relsynth::data::load_relation;
    use relsynth::schema::{validate_schema, AttributeDef, PrivacyClass, RelationSchema};
    let schema = validate_schema(vec![RelationSchema {
        name: "r0".to_string(),
        privacy_class: PrivacyClass::PrimaryPrivate,
        primary_key_column: "id".to_string(),
        attributes: vec![
            AttributeDef {
                name: "a".to_string(),
                domain_size: 2,
                value_labels: None,
            },
            AttributeDef {
                name: "b".to_string(),
                domain_size: 3,
                value_labels: None,
            },
        ],
        foreign_keys: vec![],
    }])
    .unwrap();
    let rows: Vec<Vec<String>> = (0..200)
        .map(|i| vec![i.to_string(), (i % 2).to_string(), (i % 3).to_string()])
        .collect();
    let r0 = load_relation(&schema, 0, &["id".into(), "a".into(), "b".into()], rows).unwrap();
    let db = relsynth::data::Database {
        schema,
        relations: vec![r0],
    };
    let config = small_config(false, 31);
    let bundle = model_database(&db, &config).unwrap();
    assert!(bundle.fk_models.is_empty());
    assert_eq!(bundle.standalone.len(), 1);
    let (synth, _) = synthesize(&bundle, &db, &SynthOptions::default(), 37).unwrap();
    assert!(synth.relations[0].n_rows() > 0);
}

/// Degenerate distributions flow through synthesis exactly: a single latent
/// value with a deterministic size-2 distribution yields only 2-person groups.
#[test]
fn deterministic_size_distribution_is_preserved() {
    // Ground truth where every household has exactly two members.
    let (db, _) = two_cluster_households(300, 77);
    let db = truncate(&db);
    let fk = db.schema.private_fk_order()[0];
    let keep: Vec<bool> = {
        let g = build_groups(&db, fk);
        let mut by_parent = vec![false; db.relations[fk.parent].n_rows()];
        for grp in &g.groups {
            by_parent[grp.parent_row] = grp.member_rows.len() == 2;
        }
        by_parent
    };
    let mut relations = db.relations.clone();
    relations[fk.parent] = relations[fk.parent].filtered(&keep);
    let db = truncate(&relsynth::data::Database {
        schema: db.schema.clone(),
        relations,
    });

    let mut config = small_config(true, 41);
    config.k_override = Some(1); // single latent value
    // The reserved no-group value has zero data mass; its model probability
    // only approaches zero at the fit optimum, so fit tightly.
    config.fit_steps = 600;
    let bundle = model_database(&db, &config).unwrap();
    // Noiseless: p_size(2 | z) = 1 exactly.
    let p_size = &bundle.fk_models[0].fkm.p_size;
    assert!((p_size[0][1] - 1.0).abs() < 1e-12, "p_size = {p_size:?}");

    let (synth, _) = synthesize(&bundle, &db, &SynthOptions::default(), 43).unwrap();
    let g = build_groups(&synth, fk);
    assert!(!g.groups.is_empty());
    assert!(g.groups.iter().all(|grp| grp.member_rows.len() == 2));
    // Every synthetic household has a group: no empty groups under |Z| = 1.
    assert_eq!(g.groups.len(), synth.relations[fk.parent].n_rows());
}

#[test]
fn csv_round_trip_preserves_database() {
    let (db, _) = two_cluster_households(40, 3);
    let dir = tempfile::tempdir().unwrap();
    write_database(&db, dir.path()).unwrap();
    let back = load_database(&db.schema, dir.path()).unwrap();
    for (a, b) in db.relations.iter().zip(&back.relations) {
        assert_eq!(a.pk_values, b.pk_values);
        for r in 0..a.n_rows() {
            assert_eq!(a.row(r), b.row(r));
        }
    }
    let _ = default_delta(&db);
}
