//! Evaluation harness: conjunctive count queries over two-level databases,
//! the regularized relative-error metric, planted-correlation benchmark
//! generators, and the independent-pairing baseline.

use crate::data::{build_groups, load_relation, Database, EncodedRelation};
use crate::privacy::{perturb_vector, PrivacyLedger};
use crate::rng::RngFactory;
use crate::schema::{
    validate_schema, AttributeDef, FkId, ForeignKeyDef, PrivacyClass, RelationSchema,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Conjunctive membership condition on one attribute column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub column: usize,
    pub allowed: Vec<u32>,
}

/// Count the parents whose group has exactly `size` members, whose tuple
/// satisfies every parent condition, and which contain `child_preds.len()`
/// distinct children, the i-th satisfying the i-th child predicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub size: usize,
    pub parent_pred: Vec<Condition>,
    pub child_preds: Vec<Vec<Condition>>,
}

/// Random queries: per-attribute allowed sets sized so the combined
/// selectivity of all k conditions is 0.2 on uniform data, i.e.
/// |S_j| / |A_j| = 0.2^(1/k), rounded to the nearest size of at least 1.
pub fn gen_queries(
    parent: &EncodedRelation,
    child: &EncodedRelation,
    tau: usize,
    count: usize,
    c: usize,
    attrs_per_pred: usize,
    rng: &mut impl Rng,
) -> Vec<Query> {
    let k = attrs_per_pred * (1 + c);
    let frac = 0.2_f64.powf(1.0 / k as f64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let size = rng.gen_range(1..=tau);
        let parent_pred = random_pred(parent, attrs_per_pred, frac, rng);
        let child_preds = (0..c)
            .map(|_| random_pred(child, attrs_per_pred, frac, rng))
            .collect();
        out.push(Query {
            size,
            parent_pred,
            child_preds,
        });
    }
    out
}

fn random_pred(
    rel: &EncodedRelation,
    n_attrs: usize,
    frac: f64,
    rng: &mut impl Rng,
) -> Vec<Condition> {
    let mut cols: Vec<usize> = (0..rel.width()).collect();
    cols.shuffle(rng);
    cols.truncate(n_attrs.min(rel.width()));
    cols.sort_unstable();
    cols.into_iter()
        .map(|column| {
            let domain = rel.domain_sizes[column];
            let take = ((domain as f64 * frac).round() as usize).clamp(1, domain);
            let mut values: Vec<u32> = (0..domain as u32).collect();
            values.shuffle(rng);
            values.truncate(take);
            values.sort_unstable();
            Condition {
                column,
                allowed: values,
            }
        })
        .collect()
}

fn matches(rel: &EncodedRelation, row: usize, pred: &[Condition]) -> bool {
    pred.iter()
        .all(|c| c.allowed.contains(&rel.value(row, c.column)))
}

/// Exact query evaluation over the FK-grouped database. For two child
/// predicates the children must be distinct tuples.
pub fn eval_query(db: &Database, fk: FkId, query: &Query) -> usize {
    let parent = &db.relations[fk.parent];
    let child = &db.relations[fk.child];
    let grouping = build_groups(db, fk);
    let mut by_parent: Vec<Option<&Vec<usize>>> = vec![None; parent.n_rows()];
    for g in &grouping.groups {
        by_parent[g.parent_row] = Some(&g.member_rows);
    }
    let mut count = 0;
    for p in 0..parent.n_rows() {
        let members: &[usize] = by_parent[p].map(|m| m.as_slice()).unwrap_or(&[]);
        if members.len() != query.size || !matches(parent, p, &query.parent_pred) {
            continue;
        }
        let ok = match query.child_preds.len() {
            0 => true,
            1 => members.iter().any(|&r| matches(child, r, &query.child_preds[0])),
            2 => {
                let s1: Vec<usize> = members
                    .iter()
                    .cloned()
                    .filter(|&r| matches(child, r, &query.child_preds[0]))
                    .collect();
                let s2: Vec<usize> = members
                    .iter()
                    .cloned()
                    .filter(|&r| matches(child, r, &query.child_preds[1]))
                    .collect();
                // A distinct pair exists iff both sets are nonempty and their
                // union has at least two tuples.
                let mut union = s1.clone();
                union.extend(&s2);
                union.sort_unstable();
                union.dedup();
                !s1.is_empty() && !s2.is_empty() && union.len() >= 2
            }
            _ => unreachable!("query family uses c in {{1, 2}}"),
        };
        if ok {
            count += 1;
        }
    }
    count
}

/// |true - synthetic| / max(true, 0.01 * parents in the true database).
pub fn relative_error(true_count: usize, synth_count: usize, n_parents: usize) -> f64 {
    let diff = (true_count as f64 - synth_count as f64).abs();
    diff / (true_count as f64).max(0.01 * n_parents as f64)
}

/// Mean relative error of a query batch evaluated on both databases.
pub fn mean_relative_error(
    truth: &Database,
    synth: &Database,
    fk: FkId,
    queries: &[Query],
) -> f64 {
    let n_parents = truth.relations[fk.parent].n_rows();
    let total: f64 = queries
        .iter()
        .map(|q| relative_error(eval_query(truth, fk, q), eval_query(synth, fk, q), n_parents))
        .sum();
    total / queries.len() as f64
}

// ---------------------------------------------------------------------------
// Planted benchmarks.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkProfile {
    TwoClusterHouseholds,
    Chain3Level,
    PublicParent,
}

impl std::str::FromStr for BenchmarkProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_cluster_households" => Ok(Self::TwoClusterHouseholds),
            "chain_3level" => Ok(Self::Chain3Level),
            "public_parent" => Ok(Self::PublicParent),
            other => Err(format!("unknown benchmark profile '{other}'")),
        }
    }
}

/// Ground-truth parameters of a planted benchmark, for oracle checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// Cluster label per parent row of the clustered relation.
    pub cluster_of_parent: Vec<usize>,
    pub p_z: Vec<f64>,
    /// Size distribution per cluster over 1..=tau.
    pub p_size: Vec<Vec<f64>>,
}

fn attr(name: &str, domain: usize) -> AttributeDef {
    AttributeDef {
        name: name.to_string(),
        domain_size: domain,
        value_labels: None,
    }
}

fn fk(child: &str, parent: &str, column: &str, tau: usize) -> ForeignKeyDef {
    ForeignKeyDef {
        child_relation: child.to_string(),
        parent_relation: parent.to_string(),
        child_fk_column: column.to_string(),
        max_multiplicity: tau,
    }
}

/// Two-cluster census-style benchmark: cluster 0 households have 2 members
/// with one attribute pattern, cluster 1 households have 3 members with the
/// complementary pattern; the household attribute co-varies with the cluster.
pub fn two_cluster_households(n_households: usize, seed: u64) -> (Database, PlantedTruth) {
    let schema = validate_schema(vec![
        RelationSchema {
            name: "household".to_string(),
            privacy_class: PrivacyClass::PrimaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("htype", 2), attr("region", 3)],
            foreign_keys: vec![],
        },
        RelationSchema {
            name: "person".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("a1", 2), attr("a2", 2), attr("a3", 3)],
            foreign_keys: vec![fk("person", "household", "household_id", 3)],
        },
    ])
    .unwrap();
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("bench/two_cluster", 0);

    let mut households = Vec::new();
    let mut persons = Vec::new();
    let mut clusters = Vec::new();
    let mut person_id = 1usize;
    for h in 0..n_households {
        let cluster = usize::from(rng.gen::<f64>() < 0.5);
        clusters.push(cluster);
        let htype = if rng.gen::<f64>() < 0.9 {
            cluster
        } else {
            1 - cluster
        } as u32;
        let region = rng.gen_range(0..3u32).to_string();
        households.push(vec![(h + 1).to_string(), htype.to_string(), region]);
        let size = if cluster == 0 { 2 } else { 3 };
        for _ in 0..size {
            let a1 = biased_bit(&mut rng, if cluster == 0 { 0.9 } else { 0.15 });
            let a2 = biased_bit(&mut rng, if cluster == 0 { 0.8 } else { 0.25 });
            let a3 = rng.gen_range(0..3u32);
            persons.push(vec![
                person_id.to_string(),
                a1.to_string(),
                a2.to_string(),
                a3.to_string(),
                (h + 1).to_string(),
            ]);
            person_id += 1;
        }
    }
    let household = load_relation(
        &schema,
        0,
        &["id".into(), "htype".into(), "region".into()],
        households,
    )
    .unwrap();
    let person = load_relation(
        &schema,
        1,
        &[
            "id".into(),
            "a1".into(),
            "a2".into(),
            "a3".into(),
            "household_id".into(),
        ],
        persons,
    )
    .unwrap();
    (
        Database {
            schema,
            relations: vec![household, person],
        },
        PlantedTruth {
            cluster_of_parent: clusters,
            p_z: vec![0.5, 0.5],
            p_size: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        },
    )
}

fn biased_bit(rng: &mut impl Rng, p_zero: f64) -> u32 {
    u32::from(rng.gen::<f64>() >= p_zero)
}

/// Multi-FK topology in the shape of the multiple-foreign-key example: two
/// mid-level relations referencing the primary, and a bottom relation
/// referencing both (so synthesis must reconcile it through the restricted
/// sample space).
pub fn chain_3level(n_primary: usize, seed: u64) -> (Database, PlantedTruth) {
    let schema = validate_schema(vec![
        RelationSchema {
            name: "r0".to_string(),
            privacy_class: PrivacyClass::PrimaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("x0", 2)],
            foreign_keys: vec![],
        },
        RelationSchema {
            name: "r1".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("x1", 2)],
            foreign_keys: vec![fk("r1", "r0", "r0_id", 2)],
        },
        RelationSchema {
            name: "r2".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("x2", 3)],
            foreign_keys: vec![fk("r2", "r0", "r0_id", 2)],
        },
        RelationSchema {
            name: "r3".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("x3", 2)],
            foreign_keys: vec![fk("r3", "r1", "r1_id", 2), fk("r3", "r2", "r2_id", 2)],
        },
    ])
    .unwrap();
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("bench/chain", 0);

    let mut r0 = Vec::new();
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    let mut clusters = Vec::new();
    for i in 0..n_primary {
        let x0 = rng.gen_range(0..2u32);
        clusters.push(x0 as usize);
        r0.push(vec![(i + 1).to_string(), x0.to_string()]);
        for j in 0..2 {
            // x1 correlates with the parent's x0.
            let x1 = if rng.gen::<f64>() < 0.85 { x0 } else { 1 - x0 };
            r1.push(vec![
                format!("{}", 2 * i + j + 1),
                x1.to_string(),
                (i + 1).to_string(),
            ]);
            let x2 = rng.gen_range(0..3u32);
            r2.push(vec![
                format!("{}", 2 * i + j + 1),
                x2.to_string(),
                (i + 1).to_string(),
            ]);
        }
    }
    // r3: two children per r1 tuple, paired with r2 parents so every r2 tuple
    // also receives exactly two.
    let n_mid = r1.len();
    let mut r3 = Vec::new();
    for i in 0..n_mid {
        for j in 0..2 {
            let r1_parent = i;
            let r2_parent = (i + j * (n_mid / 2 + 1)) % n_mid;
            let parent_x1: u32 = r1[r1_parent][1].parse().unwrap();
            let x3 = if rng.gen::<f64>() < 0.8 {
                parent_x1
            } else {
                1 - parent_x1
            };
            r3.push(vec![
                format!("{}", 2 * i + j + 1),
                x3.to_string(),
                (r1_parent + 1).to_string(),
                (r2_parent + 1).to_string(),
            ]);
        }
    }
    let relations = vec![
        load_relation(&schema, 0, &["id".into(), "x0".into()], r0).unwrap(),
        load_relation(&schema, 1, &["id".into(), "x1".into(), "r0_id".into()], r1).unwrap(),
        load_relation(&schema, 2, &["id".into(), "x2".into(), "r0_id".into()], r2).unwrap(),
        load_relation(
            &schema,
            3,
            &["id".into(), "x3".into(), "r1_id".into(), "r2_id".into()],
            r3,
        )
        .unwrap(),
    ];
    (
        Database { schema, relations },
        PlantedTruth {
            cluster_of_parent: clusters,
            p_z: vec![0.5, 0.5],
            p_size: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        },
    )
}

/// Public-parent benchmark: a public region relation, the primary private
/// relation referencing it, and a clustered secondary below that.
pub fn public_parent(n_public: usize, seed: u64) -> (Database, PlantedTruth) {
    let schema = validate_schema(vec![
        RelationSchema {
            name: "region".to_string(),
            privacy_class: PrivacyClass::Public,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("zone", 4)],
            foreign_keys: vec![],
        },
        RelationSchema {
            name: "household".to_string(),
            privacy_class: PrivacyClass::PrimaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("htype", 2)],
            foreign_keys: vec![fk("household", "region", "region_id", 4)],
        },
        RelationSchema {
            name: "person".to_string(),
            privacy_class: PrivacyClass::SecondaryPrivate,
            primary_key_column: "id".to_string(),
            attributes: vec![attr("a1", 2), attr("a2", 2)],
            foreign_keys: vec![fk("person", "household", "household_id", 3)],
        },
    ])
    .unwrap();
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("bench/public", 0);

    let mut regions = Vec::new();
    let mut households = Vec::new();
    let mut persons = Vec::new();
    let mut clusters = Vec::new();
    let mut h_id = 1usize;
    let mut p_id = 1usize;
    for r in 0..n_public {
        let zone = rng.gen_range(0..4u32);
        regions.push(vec![(r + 1).to_string(), zone.to_string()]);
        // Household count per region correlates with the zone.
        let n_h = 1 + (zone as usize + r) % 3;
        for _ in 0..n_h {
            // htype correlates with zone parity.
            let base = (zone % 2) as usize;
            let cluster = if rng.gen::<f64>() < 0.85 { base } else { 1 - base };
            clusters.push(cluster);
            households.push(vec![
                h_id.to_string(),
                (cluster as u32).to_string(),
                (r + 1).to_string(),
            ]);
            let size = if cluster == 0 { 2 } else { 3 };
            for _ in 0..size {
                let a1 = biased_bit(&mut rng, if cluster == 0 { 0.9 } else { 0.2 });
                let a2 = biased_bit(&mut rng, if cluster == 0 { 0.75 } else { 0.3 });
                persons.push(vec![
                    p_id.to_string(),
                    a1.to_string(),
                    a2.to_string(),
                    h_id.to_string(),
                ]);
                p_id += 1;
            }
            h_id += 1;
        }
    }
    let relations = vec![
        load_relation(&schema, 0, &["id".into(), "zone".into()], regions).unwrap(),
        load_relation(
            &schema,
            1,
            &["id".into(), "htype".into(), "region_id".into()],
            households,
        )
        .unwrap(),
        load_relation(
            &schema,
            2,
            &["id".into(), "a1".into(), "a2".into(), "household_id".into()],
            persons,
        )
        .unwrap(),
    ];
    (
        Database { schema, relations },
        PlantedTruth {
            cluster_of_parent: clusters,
            p_z: vec![0.5, 0.5],
            p_size: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        },
    )
}

pub fn gen_benchmark(
    profile: BenchmarkProfile,
    size: usize,
    seed: u64,
) -> (Database, PlantedTruth) {
    match profile {
        BenchmarkProfile::TwoClusterHouseholds => two_cluster_households(size, seed),
        BenchmarkProfile::Chain3Level => chain_3level(size, seed),
        BenchmarkProfile::PublicParent => public_parent(size, seed),
    }
}

// ---------------------------------------------------------------------------
// Independent-pairing baseline.
// ---------------------------------------------------------------------------

/// Baseline for two-level databases: synthesize both relations independently
/// with single-relation models, then pair children to parents at random,
/// preserving only a noisy group-size histogram. 80% of the budget goes to
/// the relation models (split evenly), 20% to the histogram.
pub fn baseline_independent_pairing(
    db: &Database,
    fk: FkId,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<Database, crate::select::SelectError> {
    let schema = &db.schema;
    let def = schema.fk_def(fk);
    let tau = def.max_multiplicity;
    let factory = RngFactory::new(seed);
    let mut ledger = if epsilon.is_infinite() {
        PrivacyLedger::noiseless()
    } else {
        PrivacyLedger::new(epsilon, delta)
    };
    let budget = ledger.gamma_sq_bound;
    let noiseless = epsilon.is_infinite();

    let mu_child = schema.tuple_multiplier(fk.child) as f64;
    let mu_parent = schema.tuple_multiplier(fk.parent).max(1) as f64;
    let mu_hist = schema.group_multiplier(fk) as f64;

    let single_noise = |mu: f64, d: usize, share: f64| -> crate::privacy::SingleStageNoise {
        if noiseless {
            return crate::privacy::SingleStageNoise {
                sigma_count: 0.0,
                sigma_oneway: 0.0,
                sigma_score: 0.0,
                sigma_twoway: 0.0,
            };
        }
        let b = share * budget;
        let n_pairs = (d * d.saturating_sub(1) / 2) as f64;
        let n_two = if n_pairs > 0.0 {
            d.div_ceil(2) as f64
        } else {
            0.0
        };
        let weights = [0.1, 0.4, 0.1 * f64::from(n_pairs > 0.0), 0.4 * f64::from(n_two > 0.0)];
        let wsum: f64 = weights.iter().sum();
        let solve = |n: f64, w: f64| {
            if n == 0.0 {
                f64::INFINITY
            } else {
                mu * (n / (w / wsum * b)).sqrt()
            }
        };
        crate::privacy::SingleStageNoise {
            sigma_count: solve(1.0, weights[0]),
            sigma_oneway: solve(d as f64, weights[1]),
            sigma_score: solve(n_pairs, weights[2]),
            sigma_twoway: solve(n_two, weights[3]),
        }
    };

    let parent_model = crate::select::select_single_relation_model(
        &db.relations[fk.parent],
        mu_parent,
        &single_noise(mu_parent, db.relations[fk.parent].width(), 0.4),
        20.0,
        120,
        crate::model::DEFAULT_CLIQUE_CAP,
        &mut ledger,
        &factory.scoped("baseline/parent"),
        "baseline:parent",
    )?;
    let child_model = crate::select::select_single_relation_model(
        &db.relations[fk.child],
        mu_child,
        &single_noise(mu_child, db.relations[fk.child].width(), 0.4),
        20.0,
        120,
        crate::model::DEFAULT_CLIQUE_CAP,
        &mut ledger,
        &factory.scoped("baseline/child"),
        "baseline:child",
    )?;

    // Noisy group-size histogram over 1..=tau.
    let grouping = build_groups(db, fk);
    let mut hist = vec![0.0; tau];
    for g in &grouping.groups {
        hist[g.member_rows.len() - 1] += 1.0;
    }
    let sigma_hist = if noiseless {
        0.0
    } else {
        mu_hist * (1.0 / (0.2 * budget)).sqrt()
    };
    let noisy_hist = perturb_vector(
        &mut ledger,
        "baseline:size_hist",
        mu_hist,
        sigma_hist,
        &hist,
        &mut factory.stream("baseline/hist", 0),
    );
    let clamped: Vec<f64> = noisy_hist.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let p_size: Vec<f64> = if total <= 0.0 {
        vec![1.0 / tau as f64; tau]
    } else {
        clamped.iter().map(|&x| x / total).collect()
    };

    // Generate both relations independently.
    let n_parents = parent_model.noisy_count.round().max(0.0) as usize;
    let n_children = child_model.noisy_count.round().max(0.0) as usize;
    let mut parent_rel = db.relations[fk.parent].clone().filtered(&vec![false; db.relations[fk.parent].n_rows()]);
    let mut child_rel = db.relations[fk.child].clone().filtered(&vec![false; db.relations[fk.child].n_rows()]);
    let parent_cal = parent_model.model.calibrate();
    let child_cal = child_model.model.calibrate();
    let mut rng = factory.stream("baseline/sample", 0);
    for i in 0..n_parents {
        let row = parent_model.model.sample_joint(&parent_cal, &mut rng);
        parent_rel.push_row((i + 1).to_string(), &row);
        for col in &mut parent_rel.fk_columns {
            col.values.push(String::new());
        }
    }
    // Random association preserving the size histogram: draw a size per
    // parent, hand out children sequentially.
    let mut child_idx = 0usize;
    let mut assignments: Vec<String> = Vec::new();
    'outer: for p in 0..n_parents {
        let size = 1 + super_sample(&p_size, &mut rng);
        for _ in 0..size {
            if child_idx >= n_children {
                break 'outer;
            }
            assignments.push((p + 1).to_string());
            child_idx += 1;
        }
    }
    let fk_col_pos = child_rel
        .fk_columns
        .iter()
        .position(|c| c.fk == fk)
        .expect("child has the fk column");
    for i in 0..assignments.len() {
        let row = child_model.model.sample_joint(&child_cal, &mut rng);
        child_rel.push_row((i + 1).to_string(), &row);
        for (ci, col) in child_rel.fk_columns.iter_mut().enumerate() {
            col.values.push(if ci == fk_col_pos {
                assignments[i].clone()
            } else {
                String::new()
            });
        }
    }

    let mut relations = db.relations.clone();
    relations[fk.parent] = parent_rel;
    relations[fk.child] = child_rel;
    Ok(Database {
        schema: schema.clone(),
        relations,
    })
}

fn super_sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Total-variation distance between the joint empirical distributions of
/// (group size, parent attribute tuple) in two databases.
pub fn size_pattern_tv_distance(a: &Database, b: &Database, fk: FkId) -> f64 {
    let hist = |db: &Database| -> std::collections::BTreeMap<(usize, Vec<u32>), f64> {
        let parent = &db.relations[fk.parent];
        let grouping = build_groups(db, fk);
        let mut sizes = vec![0usize; parent.n_rows()];
        for g in &grouping.groups {
            sizes[g.parent_row] = g.member_rows.len();
        }
        let mut h = std::collections::BTreeMap::new();
        for p in 0..parent.n_rows() {
            *h.entry((sizes[p], parent.row(p).to_vec())).or_insert(0.0) += 1.0;
        }
        let total: f64 = h.values().sum();
        for v in h.values_mut() {
            *v /= total;
        }
        h
    };
    let ha = hist(a);
    let hb = hist(b);
    let keys: std::collections::BTreeSet<_> = ha.keys().chain(hb.keys()).cloned().collect();
    0.5 * keys
        .into_iter()
        .map(|k| (ha.get(&k).unwrap_or(&0.0) - hb.get(&k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Report of one evaluation run, serialized for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub c: usize,
    pub attrs_per_pred: usize,
    pub mean_relative_error: f64,
    pub per_query: Vec<PerQuery>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQuery {
    pub query: Query,
    pub true_count: usize,
    pub synth_count: usize,
    pub relative_error: f64,
}

pub fn evaluate(
    truth: &Database,
    synth: &Database,
    fk: FkId,
    count: usize,
    c: usize,
    attrs_per_pred: usize,
    seed: u64,
) -> EvalReport {
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("eval/queries", 0);
    let queries = gen_queries(
        &truth.relations[fk.parent],
        &truth.relations[fk.child],
        truth.schema.fk_def(fk).max_multiplicity,
        count,
        c,
        attrs_per_pred,
        &mut rng,
    );
    let n_parents = truth.relations[fk.parent].n_rows();
    let per_query: Vec<PerQuery> = queries
        .into_iter()
        .map(|query| {
            let true_count = eval_query(truth, fk, &query);
            let synth_count = eval_query(synth, fk, &query);
            PerQuery {
                relative_error: relative_error(true_count, synth_count, n_parents),
                query,
                true_count,
                synth_count,
            }
        })
        .collect();
    let mean = per_query.iter().map(|p| p.relative_error).sum::<f64>() / per_query.len() as f64;
    EvalReport {
        queries: per_query.len(),
        c,
        attrs_per_pred,
        mean_relative_error: mean,
        per_query,
    }
}
