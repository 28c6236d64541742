//! Database schemas: relations, categorical attribute domains, the foreign-key
//! DAG with multiplicity bounds, privacy classes, and the derived quantities
//! the rest of the pipeline needs (private-FK total order, tuple and group
//! multipliers).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("foreign-key references form a cycle involving relation '{0}'")]
    CyclicForeignKeys(String),
    #[error("public relation '{child}' refers to private relation '{parent}'")]
    PublicRefersToPrivate { child: String, parent: String },
    #[error("schema declares more than one primary private relation ('{0}' and '{1}')")]
    MultiplePrimaryPrivate(String, String),
    #[error("schema declares no primary private relation")]
    MissingPrimaryPrivate,
    #[error("foreign key in '{child}' references unknown relation '{parent}'")]
    DanglingFKTarget { child: String, parent: String },
    #[error("relation '{relation}': {reason}")]
    PrivacyClassInconsistent { relation: String, reason: String },
    #[error("relation '{relation}': {reason}")]
    InvalidRelation { relation: String, reason: String },
    #[error("duplicate relation name '{0}'")]
    DuplicateRelation(String),
    #[error("schema file error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyClass {
    PrimaryPrivate,
    SecondaryPrivate,
    Public,
}

impl PrivacyClass {
    pub fn is_private(self) -> bool {
        !matches!(self, PrivacyClass::Public)
    }
}

/// A categorical attribute with a fixed finite domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub domain_size: usize,
    /// Optional decode table; when present, length must equal `domain_size`
    /// and labels must be unique.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_labels: Option<Vec<String>>,
}

/// A foreign key from `child_relation` to `parent_relation` with a bounded
/// multiplicity: each parent tuple is referred to by at most `max_multiplicity`
/// child tuples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub child_relation: String,
    pub parent_relation: String,
    pub child_fk_column: String,
    pub max_multiplicity: usize,
}

impl ForeignKeyDef {
    /// Stable identifier `child->parent` used in logs, ledger labels and RNG keys.
    pub fn label(&self) -> String {
        format!("{}->{}", self.child_relation, self.parent_relation)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationSchema {
    pub name: String,
    pub privacy_class: PrivacyClass,
    pub primary_key_column: String,
    pub attributes: Vec<AttributeDef>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeyDef>,
}

/// A foreign key identified by (child, parent) relation indices into the
/// schema's relation list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FkId {
    pub child: usize,
    pub parent: usize,
}

/// A validated schema: the FK graph is a DAG, privacy classes are closed, and
/// the strict total order `<` on private foreign keys has been computed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatabaseSchema {
    relations: Vec<RelationSchema>,
    /// All FK edges, indexed parallel to the flattened declaration order.
    fk_edges: Vec<(FkId, ForeignKeyDef)>,
    /// Private FKs (child is private) in ascending modeling order.
    private_fk_order: Vec<FkId>,
    /// Tuple multiplier per relation (0 for public relations).
    tuple_multipliers: Vec<usize>,
    primary_private: usize,
}

impl DatabaseSchema {
    pub fn relations(&self) -> &[RelationSchema] {
        &self.relations
    }

    pub fn relation(&self, idx: usize) -> &RelationSchema {
        &self.relations[idx]
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn primary_private_index(&self) -> usize {
        self.primary_private
    }

    pub fn fk_def(&self, fk: FkId) -> &ForeignKeyDef {
        &self
            .fk_edges
            .iter()
            .find(|(id, _)| *id == fk)
            .expect("fk id belongs to this schema")
            .1
    }

    pub fn fk_edges(&self) -> impl Iterator<Item = (FkId, &ForeignKeyDef)> {
        self.fk_edges.iter().map(|(id, def)| (*id, def))
    }

    /// Private foreign keys in ascending order of `<` (the modeling order).
    pub fn private_fk_order(&self) -> &[FkId] {
        &self.private_fk_order
    }

    /// Maximum number of tuples of `relation` that may change between
    /// neighboring databases. 1 for the primary private relation, the
    /// sum-over-FK-paths-of-multiplicity-products for other private relations,
    /// 0 for public relations.
    pub fn tuple_multiplier(&self, relation: usize) -> usize {
        self.tuple_multipliers[relation]
    }

    /// Maximum number of tuple groups induced by `fk` that may change between
    /// neighboring databases: the parent's tuple multiplier when the parent is
    /// private, the child's when the parent is public (then only group
    /// memberships change).
    pub fn group_multiplier(&self, fk: FkId) -> usize {
        let parent = &self.relations[fk.parent];
        if parent.privacy_class.is_private() {
            self.tuple_multipliers[fk.parent]
        } else {
            self.tuple_multipliers[fk.child]
        }
    }

    /// Relations that have no private foreign key of their own but are
    /// referred to by at least one private relation; these get standalone
    /// single-relation models. The primary private relation always needs one
    /// when it has no private FK, even if nothing refers to it (degenerate
    /// single-relation databases).
    pub fn standalone_model_relations(&self) -> Vec<usize> {
        let has_private_fk: BTreeSet<usize> =
            self.private_fk_order.iter().map(|fk| fk.child).collect();
        let referred_by_private: BTreeSet<usize> = self
            .fk_edges
            .iter()
            .filter(|(id, _)| self.relations[id.child].privacy_class.is_private())
            .map(|(id, _)| id.parent)
            .collect();
        (0..self.relations.len())
            .filter(|r| {
                !has_private_fk.contains(r)
                    && (referred_by_private.contains(r) || *r == self.primary_private)
            })
            .collect()
    }

    /// Number of private FKs pointing into `relation`; each contributes one
    /// latent column pair when the relation is augmented.
    pub fn private_fks_into(&self, relation: usize) -> usize {
        self.private_fk_order
            .iter()
            .filter(|fk| fk.parent == relation)
            .count()
    }
}

/// Validates a raw schema: relation/attribute well-formedness, FK targets,
/// acyclicity, privacy-class closure, and the private-FK total order.
pub fn validate_schema(relations: Vec<RelationSchema>) -> Result<DatabaseSchema, SchemaError> {
    let mut seen = BTreeSet::new();
    for r in &relations {
        if !seen.insert(r.name.clone()) {
            return Err(SchemaError::DuplicateRelation(r.name.clone()));
        }
        validate_relation(r)?;
    }

    let primary: Vec<usize> = relations
        .iter()
        .enumerate()
        .filter(|(_, r)| r.privacy_class == PrivacyClass::PrimaryPrivate)
        .map(|(i, _)| i)
        .collect();
    let primary_private = match primary.as_slice() {
        [] => return Err(SchemaError::MissingPrimaryPrivate),
        [one] => *one,
        [a, b, ..] => {
            return Err(SchemaError::MultiplePrimaryPrivate(
                relations[*a].name.clone(),
                relations[*b].name.clone(),
            ))
        }
    };

    let index_of: BTreeMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.name.as_str(), i))
        .collect();

    let mut fk_edges = Vec::new();
    for (child, r) in relations.iter().enumerate() {
        for def in &r.foreign_keys {
            let parent =
                *index_of
                    .get(def.parent_relation.as_str())
                    .ok_or(SchemaError::DanglingFKTarget {
                        child: r.name.clone(),
                        parent: def.parent_relation.clone(),
                    })?;
            if parent == child {
                return Err(SchemaError::CyclicForeignKeys(r.name.clone()));
            }
            if r.privacy_class == PrivacyClass::Public
                && relations[parent].privacy_class.is_private()
            {
                return Err(SchemaError::PublicRefersToPrivate {
                    child: r.name.clone(),
                    parent: relations[parent].name.clone(),
                });
            }
            fk_edges.push((FkId { child, parent }, def.clone()));
        }
    }

    check_acyclic(&relations, &fk_edges)?;
    check_privacy_closure(&relations, &fk_edges, primary_private)?;

    let tuple_multipliers = compute_tuple_multipliers(&relations, &fk_edges, primary_private);
    let private_fk_order = order_private_fks(&relations, &fk_edges);

    Ok(DatabaseSchema {
        relations,
        fk_edges,
        private_fk_order,
        tuple_multipliers,
        primary_private,
    })
}

fn validate_relation(r: &RelationSchema) -> Result<(), SchemaError> {
    let err = |reason: String| SchemaError::InvalidRelation {
        relation: r.name.clone(),
        reason,
    };
    let mut names = BTreeSet::new();
    for a in &r.attributes {
        if a.domain_size == 0 {
            return Err(err(format!("attribute '{}' has empty domain", a.name)));
        }
        if !names.insert(a.name.clone()) {
            return Err(err(format!("duplicate attribute name '{}'", a.name)));
        }
        if let Some(labels) = &a.value_labels {
            if labels.len() != a.domain_size {
                return Err(err(format!(
                    "attribute '{}' has {} labels for domain size {}",
                    a.name,
                    labels.len(),
                    a.domain_size
                )));
            }
            let distinct: BTreeSet<&String> = labels.iter().collect();
            if distinct.len() != labels.len() {
                return Err(err(format!("attribute '{}' has duplicate labels", a.name)));
            }
        }
    }
    let mut fk_cols = BTreeSet::new();
    for fk in &r.foreign_keys {
        if fk.max_multiplicity == 0 {
            return Err(err(format!(
                "foreign key to '{}' has zero multiplicity bound",
                fk.parent_relation
            )));
        }
        if names.contains(&fk.child_fk_column)
            || fk.child_fk_column == r.primary_key_column
            || !fk_cols.insert(fk.child_fk_column.clone())
        {
            return Err(err(format!(
                "foreign-key column '{}' collides with another column",
                fk.child_fk_column
            )));
        }
    }
    if names.contains(&r.primary_key_column) {
        return Err(err(format!(
            "primary-key column '{}' collides with an attribute",
            r.primary_key_column
        )));
    }
    Ok(())
}

fn check_acyclic(
    relations: &[RelationSchema],
    fk_edges: &[(FkId, ForeignKeyDef)],
) -> Result<(), SchemaError> {
    // Kahn's algorithm over the refers-to graph.
    let n = relations.len();
    let mut out_deg = vec![0usize; n];
    let mut parents_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (id, _) in fk_edges {
        out_deg[id.child] += 1;
        parents_of[id.parent].push(id.child);
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| out_deg[i] == 0).collect();
    let mut removed = 0;
    while let Some(v) = queue.pop() {
        removed += 1;
        for &c in &parents_of[v] {
            out_deg[c] -= 1;
            if out_deg[c] == 0 {
                queue.push(c);
            }
        }
    }
    if removed != n {
        let in_cycle = (0..n).find(|&i| out_deg[i] > 0).unwrap_or(0);
        return Err(SchemaError::CyclicForeignKeys(
            relations[in_cycle].name.clone(),
        ));
    }
    Ok(())
}

/// Every relation with an FK path to the primary private relation must be
/// secondary private, and every declared secondary-private relation must have
/// such a path.
fn check_privacy_closure(
    relations: &[RelationSchema],
    fk_edges: &[(FkId, ForeignKeyDef)],
    primary: usize,
) -> Result<(), SchemaError> {
    let n = relations.len();
    let mut reaches_primary = vec![false; n];
    reaches_primary[primary] = true;
    // Relax along child->parent edges until fixpoint (graph is a DAG).
    for _ in 0..n {
        for (id, _) in fk_edges {
            if reaches_primary[id.parent] {
                reaches_primary[id.child] = true;
            }
        }
    }
    for (i, r) in relations.iter().enumerate() {
        if i == primary {
            continue;
        }
        match (reaches_primary[i], r.privacy_class) {
            (true, PrivacyClass::SecondaryPrivate) | (false, PrivacyClass::Public) => {}
            (true, _) => {
                return Err(SchemaError::PrivacyClassInconsistent {
                    relation: r.name.clone(),
                    reason: "depends on the primary private relation but is not declared \
                             secondary_private"
                        .to_string(),
                })
            }
            (false, _) => {
                return Err(SchemaError::PrivacyClassInconsistent {
                    relation: r.name.clone(),
                    reason: "declared secondary_private but no foreign-key path reaches the \
                             primary private relation"
                        .to_string(),
                })
            }
        }
    }
    Ok(())
}

/// mu_t per relation: 1 for the primary private relation; for any other
/// private relation the sum over directed FK paths to the primary of the
/// product of multiplicity bounds along the path; 0 for public relations.
fn compute_tuple_multipliers(
    relations: &[RelationSchema],
    fk_edges: &[(FkId, ForeignKeyDef)],
    primary: usize,
) -> Vec<usize> {
    let n = relations.len();
    let mut mu = vec![0usize; n];
    mu[primary] = 1;
    // Order relations by distance so each child is computed after its parents;
    // the DAG guarantees a fixpoint after n relaxations.
    for _ in 0..n {
        for (i, r) in relations.iter().enumerate() {
            if i == primary || !r.privacy_class.is_private() {
                continue;
            }
            let total: usize = fk_edges
                .iter()
                .filter(|(id, _)| id.child == i)
                .map(|(id, def)| def.max_multiplicity * mu[id.parent])
                .sum();
            mu[i] = total;
        }
    }
    mu
}

/// Topological order on private FKs such that FK(R, R') precedes FK(R', R'').
/// Ties broken by (child name, parent name) lexicographic order.
fn order_private_fks(
    relations: &[RelationSchema],
    fk_edges: &[(FkId, ForeignKeyDef)],
) -> Vec<FkId> {
    let private: Vec<FkId> = fk_edges
        .iter()
        .filter(|(id, _)| relations[id.child].privacy_class.is_private())
        .map(|(id, _)| *id)
        .collect();
    // Constraint edges: e1 = (R, R') must precede e2 = (R', R'').
    let mut blockers: Vec<usize> = vec![0; private.len()]; // count of unfinished predecessors
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); private.len()];
    for (i, a) in private.iter().enumerate() {
        for (j, b) in private.iter().enumerate() {
            if a.parent == b.child {
                blockers[j] += 1;
                successors[i].push(j);
            }
        }
    }
    let key = |fk: &FkId| {
        (
            relations[fk.child].name.clone(),
            relations[fk.parent].name.clone(),
        )
    };
    let mut ready: BTreeSet<((String, String), usize)> = private
        .iter()
        .enumerate()
        .filter(|(i, _)| blockers[*i] == 0)
        .map(|(i, fk)| (key(fk), i))
        .collect();
    let mut order = Vec::with_capacity(private.len());
    while let Some(entry) = ready.iter().next().cloned() {
        ready.remove(&entry);
        let i = entry.1;
        order.push(private[i]);
        for &j in &successors[i] {
            blockers[j] -= 1;
            if blockers[j] == 0 {
                ready.insert((key(&private[j]), j));
            }
        }
    }
    debug_assert_eq!(order.len(), private.len(), "private FK graph is acyclic");
    order
}

// ---------------------------------------------------------------------------
// Schema file format (TOML).
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct SchemaFile {
    #[serde(rename = "relation")]
    relations: Vec<RelationFile>,
}

#[derive(Debug, Deserialize)]
struct RelationFile {
    name: String,
    privacy_class: PrivacyClass,
    primary_key: String,
    #[serde(rename = "attribute", default)]
    attributes: Vec<AttributeFile>,
    #[serde(rename = "foreign_key", default)]
    foreign_keys: Vec<ForeignKeyFile>,
}

#[derive(Debug, Deserialize)]
struct AttributeFile {
    name: String,
    domain_size: usize,
    #[serde(default)]
    values: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct ForeignKeyFile {
    column: String,
    references: String,
    max_multiplicity: usize,
}

/// Renders a schema in the canonical TOML format accepted by [`parse_schema`].
pub fn to_toml(schema: &DatabaseSchema) -> String {
    use std::fmt::Write;
    let class = |c: PrivacyClass| match c {
        PrivacyClass::PrimaryPrivate => "primary_private",
        PrivacyClass::SecondaryPrivate => "secondary_private",
        PrivacyClass::Public => "public",
    };
    let quote = |s: &str| format!("{s:?}");
    let mut out = String::new();
    for r in schema.relations() {
        writeln!(out, "[[relation]]").unwrap();
        writeln!(out, "name = {}", quote(&r.name)).unwrap();
        writeln!(out, "privacy_class = {}", quote(class(r.privacy_class))).unwrap();
        writeln!(out, "primary_key = {}", quote(&r.primary_key_column)).unwrap();
        for a in &r.attributes {
            writeln!(out, "\n[[relation.attribute]]").unwrap();
            writeln!(out, "name = {}", quote(&a.name)).unwrap();
            writeln!(out, "domain_size = {}", a.domain_size).unwrap();
            if let Some(labels) = &a.value_labels {
                let items: Vec<String> = labels.iter().map(|l| quote(l)).collect();
                writeln!(out, "values = [{}]", items.join(", ")).unwrap();
            }
        }
        for f in &r.foreign_keys {
            writeln!(out, "\n[[relation.foreign_key]]").unwrap();
            writeln!(out, "column = {}", quote(&f.child_fk_column)).unwrap();
            writeln!(out, "references = {}", quote(&f.parent_relation)).unwrap();
            writeln!(out, "max_multiplicity = {}", f.max_multiplicity).unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

/// Parses and validates the canonical TOML schema format (see README).
pub fn parse_schema(toml_text: &str) -> Result<DatabaseSchema, SchemaError> {
    let file: SchemaFile =
        toml::from_str(toml_text).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let relations = file
        .relations
        .into_iter()
        .map(|r| RelationSchema {
            name: r.name.clone(),
            privacy_class: r.privacy_class,
            primary_key_column: r.primary_key,
            attributes: r
                .attributes
                .into_iter()
                .map(|a| AttributeDef {
                    name: a.name,
                    domain_size: a.domain_size,
                    value_labels: a.values,
                })
                .collect(),
            foreign_keys: r
                .foreign_keys
                .into_iter()
                .map(|fk| ForeignKeyDef {
                    child_relation: r.name.clone(),
                    parent_relation: fk.references,
                    child_fk_column: fk.column,
                    max_multiplicity: fk.max_multiplicity,
                })
                .collect(),
        })
        .collect();
    validate_schema(relations)
}
