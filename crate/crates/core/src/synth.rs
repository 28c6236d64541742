//! Synthesis: walks the private foreign keys in descending order of the total
//! order, sampling fresh tuple groups per parent (or reconciling against an
//! already-synthesized child via a shrinking restriction set), with real
//! public relations kept as-is and their latent columns inferred from the DP
//! model. Pure post-processing: touches no private data, appends nothing to
//! the ledger.

use crate::data::{Database, EncodedRelation, FkColumn};
use crate::model::factor::logsumexp;
use crate::model::junction::sample_index_log;
use crate::model::{Model, ModelError};
use crate::pipeline::ModelBundle;
use crate::rng::RngFactory;
use crate::schema::PrivacyClass;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("relation '{0}' was never synthesized")]
    MissingRelation(String),
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// Override for the primary relation's target size (default: the model's
    /// noisy count).
    pub target_primary: Option<usize>,
}

/// Per-run log of non-fatal events.
#[derive(Debug, Clone, Default)]
pub struct SynthReport {
    pub warnings: Vec<String>,
    /// Parents left with empty groups after a restriction set emptied.
    pub exhausted_parents: usize,
    /// Leftover restricted-mode tuples dropped because no parent drew them.
    pub dropped_leftovers: usize,
}

/// In-progress synthetic relation: augmented rows (latent columns included)
/// plus FK wiring; emitted rows get sequential integer keys.
struct Partial {
    rel: EncodedRelation,
    /// Live flags for restricted-mode removal.
    alive: Vec<bool>,
}

/// Generates a synthetic database from a model bundle. `real` supplies the
/// truncated public relations (published as-is).
pub fn synthesize(
    bundle: &ModelBundle,
    real: &Database,
    options: &SynthOptions,
    seed: u64,
) -> Result<(Database, SynthReport), SynthError> {
    let schema = &real.schema;
    let factory = RngFactory::new(seed);
    let mut report = SynthReport::default();
    let n_rel = schema.relations().len();
    let mut partial: Vec<Option<Partial>> = (0..n_rel).map(|_| None).collect();

    // The primary relation comes from its standalone model unless it refers to
    // a public relation (then its groups are generated under that FK).
    let primary = schema.primary_private_index();
    let primary_has_fk = schema
        .private_fk_order()
        .iter()
        .any(|fk| fk.child == primary);
    if !primary_has_fk {
        let entry = bundle
            .standalone_entry(primary)
            .expect("primary without FKs has a standalone model");
        let target = options
            .target_primary
            .unwrap_or_else(|| entry.model.noisy_count.round().max(0.0) as usize);
        let rng = &mut factory.stream("synth/primary", 0);
        let cal = entry.model.model.calibrate();
        let mut rel = empty_like(schema, primary, bundle, real);
        for i in 0..target {
            let row = entry.model.model.sample_joint(&cal, rng);
            rel.push_row((i + 1).to_string(), &row);
        }
        let alive = vec![true; rel.n_rows()];
        partial[primary] = Some(Partial { rel, alive });
    }

    // Descending order of the private-FK total order.
    for &fk in schema.private_fk_order().iter().rev() {
        let def = schema.fk_def(fk);
        let entry = bundle.fk_entry(fk);
        let fkm = &entry.fkm;
        let universe = fkm.model.universe();
        let latent_vars: Vec<usize> = universe.latent_vars().collect();
        let (k1, k2) = (
            universe.cardinality(latent_vars[0]),
            universe.cardinality(latent_vars[1]),
        );
        let scope = factory.scoped(&format!("synth/fk:{}", def.label()));

        // Per parent tuple: (key, composite z or None for no-group).
        let parent_is_public =
            schema.relation(fk.parent).privacy_class == PrivacyClass::Public;
        let parents: Vec<(String, Option<usize>)> = if parent_is_public {
            let p_rel = &real.relations[fk.parent];
            let model = &bundle
                .standalone_entry(fk.parent)
                .expect("public parents referenced by private relations have a model")
                .model;
            let pair = bundle.attached_pair(fk.parent, fk);
            let mut rng = scope.stream("infer_public", 0);
            (0..p_rel.n_rows())
                .map(|r| {
                    let (z1, z2) =
                        infer_public_latent(&model.model, p_rel.row(r), pair.z1_col, pair.z2_col, &mut rng)?;
                    let z = if z1 as usize >= k1 || z2 as usize >= k2 {
                        None
                    } else {
                        Some(z1 as usize * k2 + z2 as usize)
                    };
                    Ok((p_rel.pk_values[r].clone(), z))
                })
                .collect::<Result<_, SynthError>>()?
        } else {
            let p = partial[fk.parent]
                .as_ref()
                .ok_or_else(|| SynthError::MissingRelation(schema.relation(fk.parent).name.clone()))?;
            let pair = bundle.attached_pair(fk.parent, fk);
            (0..p.rel.n_rows())
                .filter(|&r| p.alive[r])
                .map(|r| {
                    let z1 = p.rel.value(r, pair.z1_col) as usize;
                    let z2 = p.rel.value(r, pair.z2_col) as usize;
                    let z = if z1 >= k1 || z2 >= k2 {
                        None
                    } else {
                        Some(z1 * k2 + z2)
                    };
                    (p.rel.pk_values[r].clone(), z)
                })
                .collect()
        };

        if partial[fk.child].is_none() {
            // Fresh mode: sample a new group per parent.
            let mut rel = empty_like(schema, fk.child, bundle, real);
            let mut sampler = fkm.model.conditional_sampler();
            let mut size_rng = scope.stream("sizes", 0);
            let mut next_pk = 1usize;
            let fk_col_pos = rel
                .fk_columns
                .iter()
                .position(|c| c.fk == fk)
                .expect("child has a column for this fk");
            for (pi, (key, z)) in parents.iter().enumerate() {
                let Some(z) = z else { continue };
                let size = 1 + sample_categorical(&fkm.p_size[*z], &mut size_rng);
                let mut tuple_rng = scope.stream("fresh", pi as u64);
                for _ in 0..size {
                    let row = sampler.sample_given_z(*z, &mut tuple_rng);
                    rel.push_row(next_pk.to_string(), &row);
                    next_pk += 1;
                    for (ci, col) in rel.fk_columns.iter_mut().enumerate() {
                        col.values.push(if ci == fk_col_pos {
                            key.clone()
                        } else {
                            String::new()
                        });
                    }
                }
            }
            let alive = vec![true; rel.n_rows()];
            partial[fk.child] = Some(Partial { rel, alive });
        } else {
            // Restricted mode: draw without replacement from the existing
            // child, weighting each candidate by its model weight under z.
            let child = partial[fk.child].as_mut().unwrap();
            let fk_col_pos = child
                .rel
                .fk_columns
                .iter()
                .position(|c| c.fk == fk)
                .expect("child has a column for this fk");
            let mut remaining: Vec<usize> =
                (0..child.rel.n_rows()).filter(|&r| child.alive[r]).collect();
            // Log-weights per candidate per z, filled lazily.
            let mut weight_cache: std::collections::BTreeMap<usize, Vec<f64>> =
                std::collections::BTreeMap::new();
            let mut size_rng = scope.stream("sizes", 0);
            let mut pick_rng = scope.stream("restricted", 0);
            for (key, z) in parents.iter() {
                let Some(z) = z else { continue };
                if remaining.is_empty() {
                    report.exhausted_parents += 1;
                    continue;
                }
                let weights = weight_cache.entry(*z).or_insert_with(|| {
                    (0..child.rel.n_rows())
                        .map(|r| fkm.model.tuple_log_weight(child.rel.row(r), *z))
                        .collect()
                });
                let size =
                    (1 + sample_categorical(&fkm.p_size[*z], &mut size_rng)).min(remaining.len());
                for _ in 0..size {
                    let log_w: Vec<f64> = remaining.iter().map(|&r| weights[r]).collect();
                    let total = logsumexp(&log_w);
                    let pick = if total == f64::NEG_INFINITY {
                        pick_rng.gen_range(0..remaining.len())
                    } else {
                        sample_index_log(&log_w, &mut pick_rng)
                    };
                    let row = remaining.swap_remove(pick);
                    child.rel.fk_columns[fk_col_pos].values[row] = key.clone();
                }
            }
            // Tuples never drawn have no parent under this FK; drop them.
            if !remaining.is_empty() {
                report.dropped_leftovers += remaining.len();
                report.warnings.push(format!(
                    "fk {}: dropped {} child tuples left unmatched by the restriction pass",
                    def.label(),
                    remaining.len()
                ));
                for r in remaining {
                    child.alive[r] = false;
                }
            }
        }
    }

    // Emit: public relations as-is, private relations with latent scaffolding
    // stripped and dead rows removed.
    let mut out_relations = Vec::with_capacity(n_rel);
    for r in 0..n_rel {
        if schema.relation(r).privacy_class == PrivacyClass::Public {
            out_relations.push(real.relations[r].clone());
            continue;
        }
        let p = partial[r]
            .take()
            .ok_or_else(|| SynthError::MissingRelation(schema.relation(r).name.clone()))?;
        let mut rel = p.rel.filtered(&p.alive);
        let attached_cols: Vec<usize> = bundle.attached[r]
            .iter()
            .flat_map(|pair| [pair.z1_col, pair.z2_col])
            .collect();
        if !attached_cols.is_empty() {
            rel.drop_columns(&attached_cols);
        }
        out_relations.push(rel);
    }

    Ok((
        Database {
            schema: schema.clone(),
            relations: out_relations,
        },
        report,
    ))
}

/// Samples the latent pair of one public tuple from the DP single-relation
/// model conditioned on the tuple's observed attributes; a vanished
/// conditional falls back to the model's unconditioned latent marginal.
pub fn infer_public_latent(
    model: &Model,
    observed_row: &[u32],
    z1_col: usize,
    z2_col: usize,
    rng: &mut impl Rng,
) -> Result<(u32, u32), SynthError> {
    let evidence: Vec<(usize, usize)> = observed_row
        .iter()
        .enumerate()
        .map(|(c, &v)| (c, v as usize))
        .collect();
    let z1 = sample_var_conditioned(model, &evidence, z1_col, rng)?;
    let mut with_z1 = evidence.clone();
    with_z1.push((z1_col, z1));
    let z2 = sample_var_conditioned(model, &with_z1, z2_col, rng)?;
    Ok((z1 as u32, z2 as u32))
}

fn sample_var_conditioned(
    model: &Model,
    evidence: &[(usize, usize)],
    target: usize,
    rng: &mut impl Rng,
) -> Result<usize, SynthError> {
    let probs = match model.conditioned_var_marginal(evidence, target) {
        Ok(p) => p,
        Err(ModelError::ZeroConditionalMass) => model
            .conditioned_var_marginal(&[], target)
            .map_err(SynthError::from)?,
        Err(e) => return Err(e.into()),
    };
    Ok(sample_categorical(&probs, rng))
}

/// Draws an index from a normalized probability vector.
fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
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

/// Empty synthetic relation with the augmented column layout the bundle's
/// models were trained on (original attributes plus attached latent columns).
fn empty_like(
    schema: &crate::schema::DatabaseSchema,
    relation: usize,
    bundle: &ModelBundle,
    real: &Database,
) -> EncodedRelation {
    let base = &real.relations[relation];
    let mut attr_names = base.attr_names.clone();
    let mut domain_sizes = base.domain_sizes.clone();
    let mut value_labels = base.value_labels.clone();
    for pair in &bundle.attached[relation] {
        attr_names.push(format!("z1:{}", pair.fk_label));
        domain_sizes.push(pair.k + 1);
        value_labels.push(None);
        attr_names.push(format!("z2:{}", pair.fk_label));
        domain_sizes.push(pair.k + 1);
        value_labels.push(None);
    }
    let fk_columns = schema
        .fk_edges()
        .filter(|(id, _)| id.child == relation)
        .map(|(id, def)| FkColumn {
            fk: id,
            column_name: def.child_fk_column.clone(),
            values: Vec::new(),
        })
        .collect();
    EncodedRelation::new_empty(
        base.name.clone(),
        attr_names,
        domain_sizes,
        value_labels,
        fk_columns,
    )
}
