//! End-to-end modeling: processes every private foreign key in the total
//! order, augments parents with the inferred latent columns, then fits
//! standalone single-relation models for relations that need one.

use crate::data::{build_groups, Database};
use crate::em::{EmMode, LatentFkModel, Responsibilities};
use crate::model::{Model, ModelCheckpoint};
use crate::privacy::{
    plan_noise, standalone_sensitivity, C2Params, LedgerAudit, NoisePlan, PlanConfig,
    PrivacyLedger, SingleStageCounts,
};
use crate::rng::RngFactory;
use crate::schema::FkId;
use crate::select::{
    attach_latent_to_parent, build_fk_model, select_single_relation_model, SelectError,
    SelectParams, SelectionTrace, SingleRelationModel,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error at '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Run-level configuration beyond the privacy plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plan: PlanConfig,
    pub seed: u64,
    pub soft_em: bool,
    pub fit_steps: usize,
    pub clique_cap: usize,
    /// Implementation cap on the latent domain size.
    pub k_cap: usize,
    /// Fixed latent domain size override for every FK.
    pub k_override: Option<usize>,
    /// First-E-step responsibility jitter.
    pub init_jitter: f64,
}

impl PipelineConfig {
    pub fn new(plan: PlanConfig, seed: u64) -> Self {
        Self {
            plan,
            seed,
            soft_em: true,
            fit_steps: 120,
            clique_cap: crate::model::DEFAULT_CLIQUE_CAP,
            k_cap: 12,
            k_override: None,
            init_jitter: 0.25,
        }
    }

    pub fn mode(&self) -> EmMode {
        if self.soft_em {
            EmMode::Soft
        } else {
            EmMode::Hard
        }
    }

    fn select_params(&self, n_inc: usize) -> SelectParams {
        SelectParams {
            lambda: self.plan.lambda,
            t_em: self.plan.t_em,
            t_rounds: self.plan.t_rounds,
            n_candidates: self.plan.n_candidates,
            n_inc,
            mode: self.mode(),
            fit_steps: self.fit_steps,
            clique_cap: self.clique_cap,
            k_cap: self.k_cap,
            k_override: self.k_override,
            init_jitter: self.init_jitter,
        }
    }
}

/// The per-FK latent column pair attached to a parent relation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttachedPair {
    pub fk: FkId,
    pub fk_label: String,
    pub z1_col: usize,
    pub z2_col: usize,
    /// Latent domain size; the attached columns have domain k+1 with k as the
    /// reserved no-group value.
    pub k: usize,
}

/// One modeled foreign key.
pub struct FkModelEntry {
    pub fk: FkId,
    pub label: String,
    pub fkm: LatentFkModel,
    pub resp: Responsibilities,
    pub trace: SelectionTrace,
    pub c2: C2Params,
}

/// One standalone single-relation model.
pub struct StandaloneEntry {
    pub relation: usize,
    pub label: String,
    pub model: SingleRelationModel,
}

/// Everything modeling produced: models keyed by FK / relation, the augmented
/// column registry, the noise plan and the ledger.
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub plan: NoisePlan,
    pub fk_models: Vec<FkModelEntry>,
    pub standalone: Vec<StandaloneEntry>,
    /// Per relation: latent pairs attached by each FK into it, in order.
    pub attached: Vec<Vec<AttachedPair>>,
    pub ledger: PrivacyLedger,
    pub warnings: Vec<String>,
}

impl ModelBundle {
    pub fn fk_entry(&self, fk: FkId) -> &FkModelEntry {
        self.fk_models
            .iter()
            .find(|e| e.fk == fk)
            .expect("every private FK is modeled")
    }

    pub fn standalone_entry(&self, relation: usize) -> Option<&StandaloneEntry> {
        self.standalone.iter().find(|e| e.relation == relation)
    }

    pub fn attached_pair(&self, relation: usize, fk: FkId) -> &AttachedPair {
        self.attached[relation]
            .iter()
            .find(|p| p.fk == fk)
            .expect("fk attached a latent pair to this relation")
    }

    /// Sum of the closed-form consumption over all components.
    pub fn closed_form_consumption(&self) -> f64 {
        let mut total = 0.0;
        for e in &self.fk_models {
            let noise = self.plan.fk_noise(&strip_prefix(&e.label));
            total += crate::privacy::consumption_c2(&e.c2, noise);
        }
        for s in &self.standalone {
            let noise = self.plan.standalone_noise(&strip_prefix(&s.label));
            total +=
                crate::privacy::consumption_single(noise.mu, &s.model.realized, &noise.single);
        }
        total
    }
}

fn strip_prefix(label: &str) -> String {
    label
        .split_once(':')
        .map(|(_, rest)| rest.to_string())
        .unwrap_or_else(|| label.to_string())
}

/// Models every private FK in ascending order of the schema's total order
/// (attaching latent columns to parents as it goes), then fits standalone
/// models for relations without private FKs that are referred to by private
/// relations. `db` must be validated and truncated.
pub fn model_database(db: &Database, config: &PipelineConfig) -> Result<ModelBundle, PipelineError> {
    let schema = &db.schema;
    let plan = plan_noise(schema, &config.plan);
    let mut ledger = if config.plan.noiseless {
        PrivacyLedger::noiseless()
    } else {
        PrivacyLedger::new(config.plan.epsilon, config.plan.delta)
    };
    let factory = RngFactory::new(config.seed);
    let mut warnings = plan.warnings.clone();

    let mut working = db.clone();
    let mut attached: Vec<Vec<AttachedPair>> = vec![Vec::new(); schema.relations().len()];

    let mut fk_models = Vec::new();
    for &fk in schema.private_fk_order() {
        let def = schema.fk_def(fk);
        let label = format!("fk:{}", def.label());
        let grouping = build_groups(&working, fk);
        if !grouping.dangling_rows.is_empty() {
            warnings.push(format!(
                "{label}: {} dangling child rows excluded",
                grouping.dangling_rows.len()
            ));
        }
        let mu_t = schema.tuple_multiplier(fk.child) as f64;
        let mu_g = schema.group_multiplier(fk) as f64;
        let tau = def.max_multiplicity;
        let d_eff = working.relations[fk.child].width();
        let params = config.select_params(config.plan.n_inc(d_eff));
        let fk_noise = plan.fk_noise(&def.label());

        let build = build_fk_model(
            &working.relations[fk.child],
            &grouping.groups,
            &grouping.group_of_row,
            mu_t,
            mu_g,
            tau,
            fk_noise,
            &params,
            &mut ledger,
            &factory.scoped(&label),
            &label,
        )?;
        let universe = build.fkm.model.universe();
        let latent_vars: Vec<usize> = universe.latent_vars().collect();
        let k1 = universe.cardinality(latent_vars[0]);
        let k2 = universe.cardinality(latent_vars[1]);

        let parent_rel = &mut working.relations[fk.parent];
        attach_latent_to_parent(
            parent_rel,
            &grouping.groups,
            &build.resp,
            k1,
            k2,
            &def.label(),
        );
        attached[fk.parent].push(AttachedPair {
            fk,
            fk_label: def.label(),
            z1_col: parent_rel.width() - 2,
            z2_col: parent_rel.width() - 1,
            k: k1,
        });

        fk_models.push(FkModelEntry {
            fk,
            label,
            fkm: build.fkm,
            resp: build.resp,
            trace: build.trace,
            c2: build.c2,
        });
    }

    let mut standalone = Vec::new();
    for r in schema.standalone_model_relations() {
        let name = &schema.relation(r).name;
        let label = format!("rel:{name}");
        let noise = plan.standalone_noise(name);
        let model = select_single_relation_model(
            &working.relations[r],
            standalone_sensitivity(schema, r) as f64,
            &noise.single,
            config.plan.lambda,
            config.fit_steps,
            config.clique_cap,
            &mut ledger,
            &factory.scoped(&label),
            &label,
        )?;
        standalone.push(StandaloneEntry {
            relation: r,
            label,
            model,
        });
    }

    if !ledger.within_budget() {
        warnings.push(format!(
            "ledger total {} exceeds the budget {}",
            ledger.total(),
            ledger.gamma_sq_bound
        ));
    }

    Ok(ModelBundle {
        config: config.clone(),
        plan,
        fk_models,
        standalone,
        attached,
        ledger,
        warnings,
    })
}

/// Default delta: 1 over the number of tuples of the largest secondary
/// private relation (falling back to the primary when there is none).
pub fn default_delta(db: &Database) -> f64 {
    let schema = &db.schema;
    let n = schema
        .relations()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.privacy_class == crate::schema::PrivacyClass::SecondaryPrivate)
        .map(|(i, _)| db.relations[i].n_rows())
        .max()
        .unwrap_or_else(|| db.relations[schema.primary_private_index()].n_rows());
    1.0 / (n.max(2) as f64)
}

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FkModelArtifact {
    pub fk: FkId,
    pub label: String,
    pub checkpoint: ModelCheckpoint,
    pub p_z: Vec<f64>,
    pub p_size: Vec<Vec<f64>>,
    pub tau: usize,
    pub n_model: f64,
    pub iterations_done: usize,
    pub data: Vec<Vec<f64>>,
    pub hard_assignments: Vec<usize>,
    pub c2: C2Params,
    pub trace: SelectionTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandaloneArtifact {
    pub relation: usize,
    pub label: String,
    pub checkpoint: ModelCheckpoint,
    pub data: Vec<Vec<f64>>,
    pub noisy_count: f64,
    pub n_model: f64,
    pub realized: SingleStageCounts,
}

/// The bundle manifest: everything except the per-model checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub config: PipelineConfig,
    pub plan: NoisePlan,
    pub attached: Vec<Vec<AttachedPair>>,
    pub fk_labels: Vec<String>,
    pub standalone_labels: Vec<String>,
    pub warnings: Vec<String>,
}

/// Writes the bundle as a directory: manifest, ledger audit, and one
/// checkpoint file per model.
pub fn save_bundle(bundle: &ModelBundle, dir: &std::path::Path) -> Result<(), PipelineError> {
    let io_err = |path: &std::path::Path, source: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    let models = dir.join("models");
    std::fs::create_dir_all(&models).map_err(|e| io_err(&models, e))?;

    let manifest = BundleManifest {
        config: bundle.config.clone(),
        plan: bundle.plan.clone(),
        attached: bundle.attached.clone(),
        fk_labels: bundle.fk_models.iter().map(|e| e.label.clone()).collect(),
        standalone_labels: bundle.standalone.iter().map(|e| e.label.clone()).collect(),
        warnings: bundle.warnings.clone(),
    };
    let write_json = |path: &std::path::Path, value: &serde_json::Value| -> Result<(), PipelineError> {
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
            .map_err(|e| io_err(path, e))
    };
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    write_json(
        &dir.join("ledger.json"),
        &serde_json::to_value(LedgerAudit::from_ledger(&bundle.ledger))?,
    )?;
    // Combined selection trace: which latent marginals each FK build seeded,
    // scored and inserted.
    let traces: std::collections::BTreeMap<&str, &SelectionTrace> = bundle
        .fk_models
        .iter()
        .map(|e| (e.label.as_str(), &e.trace))
        .collect();
    write_json(
        &dir.join("selection_trace.json"),
        &serde_json::to_value(&traces)?,
    )?;

    for (i, e) in bundle.fk_models.iter().enumerate() {
        let artifact = FkModelArtifact {
            fk: e.fk,
            label: e.label.clone(),
            checkpoint: e.fkm.model.to_checkpoint(),
            p_z: e.fkm.p_z.clone(),
            p_size: e.fkm.p_size.clone(),
            tau: e.fkm.tau,
            n_model: e.fkm.n_model,
            iterations_done: e.fkm.iterations_done,
            data: e.fkm.data.clone(),
            hard_assignments: e.resp.hard.clone(),
            c2: e.c2.clone(),
            trace: e.trace.clone(),
        };
        write_json(
            &models.join(format!("fk_{i}.json")),
            &serde_json::to_value(&artifact)?,
        )?;
    }
    for (i, s) in bundle.standalone.iter().enumerate() {
        let artifact = StandaloneArtifact {
            relation: s.relation,
            label: s.label.clone(),
            checkpoint: s.model.model.to_checkpoint(),
            data: s.model.data.clone(),
            noisy_count: s.model.noisy_count,
            n_model: s.model.n_model,
            realized: s.model.realized.clone(),
        };
        write_json(
            &models.join(format!("rel_{i}.json")),
            &serde_json::to_value(&artifact)?,
        )?;
    }
    Ok(())
}

/// Reloads a bundle directory. Responsibilities are restored as hard one-hot
/// rows (soft rows are not persisted; synthesis only needs the models).
pub fn load_bundle(dir: &std::path::Path) -> Result<ModelBundle, PipelineError> {
    let io_err = |path: &std::path::Path, source: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    let read = |path: std::path::PathBuf| -> Result<String, PipelineError> {
        std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))
    };
    let manifest: BundleManifest = serde_json::from_str(&read(dir.join("manifest.json"))?)?;
    let audit: LedgerAudit = serde_json::from_str(&read(dir.join("ledger.json"))?)?;

    let mut ledger = if manifest.config.plan.noiseless {
        PrivacyLedger::noiseless()
    } else {
        PrivacyLedger::new(audit.epsilon, audit.delta)
    };
    for e in &audit.entries {
        ledger.record(&e.label, e.sensitivity, e.sigma, e.count);
    }

    let mut fk_models = Vec::new();
    for i in 0..manifest.fk_labels.len() {
        let artifact: FkModelArtifact =
            serde_json::from_str(&read(dir.join("models").join(format!("fk_{i}.json")))?)?;
        let span = artifact
            .checkpoint
            .universe
            .latent_span();
        let model = Model::from_checkpoint(artifact.checkpoint)?;
        let resp = Responsibilities {
            per_group: artifact
                .hard_assignments
                .iter()
                .map(|&z| {
                    let mut row = vec![0.0; span];
                    row[z] = 1.0;
                    row
                })
                .collect(),
            hard: artifact.hard_assignments,
            degenerate_groups: 0,
        };
        fk_models.push(FkModelEntry {
            fk: artifact.fk,
            label: artifact.label,
            fkm: LatentFkModel {
                label: manifest.fk_labels[i].clone(),
                model,
                data: artifact.data,
                p_z: artifact.p_z,
                p_size: artifact.p_size,
                tau: artifact.tau,
                n_model: artifact.n_model,
                iterations_done: artifact.iterations_done,
            },
            resp,
            trace: artifact.trace,
            c2: artifact.c2,
        });
    }
    let mut standalone = Vec::new();
    for i in 0..manifest.standalone_labels.len() {
        let artifact: StandaloneArtifact =
            serde_json::from_str(&read(dir.join("models").join(format!("rel_{i}.json")))?)?;
        standalone.push(StandaloneEntry {
            relation: artifact.relation,
            label: artifact.label.clone(),
            model: SingleRelationModel {
                label: artifact.label,
                model: Model::from_checkpoint(artifact.checkpoint)?,
                data: artifact.data,
                noisy_count: artifact.noisy_count,
                n_model: artifact.n_model,
                realized: artifact.realized,
            },
        });
    }

    Ok(ModelBundle {
        config: manifest.config,
        plan: manifest.plan,
        fk_models,
        standalone,
        attached: manifest.attached,
        ledger,
        warnings: manifest.warnings,
    })
}
