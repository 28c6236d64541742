//! Marginals: contingency tables over subsets of observed and latent
//! attributes, with the canonical row-major cell layout shared by the model,
//! the EM machinery and the tests.

use crate::data::EncodedRelation;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarginalError {
    #[error("attribute {0} is not a column of relation '{1}'")]
    AttrNotInRelation(usize, String),
    #[error("marginal specs do not match")]
    SpecMismatch,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// One variable of a model: an observed attribute column or a latent group
/// attribute.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VarDef {
    pub name: String,
    pub cardinality: usize,
    pub latent: bool,
}

/// The ordered variable universe of one model: observed attributes first (in
/// relation column order), then latent attributes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VariableSet {
    vars: Vec<VarDef>,
    n_observed: usize,
}

impl VariableSet {
    /// Observed-only universe matching the relation's columns.
    pub fn from_relation(rel: &EncodedRelation) -> Self {
        let vars: Vec<VarDef> = rel
            .attr_names
            .iter()
            .zip(&rel.domain_sizes)
            .map(|(name, &cardinality)| VarDef {
                name: name.clone(),
                cardinality,
                latent: false,
            })
            .collect();
        let n_observed = vars.len();
        Self { vars, n_observed }
    }

    /// Universe with latent attributes appended after the observed columns.
    pub fn with_latent(rel: &EncodedRelation, latent_dims: &[usize]) -> Self {
        let mut s = Self::from_relation(rel);
        for (i, &dim) in latent_dims.iter().enumerate() {
            s.vars.push(VarDef {
                name: format!("Z{}", i + 1),
                cardinality: dim,
                latent: true,
            });
        }
        s
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn cardinality(&self, var: usize) -> usize {
        self.vars[var].cardinality
    }

    pub fn is_latent(&self, var: usize) -> bool {
        self.vars[var].latent
    }

    pub fn name(&self, var: usize) -> &str {
        &self.vars[var].name
    }

    pub fn n_observed(&self) -> usize {
        self.n_observed
    }

    pub fn latent_vars(&self) -> std::ops::Range<usize> {
        self.n_observed..self.vars.len()
    }

    /// Product of latent cardinalities; 1 when there are no latent variables.
    pub fn latent_span(&self) -> usize {
        self.latent_vars().map(|v| self.cardinality(v)).product()
    }

    /// Index of a composite latent assignment, row-major over latent vars.
    pub fn latent_index(&self, values: &[usize]) -> usize {
        let mut idx = 0;
        for (v, &val) in self.latent_vars().zip(values) {
            idx = idx * self.cardinality(v) + val;
        }
        idx
    }

    /// Decodes a composite latent index back into per-variable values.
    pub fn latent_values(&self, mut idx: usize) -> Vec<usize> {
        let dims: Vec<usize> = self.latent_vars().map(|v| self.cardinality(v)).collect();
        let mut out = vec![0; dims.len()];
        for i in (0..dims.len()).rev() {
            out[i] = idx % dims[i];
            idx /= dims[i];
        }
        out
    }

    pub fn defs(&self) -> &[VarDef] {
        &self.vars
    }
}

/// An attribute subset; latent iff it contains at least one latent variable.
/// Variables are kept sorted by universe index, which puts latent variables
/// last.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct MarginalSpec {
    vars: Vec<usize>,
}

impl MarginalSpec {
    pub fn new(mut vars: Vec<usize>) -> Self {
        vars.sort_unstable();
        vars.dedup();
        Self { vars }
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn is_latent(&self, universe: &VariableSet) -> bool {
        self.vars.iter().any(|&v| universe.is_latent(v))
    }

    pub fn span(&self, universe: &VariableSet) -> usize {
        self.vars.iter().map(|&v| universe.cardinality(v)).product()
    }

    pub fn layout(&self, universe: &VariableSet) -> SpecLayout {
        let dims: Vec<usize> = self.vars.iter().map(|&v| universe.cardinality(v)).collect();
        let n_observed = self
            .vars
            .iter()
            .take_while(|&&v| !universe.is_latent(v))
            .count();
        let lat_span: usize = dims[n_observed..].iter().product();
        let obs_span: usize = dims[..n_observed].iter().product();
        SpecLayout {
            vars: self.vars.clone(),
            dims,
            n_observed,
            obs_span,
            lat_span,
        }
    }

    pub fn display(&self, universe: &VariableSet) -> String {
        self.vars
            .iter()
            .map(|&v| universe.name(v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Cell indexing for one spec: row-major over the spec's variables in
/// universe order, observed variables forming the most-significant prefix.
#[derive(Debug, Clone)]
pub struct SpecLayout {
    pub vars: Vec<usize>,
    pub dims: Vec<usize>,
    pub n_observed: usize,
    pub obs_span: usize,
    pub lat_span: usize,
}

impl SpecLayout {
    pub fn span(&self) -> usize {
        self.obs_span * self.lat_span
    }

    /// Cell index of the observed part for one relation row (observed var ids
    /// are relation column indices).
    pub fn obs_index(&self, row: &[u32]) -> usize {
        let mut idx = 0;
        for i in 0..self.n_observed {
            idx = idx * self.dims[i] + row[self.vars[i]] as usize;
        }
        idx
    }

    /// Maps a full composite latent index to this spec's latent-part index.
    /// Returns one entry per composite value.
    pub fn latent_projection(&self, universe: &VariableSet) -> Vec<usize> {
        let full = universe.latent_span();
        (0..full)
            .map(|z| {
                let values = universe.latent_values(z);
                let mut idx = 0;
                for i in self.n_observed..self.vars.len() {
                    let v = self.vars[i];
                    let pos = v - universe.n_observed();
                    idx = idx * self.dims[i] + values[pos];
                }
                idx
            })
            .collect()
    }
}

/// A set of counts over the span of a spec, plus noise metadata.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MarginalTable {
    pub spec: MarginalSpec,
    pub counts: Vec<f64>,
    pub noise_scale: f64,
    pub noisy: bool,
}

/// Exact contingency counts of `relation` on an observed-only spec.
pub fn compute_observed(
    relation: &EncodedRelation,
    universe: &VariableSet,
    spec: &MarginalSpec,
) -> Result<MarginalTable, MarginalError> {
    for &v in spec.vars() {
        if v >= universe.n_observed() || v >= relation.width() {
            return Err(MarginalError::AttrNotInRelation(v, relation.name.clone()));
        }
    }
    let layout = spec.layout(universe);
    let mut counts = vec![0.0; layout.span()];
    for r in 0..relation.n_rows() {
        counts[layout.obs_index(relation.row(r))] += 1.0;
    }
    Ok(MarginalTable {
        spec: spec.clone(),
        counts,
        noise_scale: 0.0,
        noisy: false,
    })
}

/// Expected counts of a latent marginal given per-group responsibilities over
/// the composite latent domain: cell (a, z) sums p(z | G_t) over tuples t
/// matching a on the spec's observed variables.
pub fn compute_latent_expected(
    relation: &EncodedRelation,
    universe: &VariableSet,
    spec: &MarginalSpec,
    group_of_row: &[usize],
    responsibilities: &[Vec<f64>],
) -> Result<MarginalTable, MarginalError> {
    if group_of_row.len() != relation.n_rows() {
        return Err(MarginalError::DimensionMismatch(format!(
            "group map covers {} rows, relation has {}",
            group_of_row.len(),
            relation.n_rows()
        )));
    }
    let layout = spec.layout(universe);
    let full_span = universe.latent_span();
    if responsibilities.iter().any(|r| r.len() != full_span) {
        return Err(MarginalError::DimensionMismatch(
            "responsibility rows must cover the composite latent domain".to_string(),
        ));
    }
    let projection = layout.latent_projection(universe);
    // Pre-marginalize each group's responsibilities onto this spec's latent part.
    let group_marg: Vec<Vec<f64>> = responsibilities
        .iter()
        .map(|resp| {
            let mut m = vec![0.0; layout.lat_span];
            for (z, &p) in resp.iter().enumerate() {
                m[projection[z]] += p;
            }
            m
        })
        .collect();
    let mut counts = vec![0.0; layout.span()];
    for r in 0..relation.n_rows() {
        let g = group_of_row[r];
        let base = layout.obs_index(relation.row(r)) * layout.lat_span;
        let m = &group_marg[g];
        for (j, &p) in m.iter().enumerate() {
            counts[base + j] += p;
        }
    }
    Ok(MarginalTable {
        spec: spec.clone(),
        counts,
        noise_scale: 0.0,
        noisy: false,
    })
}

/// Adds independent N(0, sigma^2) to each cell. The caller records the ledger
/// entry; this function only perturbs.
pub fn add_gaussian_noise<R: Rng>(table: &MarginalTable, sigma: f64, rng: &mut R) -> MarginalTable {
    let mut out = table.clone();
    out.noise_scale = sigma;
    out.noisy = true;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
        for c in &mut out.counts {
            *c += normal.sample(rng);
        }
    }
    out
}

/// Signal-to-noise admission test: average count >= lambda times the expected
/// absolute Gaussian noise, i.e. n / span >= lambda * sqrt(2/pi) * sigma.
pub fn lambda_useful(span: usize, noisy_n: f64, sigma: f64, lambda: f64) -> bool {
    noisy_n / span as f64 >= lambda * (2.0 / std::f64::consts::PI).sqrt() * sigma
}

/// L1 distance between two tables over the same spec.
pub fn l1_distance(a: &MarginalTable, b: &MarginalTable) -> Result<f64, MarginalError> {
    if a.spec != b.spec || a.counts.len() != b.counts.len() {
        return Err(MarginalError::SpecMismatch);
    }
    Ok(a.counts
        .iter()
        .zip(&b.counts)
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Sums a latent table over its latent variables, producing the corresponding
/// observed table (used by selection and by consistency checks).
pub fn collapse_latent(table: &MarginalTable, universe: &VariableSet) -> MarginalTable {
    let layout = table.spec.layout(universe);
    let obs_vars: Vec<usize> = layout.vars[..layout.n_observed].to_vec();
    let mut counts = vec![0.0; layout.obs_span];
    for (i, &c) in table.counts.iter().enumerate() {
        counts[i / layout.lat_span] += c;
    }
    MarginalTable {
        spec: MarginalSpec::new(obs_vars),
        counts,
        noise_scale: table.noise_scale,
        noisy: table.noisy,
    }
}
