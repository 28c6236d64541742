//! Exponential-family graphical model over observed and latent attributes.
//!
//! The model is parameterized by one real theta coordinate per cell of every
//! marginal in its spec set; the joint over (tuple, latent) assignments is the
//! normalized product of exp(theta) factors. Inference runs exactly over a
//! junction tree; fitting maximizes the concave log-domain objective
//! sum(data * theta) - n * log A(theta) by gradient ascent with backtracking.

pub mod factor;
pub mod junction;

use crate::data::EncodedRelation;
use crate::marginal::{MarginalSpec, VariableSet};
pub use junction::{Calibrated, JunctionTree, TreeError, DEFAULT_CLIQUE_CAP};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective became non-finite")]
    NonFiniteObjective,
    #[error("restriction set is empty")]
    EmptyRestriction,
    #[error("conditional distribution has zero mass")]
    ZeroConditionalMass,
}

#[derive(Debug, Clone)]
pub struct Model {
    universe: VariableSet,
    specs: Vec<MarginalSpec>,
    theta: Vec<Vec<f64>>,
    tree: JunctionTree,
    clique_cap: usize,
}

/// Objective values of the accepted iterates (index 0 is the starting point).
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub objectives: Vec<f64>,
    pub steps: usize,
    pub final_grad_inf: f64,
}

impl Model {
    pub fn new(
        universe: VariableSet,
        specs: Vec<MarginalSpec>,
        clique_cap: usize,
    ) -> Result<Self, ModelError> {
        let tree = JunctionTree::build(&universe, &specs, clique_cap)?;
        let theta = specs.iter().map(|s| vec![0.0; s.span(&universe)]).collect();
        Ok(Self {
            universe,
            specs,
            theta,
            tree,
            clique_cap,
        })
    }

    pub fn universe(&self) -> &VariableSet {
        &self.universe
    }

    pub fn specs(&self) -> &[MarginalSpec] {
        &self.specs
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<Vec<f64>>) {
        debug_assert_eq!(theta.len(), self.specs.len());
        self.theta = theta;
    }

    pub fn clique_cap(&self) -> usize {
        self.clique_cap
    }

    pub fn spec_index(&self, spec: &MarginalSpec) -> Option<usize> {
        self.specs.iter().position(|s| s == spec)
    }

    pub fn has_spec(&self, spec: &MarginalSpec) -> bool {
        self.spec_index(spec).is_some()
    }

    /// Inserts new specs with zero-initialized coordinates, rebuilding the
    /// junction tree. Fails (leaving the model unchanged) if the enlarged
    /// model exceeds the clique cap.
    pub fn add_specs(&mut self, new_specs: &[MarginalSpec]) -> Result<(), ModelError> {
        let mut specs = self.specs.clone();
        let mut theta = self.theta.clone();
        for s in new_specs {
            if !specs.contains(s) {
                theta.push(vec![0.0; s.span(&self.universe)]);
                specs.push(s.clone());
            }
        }
        let tree = JunctionTree::build(&self.universe, &specs, self.clique_cap)?;
        self.specs = specs;
        self.theta = theta;
        self.tree = tree;
        Ok(())
    }

    pub fn calibrate(&self) -> Calibrated {
        self.tree.calibrate(&self.universe, &self.specs, &self.theta, &[])
    }

    pub fn calibrate_with_evidence(&self, evidence: &[(usize, usize)]) -> Calibrated {
        self.tree
            .calibrate(&self.universe, &self.specs, &self.theta, evidence)
    }

    /// log A(theta): the log-partition value of the joint over (tuple, latent).
    pub fn log_partition(&self) -> f64 {
        self.calibrate().log_z
    }

    /// Model marginal probabilities per spec, from a calibration pass.
    pub fn marginal_probs(&self, cal: &Calibrated) -> Vec<Vec<f64>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| cal.marginal_from(self.tree.spec_home[i], s.vars()))
            .collect()
    }

    /// Model marginal counts scaled by `n`, for every spec.
    pub fn infer_marginals(&self, n: f64) -> Vec<Vec<f64>> {
        let cal = self.calibrate();
        self.marginal_probs(&cal)
            .into_iter()
            .map(|p| p.into_iter().map(|x| n * x).collect())
            .collect()
    }

    /// L(theta) = sum(data * theta) - n * log A(theta).
    pub fn objective(&self, data: &[Vec<f64>], n: f64) -> f64 {
        let linear: f64 = data
            .iter()
            .zip(&self.theta)
            .map(|(d, t)| d.iter().zip(t).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        linear - n * self.log_partition()
    }

    /// Gradient of L: data[c] - n * model_marginal[c] per coordinate.
    pub fn em_gradient(&self, data: &[Vec<f64>], n: f64) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_data_shape(data)?;
        let cal = self.calibrate();
        let probs = self.marginal_probs(&cal);
        Ok(data
            .iter()
            .zip(&probs)
            .map(|(d, p)| d.iter().zip(p).map(|(x, q)| x - n * q).collect())
            .collect())
    }

    fn check_data_shape(&self, data: &[Vec<f64>]) -> Result<(), ModelError> {
        if data.len() != self.specs.len()
            || data
                .iter()
                .zip(&self.specs)
                .any(|(d, s)| d.len() != s.span(&self.universe))
        {
            return Err(ModelError::DimensionMismatch(
                "data counts must have one value per theta coordinate".to_string(),
            ));
        }
        Ok(())
    }

    /// Gradient ascent with Armijo backtracking on L. The objective never
    /// decreases across accepted steps; stops when the gradient infinity norm
    /// falls below 1e-6 * n or the step budget is exhausted.
    pub fn fit_theta(
        &mut self,
        data: &[Vec<f64>],
        n: f64,
        max_steps: usize,
    ) -> Result<FitTrace, ModelError> {
        self.check_data_shape(data)?;
        let scale = n.max(1.0);
        let tol = 1e-6 * scale;
        let mut cal = self.calibrate();
        let linear = |theta: &[Vec<f64>]| -> f64 {
            data.iter()
                .zip(theta)
                .map(|(d, t)| d.iter().zip(t).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        };
        let mut obj = linear(&self.theta) - n * cal.log_z;
        if !obj.is_finite() {
            return Err(ModelError::NonFiniteObjective);
        }
        let mut trace = FitTrace {
            objectives: vec![obj],
            steps: 0,
            final_grad_inf: f64::INFINITY,
        };
        let mut alpha = 1.0 / scale;
        for _ in 0..max_steps {
            let probs = self.marginal_probs(&cal);
            let grad: Vec<Vec<f64>> = data
                .iter()
                .zip(&probs)
                .map(|(d, p)| d.iter().zip(p).map(|(x, q)| x - n * q).collect())
                .collect();
            let grad_inf = grad
                .iter()
                .flatten()
                .fold(0.0_f64, |m, &g| m.max(g.abs()));
            trace.final_grad_inf = grad_inf;
            if grad_inf <= tol {
                break;
            }
            let grad_sq: f64 = grad.iter().flatten().map(|g| g * g).sum();
            let mut accepted = false;
            while alpha >= 1e-18 {
                let candidate: Vec<Vec<f64>> = self
                    .theta
                    .iter()
                    .zip(&grad)
                    .map(|(t, g)| t.iter().zip(g).map(|(x, y)| x + alpha * y).collect())
                    .collect();
                let cand_cal =
                    self.tree
                        .calibrate(&self.universe, &self.specs, &candidate, &[]);
                let cand_obj = linear(&candidate) - n * cand_cal.log_z;
                if cand_obj.is_finite() && cand_obj >= obj + 1e-4 * alpha * grad_sq {
                    self.theta = candidate;
                    cal = cand_cal;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break; // numerically flat
            }
            trace.objectives.push(obj);
            trace.steps += 1;
            alpha *= 2.0;
        }
        Ok(trace)
    }

    /// Joint probabilities over the composite latent domain (row-major over
    /// the universe's latent variables).
    pub fn latent_joint(&self, cal: &Calibrated) -> Vec<f64> {
        let latent: Vec<usize> = self.universe.latent_vars().collect();
        if latent.is_empty() {
            return vec![1.0];
        }
        if let Some(home) = self
            .tree
            .cliques
            .iter()
            .position(|c| latent.iter().all(|v| c.contains(v)))
        {
            return cal.marginal_from(home, &latent);
        }
        // No clique covers all latent vars: fall back to per-value conditioning.
        let span = self.universe.latent_span();
        (0..span)
            .map(|z| {
                let evidence = self.latent_evidence(z);
                let cz = self.calibrate_with_evidence(&evidence);
                (cz.log_z - cal.log_z).exp()
            })
            .collect()
    }

    fn latent_evidence(&self, z: usize) -> Vec<(usize, usize)> {
        let values = self.universe.latent_values(z);
        self.universe.latent_vars().zip(values).collect()
    }

    /// Unnormalized log-weight of one tuple row under composite latent value
    /// `z` (the sum of linked theta coordinates).
    pub fn tuple_log_weight(&self, row: &[u32], z: usize) -> f64 {
        let mut w = 0.0;
        for (s, spec) in self.specs.iter().enumerate() {
            let layout = spec.layout(&self.universe);
            let obs = layout.obs_index(row);
            let cell = if layout.lat_span == 1 {
                obs
            } else {
                let proj = layout.latent_projection(&self.universe);
                obs * layout.lat_span + proj[z]
            };
            w += self.theta[s][cell];
        }
        w
    }

    /// Model-implied joint probabilities over an arbitrary variable set, even
    /// when no clique covers it: a scratch tree is built with a zero-theta
    /// query spec added (which leaves the distribution unchanged).
    pub fn implied_joint(&self, vars: &[usize]) -> Result<Vec<f64>, ModelError> {
        let query = MarginalSpec::new(vars.to_vec());
        if let Some(home) = self
            .tree
            .cliques
            .iter()
            .position(|c| query.vars().iter().all(|v| c.contains(v)))
        {
            let cal = self.calibrate();
            return Ok(cal.marginal_from(home, query.vars()));
        }
        let mut specs = self.specs.clone();
        let mut theta = self.theta.clone();
        theta.push(vec![0.0; query.span(&self.universe)]);
        specs.push(query.clone());
        let tree = JunctionTree::build(&self.universe, &specs, self.clique_cap)?;
        let cal = tree.calibrate(&self.universe, &specs, &theta, &[]);
        let idx = specs.len() - 1;
        Ok(cal.marginal_from(tree.spec_home[idx], query.vars()))
    }

    /// Conditional marginal probabilities of `target` given pinned evidence.
    pub fn conditioned_var_marginal(
        &self,
        evidence: &[(usize, usize)],
        target: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let cal = self.calibrate_with_evidence(evidence);
        if cal.log_z == f64::NEG_INFINITY {
            return Err(ModelError::ZeroConditionalMass);
        }
        let home = self
            .tree
            .cliques
            .iter()
            .position(|c| c.contains(&target))
            .expect("every variable is covered by some clique");
        Ok(cal.marginal_from(home, &[target]))
    }

    /// Samples one full joint assignment (all universe variables).
    pub fn sample_joint<R: Rng>(&self, cal: &Calibrated, rng: &mut R) -> Vec<u32> {
        junction::sample_assignment(&self.tree, cal, self.universe.len(), rng)
            .into_iter()
            .map(|v| v as u32)
            .collect()
    }

    pub fn conditional_sampler(&self) -> ConditionalSampler<'_> {
        ConditionalSampler {
            model: self,
            cache: std::collections::BTreeMap::new(),
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            universe: self.universe.clone(),
            specs: self.specs.clone(),
            theta: self.theta.clone(),
            clique_cap: self.clique_cap,
        }
    }

    pub fn from_checkpoint(cp: ModelCheckpoint) -> Result<Self, ModelError> {
        let tree = JunctionTree::build(&cp.universe, &cp.specs, cp.clique_cap)?;
        Ok(Self {
            universe: cp.universe,
            specs: cp.specs,
            theta: cp.theta,
            tree,
            clique_cap: cp.clique_cap,
        })
    }
}

/// Serializable model state; the junction tree is rebuilt deterministically
/// from the specs on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub universe: VariableSet,
    pub specs: Vec<MarginalSpec>,
    pub theta: Vec<Vec<f64>>,
    pub clique_cap: usize,
}

/// Ancestral sampler for p(tuple | z), caching one conditioned calibration per
/// composite latent value.
pub struct ConditionalSampler<'a> {
    model: &'a Model,
    cache: std::collections::BTreeMap<usize, Calibrated>,
}

impl ConditionalSampler<'_> {
    /// Samples the observed attribute values of one tuple given composite
    /// latent value `z`.
    pub fn sample_given_z<R: Rng>(&mut self, z: usize, rng: &mut R) -> Vec<u32> {
        let model = self.model;
        let cal = self
            .cache
            .entry(z)
            .or_insert_with(|| model.calibrate_with_evidence(&model.latent_evidence(z)));
        let full = junction::sample_assignment(&model.tree, cal, model.universe.len(), rng);
        full[..model.universe.n_observed()]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }
}

/// Precomputed per-row theta cell indices for one relation, used by the hot
/// E-step and expected-count paths.
pub struct TupleScorer {
    /// (spec index, per-row observed cell index) for observed-only specs.
    obs_specs: Vec<(usize, Vec<u32>)>,
    /// (spec index, per-row observed cell index, lat span, composite->spec
    /// latent projection) for latent specs.
    lat_specs: Vec<(usize, Vec<u32>, usize, Vec<usize>)>,
}

impl TupleScorer {
    pub fn new(model: &Model, relation: &EncodedRelation) -> Self {
        let mut obs_specs = Vec::new();
        let mut lat_specs = Vec::new();
        for (s, spec) in model.specs().iter().enumerate() {
            let layout = spec.layout(model.universe());
            let idx: Vec<u32> = (0..relation.n_rows())
                .map(|r| layout.obs_index(relation.row(r)) as u32)
                .collect();
            if layout.lat_span == 1 {
                obs_specs.push((s, idx));
            } else {
                let proj = layout.latent_projection(model.universe());
                lat_specs.push((s, idx, layout.lat_span, proj));
            }
        }
        Self {
            obs_specs,
            lat_specs,
        }
    }

    /// Sum of theta over observed-spec cells linked to row `r` (independent
    /// of z).
    pub fn observed_part(&self, theta: &[Vec<f64>], r: usize) -> f64 {
        self.obs_specs
            .iter()
            .map(|(s, idx)| theta[*s][idx[r] as usize])
            .sum()
    }

    /// Sum of theta over latent-spec cells linked to (row `r`, composite `z`).
    pub fn latent_part(&self, theta: &[Vec<f64>], r: usize, z: usize) -> f64 {
        self.lat_specs
            .iter()
            .map(|(s, idx, lat_span, proj)| theta[*s][idx[r] as usize * lat_span + proj[z]])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EncodedRelation;
    use factor::logsumexp;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relation(dims: &[usize]) -> EncodedRelation {
        EncodedRelation::new_empty(
            "t".to_string(),
            (0..dims.len()).map(|i| format!("a{i}")).collect(),
            dims.to_vec(),
            vec![None; dims.len()],
            vec![],
        )
    }

    /// Brute-force joint enumeration: weight of each (tuple, z) assignment is
    /// the sum of linked theta coordinates.
    struct BruteForce {
        dims: Vec<usize>,
        log_weights: Vec<f64>,
    }

    impl BruteForce {
        fn new(model: &Model) -> Self {
            let u = model.universe();
            let dims: Vec<usize> = (0..u.len()).map(|v| u.cardinality(v)).collect();
            let total: usize = dims.iter().product();
            let mut log_weights = vec![0.0; total];
            for (lin, w) in log_weights.iter_mut().enumerate() {
                let assign = decode(lin, &dims);
                for (s, spec) in model.specs().iter().enumerate() {
                    let layout = spec.layout(u);
                    let mut cell = 0;
                    for (i, &v) in layout.vars.iter().enumerate() {
                        cell = cell * layout.dims[i] + assign[v];
                    }
                    *w += model.theta()[s][cell];
                }
            }
            Self { dims, log_weights }
        }

        fn log_z(&self) -> f64 {
            logsumexp(&self.log_weights)
        }

        fn marginal(&self, model: &Model, s: usize) -> Vec<f64> {
            let u = model.universe();
            let spec = &model.specs()[s];
            let layout = spec.layout(u);
            let lz = self.log_z();
            let mut out = vec![0.0; layout.dims.iter().product()];
            for (lin, &w) in self.log_weights.iter().enumerate() {
                let assign = decode(lin, &self.dims);
                let mut cell = 0;
                for (i, &v) in layout.vars.iter().enumerate() {
                    cell = cell * layout.dims[i] + assign[v];
                }
                out[cell] += (w - lz).exp();
            }
            out
        }
    }

    fn decode(mut lin: usize, dims: &[usize]) -> Vec<usize> {
        let mut out = vec![0; dims.len()];
        for i in (0..dims.len()).rev() {
            out[i] = lin % dims[i];
            lin /= dims[i];
        }
        out
    }

    fn random_model(rng: &mut ChaCha8Rng, with_latent: bool) -> Model {
        let n_attrs = rng.gen_range(2..=4);
        let dims: Vec<usize> = (0..n_attrs).map(|_| rng.gen_range(2..=3)).collect();
        let rel = relation(&dims);
        let universe = if with_latent {
            VariableSet::with_latent(&rel, &[2, 2])
        } else {
            VariableSet::from_relation(&rel)
        };
        let n_vars = universe.len();
        let mut specs = Vec::new();
        // Singletons keep every variable covered, then random pairs/triples.
        for v in 0..n_vars {
            specs.push(MarginalSpec::new(vec![v]));
        }
        for _ in 0..rng.gen_range(2..=4) {
            let a = rng.gen_range(0..n_vars);
            let b = rng.gen_range(0..n_vars);
            if a != b {
                specs.push(MarginalSpec::new(vec![a, b]));
            }
        }
        specs.dedup();
        let mut model = Model::new(universe, specs, DEFAULT_CLIQUE_CAP).unwrap();
        let theta: Vec<Vec<f64>> = model
            .theta()
            .iter()
            .map(|t| t.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        model.set_theta(theta);
        model
    }

    #[test]
    fn zero_theta_gives_uniform_marginals_and_span_log_z() {
        let rel = relation(&[2, 3, 2]);
        let universe = VariableSet::from_relation(&rel);
        let specs = vec![MarginalSpec::new(vec![0, 1]), MarginalSpec::new(vec![1, 2])];
        let model = Model::new(universe, specs, DEFAULT_CLIQUE_CAP).unwrap();
        assert!((model.log_partition() - (12.0_f64).ln()).abs() < 1e-12);
        let marg = model.infer_marginals(12.0);
        for (s, m) in marg.iter().enumerate() {
            let span = model.specs()[s].span(model.universe());
            for &c in m {
                assert!((c - 12.0 / span as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifting_one_marginal_shifts_log_partition_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut model = random_model(&mut rng, true);
            let before = model.log_partition();
            let k = rng.gen_range(-2.0..2.0);
            let mut theta = model.theta().to_vec();
            for c in &mut theta[0] {
                *c += k;
            }
            model.set_theta(theta);
            assert!((model.log_partition() - before - k).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let model = random_model(&mut rng, true);
            let bf = BruteForce::new(&model);
            assert!((model.log_partition() - bf.log_z()).abs() < 1e-9);
            let n = 100.0;
            let marg = model.infer_marginals(n);
            for s in 0..model.specs().len() {
                let oracle = bf.marginal(&model, s);
                for (a, b) in marg[s].iter().zip(&oracle) {
                    assert!(
                        (a - n * b).abs() <= 1e-9 * n,
                        "marginal deviates: {a} vs {}",
                        n * b
                    );
                }
            }
        }
    }

    #[test]
    fn single_clique_model_is_softmax() {
        let rel = relation(&[2, 2]);
        let universe = VariableSet::from_relation(&rel);
        let spec = MarginalSpec::new(vec![0, 1]);
        let mut model = Model::new(universe, vec![spec], DEFAULT_CLIQUE_CAP).unwrap();
        model.set_theta(vec![vec![0.5, -1.0, 2.0, 0.0]]);
        let n = 10.0;
        let marg = model.infer_marginals(n);
        let theta = &model.theta()[0];
        let lse = logsumexp(theta);
        for (c, &t) in marg[0].iter().zip(theta) {
            assert!((c - n * (t - lse).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_zero_at_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_model(&mut rng, true);
        let n = 50.0;
        let data = model.infer_marginals(n);
        let grad = model.em_gradient(&data, n).unwrap();
        for g in grad.iter().flatten() {
            assert!(g.abs() < 1e-9 * n);
        }
    }

    #[test]
    fn gradient_at_zero_theta_is_data_minus_uniform() {
        let rel = relation(&[2, 2]);
        let universe = VariableSet::from_relation(&rel);
        let model = Model::new(
            universe,
            vec![MarginalSpec::new(vec![0, 1])],
            DEFAULT_CLIQUE_CAP,
        )
        .unwrap();
        let data = vec![vec![3.0, 1.0, 5.0, 7.0]];
        let n = 16.0;
        let grad = model.em_gradient(&data, n).unwrap();
        for (g, d) in grad[0].iter().zip(&data[0]) {
            assert!((g - (d - 4.0)).abs() < 1e-12);
        }
    }

    /// Central finite differences of L(theta).
    fn fd_gradient(model: &Model, data: &[Vec<f64>], n: f64, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut m = model.clone();
        for s in 0..model.specs().len() {
            let mut g = Vec::new();
            for c in 0..model.theta()[s].len() {
                let mut tp = model.theta().to_vec();
                tp[s][c] += h;
                m.set_theta(tp);
                let up = m.objective(data, n);
                let mut tm = model.theta().to_vec();
                tm[s][c] -= h;
                m.set_theta(tm);
                let down = m.objective(data, n);
                g.push((up - down) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let model = random_model(&mut rng, true);
            let n = 30.0;
            let data: Vec<Vec<f64>> = model
                .specs()
                .iter()
                .map(|s| {
                    (0..s.span(model.universe()))
                        .map(|_| rng.gen_range(0.0..10.0))
                        .collect()
                })
                .collect();
            let grad = model.em_gradient(&data, n).unwrap();
            let fd = fd_gradient(&model, &data, n, 1e-4);
            let num: f64 = grad
                .iter()
                .flatten()
                .zip(fd.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let den: f64 = fd.iter().flatten().fold(1.0_f64, |m, &g| m.max(g.abs()));
            assert!(num / den <= 1e-5, "rel err {}", num / den);
        }
    }

    #[test]
    fn fit_is_noop_at_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut model = random_model(&mut rng, false);
        let n = 40.0;
        let data = model.infer_marginals(n);
        let before = model.theta().to_vec();
        let trace = model.fit_theta(&data, n, 50).unwrap();
        assert_eq!(trace.steps, 0);
        assert_eq!(model.theta(), before.as_slice());
    }

    /// Plant-and-recover: fit from zero against noiseless counts of a planted
    /// model; fitted marginals must match the planted ones within 1e-6 * n.
    #[test]
    fn fit_recovers_planted_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for round in 0..3 {
            let planted = random_model(&mut rng, round % 2 == 0);
            let n = 1000.0;
            let data = planted.infer_marginals(n);
            let mut model = Model::new(
                planted.universe().clone(),
                planted.specs().to_vec(),
                DEFAULT_CLIQUE_CAP,
            )
            .unwrap();
            let trace = model.fit_theta(&data, n, 4000).unwrap();
            // Objective is monotone over accepted steps.
            for w in trace.objectives.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            let fitted = model.infer_marginals(n);
            for (f, d) in fitted.iter().flatten().zip(data.iter().flatten()) {
                assert!(
                    (f - d).abs() <= 1e-6 * n,
                    "marginal mismatch: {f} vs {d} (round {round})"
                );
            }
        }
    }

    #[test]
    fn non_finite_data_is_rejected() {
        let rel = relation(&[2, 2]);
        let universe = VariableSet::from_relation(&rel);
        let mut model = Model::new(
            universe,
            vec![MarginalSpec::new(vec![0, 1])],
            DEFAULT_CLIQUE_CAP,
        )
        .unwrap();
        let data = vec![vec![1.0, f64::NAN, 2.0, 3.0]];
        assert!(matches!(
            model.fit_theta(&data, 7.0, 10),
            Err(ModelError::NonFiniteObjective)
        ));
        // Shape mismatches are rejected before any work happens.
        let bad = vec![vec![1.0; 3]];
        assert!(matches!(
            model.em_gradient(&bad, 7.0),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn latent_joint_collapses_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut model = random_model(&mut rng, true);
        // Ensure a spec over both latent vars exists.
        let u = model.universe().clone();
        let lat: Vec<usize> = u.latent_vars().collect();
        model.add_specs(&[MarginalSpec::new(lat.clone())]).unwrap();
        let cal = model.calibrate();
        let joint = model.latent_joint(&cal);
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let bf = BruteForce::new(&model);
        let s = model
            .spec_index(&MarginalSpec::new(lat.clone()))
            .expect("latent spec present");
        let oracle = bf.marginal(&model, s);
        for (a, b) in joint.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn infer_marginals_collapsed_over_z_matches_observed_spec() {
        // Model with specs {A0,Z} and {A0}: collapsing the latent marginal
        // over z must reproduce the observed marginal of the same model.
        let rel = relation(&[2, 2]);
        let universe = VariableSet::with_latent(&rel, &[3]);
        let specs = vec![
            MarginalSpec::new(vec![0]),
            MarginalSpec::new(vec![1]),
            MarginalSpec::new(vec![0, 2]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut model = Model::new(universe, specs, DEFAULT_CLIQUE_CAP).unwrap();
        let theta: Vec<Vec<f64>> = model
            .theta()
            .iter()
            .map(|t| t.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        model.set_theta(theta);
        let n = 1.0;
        let marg = model.infer_marginals(n);
        // marg[2] is over (A0, Z) with Z minor axis; collapse over z.
        let collapsed: Vec<f64> = marg[2].chunks(3).map(|c| c.iter().sum()).collect();
        for (a, b) in collapsed.iter().zip(&marg[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_sampler_uniform_at_zero_theta() {
        // 8-state tuple space, theta = 0: chi-squared goodness of fit against
        // uniform at p > 0.01 (critical value 18.475 at 7 dof).
        let rel = relation(&[2, 2, 2]);
        let universe = VariableSet::with_latent(&rel, &[2]);
        let specs = vec![
            MarginalSpec::new(vec![0, 1]),
            MarginalSpec::new(vec![1, 2]),
            MarginalSpec::new(vec![0, 3]),
        ];
        let model = Model::new(universe, specs, DEFAULT_CLIQUE_CAP).unwrap();
        let mut sampler = model.conditional_sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let t = sampler.sample_given_z(1, &mut rng);
            let idx = (t[0] as usize) * 4 + (t[1] as usize) * 2 + t[2] as usize;
            counts[idx] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn conditional_sampler_matches_brute_force_conditional() {
        let rel = relation(&[2, 3]);
        let universe = VariableSet::with_latent(&rel, &[2]);
        let specs = vec![
            MarginalSpec::new(vec![0, 1]),
            MarginalSpec::new(vec![0, 2]),
            MarginalSpec::new(vec![1, 2]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut model = Model::new(universe, specs, DEFAULT_CLIQUE_CAP).unwrap();
        let theta: Vec<Vec<f64>> = model
            .theta()
            .iter()
            .map(|t| t.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        model.set_theta(theta);

        // Brute-force p(t | z = 1).
        let z = 1usize;
        let mut log_w = Vec::new();
        for a0 in 0..2u32 {
            for a1 in 0..3u32 {
                log_w.push(model.tuple_log_weight(&[a0, a1], z));
            }
        }
        let lse = logsumexp(&log_w);
        let probs: Vec<f64> = log_w.iter().map(|w| (w - lse).exp()).collect();

        let mut sampler = model.conditional_sampler();
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let t = sampler.sample_given_z(z, &mut rng);
            counts[(t[0] as usize) * 3 + t[1] as usize] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= bound,
                "state {i}: freq {freq} vs p {p} (bound {bound})"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let model = random_model(&mut rng, true);
        let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
        let restored = Model::from_checkpoint(back).unwrap();
        assert_eq!(restored.theta(), model.theta());
        assert!((restored.log_partition() - model.log_partition()).abs() < 1e-12);
    }
}
