//! EM over latent group attributes: per-group responsibilities, noisy p_Z and
//! p_size updates, noisy latent-marginal materialization, and the theta refit.
//!
//! Each tuple group G is scored per composite latent value z as
//! p(G, z) = p_Z(z) * p_size(|G| given z) * prod over tuples of p(t given z),
//! all in log space; responsibilities are the per-group softmax over z.

use crate::data::{EncodedRelation, TupleGroup};
use crate::marginal::{compute_latent_expected, MarginalSpec, MarginalTable};
use crate::model::{Model, ModelError, TupleScorer};
use crate::privacy::{perturb_table, perturb_vector, PrivacyLedger};
use crate::rng::ScopedRng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Marginal(#[from] crate::marginal::MarginalError),
    #[error("group {0} has size {1}, above the multiplicity bound {2}")]
    GroupTooLarge(usize, usize, usize),
}

/// Soft updates follow the closed-form derivation; hard updates follow the
/// pseudo-code counts based on each group's argmax assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmMode {
    Soft,
    Hard,
}

/// Per-group posterior over the composite latent domain plus the argmax
/// assignment (ties resolved to the lowest index).
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub per_group: Vec<Vec<f64>>,
    pub hard: Vec<usize>,
    /// Groups whose likelihood vanished for every z and got uniform fallback.
    pub degenerate_groups: usize,
}

impl Responsibilities {
    /// One-hot rows for the hard assignments.
    pub fn hardened(&self, span: usize) -> Vec<Vec<f64>> {
        self.hard
            .iter()
            .map(|&z| {
                let mut row = vec![0.0; span];
                row[z] = 1.0;
                row
            })
            .collect()
    }

    pub fn effective(&self, mode: EmMode, span: usize) -> Vec<Vec<f64>> {
        match mode {
            EmMode::Soft => self.per_group.clone(),
            EmMode::Hard => self.hardened(span),
        }
    }
}

/// One foreign key's latent-variable model: the graphical model over the
/// child's attributes plus latent pair, the per-spec data counts theta is fit
/// against (observed entries measured once, latent entries re-materialized
/// each EM iteration), and the group-level distributions.
#[derive(Debug, Clone)]
pub struct LatentFkModel {
    pub label: String,
    pub model: Model,
    /// Data counts per spec, parallel to `model.specs()`.
    pub data: Vec<Vec<f64>>,
    /// Joint distribution over the composite latent domain.
    pub p_z: Vec<f64>,
    /// p_size[z][s-1] = P(group size = s | z), s in 1..=tau.
    pub p_size: Vec<Vec<f64>>,
    pub tau: usize,
    /// Noisy row count used as the model's total mass.
    pub n_model: f64,
    /// Global EM iteration counter (ledger labels and RNG stream indices).
    pub iterations_done: usize,
}

impl LatentFkModel {
    /// Fresh model: theta zero, p_Z uniform, p_size uniform over 1..=tau.
    pub fn new(label: String, model: Model, data: Vec<Vec<f64>>, tau: usize, n_model: f64) -> Self {
        let span = model.universe().latent_span();
        Self {
            label,
            model,
            data,
            p_z: vec![1.0 / span as f64; span],
            p_size: vec![vec![1.0 / tau as f64; tau]; span],
            tau,
            n_model,
            iterations_done: 0,
        }
    }

    pub fn latent_span(&self) -> usize {
        self.model.universe().latent_span()
    }

    /// Inserts latent specs (zero theta, zero data); already-present specs are
    /// skipped.
    pub fn add_latent_specs(&mut self, specs: &[MarginalSpec]) -> Result<(), ModelError> {
        for s in specs {
            if self.model.has_spec(s) {
                continue;
            }
            self.model.add_specs(std::slice::from_ref(s))?;
            self.data.push(vec![0.0; s.span(self.model.universe())]);
        }
        Ok(())
    }

    pub fn latent_spec_indices(&self) -> Vec<usize> {
        self.model
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_latent(self.model.universe()))
            .map(|(i, _)| i)
            .collect()
    }
}

/// log p(G, z) for every group and composite z under the current parameters.
pub fn group_log_joint(
    fkm: &LatentFkModel,
    relation: &EncodedRelation,
    groups: &[TupleGroup],
) -> Result<Vec<Vec<f64>>, EmError> {
    let span = fkm.latent_span();
    for (g, grp) in groups.iter().enumerate() {
        if grp.member_rows.len() > fkm.tau {
            return Err(EmError::GroupTooLarge(g, grp.member_rows.len(), fkm.tau));
        }
    }
    let scorer = TupleScorer::new(&fkm.model, relation);
    let cal = fkm.model.calibrate();
    let log_z = cal.log_z;
    let pz_model = fkm.model.latent_joint(&cal);
    let log_pz_model: Vec<f64> = pz_model.iter().map(|p| p.max(1e-300).ln()).collect();
    let theta = fkm.model.theta();

    // log p(t | z) = w_obs(t) + w_lat(t, z) - log A - log p_model(z).
    let obs_part: Vec<f64> = (0..relation.n_rows())
        .map(|r| scorer.observed_part(theta, r))
        .collect();
    let log_pz: Vec<f64> = fkm.p_z.iter().map(|p| p.max(0.0).ln()).collect();
    let log_psize: Vec<Vec<f64>> = fkm
        .p_size
        .iter()
        .map(|col| col.iter().map(|p| p.max(0.0).ln()).collect())
        .collect();

    Ok(groups
        .par_iter()
        .map(|grp| {
            let size_idx = grp.member_rows.len() - 1;
            (0..span)
                .map(|z| {
                    let mut s = log_pz[z] + log_psize[z][size_idx];
                    for &r in &grp.member_rows {
                        s += obs_part[r] + scorer.latent_part(theta, r, z)
                            - log_z
                            - log_pz_model[z];
                    }
                    s
                })
                .collect()
        })
        .collect())
}

/// E step: responsibilities p(z | G) per group, computed in log space; groups
/// with vanishing likelihood for every z get uniform responsibilities.
pub fn e_step(
    fkm: &LatentFkModel,
    relation: &EncodedRelation,
    groups: &[TupleGroup],
) -> Result<Responsibilities, EmError> {
    let span = fkm.latent_span();
    let joint = group_log_joint(fkm, relation, groups)?;
    let mut degenerate = 0usize;
    let mut per_group = Vec::with_capacity(groups.len());
    let mut hard = Vec::with_capacity(groups.len());
    for row in joint {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            degenerate += 1;
            per_group.push(vec![1.0 / span as f64; span]);
            hard.push(0);
            continue;
        }
        let mut probs: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let mut best = 0;
        for (z, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = z;
            }
        }
        per_group.push(probs);
        hard.push(best);
    }
    Ok(Responsibilities {
        per_group,
        hard,
        degenerate_groups: degenerate,
    })
}

/// Expected complete-data log-likelihood: sum over groups and z of
/// p(z|G) log p(G, z); the quantity the closed-form M-step updates may never
/// decrease in noiseless soft mode.
pub fn expected_complete_log_likelihood(
    fkm: &LatentFkModel,
    relation: &EncodedRelation,
    groups: &[TupleGroup],
    resp: &Responsibilities,
) -> Result<f64, EmError> {
    let joint = group_log_joint(fkm, relation, groups)?;
    let mut q = 0.0;
    for (row, lw) in resp.per_group.iter().zip(&joint) {
        for (&p, &l) in row.iter().zip(lw) {
            if p > 0.0 {
                q += p * l;
            }
        }
    }
    Ok(q)
}

/// Noisy clamped latent-count update of p_Z. Soft mode sums responsibilities;
/// hard mode counts argmax assignments. Falls back to uniform when every
/// noisy count clamps to zero.
#[allow(clippy::too_many_arguments)]
pub fn update_p_z(
    resp: &Responsibilities,
    span: usize,
    mode: EmMode,
    sigma_z: f64,
    mu_g: f64,
    ledger: &mut PrivacyLedger,
    label: &str,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let mut counts = vec![0.0; span];
    match mode {
        EmMode::Soft => {
            for row in &resp.per_group {
                for (c, p) in counts.iter_mut().zip(row) {
                    *c += p;
                }
            }
        }
        EmMode::Hard => {
            for &z in &resp.hard {
                counts[z] += 1.0;
            }
        }
    }
    let noisy = perturb_vector(ledger, label, mu_g, sigma_z, &counts, rng);
    let clamped: Vec<f64> = noisy.iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / span as f64; span];
    }
    clamped.into_iter().map(|c| c / total).collect()
}

/// Noisy clamped size-histogram update of p_size; each z column normalizes
/// independently, with uniform fallback for zero columns.
#[allow(clippy::too_many_arguments)]
pub fn update_p_size(
    resp: &Responsibilities,
    group_sizes: &[usize],
    span: usize,
    tau: usize,
    mode: EmMode,
    sigma_size: f64,
    mu_g: f64,
    ledger: &mut PrivacyLedger,
    label: &str,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<f64>> {
    // cnt[z * tau + (s-1)], one vector query for the whole histogram.
    let mut counts = vec![0.0; span * tau];
    match mode {
        EmMode::Soft => {
            for (row, &s) in resp.per_group.iter().zip(group_sizes) {
                for (z, p) in row.iter().enumerate() {
                    counts[z * tau + (s - 1)] += p;
                }
            }
        }
        EmMode::Hard => {
            for (&z, &s) in resp.hard.iter().zip(group_sizes) {
                counts[z * tau + (s - 1)] += 1.0;
            }
        }
    }
    let noisy = perturb_vector(ledger, label, mu_g, sigma_size, &counts, rng);
    (0..span)
        .map(|z| {
            let col: Vec<f64> = (0..tau).map(|i| noisy[z * tau + i].max(0.0)).collect();
            let total: f64 = col.iter().sum();
            if total <= 0.0 {
                vec![1.0 / tau as f64; tau]
            } else {
                col.into_iter().map(|c| c / total).collect()
            }
        })
        .collect()
}

/// Noise scales for one EM invocation.
#[derive(Debug, Clone, Copy)]
pub struct EmNoise {
    pub sigma_z: f64,
    pub sigma_size: f64,
    pub sigma_l: f64,
}

/// Everything an EM invocation needs about the grouped relation.
pub struct EmContext<'a> {
    pub relation: &'a EncodedRelation,
    pub groups: &'a [TupleGroup],
    pub group_of_row: &'a [usize],
    pub mu_g: f64,
    pub mode: EmMode,
    pub fit_steps: usize,
    /// Relative perturbation applied to the very first E step's
    /// responsibilities. The uniform initialization is a fixed point of the
    /// updates, so without this (or injected noise) no cluster structure can
    /// emerge.
    pub init_jitter: f64,
}

/// Multiplies each responsibility by 1 + jitter * u, u ~ U(-1, 1), and
/// renormalizes; hard assignments are recomputed.
fn jitter_responsibilities(resp: &mut Responsibilities, jitter: f64, rng: &mut impl rand::Rng) {
    for (row, hard) in resp.per_group.iter_mut().zip(&mut resp.hard) {
        let mut total = 0.0;
        for p in row.iter_mut() {
            let u: f64 = rng.gen_range(-1.0..1.0);
            *p *= 1.0 + jitter * u;
            total += *p;
        }
        for p in row.iter_mut() {
            *p /= total;
        }
        let mut best = 0;
        for (z, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = z;
            }
        }
        *hard = best;
    }
}

/// Runs `t` EM iterations: E step, noisy p_Z and p_size updates, noisy latent
/// marginal materialization (sensitivity tau * mu_g per marginal), theta refit
/// on all marginals. Returns the last E step's responsibilities (computed
/// fresh from the current parameters when `t` is zero).
pub fn run_em(
    fkm: &mut LatentFkModel,
    ctx: &EmContext<'_>,
    t: usize,
    noise: &EmNoise,
    ledger: &mut PrivacyLedger,
    rng: &ScopedRng,
) -> Result<Responsibilities, EmError> {
    let span = fkm.latent_span();
    let group_sizes: Vec<usize> = ctx.groups.iter().map(|g| g.member_rows.len()).collect();
    let mut last = None;
    for _ in 0..t {
        let iter = fkm.iterations_done as u64;
        let mut resp = e_step(fkm, ctx.relation, ctx.groups)?;
        if iter == 0 && ctx.init_jitter > 0.0 {
            jitter_responsibilities(&mut resp, ctx.init_jitter, &mut rng.stream("em/jitter", 0));
        }

        fkm.p_z = update_p_z(
            &resp,
            span,
            ctx.mode,
            noise.sigma_z,
            ctx.mu_g,
            ledger,
            &format!("{}/em:{}/pz", fkm.label, iter),
            &mut rng.stream("em/pz", iter),
        );
        fkm.p_size = update_p_size(
            &resp,
            &group_sizes,
            span,
            fkm.tau,
            ctx.mode,
            noise.sigma_size,
            ctx.mu_g,
            ledger,
            &format!("{}/em:{}/psize", fkm.label, iter),
            &mut rng.stream("em/psize", iter),
        );

        materialize_latent_marginals(fkm, ctx, &resp, noise.sigma_l, ledger, rng, iter)?;

        fkm.model.fit_theta(&fkm.data, fkm.n_model, ctx.fit_steps)?;
        fkm.iterations_done += 1;
        last = Some(resp);
    }
    match last {
        Some(resp) => Ok(resp),
        None => e_step(fkm, ctx.relation, ctx.groups),
    }
}

/// Replaces each latent spec's data counts with a fresh noisy materialization
/// of its expected counts (no clamping).
fn materialize_latent_marginals(
    fkm: &mut LatentFkModel,
    ctx: &EmContext<'_>,
    resp: &Responsibilities,
    sigma_l: f64,
    ledger: &mut PrivacyLedger,
    rng: &ScopedRng,
    iter: u64,
) -> Result<(), EmError> {
    let span = fkm.latent_span();
    let effective = resp.effective(ctx.mode, span);
    let sensitivity = fkm.tau as f64 * ctx.mu_g;
    for s in fkm.latent_spec_indices() {
        let spec = fkm.model.specs()[s].clone();
        let expected = compute_latent_expected(
            ctx.relation,
            fkm.model.universe(),
            &spec,
            ctx.group_of_row,
            &effective,
        )?;
        let name = spec.display(fkm.model.universe());
        let noisy: MarginalTable = perturb_table(
            ledger,
            &format!("{}/em:{}/latent:{}", fkm.label, iter, name),
            sensitivity,
            sigma_l,
            &expected,
            &mut rng.stream(&format!("em/latent:{name}"), iter),
        );
        fkm.data[s] = noisy.counts;
    }
    Ok(())
}
