//! Gaussian-mechanism calibration, the privacy ledger, closed-form consumption
//! formulas, and the per-run noise plan.
//!
//! A set of Gaussian-perturbed queries {f_i} with L2 sensitivities Delta_i and
//! noise scales sigma_i is (epsilon, delta)-DP iff
//! Phi(gamma/2 - eps/gamma) - e^-eps * Phi(-gamma/2 - eps/gamma) <= delta with
//! gamma^2 = sum (Delta_i / sigma_i)^2. The ledger tracks that sum; the plan
//! solves the sigmas so the planned total lands exactly on gamma_max^2.

use crate::marginal::MarginalTable;
use crate::schema::DatabaseSchema;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Standard normal CDF via erfc; absolute error within a few ulp.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Left side of the admissibility condition for a total noise ratio `gamma`.
pub fn privacy_profile(epsilon: f64, gamma: f64) -> f64 {
    normal_cdf(gamma / 2.0 - epsilon / gamma)
        - (-epsilon).exp() * normal_cdf(-gamma / 2.0 - epsilon / gamma)
}

/// Whether total ratio `gamma` keeps the mechanism within (epsilon, delta)-DP.
pub fn delta_admissible(epsilon: f64, delta: f64, gamma: f64) -> bool {
    privacy_profile(epsilon, gamma) <= delta
}

/// Largest gamma satisfying the admissibility condition, by bisection on
/// [1e-9, 1e3] to absolute tolerance 1e-9. The returned value is admissible.
pub fn gamma_max(epsilon: f64, delta: f64) -> f64 {
    let mut lo = 1e-9;
    let mut hi = 1e3;
    debug_assert!(delta_admissible(epsilon, delta, lo));
    if delta_admissible(epsilon, delta, hi) {
        return hi;
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if delta_admissible(epsilon, delta, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

// ---------------------------------------------------------------------------
// Ledger.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub sensitivity: f64,
    pub sigma: f64,
    /// Number of vector queries covered by this entry.
    pub count: u64,
    /// Running total after this entry.
    pub cumulative: f64,
}

/// Ordered record of every Gaussian-perturbed query; the total consumption is
/// sum over entries of count * (sensitivity / sigma)^2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub epsilon: f64,
    pub delta: f64,
    /// gamma_max^2 for (epsilon, delta); infinity in noiseless mode.
    pub gamma_sq_bound: f64,
    entries: Vec<LedgerEntry>,
    total: f64,
    /// Total scalar Gaussian draws taken through the ledger-aware API.
    draws: u64,
}

impl PrivacyLedger {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        let g = gamma_max(epsilon, delta);
        Self {
            epsilon,
            delta,
            gamma_sq_bound: g * g,
            entries: Vec::new(),
            total: 0.0,
            draws: 0,
        }
    }

    /// Ledger for noiseless runs: nothing is recorded, no DP claim is made.
    pub fn noiseless() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
            gamma_sq_bound: f64::INFINITY,
            entries: Vec::new(),
            total: 0.0,
            draws: 0,
        }
    }

    pub fn record(&mut self, label: &str, sensitivity: f64, sigma: f64, count: u64) {
        debug_assert!(sensitivity >= 0.0 && sigma > 0.0);
        self.total += count as f64 * (sensitivity / sigma).powi(2);
        self.entries.push(LedgerEntry {
            label: label.to_string(),
            sensitivity,
            sigma,
            count,
            cumulative: self.total,
        });
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn within_budget(&self) -> bool {
        self.total <= self.gamma_sq_bound + 1e-9
    }
}

/// Perturbs a marginal table with N(0, sigma^2) per cell, recording one ledger
/// entry. With sigma = 0 the table is returned unchanged and nothing is
/// recorded (noiseless mode).
pub fn perturb_table<R: Rng>(
    ledger: &mut PrivacyLedger,
    label: &str,
    sensitivity: f64,
    sigma: f64,
    table: &MarginalTable,
    rng: &mut R,
) -> MarginalTable {
    if sigma == 0.0 {
        let mut out = table.clone();
        out.noisy = true;
        return out;
    }
    ledger.record(label, sensitivity, sigma, 1);
    ledger.draws += table.counts.len() as u64;
    crate::marginal::add_gaussian_noise(table, sigma, rng)
}

/// Perturbs a scalar query, recording one ledger entry.
pub fn perturb_scalar<R: Rng>(
    ledger: &mut PrivacyLedger,
    label: &str,
    sensitivity: f64,
    sigma: f64,
    value: f64,
    rng: &mut R,
) -> f64 {
    if sigma == 0.0 {
        return value;
    }
    ledger.record(label, sensitivity, sigma, 1);
    ledger.draws += 1;
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    value + normal.sample(rng)
}

/// Perturbs a count vector (e.g. hard latent counts), one ledger entry.
pub fn perturb_vector<R: Rng>(
    ledger: &mut PrivacyLedger,
    label: &str,
    sensitivity: f64,
    sigma: f64,
    values: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    ledger.record(label, sensitivity, sigma, 1);
    ledger.draws += values.len() as u64;
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    values.iter().map(|v| v + normal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// Closed-form consumption.
// ---------------------------------------------------------------------------

/// Per-invocation EM consumption: T * mu_g^2 * (m tau^2 / sigma_l^2
/// + 1 / sigma_size^2 + 1 / sigma_z^2).
#[allow(clippy::too_many_arguments)]
pub fn consumption_c1(
    t: usize,
    m_latent: usize,
    mu_g: f64,
    tau: f64,
    sigma_l: f64,
    sigma_size: f64,
    sigma_z: f64,
) -> f64 {
    if t == 0 {
        return 0.0;
    }
    t as f64
        * mu_g.powi(2)
        * (m_latent as f64 * tau.powi(2) / sigma_l.powi(2)
            + 1.0 / sigma_size.powi(2)
            + 1.0 / sigma_z.powi(2))
}

/// Query counts of the simplified single-relation stage: one noisy row count,
/// every 1-way marginal, pair scoring, and the selected 2-way marginals, all
/// at tuple-multiplier sensitivity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleStageCounts {
    pub n_count: u64,
    pub n_oneway: u64,
    pub n_pair_scores: u64,
    pub n_twoway: u64,
}

pub fn consumption_single(mu: f64, counts: &SingleStageCounts, noise: &SingleStageNoise) -> f64 {
    let term = |n: u64, sigma: f64| {
        if n == 0 {
            0.0
        } else {
            n as f64 * (mu / sigma).powi(2)
        }
    };
    term(counts.n_count, noise.sigma_count)
        + term(counts.n_oneway, noise.sigma_oneway)
        + term(counts.n_pair_scores, noise.sigma_score)
        + term(counts.n_twoway, noise.sigma_twoway)
}

/// Realized per-round counts of the selection loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundCounts {
    /// Candidate observed marginals scored in this round.
    pub scored: u64,
    /// Latent marginals in the model during this round's single EM iteration.
    pub m_latent: usize,
    /// Fine-tune EM iterations that actually ran (0 for a skipped round).
    pub em_iterations: usize,
}

/// Parameters of the full per-FK consumption: single stage + seed EM + one EM
/// iteration per round + candidate scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C2Params {
    pub mu_t: f64,
    pub mu_g: f64,
    pub tau: f64,
    pub t_em: usize,
    pub seed_marginals: usize,
    pub rounds: Vec<RoundCounts>,
    pub single_counts: SingleStageCounts,
}

pub fn consumption_c2(p: &C2Params, fk_noise: &FkNoise) -> f64 {
    let mut total = consumption_single(p.mu_t, &p.single_counts, &fk_noise.single);
    total += consumption_c1(
        p.t_em,
        p.seed_marginals,
        p.mu_g,
        p.tau,
        fk_noise.sigma_l,
        fk_noise.sigma_size,
        fk_noise.sigma_z,
    );
    for round in &p.rounds {
        total += consumption_c1(
            round.em_iterations,
            round.m_latent,
            p.mu_g,
            p.tau,
            fk_noise.sigma_l,
            fk_noise.sigma_size,
            fk_noise.sigma_z,
        );
        if round.scored > 0 {
            total += round.scored as f64 * (p.mu_t / fk_noise.sigma_err).powi(2);
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Noise plan.
// ---------------------------------------------------------------------------

/// Tunables with the cited defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// EM iterations per full run (T).
    pub t_em: usize,
    /// Candidate-selection rounds (T_C).
    pub t_rounds: usize,
    /// Candidates sampled per round (n_C).
    pub n_candidates: usize,
    /// Usefulness constant (lambda).
    pub lambda: f64,
    /// Budget split within one FK: single-relation stage / EM / scoring.
    pub frac_single: f64,
    pub frac_em: f64,
    pub frac_score: f64,
    /// Within EM: latent-marginal : size : z consumption ratio.
    pub em_ratio: (f64, f64, f64),
    /// Within the single stage: count / 1-way / pair scoring / 2-way weights.
    pub single_split: (f64, f64, f64, f64),
    /// All sigmas forced to zero; ledger records nothing.
    pub noiseless: bool,
    /// Warn when a solved sigma exceeds this.
    pub sigma_sanity_cap: f64,
}

impl PlanConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            t_em: 6,
            t_rounds: 2,
            n_candidates: 400,
            lambda: 20.0,
            frac_single: 0.20,
            frac_em: 0.75,
            frac_score: 0.05,
            em_ratio: (20.0, 4.0, 1.0),
            single_split: (0.1, 0.4, 0.1, 0.4),
            noiseless: false,
            sigma_sanity_cap: 1e9,
        }
    }

    pub fn noiseless() -> Self {
        let mut c = Self::new(f64::INFINITY, 0.0);
        c.noiseless = true;
        c
    }

    /// Marginal-insertion increment per round: max(1, ceil(d / 4)).
    pub fn n_inc(&self, d_eff: usize) -> usize {
        d_eff.div_ceil(4).max(1)
    }
}

/// Solved noise scales for the simplified single-relation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleStageNoise {
    pub sigma_count: f64,
    pub sigma_oneway: f64,
    pub sigma_score: f64,
    pub sigma_twoway: f64,
}

/// Solved noise scales for one FK model build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FkNoise {
    pub label: String,
    pub sigma_z: f64,
    pub sigma_size: f64,
    pub sigma_l: f64,
    pub sigma_err: f64,
    pub single: SingleStageNoise,
    /// Budget share assigned to this FK.
    pub budget: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandaloneNoise {
    pub label: String,
    pub single: SingleStageNoise,
    pub budget: f64,
    /// Sensitivity of the augmented relation's measurements.
    pub mu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoisePlan {
    pub config: PlanConfig,
    pub gamma_sq: f64,
    pub per_fk: Vec<FkNoise>,
    pub per_standalone: Vec<StandaloneNoise>,
    pub warnings: Vec<String>,
}

impl NoisePlan {
    pub fn fk_noise(&self, label: &str) -> &FkNoise {
        self.per_fk
            .iter()
            .find(|f| f.label == label)
            .expect("fk is part of the plan")
    }

    pub fn standalone_noise(&self, label: &str) -> &StandaloneNoise {
        self.per_standalone
            .iter()
            .find(|f| f.label == label)
            .expect("relation is part of the plan")
    }
}

/// Effective attribute count of a relation once every earlier-processed FK
/// into it has attached its latent column pair.
pub fn effective_attr_count(schema: &DatabaseSchema, relation: usize) -> usize {
    schema.relation(relation).attributes.len() + 2 * schema.private_fks_into(relation)
}

/// Sensitivity used for a standalone single-relation model on the augmented
/// form of `relation`: deletions (tuple multiplier) or latent-value changes
/// (group multipliers of FKs into it), whichever dominates.
pub fn standalone_sensitivity(schema: &DatabaseSchema, relation: usize) -> usize {
    let mu_t = schema.tuple_multiplier(relation);
    let mu_g_in = schema
        .private_fk_order()
        .iter()
        .filter(|fk| fk.parent == relation)
        .map(|&fk| schema.group_multiplier(fk))
        .max()
        .unwrap_or(0);
    mu_t.max(mu_g_in)
}

fn solve_single_stage(
    mu: f64,
    d_eff: usize,
    split: (f64, f64, f64, f64),
    budget: f64,
) -> (SingleStageNoise, SingleStageCounts) {
    let n_pairs = (d_eff * d_eff.saturating_sub(1) / 2) as u64;
    let n_twoway = if n_pairs == 0 {
        0
    } else {
        d_eff.div_ceil(2) as u64
    };
    let counts = SingleStageCounts {
        n_count: 1,
        n_oneway: d_eff as u64,
        n_pair_scores: n_pairs,
        n_twoway,
    };
    // Renormalize the split over active stages.
    let weights = [
        split.0,
        split.1,
        if n_pairs > 0 { split.2 } else { 0.0 },
        if n_twoway > 0 { split.3 } else { 0.0 },
    ];
    let wsum: f64 = weights.iter().sum();
    let solve = |n: u64, w: f64| -> f64 {
        if n == 0 {
            f64::INFINITY
        } else {
            mu * (n as f64 / (w / wsum * budget)).sqrt()
        }
    };
    let noise = SingleStageNoise {
        sigma_count: solve(counts.n_count, weights[0]),
        sigma_oneway: solve(counts.n_oneway, weights[1]),
        sigma_score: solve(counts.n_pair_scores, weights[2]),
        sigma_twoway: solve(counts.n_twoway, weights[3]),
    };
    (noise, counts)
}

/// Splits gamma_max^2 equally across private FKs and standalone models, then
/// solves every sigma in closed form from the configured intra-FK fractions.
pub fn plan_noise(schema: &DatabaseSchema, config: &PlanConfig) -> NoisePlan {
    let fks = schema.private_fk_order().to_vec();
    let standalones = schema.standalone_model_relations();

    if config.noiseless {
        let zero_single = SingleStageNoise {
            sigma_count: 0.0,
            sigma_oneway: 0.0,
            sigma_score: 0.0,
            sigma_twoway: 0.0,
        };
        return NoisePlan {
            config: config.clone(),
            gamma_sq: f64::INFINITY,
            per_fk: fks
                .iter()
                .map(|&fk| FkNoise {
                    label: schema.fk_def(fk).label(),
                    sigma_z: 0.0,
                    sigma_size: 0.0,
                    sigma_l: 0.0,
                    sigma_err: 0.0,
                    single: zero_single.clone(),
                    budget: f64::INFINITY,
                })
                .collect(),
            per_standalone: standalones
                .iter()
                .map(|&r| StandaloneNoise {
                    label: schema.relation(r).name.clone(),
                    single: zero_single.clone(),
                    budget: f64::INFINITY,
                    mu: standalone_sensitivity(schema, r) as f64,
                })
                .collect(),
            warnings: Vec::new(),
        };
    }

    let g = gamma_max(config.epsilon, config.delta);
    let gamma_sq = g * g;
    let units = (fks.len() + standalones.len()).max(1);
    let unit_budget = gamma_sq / units as f64;
    let mut warnings = Vec::new();

    // Normalize the three FK-level fractions; drop the scoring share when the
    // loop is disabled.
    let score_active = config.t_rounds > 0 && config.n_candidates > 0;
    let em_active = config.t_em + config.t_rounds > 0;
    let w = [
        config.frac_single,
        if em_active { config.frac_em } else { 0.0 },
        if score_active { config.frac_score } else { 0.0 },
    ];
    let wsum: f64 = w.iter().sum();

    let per_fk = fks
        .iter()
        .map(|&fk| {
            let def = schema.fk_def(fk);
            let label = def.label();
            let tau = def.max_multiplicity as f64;
            let mu_t = schema.tuple_multiplier(fk.child) as f64;
            let mu_g = schema.group_multiplier(fk) as f64;
            let d_eff = effective_attr_count(schema, fk.child);
            let m0 = 2 * d_eff + 1;
            let n_inc = config.n_inc(d_eff);
            let iters = config.t_em + config.t_rounds;
            // Weighted latent-marginal query count across all EM iterations.
            let weighted_m: usize = config.t_em * m0
                + (1..=config.t_rounds).map(|i| m0 + i * n_inc).sum::<usize>();

            let b_single = w[0] / wsum * unit_budget;
            let b_em = w[1] / wsum * unit_budget;
            let b_score = w[2] / wsum * unit_budget;

            let (single, _) = solve_single_stage(mu_t, d_eff, config.single_split, b_single);

            let (rl, rs, rz) = config.em_ratio;
            let rtot = rl + rs + rz;
            let (sigma_l, sigma_size, sigma_z) = if em_active {
                (
                    tau * mu_g * (weighted_m as f64 / (rl / rtot * b_em)).sqrt(),
                    mu_g * (iters as f64 / (rs / rtot * b_em)).sqrt(),
                    mu_g * (iters as f64 / (rz / rtot * b_em)).sqrt(),
                )
            } else {
                (f64::INFINITY, f64::INFINITY, f64::INFINITY)
            };
            let sigma_err = if score_active {
                mu_t * ((config.n_candidates * config.t_rounds) as f64 / b_score).sqrt()
            } else {
                f64::INFINITY
            };

            for (name, sigma) in [
                ("sigma_l", sigma_l),
                ("sigma_size", sigma_size),
                ("sigma_z", sigma_z),
                ("sigma_err", sigma_err),
            ] {
                if sigma.is_finite() && sigma > config.sigma_sanity_cap {
                    warnings.push(format!(
                        "fk {label}: {name} = {sigma:.3e} exceeds the sanity cap; \
                         the budget is too small to be useful"
                    ));
                }
            }

            FkNoise {
                label,
                sigma_z,
                sigma_size,
                sigma_l,
                sigma_err,
                single,
                budget: unit_budget,
            }
        })
        .collect();

    let per_standalone = standalones
        .iter()
        .map(|&r| {
            let label = schema.relation(r).name.clone();
            let mu = standalone_sensitivity(schema, r) as f64;
            let d_eff = effective_attr_count(schema, r);
            let (single, _) = solve_single_stage(mu, d_eff, config.single_split, unit_budget);
            if single.sigma_oneway.is_finite() && single.sigma_oneway > config.sigma_sanity_cap {
                warnings.push(format!(
                    "relation {label}: single-stage sigma exceeds the sanity cap"
                ));
            }
            StandaloneNoise {
                label,
                single,
                budget: unit_budget,
                mu,
            }
        })
        .collect();

    NoisePlan {
        config: config.clone(),
        gamma_sq,
        per_fk,
        per_standalone,
        warnings,
    }
}

/// Audit artifact: the ledger with its budget context, serialized to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerAudit {
    pub epsilon: f64,
    pub delta: f64,
    pub gamma_sq_bound: f64,
    pub total: f64,
    pub entries: Vec<LedgerEntry>,
}

impl LedgerAudit {
    pub fn from_ledger(ledger: &PrivacyLedger) -> Self {
        Self {
            epsilon: ledger.epsilon,
            delta: ledger.delta,
            gamma_sq_bound: ledger.gamma_sq_bound,
            total: ledger.total(),
            entries: ledger.entries().to_vec(),
        }
    }
}
