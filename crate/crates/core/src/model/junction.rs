//! Junction tree construction (min-fill triangulation, maximum spanning tree
//! over separator sizes) and exact sum-product calibration in log space.

use super::factor::{logsumexp, Factor};
use crate::marginal::{MarginalSpec, VariableSet};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("clique over {vars:?} spans {span} states, exceeding the cap of {cap}")]
    CliqueTooLarge {
        vars: Vec<usize>,
        span: usize,
        cap: usize,
    },
    #[error("marginal specs are empty")]
    NoSpecs,
}

/// Default per-clique state-span cap.
pub const DEFAULT_CLIQUE_CAP: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct JunctionTree {
    /// Maximal cliques of the triangulated graph (sorted var lists).
    pub cliques: Vec<Vec<usize>>,
    clique_dims: Vec<Vec<usize>>,
    /// BFS order from the root: (clique, parent-or-none, separator with parent).
    bfs: Vec<(usize, Option<usize>, Vec<usize>)>,
    /// Home clique of each spec (a clique containing all its vars).
    pub spec_home: Vec<usize>,
}

impl JunctionTree {
    /// Builds a junction tree covering every spec (and every universe
    /// variable). Deterministic given the input order.
    pub fn build(
        universe: &VariableSet,
        specs: &[MarginalSpec],
        clique_cap: usize,
    ) -> Result<Self, TreeError> {
        if specs.is_empty() {
            return Err(TreeError::NoSpecs);
        }
        let n = universe.len();
        // Moral graph: connect co-occurring spec variables.
        let mut adj = vec![vec![false; n]; n];
        for spec in specs {
            let vs = spec.vars();
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    adj[vs[i]][vs[j]] = true;
                    adj[vs[j]][vs[i]] = true;
                }
            }
        }

        // Min-fill elimination; ties broken by lowest variable index.
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut elim_cliques: Vec<Vec<usize>> = Vec::new();
        let mut work = adj.clone();
        while !remaining.is_empty() {
            let mut best = usize::MAX;
            let mut best_fill = usize::MAX;
            for &v in &remaining {
                let nb: Vec<usize> = remaining
                    .iter()
                    .cloned()
                    .filter(|&u| u != v && work[v][u])
                    .collect();
                let mut fill = 0;
                for i in 0..nb.len() {
                    for j in i + 1..nb.len() {
                        if !work[nb[i]][nb[j]] {
                            fill += 1;
                        }
                    }
                }
                if fill < best_fill {
                    best_fill = fill;
                    best = v;
                }
            }
            let v = best;
            let nb: Vec<usize> = remaining
                .iter()
                .cloned()
                .filter(|&u| u != v && work[v][u])
                .collect();
            for i in 0..nb.len() {
                for j in i + 1..nb.len() {
                    work[nb[i]][nb[j]] = true;
                    work[nb[j]][nb[i]] = true;
                }
            }
            let mut clique = nb;
            clique.push(v);
            clique.sort_unstable();
            elim_cliques.push(clique);
            remaining.retain(|&u| u != v);
        }

        // Keep maximal cliques only (first occurrence wins for duplicates).
        let mut cliques: Vec<Vec<usize>> = Vec::new();
        for c in elim_cliques {
            if !cliques.iter().any(|m| is_subset(&c, m)) {
                cliques.retain(|m| !is_subset(m, &c));
                cliques.push(c);
            }
        }
        cliques.sort();

        let clique_dims: Vec<Vec<usize>> = cliques
            .iter()
            .map(|c| c.iter().map(|&v| universe.cardinality(v)).collect())
            .collect();
        for (c, dims) in cliques.iter().zip(&clique_dims) {
            let span: usize = dims.iter().product();
            if span > clique_cap {
                return Err(TreeError::CliqueTooLarge {
                    vars: c.clone(),
                    span,
                    cap: clique_cap,
                });
            }
        }

        // Maximum spanning tree over separator sizes (Kruskal, deterministic);
        // components are then joined with empty separators into one tree.
        let k = cliques.len();
        let mut edges: Vec<(usize, usize, usize)> = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let sep = intersect(&cliques[i], &cliques[j]);
                if !sep.is_empty() {
                    edges.push((sep.len(), i, j));
                }
            }
        }
        edges.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut neighbors: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); k];
        for (_, i, j) in edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                let sep = intersect(&cliques[i], &cliques[j]);
                neighbors[i].push((j, sep.clone()));
                neighbors[j].push((i, sep));
            }
        }
        for j in 1..k {
            let (r0, rj) = (find(&mut parent, 0), find(&mut parent, j));
            if r0 != rj {
                parent[rj] = r0;
                neighbors[0].push((j, Vec::new()));
                neighbors[j].push((0, Vec::new()));
            }
        }

        // BFS from clique 0.
        let mut bfs = Vec::with_capacity(k);
        let mut seen = vec![false; k];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back((0usize, None, Vec::new()));
        seen[0] = true;
        while let Some((c, p, sep)) = queue.pop_front() {
            bfs.push((c, p, sep));
            for (nb, nsep) in &neighbors[c] {
                if !seen[*nb] {
                    seen[*nb] = true;
                    queue.push_back((*nb, Some(c), nsep.clone()));
                }
            }
        }
        debug_assert!(bfs.len() == k);
        debug_assert!(running_intersection_holds(&cliques, &bfs));

        let spec_home = specs
            .iter()
            .map(|s| {
                cliques
                    .iter()
                    .position(|c| is_subset(s.vars(), c))
                    .expect("triangulation preserves spec cliques")
            })
            .collect();

        Ok(Self {
            cliques,
            clique_dims,
            bfs,
            spec_home,
        })
    }

    pub fn max_clique_span(&self) -> usize {
        self.clique_dims
            .iter()
            .map(|d| d.iter().product::<usize>())
            .max()
            .unwrap_or(0)
    }

    fn zero_potentials(&self) -> Vec<Factor> {
        self.cliques
            .iter()
            .zip(&self.clique_dims)
            .map(|(c, d)| Factor::zeros(c.clone(), d.clone()))
            .collect()
    }

    /// Clique potentials from theta: each spec's table is added into its home
    /// clique; `evidence` (var, value) pairs pin variables before calibration.
    fn potentials(
        &self,
        universe: &VariableSet,
        specs: &[MarginalSpec],
        theta: &[Vec<f64>],
        evidence: &[(usize, usize)],
    ) -> Vec<Factor> {
        let mut pots = self.zero_potentials();
        for (s, spec) in specs.iter().enumerate() {
            let layout = spec.layout(universe);
            let f = Factor {
                vars: layout.vars.clone(),
                dims: layout.dims.clone(),
                table: theta[s].clone(),
            };
            pots[self.spec_home[s]].add_assign_broadcast(&f);
        }
        if !evidence.is_empty() {
            for pot in &mut pots {
                for &(var, value) in evidence {
                    if pot.vars.contains(&var) {
                        *pot = pot.condition(var, value);
                    }
                }
            }
        }
        pots
    }

    /// Runs collect+distribute message passing; `evidence` pins variables.
    pub fn calibrate(
        &self,
        universe: &VariableSet,
        specs: &[MarginalSpec],
        theta: &[Vec<f64>],
        evidence: &[(usize, usize)],
    ) -> Calibrated {
        let pots = self.potentials(universe, specs, theta, evidence);
        let evid_vars: Vec<usize> = evidence.iter().map(|&(v, _)| v).collect();
        let strip = |sep: &[usize]| -> Vec<usize> {
            sep.iter()
                .cloned()
                .filter(|v| !evid_vars.contains(v))
                .collect()
        };

        let k = self.cliques.len();
        // Collect phase: process leaves upward (reverse BFS).
        let mut up_beliefs: Vec<Factor> = pots.clone();
        let mut up_msgs: Vec<Option<Factor>> = (0..k).map(|_| None).collect();
        for &(c, p, ref sep) in self.bfs.iter().rev() {
            if let Some(p) = p {
                let msg = up_beliefs[c].marginalize_onto(&strip(sep));
                up_beliefs[p].add_assign_broadcast(&msg);
                up_msgs[c] = Some(msg);
            }
        }
        let log_z = up_beliefs[self.bfs[0].0].logsumexp_all();

        // Distribute phase: beliefs become full posteriors.
        let mut beliefs = up_beliefs.clone();
        for &(c, p, ref sep) in self.bfs.iter() {
            if let Some(p) = p {
                // Message p -> c: parent's full belief minus c's contribution.
                let mut from_parent = beliefs[p].clone();
                if let Some(up) = &up_msgs[c] {
                    let mut neg = up.clone();
                    for v in &mut neg.table {
                        *v = -*v;
                    }
                    from_parent.add_assign_broadcast(&neg);
                }
                let msg = from_parent.marginalize_onto(&strip(sep));
                beliefs[c].add_assign_broadcast(&msg);
            }
        }

        Calibrated {
            up_beliefs,
            beliefs,
            log_z,
            evidence: evidence.to_vec(),
        }
    }
}

/// Calibration result: per-clique beliefs and the log-partition value.
#[derive(Debug, Clone)]
pub struct Calibrated {
    /// Collect-phase beliefs (potential + messages from below), used for
    /// top-down sampling.
    up_beliefs: Vec<Factor>,
    /// Fully calibrated beliefs.
    beliefs: Vec<Factor>,
    pub log_z: f64,
    evidence: Vec<(usize, usize)>,
}

impl Calibrated {
    /// Marginal probabilities over `vars` read from clique `home` (which must
    /// contain them all).
    pub fn marginal_from(&self, home: usize, vars: &[usize]) -> Vec<f64> {
        let m = self.beliefs[home].marginalize_onto(vars);
        m.table.iter().map(|&v| (v - self.log_z).exp()).collect()
    }

    pub fn belief(&self, clique: usize) -> &Factor {
        &self.beliefs[clique]
    }
}

/// Draws one full assignment by top-down sampling over the calibrated tree.
/// Returns values for every non-evidence variable (evidence values are filled
/// in as given).
pub fn sample_assignment<R: Rng>(
    tree: &JunctionTree,
    cal: &Calibrated,
    universe_len: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut assignment: Vec<Option<usize>> = vec![None; universe_len];
    for &(v, val) in &cal.evidence {
        assignment[v] = Some(val);
    }
    for &(c, _, _) in tree.bfs.iter() {
        // Condition this clique's collect belief on everything already fixed.
        let mut f = cal.up_beliefs[c].clone();
        let fixed: Vec<(usize, usize)> = f
            .vars
            .iter()
            .filter_map(|&v| assignment[v].map(|val| (v, val)))
            .collect();
        for (v, val) in fixed {
            f = f.condition(v, val);
        }
        if f.vars.is_empty() {
            continue;
        }
        let idx = sample_index_log(&f.table, rng);
        for (v, val) in f.vars.clone().into_iter().zip(f.decode(idx)) {
            assignment[v] = Some(val);
        }
    }
    assignment
        .into_iter()
        .map(|v| v.expect("tree covers every variable"))
        .collect()
}

/// Samples an index proportionally to exp(log_weights).
pub fn sample_index_log<R: Rng>(log_weights: &[f64], rng: &mut R) -> usize {
    let total = logsumexp(log_weights);
    debug_assert!(total > f64::NEG_INFINITY);
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &lw) in log_weights.iter().enumerate() {
        acc += (lw - total).exp();
        if u < acc {
            return i;
        }
    }
    log_weights.len() - 1
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|v| b.contains(v))
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().cloned().filter(|v| b.contains(v)).collect()
}

fn running_intersection_holds(
    cliques: &[Vec<usize>],
    bfs: &[(usize, Option<usize>, Vec<usize>)],
) -> bool {
    // For every pair of cliques sharing v, v must appear on the tree path
    // between them; equivalent check: for each variable, the cliques that
    // contain it form a connected subtree.
    let n_vars = cliques.iter().flatten().cloned().max().map_or(0, |m| m + 1);
    for v in 0..n_vars {
        let holders: Vec<usize> = (0..cliques.len())
            .filter(|&c| cliques[c].contains(&v))
            .collect();
        if holders.len() <= 1 {
            continue;
        }
        // Count holders whose parent also holds v; in a connected subtree all
        // but one (the subtree root) must.
        let mut roots = 0;
        for &(c, p, _) in bfs {
            if !cliques[c].contains(&v) {
                continue;
            }
            match p {
                Some(p) if cliques[p].contains(&v) => {}
                _ => roots += 1,
            }
        }
        if roots != 1 {
            return false;
        }
    }
    true
}
