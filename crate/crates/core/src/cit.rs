//! The Chain-in-Tree plug-in: a chaining phase executed before expansion,
//! the three branching-necessity evaluators (direct prompting and the two
//! self-consistency variants), the entropy gate, the granularity-preference
//! hook, and the child-reuse contract.

use serde::{Deserialize, Serialize};

use crate::costlab::{CostLedger, Phase, Recorder};
use crate::error::{ConfigError, Error, RoleError};
use crate::roles::{RoleKind, RoleRequirements, RoleSet};
use crate::tree::{Action, ActionSource, NodeId, SearchTree, State};

/// How branching necessity is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitMethod {
    /// An auxiliary judge rates the candidate step 1-4.
    BnDp,
    /// Cluster candidates with a single aggregator invocation.
    BnSc1,
    /// Cluster candidates via pairwise equivalence queries and union-find.
    BnSc2,
    /// Cluster candidates and gate on normalized Shannon entropy.
    Entropy,
}

/// Configuration of the chaining phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitConfig {
    pub method: CitMethod,
    /// Continuation budget per node: actions sampled for the BN check.
    pub k_bn: usize,
    /// Chain iff the BN score reaches this threshold: a rating on the 1-4
    /// scale for direct prompting, a fraction for the self-consistency
    /// methods.
    pub r_bn: f64,
    /// States of cached children are retained only while the transition
    /// confidence stays below this. Above 1.0 means "always retain" for
    /// concatenation transitions (their confidence is exactly 1).
    pub r_conf: f64,
    /// Entropy threshold for the gate, in [0,1].
    pub tau: f64,
    /// Safety cap on chain length; `None` means the engine's depth limit.
    pub max_chain_length: Option<usize>,
}

impl CitConfig {
    pub fn bn_dp() -> Self {
        Self { method: CitMethod::BnDp, k_bn: 1, r_bn: 4.0, r_conf: 1.1, tau: 0.6, max_chain_length: None }
    }

    pub fn bn_sc1(k_expand: usize) -> Self {
        Self { method: CitMethod::BnSc1, k_bn: k_expand, r_bn: 0.5, r_conf: 1.1, tau: 0.6, max_chain_length: None }
    }

    pub fn bn_sc2(k_expand: usize) -> Self {
        Self { method: CitMethod::BnSc2, k_bn: k_expand, r_bn: 0.5, r_conf: 1.1, tau: 0.6, max_chain_length: None }
    }

    pub fn entropy(k_expand: usize, tau: f64) -> Self {
        Self { method: CitMethod::Entropy, k_bn: k_expand, r_bn: 0.5, r_conf: 1.1, tau, max_chain_length: None }
    }

    pub fn validate(&self, k_expand: usize) -> Result<(), ConfigError> {
        if self.k_bn == 0 {
            return Err(ConfigError("k_bn must be >= 1".into()));
        }
        if self.k_bn > k_expand {
            return Err(ConfigError(format!("k_bn {} > k_expand {k_expand}", self.k_bn)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError(format!("tau {} outside [0,1]", self.tau)));
        }
        match self.method {
            CitMethod::BnDp => {
                if !(1.0..=4.0).contains(&self.r_bn) {
                    return Err(ConfigError(format!("BN-DP threshold {} outside the 1-4 scale", self.r_bn)));
                }
            }
            _ => {
                if !(0.0..=1.0).contains(&self.r_bn) {
                    return Err(ConfigError(format!("BN-SC threshold {} outside [0,1]", self.r_bn)));
                }
            }
        }
        Ok(())
    }

    pub fn requirements(&self) -> RoleRequirements {
        RoleRequirements {
            bn_judge: self.method == CitMethod::BnDp,
            aggregator: self.method == CitMethod::BnSc1,
            equivalence: matches!(self.method, CitMethod::BnSc2 | CitMethod::Entropy),
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Clusters
// ---------------------------------------------------------------------------

/// One equivalence cluster of candidate actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub canonical: Action,
    pub count: u64,
    /// Indices into the clustered candidate list; empty when the aggregator
    /// produced counts only.
    pub member_indices: Vec<usize>,
}

/// Equivalence clusters of candidate actions with canonical actions and
/// counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub total: u64,
    /// False when member indices are unavailable (aggregator output).
    pub members_tracked: bool,
    /// Counts were rescaled to match the candidate count.
    pub repaired: bool,
}

impl ClusterSet {
    /// Builds from aggregator output: canonical texts and counts only.
    pub fn from_counts(canonicals: Vec<String>, counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        let clusters = canonicals
            .into_iter()
            .zip(counts)
            .map(|(text, count)| Cluster {
                canonical: Action::new(text, ActionSource::AggregatorCanonical),
                count,
                member_indices: Vec::new(),
            })
            .collect();
        Self { clusters, total, members_tracked: false, repaired: false }
    }

    /// Builds from an explicit partition of the candidate list. The canonical
    /// action of each cluster is its smallest-index member; clusters are
    /// ordered by that index.
    pub fn from_partition(candidates: &[Action], mut components: Vec<Vec<usize>>) -> Self {
        for comp in &mut components {
            comp.sort_unstable();
        }
        components.sort_by_key(|c| c[0]);
        let clusters: Vec<Cluster> = components
            .into_iter()
            .map(|members| Cluster {
                canonical: candidates[members[0]].clone(),
                count: members.len() as u64,
                member_indices: members,
            })
            .collect();
        let total = clusters.iter().map(|c| c.count).sum();
        Self { clusters, total, members_tracked: true, repaired: false }
    }

    /// Index of the largest cluster, ties broken by earliest cluster.
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.clusters.iter().enumerate() {
            if best.map_or(true, |b| c.count > self.clusters[b].count) {
                best = Some(i);
            }
        }
        best
    }

    pub fn counts(&self) -> Vec<u64> {
        self.clusters.iter().map(|c| c.count).collect()
    }
}

/// BN score from a cluster set: the fraction of candidates in the largest
/// cluster.
pub fn bn_sc_score(clusters: &ClusterSet) -> Result<f64, ConfigError> {
    if clusters.total == 0 {
        return Err(ConfigError("empty cluster set".into()));
    }
    let largest = clusters.largest().expect("total > 0 implies a cluster");
    Ok(clusters.clusters[largest].count as f64 / clusters.total as f64)
}

// ---------------------------------------------------------------------------
// Union-find over equivalence answers (BN-SC2)
// ---------------------------------------------------------------------------

/// Minimal disjoint-set with path compression; the representative of a set is
/// its smallest member, matching the first-surviving-index rule.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return;
        }
        // Smaller index wins so representatives are stable.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
    }

    /// Components ordered by their smallest member.
    pub fn components(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for x in 0..n {
            let r = self.find(x);
            by_root.entry(r).or_default().push(x);
        }
        by_root.into_values().collect()
    }
}

/// Clusters candidates by querying the equivalence oracle on every unordered
/// pair, in lexicographic pair order, and merging with union-find. The
/// transitive closure of YES answers defines the clusters.
pub fn cluster_pairwise(
    roles: &RoleSet,
    context: &State,
    candidates: &[Action],
    rec: &Recorder,
) -> Result<ClusterSet, RoleError> {
    let oracle = roles
        .equivalence
        .as_ref()
        .ok_or_else(|| RoleError::new(RoleKind::Equivalence, "equivalence role missing"))?;
    let mut uf = UnionFind::new(candidates.len());
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            if oracle.same(context, &candidates[i], &candidates[j], rec)? {
                uf.union(i, j);
            }
        }
    }
    Ok(ClusterSet::from_partition(candidates, uf.components()))
}

/// Clusters candidates with one aggregator invocation. When the returned
/// counts do not sum to the candidate count, they are rescaled by
/// proportional rounding with largest-remainder correction and flagged.
pub fn cluster_aggregator(
    roles: &RoleSet,
    state: &State,
    candidates: &[Action],
    rec: &Recorder,
) -> Result<ClusterSet, RoleError> {
    let agg = roles
        .aggregator
        .as_ref()
        .ok_or_else(|| RoleError::new(RoleKind::Aggregator, "aggregator role missing"))?;
    let mut set = agg.cluster(state, candidates, rec)?;
    let expected = candidates.len() as u64;
    if set.total != expected && set.total > 0 && expected > 0 {
        repair_counts(&mut set, expected);
    }
    Ok(set)
}

fn repair_counts(set: &mut ClusterSet, expected: u64) {
    let total = set.total as f64;
    let shares: Vec<f64> = set.clusters.iter().map(|c| c.count as f64 / total * expected as f64).collect();
    let mut counts: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let mut remainder = expected - counts.iter().sum::<u64>();
    // Largest fractional remainders get the leftover units; ties to earlier
    // clusters for determinism.
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for idx in order {
        if remainder == 0 {
            break;
        }
        counts[idx] += 1;
        remainder -= 1;
    }
    for (c, n) in set.clusters.iter_mut().zip(&counts) {
        c.count = *n;
    }
    set.clusters.retain(|c| c.count > 0);
    set.total = expected;
    set.repaired = true;
}

// ---------------------------------------------------------------------------
// Entropy gate
// ---------------------------------------------------------------------------

/// Shannon entropy of the cluster-size distribution, normalized by the log of
/// the number of nonempty clusters. Zero for a single cluster. Natural log;
/// the normalized value is base-invariant.
pub fn normalized_entropy(clusters: &ClusterSet) -> f64 {
    let counts: Vec<u64> = clusters.counts().into_iter().filter(|&c| c > 0).collect();
    let k = counts.len();
    if k <= 1 {
        return 0.0;
    }
    let total: u64 = counts.iter().sum();
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (k as f64).ln()
}

/// Outcome of the entropy gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateDecision {
    /// Chain forward with the most probable cluster.
    Continue { cluster: usize },
    /// Branch over the top clusters (largest first, ties by earliest).
    Branch { clusters: Vec<usize> },
}

/// Continue iff normalized entropy is at most `tau`; otherwise branch over
/// the `min(k_expand, #clusters)` largest clusters.
pub fn entropy_gate(clusters: &ClusterSet, tau: f64, k_expand: usize) -> GateDecision {
    let h = normalized_entropy(clusters);
    if h <= tau {
        GateDecision::Continue { cluster: clusters.largest().unwrap_or(0) }
    } else {
        let mut order: Vec<usize> = (0..clusters.clusters.len()).collect();
        order.sort_by(|&a, &b| clusters.clusters[b].count.cmp(&clusters.clusters[a].count).then(a.cmp(&b)));
        order.truncate(k_expand.min(clusters.clusters.len()));
        GateDecision::Branch { clusters: order }
    }
}

// ---------------------------------------------------------------------------
// Chaining phase
// ---------------------------------------------------------------------------

/// A child produced during chaining and cached for reuse at expansion time.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedChild {
    pub action: Action,
    /// Retained only when the BN/confidence retention rule allows it.
    pub state: Option<State>,
    pub conf: f64,
}

/// Why the chaining loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStop {
    /// The BN check failed: branch here.
    BranchNeeded,
    Terminal,
    DepthLimit,
    LengthCap,
    /// Transition confidence reached the retention threshold.
    Confidence,
}

#[derive(Debug)]
pub struct ChainOutcome {
    /// Deepest node of the chain; expansion happens here if still possible.
    pub tail: NodeId,
    /// The BN proposals at the stopping node, cached for reuse.
    pub cached: Vec<CachedChild>,
    pub stop: ChainStop,
    /// Nodes that collapsed (passed the BN check) during this phase.
    pub collapsed: usize,
}

struct BnDecision {
    chain: bool,
    chosen: Action,
    score: f64,
}

/// Runs the chaining loop from `node_id`: while the BN check passes, commit
/// exactly one chained child and continue from it. The proposals at the
/// stopping node are all cached and returned for reuse.
#[allow(clippy::too_many_arguments)]
pub fn chaining_phase(
    tree: &mut SearchTree,
    node_id: NodeId,
    roles: &RoleSet,
    cfg: &CitConfig,
    depth_limit: usize,
    seed: u64,
    ledger: &CostLedger,
) -> Result<ChainOutcome, Error> {
    let cap = cfg.max_chain_length.unwrap_or(depth_limit);
    let mut cur = node_id;
    let mut collapsed = 0usize;
    loop {
        let node = tree.get(cur)?;
        let state = node
            .state
            .clone()
            .ok_or_else(|| Error::Other(format!("chaining requires a materialized state at node {cur}")))?;
        if state.is_terminal {
            return Ok(ChainOutcome { tail: cur, cached: Vec::new(), stop: ChainStop::Terminal, collapsed });
        }
        if state.depth >= depth_limit {
            return Ok(ChainOutcome { tail: cur, cached: Vec::new(), stop: ChainStop::DepthLimit, collapsed });
        }
        if collapsed >= cap {
            return Ok(ChainOutcome { tail: cur, cached: Vec::new(), stop: ChainStop::LengthCap, collapsed });
        }

        let rec = Recorder::new(ledger, Phase::Chain, state.depth);
        let node_seed = derive_seed(seed, cur as u64, state.depth as u64);
        let samples = roles.sample_actions(&state, cfg.k_bn, node_seed, &rec)?;
        let decision = evaluate_bn(roles, cfg, &state, &samples, &rec)?;

        if !decision.chain {
            let cached = retention(&samples, decision.score, cfg);
            return Ok(ChainOutcome { tail: cur, cached, stop: ChainStop::BranchNeeded, collapsed });
        }

        let trans_rec = rec.at(Phase::Transition, state.depth);
        let (next_state, conf, terminal) = roles.apply_transition(&state, &decision.chosen, &trans_rec)?;
        let child = tree.attach_child(cur, decision.chosen, Some(next_state), conf)?;
        tree.get_mut(child)?.chained = true;
        collapsed += 1;
        cur = child;
        if conf >= cfg.r_conf {
            // Chain only while confidence stays low; once the transition is
            // this certain we stop and let expansion decide.
            let _ = terminal;
            return Ok(ChainOutcome { tail: cur, cached: Vec::new(), stop: ChainStop::Confidence, collapsed });
        }
    }
}

fn retention(samples: &[Action], score: f64, cfg: &CitConfig) -> Vec<CachedChild> {
    // At a BN stop the score is below the threshold, so only actions are
    // contributed; states would be retained only in the high-score low-
    // confidence case, which ends the chain through a commit instead.
    let _ = score;
    let _ = cfg;
    samples
        .iter()
        .map(|a| CachedChild {
            action: Action::new(a.text.clone(), ActionSource::ChainingCache),
            state: None,
            conf: 1.0,
        })
        .collect()
}

fn evaluate_bn(
    roles: &RoleSet,
    cfg: &CitConfig,
    state: &State,
    samples: &[Action],
    rec: &Recorder,
) -> Result<BnDecision, Error> {
    let bn_rec = rec.at(Phase::Bn, state.depth);
    match cfg.method {
        CitMethod::BnDp => {
            let judge = roles
                .bn_judge
                .as_ref()
                .ok_or_else(|| RoleError::new(RoleKind::BnJudge, "bn_judge role missing"))?;
            let mut best: Option<(u8, &Action)> = None;
            for action in samples {
                let rating = judge.rate(state, action, &bn_rec)?;
                if best.map_or(true, |(r, _)| rating > r) {
                    best = Some((rating, action));
                }
            }
            let (rating, action) = best.expect("k_bn >= 1");
            Ok(BnDecision {
                chain: f64::from(rating) >= cfg.r_bn,
                chosen: action.clone(),
                score: f64::from(rating),
            })
        }
        CitMethod::BnSc1 | CitMethod::BnSc2 => {
            let clusters = if cfg.method == CitMethod::BnSc1 {
                cluster_aggregator(roles, state, samples, &bn_rec)?
            } else {
                cluster_pairwise(roles, state, samples, &bn_rec)?
            };
            let score = bn_sc_score(&clusters).map_err(Error::Config)?;
            let largest = clusters.largest().expect("nonempty");
            Ok(BnDecision {
                chain: score >= cfg.r_bn,
                chosen: clusters.clusters[largest].canonical.clone(),
                score,
            })
        }
        CitMethod::Entropy => {
            let clusters = if roles.equivalence.is_some() {
                cluster_pairwise(roles, state, samples, &bn_rec)?
            } else {
                cluster_aggregator(roles, state, samples, &bn_rec)?
            };
            let score = bn_sc_score(&clusters).map_err(Error::Config)?;
            match entropy_gate(&clusters, cfg.tau, samples.len().max(1)) {
                GateDecision::Continue { cluster } => Ok(BnDecision {
                    chain: true,
                    chosen: clusters.clusters[cluster].canonical.clone(),
                    score,
                }),
                GateDecision::Branch { .. } => Ok(BnDecision {
                    chain: false,
                    chosen: clusters.clusters[clusters.largest().unwrap()].canonical.clone(),
                    score,
                }),
            }
        }
    }
}

/// Expands `node_id` into exactly `k_expand` children: cached chaining
/// children first (truncated), then fresh policy samples, all scored with the
/// reward role. Returns the child ids in attachment order.
#[allow(clippy::too_many_arguments)]
pub fn reuse_children(
    tree: &mut SearchTree,
    node_id: NodeId,
    cached: &[CachedChild],
    k_expand: usize,
    roles: &RoleSet,
    seed: u64,
    ledger: &CostLedger,
    materialize_states: bool,
) -> Result<Vec<NodeId>, Error> {
    let state = tree
        .get(node_id)?
        .state
        .clone()
        .ok_or_else(|| Error::Other(format!("expansion requires a materialized state at node {node_id}")))?;
    if !tree.get(node_id)?.children_ids.is_empty() {
        return Err(crate::error::TreeError::AlreadyExpanded(node_id).into());
    }
    let depth = state.depth;
    let rec = Recorder::new(ledger, Phase::Expand, depth);

    let mut pending: Vec<(Action, Option<State>, f64)> = Vec::with_capacity(k_expand);
    for item in cached.iter().take(k_expand) {
        pending.push((item.action.clone(), item.state.clone(), item.conf));
    }
    if pending.len() < k_expand {
        let fresh = roles.sample_actions(&state, k_expand - pending.len(), derive_seed(seed, node_id as u64, 1), &rec)?;
        for action in fresh {
            pending.push((action, None, 1.0));
        }
    }

    let mut children = Vec::with_capacity(pending.len());
    for (action, cached_state, cached_conf) in pending {
        let (child_state, conf) = if let Some(s) = cached_state {
            (Some(s), cached_conf)
        } else if materialize_states {
            let (s, conf, _terminal) = roles.apply_transition(&state, &action, &rec.at(Phase::Transition, depth))?;
            (Some(s), conf)
        } else {
            (None, 1.0) // lazy sampling: actions only
        };
        let signal = roles.score_reward(&state, &action, &rec.at(Phase::Score, depth))?;
        let id = tree.attach_child(node_id, action, child_state, conf)?;
        tree.get_mut(id)?.prior_reward = Some(signal.value);
        children.push(id);
    }
    Ok(children)
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64-style mix, stable across platforms.
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
