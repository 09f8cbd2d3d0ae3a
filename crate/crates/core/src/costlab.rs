//! Invocation/token/time ledger plus the analytic cost calculators, and a
//! verifier that checks the efficiency guarantees against live runs.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::roles::RoleKind;

/// Search phase a ledger entry belongs to. Simulation-phase policy calls are
/// tagged separately so expansion-only cost laws stay checkable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Chain,
    Expand,
    Simulate,
    Score,
    Transition,
    Bn,
}

/// One recorded invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub role: RoleKind,
    pub phase: Phase,
    pub depth: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Wall time in seconds. Zero for the scripted backend so seeded runs
    /// serialize identically.
    pub wall_time: f64,
    /// Token counts were estimated by the whitespace fallback rather than
    /// reported by the endpoint.
    pub estimated_tokens: bool,
}

/// Append-only per-instance ledger. Appends are atomic; totals are pure folds
/// over the entry list.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub instance_id: String,
    #[serde(with = "mutex_vec")]
    entries: Mutex<Vec<CostEntry>>,
}

mod mutex_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mutex<Vec<CostEntry>>, s: S) -> Result<S::Ok, S::Error> {
        use serde::Serialize;
        m.lock().unwrap().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mutex<Vec<CostEntry>>, D::Error> {
        Vec::<CostEntry>::deserialize(d).map(Mutex::new)
    }
}

impl Clone for CostLedger {
    fn clone(&self) -> Self {
        Self {
            instance_id: self.instance_id.clone(),
            entries: Mutex::new(self.entries.lock().unwrap().clone()),
        }
    }
}

impl PartialEq for CostLedger {
    fn eq(&self, other: &Self) -> bool {
        self.instance_id == other.instance_id && *self.entries.lock().unwrap() == *other.entries.lock().unwrap()
    }
}

impl CostLedger {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self { instance_id: instance_id.into(), entries: Mutex::new(Vec::new()) }
    }

    pub fn record(&self, entry: CostEntry) {
        self.entries.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<CostEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn count(&self, filter: impl Fn(&CostEntry) -> bool) -> u64 {
        self.entries.lock().unwrap().iter().filter(|e| filter(e)).count() as u64
    }

    pub fn total_invocations(&self) -> u64 {
        self.count(|_| true)
    }

    pub fn invocations_by_role(&self, role: RoleKind) -> u64 {
        self.count(|e| e.role == role)
    }

    pub fn invocations_by_phase(&self, phase: Phase) -> u64 {
        self.count(|e| e.phase == phase)
    }

    /// Policy invocations attributable to growing the tree (chain + expand).
    pub fn policy_growth_invocations(&self) -> u64 {
        self.count(|e| e.role == RoleKind::Policy && matches!(e.phase, Phase::Chain | Phase::Expand))
    }

    pub fn policy_invocations(&self, phase: Phase) -> u64 {
        self.count(|e| e.role == RoleKind::Policy && e.phase == phase)
    }

    pub fn tokens_out(&self) -> u64 {
        self.entries.lock().unwrap().iter().map(|e| e.tokens_out).sum()
    }

    pub fn tokens_in(&self) -> u64 {
        self.entries.lock().unwrap().iter().map(|e| e.tokens_in).sum()
    }

    pub fn wall_time(&self) -> f64 {
        self.entries.lock().unwrap().iter().map(|e| e.wall_time).sum()
    }
}

/// Handed to role backends at each call site so every invocation lands in the
/// ledger with the right phase and depth.
pub struct Recorder<'a> {
    pub ledger: &'a CostLedger,
    pub phase: Phase,
    pub depth: usize,
}

impl<'a> Recorder<'a> {
    pub fn new(ledger: &'a CostLedger, phase: Phase, depth: usize) -> Self {
        Self { ledger, phase, depth }
    }

    pub fn at(&self, phase: Phase, depth: usize) -> Recorder<'a> {
        Recorder { ledger: self.ledger, phase, depth }
    }

    pub fn record(&self, role: RoleKind, tokens_in: u64, tokens_out: u64, wall_time: f64, estimated: bool) {
        self.ledger.record(CostEntry {
            role,
            phase: self.phase,
            depth: self.depth,
            tokens_in,
            tokens_out,
            wall_time,
            estimated_tokens: estimated,
        });
    }
}

// ---------------------------------------------------------------------------
// Analytic calculators
// ---------------------------------------------------------------------------

/// Total policy invocations of baseline beam search on a homogeneous world:
/// sum over depths of k * min(B, k^t).
pub fn beam_baseline_cost(k: u64, b: u64, d: u32) -> u64 {
    (0..d).map(|t| k * frontier_size(k, b, t)).sum()
}

/// Frontier size min(B, k^t), saturating on overflow.
pub fn frontier_size(k: u64, b: u64, t: u32) -> u64 {
    // k^t can overflow long before it matters; saturate past B.
    let mut p: u64 = 1;
    for _ in 0..t {
        p = p.saturating_mul(k);
        if p >= b {
            return b.min(p);
        }
    }
    b.min(p)
}

/// Beam search with chaining over an easy prefix of `d_c1` depths:
/// k_bn per chained depth, then the baseline series restarted.
pub fn beam_chain_cost(k: u64, k_bn: u64, b: u64, d: u32, d_c1: u32) -> Result<u64, ConfigError> {
    if k_bn > k {
        return Err(ConfigError(format!("k_bn {k_bn} > k_expand {k}")));
    }
    if d_c1 > d {
        return Err(ConfigError(format!("easy prefix {d_c1} exceeds depth limit {d}")));
    }
    let chained: u64 = u64::from(d_c1) * k_bn;
    let resumed: u64 = (d_c1..d).map(|t| k * frontier_size(k, b, t - d_c1)).sum();
    Ok(chained + resumed)
}

/// Expected per-depth cost when a fraction `psi` of the n_t nodes collapse:
/// (1-psi) k n_t + psi k_bn n_t.
pub fn continuation_depth_cost(k: u64, k_bn: u64, psi: f64, n_t: u64) -> Result<f64, ConfigError> {
    if k_bn > k {
        return Err(ConfigError(format!("k_bn {k_bn} > k_expand {k}")));
    }
    if !(0.0..=1.0).contains(&psi) {
        return Err(ConfigError(format!("psi {psi} outside [0,1]")));
    }
    Ok((1.0 - psi) * k as f64 * n_t as f64 + psi * k_bn as f64 * n_t as f64)
}

/// MCTS expansion-phase costs from a node census: baseline k|E| versus
/// chained k(|E|-|Ec|) + k_bn|Ec|.
pub fn mcts_costs(k: u64, k_bn: u64, e: u64, ec: u64) -> Result<(u64, u64), ConfigError> {
    if ec > e {
        return Err(ConfigError(format!("collapsed count {ec} > expanded count {e}")));
    }
    if k_bn > k {
        return Err(ConfigError(format!("k_bn {k_bn} > k_expand {k}")));
    }
    let baseline = k * e;
    let chained = k * (e - ec) + k_bn * ec;
    debug_assert!(chained <= baseline);
    Ok((baseline, chained))
}

/// Total policy invocations (expansion + one rollout per expanded node) to
/// saturate a k-ary tree of depth D.
pub fn p_full(d: u32, k: u64) -> u64 {
    if k == 0 {
        return 0;
    }
    let expansion: u64 = (0..d).map(|t| k * k.pow(t)).sum();
    let simulation: u64 = (0..d).map(|t| k.pow(t) * u64::from(d - t - 1)).sum();
    expansion + simulation
}

/// Upper bound on expansion-phase policy calls under chaining with average
/// chain length m: k * min(N, sum_{t<D'} k^t) with macro-depth D' = ceil(D/m).
pub fn big_o_expansion_bound(k: u64, n: u64, d: u32, m: u32) -> Result<u64, ConfigError> {
    if m == 0 {
        return Err(ConfigError("chain length m must be >= 1".into()));
    }
    let d_macro = d.div_ceil(m);
    let mut internal: u64 = 0;
    for t in 0..d_macro {
        internal = internal.saturating_add(if k == 0 { 0 } else { k.saturating_pow(t) });
        if internal >= n {
            internal = n;
            break;
        }
    }
    Ok(k * internal.min(n))
}

/// Monte-Carlo estimate of the per-depth continuation cost with Bernoulli
/// collapse. Returns (mean, standard error) over `trials` trials.
pub fn mc_continuation_cost(
    k: u64,
    k_bn: u64,
    psi: f64,
    n_t: u64,
    trials: u32,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut cost = 0u64;
        for _ in 0..n_t {
            cost += if rng.gen_bool(psi) { k_bn } else { k };
        }
        let c = cost as f64;
        sum += c;
        sum_sq += c * c;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Guarantee verification
// ---------------------------------------------------------------------------

/// Per-phase comparison of two ledgers from the same task and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub instance_id: String,
    pub baseline_policy_growth: u64,
    pub chained_policy_growth: u64,
    /// Relative change of growth-phase policy invocations, negative = saving.
    pub relative_change: f64,
    pub baseline_total: u64,
    pub chained_total: u64,
    pub pass: bool,
}

/// Checks that chaining did not increase growth-phase policy invocations.
pub fn verify_guarantee(base: &CostLedger, chained: &CostLedger) -> GuaranteeReport {
    let b = base.policy_growth_invocations();
    let c = chained.policy_growth_invocations();
    let relative_change = if b == 0 { 0.0 } else { (c as f64 - b as f64) / b as f64 };
    GuaranteeReport {
        instance_id: base.instance_id.clone(),
        baseline_policy_growth: b,
        chained_policy_growth: c,
        relative_change,
        baseline_total: base.total_invocations(),
        chained_total: chained.total_invocations(),
        pass: c <= b,
    }
}
