//! A scripted synthetic world. Every role is a deterministic pure function of
//! (spec, state, seed), so engine runs are reproducible bit for bit and the
//! closed-form cost laws can be checked as exact integer equalities.
//!
//! The world is a homogeneous k-ary tree of depth D. Non-terminal candidates
//! read "take branch {i}" and carry an equivalence-class tag in a trailing
//! bracket; terminal candidates appear only at the last depth and state the
//! final answer. The gold path always takes branch 0 and the scripted rewards
//! rank branch 0 highest, so any sound engine finds the gold answer.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cit::ClusterSet;
use crate::costlab::Recorder;
use crate::error::RoleError;
use crate::roles::{
    is_terminal_action, AggregatorRole, BnJudgeRole, EquivalenceRole, PolicyRole, RewardRole,
    RoleKind, RoleSet, TransitionMode, TransitionRole,
};
use crate::tree::{Action, ActionSource, RewardSignal, State};

use super::estimate_tokens;

/// Which nodes collapse under the branching-necessity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EasyRule {
    /// All nodes at depth < the given prefix are easy.
    Prefix(usize),
    /// Each node is easy independently with probability p, decided by a hash
    /// of (seed, depth, lineage) so both runs of a comparison agree.
    Bernoulli { p: f64 },
}

/// Scripted world parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldSpec {
    /// Candidate-table width: every node scripts exactly k candidates.
    pub k: usize,
    /// Depth limit; terminal candidates appear exactly at depth D-1.
    pub depth: usize,
    pub easy: EasyRule,
    pub gold_answer: f64,
    pub seed: u64,
}

impl SynthWorldSpec {
    pub fn new(k: usize, depth: usize, easy: EasyRule, gold_answer: f64, seed: u64) -> Self {
        Self { k, depth, easy, gold_answer, seed }
    }

    /// Branch indices taken from the root, read back from the state text.
    pub fn lineage(&self, state: &State) -> Vec<usize> {
        lineage_of(&state.text)
    }

    pub fn is_easy(&self, state: &State) -> bool {
        let lineage = self.lineage(state);
        match self.easy {
            EasyRule::Prefix(d) => state.depth < d,
            EasyRule::Bernoulli { p } => {
                let mut h = self.seed ^ 0x5851_f42d_4c95_7f2d;
                h = mix(h, state.depth as u64 + 1);
                for &b in &lineage {
                    h = mix(h, b as u64 + 1);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                rng.gen::<f64>() < p
            }
        }
    }

    /// The scripted candidate table for a state: exactly k actions, candidate
    /// 0 on the gold path. Easy nodes put every candidate in class 0 so the
    /// self-consistency evaluators agree with the judge.
    pub fn candidates(&self, state: &State) -> Result<Vec<Action>, RoleError> {
        if state.is_terminal {
            return Err(out_of_spec("candidates requested from a terminal state"));
        }
        if state.depth >= self.depth {
            return Err(out_of_spec(format!(
                "state depth {} is outside the scripted tree (D={})",
                state.depth, self.depth
            )));
        }
        let lineage = self.lineage(state);
        if let Some(&bad) = lineage.iter().find(|&&b| b >= self.k) {
            return Err(out_of_spec(format!("branch {bad} outside the table (k={})", self.k)));
        }
        let easy = self.is_easy(state);
        let on_gold = lineage.iter().all(|&b| b == 0);
        let last = state.depth == self.depth - 1;
        let mut out = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let class = if easy { 0 } else { i };
            let text = if last {
                let ans = if on_gold && i == 0 { self.gold_answer } else { self.gold_answer + (i as f64) + 1.0 };
                format!("Now we can answer the question: The answer is {} [c{class}]", fmt_num(ans))
            } else {
                format!("take branch {i} [c{class}]")
            };
            out.push(Action::new(text, ActionSource::Policy));
        }
        Ok(out)
    }

    /// Scripted reward: branch i scores 0.9 - 0.15*i (floored at 0.05);
    /// terminal candidates score 0.95 when the stated answer is the gold one
    /// and 0.2 otherwise.
    pub fn reward_of(&self, action: &Action) -> Result<f64, RoleError> {
        if is_terminal_action(&action.text) {
            let stated = crate::harness::extract_numeric_answer(&action.text)
                .ok_or_else(|| out_of_spec("terminal candidate without a stated answer"))?;
            let correct = (stated - self.gold_answer).abs() < 1e-9;
            return Ok(if correct { 0.95 } else { 0.2 });
        }
        let i = branch_of(&action.text)
            .ok_or_else(|| out_of_spec(format!("foreign action {:?}", action.text)))?;
        Ok((0.9 - 0.15 * i as f64).max(0.05))
    }
}

fn out_of_spec(msg: impl Into<String>) -> RoleError {
    RoleError::new(RoleKind::Policy, msg)
}

fn mix(h: u64, v: u64) -> u64 {
    let mut z = h ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn lineage_of(text: &str) -> Vec<usize> {
    branch_regex().captures_iter(text).map(|c| c[1].parse().unwrap()).collect()
}

fn branch_of(text: &str) -> Option<usize> {
    branch_regex().captures(text).map(|c| c[1].parse().unwrap())
}

fn branch_regex() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"take branch (\d+)").unwrap())
}

/// Equivalence-class set from a trailing bracket tag like `[c0]` or `[c0+c2]`.
pub fn class_set(text: &str) -> Option<Vec<usize>> {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| regex::Regex::new(r"\[([c0-9+]+)\]\s*$").unwrap());
    let caps = re.captures(text)?;
    let mut out = Vec::new();
    for part in caps[1].split('+') {
        let id: usize = part.strip_prefix('c')?.parse().ok()?;
        out.push(id);
    }
    out.sort_unstable();
    out.dedup();
    Some(out)
}

fn subsumes(a: &[usize], b: &[usize]) -> bool {
    let contains = |big: &[usize], small: &[usize]| small.iter().all(|x| big.contains(x));
    contains(a, b) || contains(b, a)
}

// ---------------------------------------------------------------------------
// Role implementations
// ---------------------------------------------------------------------------

struct SynthPolicy(Arc<SynthWorldSpec>);

impl SynthPolicy {
    fn pick(&self, state: &State, k: usize, seed: u64) -> Result<Vec<Action>, RoleError> {
        let table = self.0.candidates(state)?;
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let idx = if i < table.len() {
                i
            } else {
                // Cycling past the table rotates by the seed for variety
                // while staying deterministic.
                (seed as usize + i) % table.len()
            };
            out.push(table[idx].clone());
        }
        Ok(out)
    }
}

impl PolicyRole for SynthPolicy {
    fn sample(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError> {
        let actions = self.pick(state, k, seed)?;
        let tin = estimate_tokens(&state.text);
        for a in &actions {
            rec.record(RoleKind::Policy, tin, estimate_tokens(&a.text), 0.0, true);
        }
        Ok(actions)
    }

    fn sample_batch(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError> {
        let actions = self.pick(state, k, seed)?;
        let tout = actions.iter().map(|a| estimate_tokens(&a.text)).sum();
        rec.record(RoleKind::Policy, estimate_tokens(&state.text), tout, 0.0, true);
        Ok(actions)
    }
}

struct SynthReward(Arc<SynthWorldSpec>);

impl RewardRole for SynthReward {
    fn score(&self, state: &State, action: &Action, rec: &Recorder) -> Result<RewardSignal, RoleError> {
        let value = self.0.reward_of(action)?;
        rec.record(RoleKind::Reward, estimate_tokens(&state.text) + estimate_tokens(&action.text), 1, 0.0, true);
        Ok(RewardSignal::combined(value))
    }
}

struct SynthTransition;

impl TransitionRole for SynthTransition {
    fn step(&self, state: &State, action: &Action, rec: &Recorder) -> Result<(State, f64, bool), RoleError> {
        let is_terminal = is_terminal_action(&action.text);
        let next = State {
            text: format!("{}\nStep {}: {}", state.text, state.depth + 1, action.text),
            depth: state.depth + 1,
            is_terminal,
        };
        rec.record(RoleKind::Transition, estimate_tokens(&next.text), 1, 0.0, true);
        Ok((next, 0.9, is_terminal))
    }
}

struct SynthBnJudge(Arc<SynthWorldSpec>);

impl BnJudgeRole for SynthBnJudge {
    fn rate(&self, state: &State, candidate: &Action, rec: &Recorder) -> Result<u8, RoleError> {
        if state.depth >= self.0.depth {
            return Err(RoleError::new(RoleKind::BnJudge, "state outside the scripted tree"));
        }
        let _ = candidate;
        let rating = if self.0.is_easy(state) { 4 } else { 1 };
        rec.record(RoleKind::BnJudge, estimate_tokens(&state.text), 1, 0.0, true);
        Ok(rating)
    }
}

struct SynthAggregator;

impl AggregatorRole for SynthAggregator {
    fn cluster(&self, state: &State, candidates: &[Action], rec: &Recorder) -> Result<ClusterSet, RoleError> {
        let mut classes = Vec::with_capacity(candidates.len());
        for c in candidates {
            classes.push(
                class_set(&c.text)
                    .ok_or_else(|| RoleError::new(RoleKind::Aggregator, "candidate without class metadata"))?,
            );
        }
        let mut components: Vec<Vec<usize>> = Vec::new();
        for (i, cls) in classes.iter().enumerate() {
            match components.iter_mut().find(|comp| classes[comp[0]] == *cls) {
                Some(comp) => comp.push(i),
                None => components.push(vec![i]),
            }
        }
        rec.record(
            RoleKind::Aggregator,
            estimate_tokens(&state.text) + candidates.iter().map(|c| estimate_tokens(&c.text)).sum::<u64>(),
            candidates.len() as u64,
            0.0,
            true,
        );
        Ok(ClusterSet::from_partition(candidates, components))
    }
}

struct SynthEquivalence;

impl EquivalenceRole for SynthEquivalence {
    fn same(&self, context: &State, a: &Action, b: &Action, rec: &Recorder) -> Result<bool, RoleError> {
        let ca = class_set(&a.text)
            .ok_or_else(|| RoleError::new(RoleKind::Equivalence, "left action without class metadata"))?;
        let cb = class_set(&b.text)
            .ok_or_else(|| RoleError::new(RoleKind::Equivalence, "right action without class metadata"))?;
        rec.record(
            RoleKind::Equivalence,
            estimate_tokens(&context.text) + estimate_tokens(&a.text) + estimate_tokens(&b.text),
            1,
            0.0,
            true,
        );
        Ok(subsumes(&ca, &cb))
    }
}

/// A complete role set over the scripted world.
pub fn synth_roles(spec: Arc<SynthWorldSpec>, mode: TransitionMode) -> RoleSet {
    RoleSet {
        policy: Arc::new(SynthPolicy(spec.clone())),
        reward: Arc::new(SynthReward(spec.clone())),
        transition: Some(Arc::new(SynthTransition)),
        bn_judge: Some(Arc::new(SynthBnJudge(spec))),
        aggregator: Some(Arc::new(SynthAggregator)),
        equivalence: Some(Arc::new(SynthEquivalence)),
        transition_mode: mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costlab::{CostLedger, Phase};

    fn spec(k: usize, d: usize, easy: EasyRule) -> Arc<SynthWorldSpec> {
        Arc::new(SynthWorldSpec::new(k, d, easy, 42.0, 7))
    }

    fn rec(ledger: &CostLedger) -> Recorder<'_> {
        Recorder::new(ledger, Phase::Expand, 0)
    }

    #[test]
    fn root_candidates_in_table_order() {
        let s = spec(3, 3, EasyRule::Prefix(0));
        let root = State::root("Find the number.");
        let c = s.candidates(&root).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].text, "take branch 0 [c0]");
        assert_eq!(c[1].text, "take branch 1 [c1]");
        assert_eq!(c[2].text, "take branch 2 [c2]");
    }

    #[test]
    fn k1_takes_first() {
        let s = spec(3, 3, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let roles = synth_roles(s, TransitionMode::Concatenate);
        let got = roles.sample_actions(&State::root("q"), 1, 0, &rec(&ledger)).unwrap();
        assert_eq!(got[0].text, "take branch 0 [c0]");
        assert_eq!(ledger.total_invocations(), 1);
    }

    #[test]
    fn terminal_state_rejected() {
        let s = spec(3, 2, EasyRule::Prefix(0));
        let deep = State { text: "q".into(), depth: 2, is_terminal: false };
        assert!(s.candidates(&deep).is_err());
    }

    #[test]
    fn easy_prefix_classes_collapse() {
        let s = spec(3, 3, EasyRule::Prefix(2));
        let root = State::root("q");
        let c = s.candidates(&root).unwrap();
        assert!(c.iter().all(|a| class_set(&a.text) == Some(vec![0])));
    }

    #[test]
    fn judge_follows_easy_flag() {
        let s = spec(3, 4, EasyRule::Prefix(2));
        let ledger = CostLedger::new("t");
        let roles = synth_roles(s.clone(), TransitionMode::Concatenate);
        let judge = roles.bn_judge.as_ref().unwrap();
        let a = Action::new("take branch 0 [c0]", ActionSource::Policy);
        let shallow = State::root("q");
        assert_eq!(judge.rate(&shallow, &a, &rec(&ledger)).unwrap(), 4);
        let deep = State { text: "q\nStep 1: take branch 0 [c0]\nStep 2: take branch 0 [c0]".into(), depth: 2, is_terminal: false };
        assert_eq!(judge.rate(&deep, &a, &rec(&ledger)).unwrap(), 1);
    }

    #[test]
    fn terminal_answers_and_rewards() {
        let s = spec(3, 1, EasyRule::Prefix(0));
        let root = State::root("q");
        let c = s.candidates(&root).unwrap();
        assert!(c[0].text.contains("The answer is 42"));
        assert_eq!(s.reward_of(&c[0]).unwrap(), 0.95);
        assert_eq!(s.reward_of(&c[1]).unwrap(), 0.2);
        assert_eq!(s.reward_of(&Action::new("take branch 1 [c1]", ActionSource::Policy)).unwrap(), 0.75);
    }

    #[test]
    fn off_gold_terminal_is_wrong() {
        let s = spec(2, 2, EasyRule::Prefix(0));
        let off = State { text: "q\nStep 1: take branch 1 [c1]".into(), depth: 1, is_terminal: false };
        let c = s.candidates(&off).unwrap();
        for a in &c {
            assert_eq!(s.reward_of(a).unwrap(), 0.2);
        }
    }

    #[test]
    fn equivalence_subsumption() {
        let ledger = CostLedger::new("t");
        let eq = SynthEquivalence;
        let ctx = State::root("q");
        let a = Action::new("do A [c1]", ActionSource::Policy);
        let b = Action::new("do A then extra [c1+c2]", ActionSource::Policy);
        let c = Action::new("do C [c3]", ActionSource::Policy);
        assert!(eq.same(&ctx, &a, &b, &rec(&ledger)).unwrap());
        assert!(!eq.same(&ctx, &a, &c, &rec(&ledger)).unwrap());
        assert!(eq.same(&ctx, &a, &a.clone(), &rec(&ledger)).unwrap());
    }

    #[test]
    fn aggregator_groups_by_class() {
        let s = spec(3, 3, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let _ = s;
        let agg = SynthAggregator;
        let cands = vec![
            Action::new("take branch 0 [c0]", ActionSource::Policy),
            Action::new("take branch 0 again [c0]", ActionSource::Policy),
            Action::new("take branch 1 [c1]", ActionSource::Policy),
        ];
        let cs = agg.cluster(&State::root("q"), &cands, &rec(&ledger)).unwrap();
        assert_eq!(cs.counts(), vec![2, 1]);
        assert_eq!(cs.clusters[0].canonical.text, "take branch 0 [c0]");
    }

    #[test]
    fn purity_under_seed() {
        let s = spec(3, 3, EasyRule::Bernoulli { p: 0.5 });
        let node = State { text: "q\nStep 1: take branch 1 [c1]".into(), depth: 1, is_terminal: false };
        let first = s.is_easy(&node);
        for _ in 0..5 {
            assert_eq!(s.is_easy(&node), first);
        }
    }

    #[test]
    fn bernoulli_rate_roughly_matches() {
        let s = spec(3, 9, EasyRule::Bernoulli { p: 0.8 });
        let mut easy = 0;
        let mut total = 0;
        for d in 0..8 {
            for b in 0..3 {
                let mut text = String::from("q");
                for t in 0..d {
                    text.push_str(&format!("\nStep {}: take branch {b} [c{b}]", t + 1));
                }
                let st = State { text, depth: d, is_terminal: false };
                total += 1;
                if s.is_easy(&st) {
                    easy += 1;
                }
            }
        }
        let rate = easy as f64 / total as f64;
        assert!(rate > 0.5 && rate <= 1.0, "rate {rate}");
    }
}
