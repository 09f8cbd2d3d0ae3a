//! MCTS with the four standard phases: UCT selection, full expansion on
//! first visit, depth-limited simulation, and backpropagation. Two styles are
//! supported: explicit-transition QA search with lazy sampling and a
//! confidence-blended reward, and concatenation-transition search with short
//! rollouts and a terminal value threshold. The chaining phase can be
//! plugged in before expansion.

use serde::{Deserialize, Serialize};

use crate::cit::{chaining_phase, derive_seed, reuse_children, CitConfig};
use crate::costlab::{CostLedger, Phase, Recorder};
use crate::error::{ConfigError, Error, TreeError};
use crate::roles::{RoleRequirements, RoleSet, TransitionMode};
use crate::tree::{node_q, NodeId, SearchResult, SearchTree, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MctsStyle {
    /// Lazy sampling, explicit transitions, rollouts to the global depth
    /// limit, immediate rewards blended with transition confidence.
    Rap,
    /// Concatenation transitions, rollouts capped at a short depth, terminal
    /// acceptance gated by the value threshold.
    Rest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsParams {
    /// Iteration budget N.
    pub n_iters: usize,
    pub k_expand: usize,
    /// Global depth limit D.
    pub depth_limit: usize,
    /// Rollout cap for the Rest style; `None` falls back to 2.
    pub rollout_depth_limit: Option<usize>,
    pub uct_c: f64,
    /// Discount for rollout returns, in (0,1].
    pub gamma: f64,
    /// Weight w of the usefulness reward in the confidence blend.
    pub rap_weight: f64,
    /// Value threshold l for accepting a terminal in the Rest style.
    pub terminal_value_threshold: f64,
    pub style: MctsStyle,
    pub cit: Option<CitConfig>,
}

impl MctsParams {
    pub fn new(n_iters: usize, k_expand: usize, depth_limit: usize, style: MctsStyle) -> Self {
        Self {
            n_iters,
            k_expand,
            depth_limit,
            rollout_depth_limit: Some(2),
            uct_c: std::f64::consts::SQRT_2,
            gamma: 1.0,
            rap_weight: 0.5,
            terminal_value_threshold: 0.9,
            style,
            cit: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_iters == 0 {
            return Err(ConfigError("iteration budget must be >= 1".into()));
        }
        if self.k_expand == 0 || self.depth_limit == 0 {
            return Err(ConfigError("k_expand and depth limit must be >= 1".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(ConfigError(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rap_weight) {
            return Err(ConfigError(format!("rap weight {} outside [0,1]", self.rap_weight)));
        }
        if let Some(cit) = &self.cit {
            cit.validate(self.k_expand)?;
        }
        Ok(())
    }
}

/// UCT pick among fully visited children: argmax of Q + c*sqrt(ln(visits of
/// the node) / visits of the child), ties by lower id. When any child is
/// unvisited, the highest creation reward among the unvisited wins instead.
pub fn select_uct(tree: &SearchTree, node_id: NodeId, uct_c: f64) -> Result<NodeId, Error> {
    let node = tree.get(node_id)?;
    if node.children_ids.is_empty() {
        return Err(Error::Other(format!("select_uct on leaf node {node_id}")));
    }
    let unvisited: Vec<NodeId> = node
        .children_ids
        .iter()
        .copied()
        .filter(|&c| tree.nodes[c].visit_count == 0)
        .collect();
    if !unvisited.is_empty() {
        let mut best = unvisited[0];
        for &c in &unvisited[1..] {
            let bc = tree.nodes[best].prior_reward.unwrap_or(0.0);
            let cc = tree.nodes[c].prior_reward.unwrap_or(0.0);
            if cc > bc {
                best = c;
            }
        }
        return Ok(best);
    }
    let parent_visits = node.visit_count.max(1) as f64;
    let mut best: Option<(f64, NodeId)> = None;
    for &c in &node.children_ids {
        let child = &tree.nodes[c];
        let q = node_q(child)?;
        let u = q + uct_c * (parent_visits.ln() / child.visit_count as f64).sqrt();
        match best {
            Some((bu, _)) if u <= bu => {}
            _ => best = Some((u, c)),
        }
    }
    Ok(best.expect("non-empty children").1)
}

/// Appends `r` to every node on the root-to-leaf path and bumps every visit
/// count by one.
pub fn backpropagate(tree: &mut SearchTree, path: &[NodeId], r: f64) -> Result<(), Error> {
    if path.is_empty() {
        return Err(TreeError::EmptyPath.into());
    }
    for &id in path {
        let node = tree.get_mut(id)?;
        node.rewards.push(r);
        node.visit_count += 1;
    }
    Ok(())
}

/// Confidence-blended immediate reward: r_useful^w * r_conf^(1-w). The 0^0
/// form (r_useful = 0, w = 0) is defined as r_conf by the limit convention.
pub fn combine_rap_reward(r_useful: f64, r_conf: f64, w: f64) -> f64 {
    if r_useful == 0.0 && w == 0.0 {
        return r_conf;
    }
    r_useful.powf(w) * r_conf.powf(1.0 - w)
}

/// Depth-limited rollout from `state`: each step samples k actions in one
/// batched invocation, keeps the best by reward, steps the transition, and
/// accumulates the discounted return G.
pub fn simulate_rollout(
    state: &State,
    params: &MctsParams,
    roles: &RoleSet,
    ledger: &CostLedger,
    seed: u64,
) -> Result<f64, Error> {
    let remaining = params.depth_limit.saturating_sub(state.depth);
    let steps = match params.style {
        MctsStyle::Rap => remaining,
        MctsStyle::Rest => remaining.min(params.rollout_depth_limit.unwrap_or(2)),
    };
    let mut g = 0.0;
    let mut discount = 1.0;
    let mut cur = state.clone();
    for step in 0..steps {
        if cur.is_terminal {
            break;
        }
        let rec = Recorder::new(ledger, Phase::Simulate, cur.depth);
        let step_seed = derive_seed(seed, 0x5151_u64, step as u64);
        let actions = roles.sample_actions_batch(&cur, params.k_expand, step_seed, &rec)?;
        let mut best: Option<(f64, usize)> = None;
        for (i, action) in actions.iter().enumerate() {
            let signal = roles.score_reward(&cur, action, &rec)?;
            if best.map_or(true, |(bv, _)| signal.value > bv) {
                best = Some((signal.value, i));
            }
        }
        let (mut r, idx) =
            best.ok_or_else(|| Error::Other("rollout sampled no actions".to_string()))?;
        let (next, conf, _terminal) =
            roles.apply_transition(&cur, &actions[idx], &rec.at(Phase::Transition, cur.depth))?;
        if params.style == MctsStyle::Rap {
            r = combine_rap_reward(r, conf, params.rap_weight);
        }
        g += discount * r;
        discount *= params.gamma;
        cur = next;
    }
    Ok(g)
}

fn materialize(
    tree: &mut SearchTree,
    id: NodeId,
    params: &MctsParams,
    roles: &RoleSet,
    ledger: &CostLedger,
) -> Result<(), Error> {
    if tree.get(id)?.state.is_some() {
        return Ok(());
    }
    let parent = tree
        .get(id)?
        .parent_id
        .ok_or_else(|| Error::Other("root without a state".to_string()))?;
    let parent_state = tree
        .get(parent)?
        .state
        .clone()
        .ok_or_else(|| Error::Other(format!("parent {parent} not materialized")))?;
    let action = tree.get(id)?.action.clone().expect("non-root node");
    let rec = Recorder::new(ledger, Phase::Transition, parent_state.depth);
    let (state, conf, _terminal) = roles.apply_transition(&parent_state, &action, &rec)?;
    let node = tree.get_mut(id)?;
    node.state = Some(state);
    node.reward_conf = conf;
    if params.style == MctsStyle::Rap {
        if let Some(pr) = node.prior_reward {
            node.prior_reward = Some(combine_rap_reward(pr, conf, params.rap_weight));
        }
    }
    Ok(())
}

/// Runs N iterations of select, optional chain, expand, simulate and
/// backpropagate. The answer is taken from the highest-Q accepted terminal.
pub fn run_mcts(
    task: &str,
    params: &MctsParams,
    roles: &RoleSet,
    ledger: &CostLedger,
    seed: u64,
) -> Result<SearchResult, Error> {
    params.validate()?;
    let mut needs = match &params.cit {
        Some(cit) => cit.requirements(),
        None => RoleRequirements::default(),
    };
    needs.transition = roles.transition_mode == TransitionMode::Explicit;
    roles.validate(&needs)?;

    let mut tree = SearchTree::new(State::root(task));
    let mut expanded = 0usize;
    let mut collapsed = 0usize;

    for iter in 0..params.n_iters {
        let iter_seed = derive_seed(seed, 0xa11ce_u64, iter as u64);

        // Selection: descend while the node has children, materializing lazy
        // states as children are entered.
        let mut node = 0usize;
        loop {
            if tree.get(node)?.children_ids.is_empty() {
                break;
            }
            let child = select_uct(&tree, node, params.uct_c)?;
            materialize(&mut tree, child, params, roles, ledger)?;
            node = child;
            let st = tree.get(node)?.state.as_ref().expect("materialized");
            if st.is_terminal || st.depth >= params.depth_limit {
                break;
            }
        }

        // Chaining and expansion on the selected leaf.
        let mut rollout_root = node;
        let st = tree.get(node)?.state.clone().expect("selected nodes are materialized");
        if !st.is_terminal && st.depth < params.depth_limit && tree.get(node)?.children_ids.is_empty() {
            let cached = match &params.cit {
                Some(cfg) => {
                    let out =
                        chaining_phase(&mut tree, node, roles, cfg, params.depth_limit, iter_seed, ledger)?;
                    collapsed += out.collapsed;
                    node = out.tail;
                    out.cached
                }
                None => Vec::new(),
            };
            let st = tree.get(node)?.state.clone().expect("chain tails are materialized");
            rollout_root = node;
            if !st.is_terminal && st.depth < params.depth_limit {
                let kids = reuse_children(
                    &mut tree,
                    node,
                    &cached,
                    params.k_expand,
                    roles,
                    iter_seed,
                    ledger,
                    params.style == MctsStyle::Rest,
                )?;
                expanded += 1;
                let mut best = kids[0];
                for &c in &kids[1..] {
                    let bc = tree.nodes[best].prior_reward.unwrap_or(0.0);
                    let cc = tree.nodes[c].prior_reward.unwrap_or(0.0);
                    if cc > bc {
                        best = c;
                    }
                }
                materialize(&mut tree, best, params, roles, ledger)?;
                rollout_root = best;
            }
        }

        // Simulation: rollouts from a terminal or depth-limited node are
        // empty; such nodes back up their own creation reward instead.
        let rollout_state = tree.get(rollout_root)?.state.clone().expect("materialized");
        let r = if rollout_state.is_terminal || rollout_state.depth >= params.depth_limit {
            tree.get(rollout_root)?.prior_reward.unwrap_or(0.0)
        } else {
            simulate_rollout(&rollout_state, params, roles, ledger, iter_seed)?
        };

        let path = tree.path_to_root(rollout_root)?;
        backpropagate(&mut tree, &path, r)?;
    }

    let best = pick_answer(&tree, params);
    Ok(SearchResult {
        tree,
        best,
        frontier_sizes: Vec::new(),
        expanded,
        collapsed,
        iterations: params.n_iters,
    })
}

fn pick_answer(tree: &SearchTree, params: &MctsParams) -> Option<NodeId> {
    let value = |id: NodeId| -> f64 {
        let n = &tree.nodes[id];
        node_q(n).ok().or(n.prior_reward).unwrap_or(0.0)
    };
    let accepted = |id: NodeId| -> bool {
        params.style == MctsStyle::Rap
            || tree.nodes[id].prior_reward.unwrap_or(1.0) >= params.terminal_value_threshold
    };
    let mut best: Option<(u8, f64, NodeId)> = None;
    for node in &tree.nodes {
        let Some(state) = &node.state else { continue };
        let class = if state.is_terminal {
            if accepted(node.id) {
                2
            } else {
                1
            }
        } else if node.children_ids.is_empty() {
            0
        } else {
            continue;
        };
        let cand = (class, value(node.id), node.id);
        let better = match &best {
            None => true,
            Some((bc, bv, bid)) => {
                (cand.0, cand.1) > (*bc, *bv) || (cand.0 == *bc && cand.1 == *bv && cand.2 < *bid)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.map(|(_, _, id)| id)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::{synth_roles, EasyRule, SynthWorldSpec};
    use crate::costlab::{mcts_costs, p_full, CostLedger};
    use crate::roles::RoleKind;
    use crate::tree::{Action, ActionSource};

    fn world(k: usize, d: usize, easy: EasyRule) -> RoleSet {
        synth_roles(Arc::new(SynthWorldSpec::new(k, d, easy, 42.0, 7)), TransitionMode::Concatenate)
    }

    #[test]
    fn uct_examples() {
        let mut tree = SearchTree::new(State::root("p"));
        let a = tree.attach_child(0, Action::new("a", ActionSource::Policy), None, 1.0).unwrap();
        let b = tree.attach_child(0, Action::new("b", ActionSource::Policy), None, 1.0).unwrap();
        tree.get_mut(0).unwrap().visit_count = 2;
        tree.get_mut(a).unwrap().rewards = vec![0.5];
        tree.get_mut(a).unwrap().visit_count = 1;
        tree.get_mut(b).unwrap().rewards = vec![0.5];
        tree.get_mut(b).unwrap().visit_count = 1;
        assert_eq!(select_uct(&tree, 0, 1.0).unwrap(), a);

        tree.get_mut(0).unwrap().visit_count = 11;
        tree.get_mut(a).unwrap().rewards = vec![0.9; 10];
        tree.get_mut(a).unwrap().visit_count = 10;
        tree.get_mut(b).unwrap().rewards = vec![0.1];
        tree.get_mut(b).unwrap().visit_count = 1;
        assert_eq!(select_uct(&tree, 0, 0.0).unwrap(), a);
        assert_eq!(select_uct(&tree, 0, 2.0).unwrap(), b);
    }

    #[test]
    fn uct_on_leaf_errors() {
        let tree = SearchTree::new(State::root("p"));
        assert!(select_uct(&tree, 0, 1.0).is_err());
    }

    #[test]
    fn backprop_touches_whole_path() {
        let mut tree = SearchTree::new(State::root("p"));
        let a = tree.attach_child(0, Action::new("a", ActionSource::Policy), None, 1.0).unwrap();
        let b = tree.attach_child(a, Action::new("b", ActionSource::Policy), None, 1.0).unwrap();
        let path = tree.path_to_root(b).unwrap();
        backpropagate(&mut tree, &path, 0.8).unwrap();
        for &id in &[0, a, b] {
            assert_eq!(tree.get(id).unwrap().rewards, vec![0.8]);
            assert_eq!(tree.get(id).unwrap().visit_count, 1);
        }
        backpropagate(&mut tree, &path, 0.0).unwrap();
        backpropagate(&mut tree, &path, 1.0).unwrap();
        assert!((tree.node_q(a).unwrap() - 0.6).abs() < 1e-12);
        assert!(backpropagate(&mut tree, &[], 0.5).is_err());
    }

    #[test]
    fn rap_reward_blend() {
        assert_eq!(combine_rap_reward(0.7, 0.3, 1.0), 0.7);
        assert_eq!(combine_rap_reward(0.7, 0.3, 0.0), 0.3);
        assert!((combine_rap_reward(0.64, 0.25, 0.5) - 0.4).abs() < 1e-12);
        assert_eq!(combine_rap_reward(0.0, 0.25, 0.0), 0.25);
    }

    #[test]
    fn single_iteration_cost_trace() {
        // k=1, D=3: one expansion call plus a 2-step rollout.
        let roles = world(1, 3, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let mut params = MctsParams::new(1, 1, 3, MctsStyle::Rap);
        params.rollout_depth_limit = None;
        let roles = RoleSet { transition_mode: TransitionMode::Explicit, ..roles };
        run_mcts("Find the number.", &params, &roles, &ledger, 3).unwrap();
        assert_eq!(ledger.invocations_by_role(RoleKind::Policy), 3);
    }

    #[test]
    fn expansion_calls_match_census() {
        let roles = world(3, 4, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let params = MctsParams::new(10, 3, 4, MctsStyle::Rest);
        let res = run_mcts("Find the number.", &params, &roles, &ledger, 5).unwrap();
        assert_eq!(ledger.policy_growth_invocations(), 3 * res.expanded as u64);
    }

    #[test]
    fn chained_expansion_calls_match_formula() {
        let roles = world(3, 4, EasyRule::Prefix(2));
        let ledger = CostLedger::new("t");
        let mut params = MctsParams::new(10, 3, 4, MctsStyle::Rest);
        params.cit = Some(CitConfig::bn_dp());
        let res = run_mcts("Find the number.", &params, &roles, &ledger, 5).unwrap();
        let e = (res.expanded + res.collapsed) as u64;
        let ec = res.collapsed as u64;
        let (_, chained) = mcts_costs(3, 1, e, ec).unwrap();
        assert_eq!(ledger.policy_growth_invocations(), chained);
    }

    #[test]
    fn saturated_chain_matches_closed_form() {
        for d in 1..=6usize {
            let roles = world(1, d, EasyRule::Prefix(0));
            let ledger = CostLedger::new("t");
            let mut params = MctsParams::new(4 * d + 4, 1, d, MctsStyle::Rap);
            params.rollout_depth_limit = None;
            run_mcts("Find the number.", &params, &roles, &ledger, 11).unwrap();
            assert_eq!(ledger.invocations_by_role(RoleKind::Policy), p_full(d as u32, 1), "d={d}");
        }
    }

    #[test]
    fn saturated_binary_tree_matches_p_full() {
        let roles = world(2, 2, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let params = MctsParams::new(20, 2, 2, MctsStyle::Rap);
        run_mcts("Find the number.", &params, &roles, &ledger, 2).unwrap();
        assert_eq!(ledger.invocations_by_role(RoleKind::Policy), p_full(2, 2));
        assert_eq!(p_full(2, 2), 7);
    }

    #[test]
    fn finds_gold_answer() {
        let roles = world(3, 3, EasyRule::Prefix(0));
        let ledger = CostLedger::new("t");
        let params = MctsParams::new(15, 3, 3, MctsStyle::Rest);
        let res = run_mcts("Find the number.", &params, &roles, &ledger, 1).unwrap();
        assert!(res.best_text().unwrap().contains("The answer is 42"));
    }
}
