//! Beam search over the reasoning MDP: per-depth expansion by the policy,
//! reward scoring of every child, global top-B pruning, and an optional
//! chaining phase before expansion.

use serde::{Deserialize, Serialize};

use crate::cit::{chaining_phase, reuse_children, CitConfig};
use crate::costlab::{CostLedger, Phase, Recorder};
use crate::error::{ConfigError, Error};
use crate::roles::{RoleRequirements, RoleSet};
use crate::tree::{NodeId, SearchResult, SearchTree, State};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    pub k_expand: usize,
    /// Beam width B.
    pub beam_width: usize,
    /// Depth limit D.
    pub depth_limit: usize,
    pub cit: Option<CitConfig>,
    /// Stop as soon as a terminal child wins pruning (ranked first); when
    /// false the search exhausts the depth budget and answers from the best
    /// leaf.
    pub stop_at_terminal: bool,
}

impl BeamParams {
    pub fn new(k_expand: usize, beam_width: usize, depth_limit: usize) -> Self {
        Self { k_expand, beam_width, depth_limit, cit: None, stop_at_terminal: true }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k_expand == 0 || self.beam_width == 0 || self.depth_limit == 0 {
            return Err(ConfigError("k_expand, beam width and depth limit must all be >= 1".into()));
        }
        if let Some(cit) = &self.cit {
            cit.validate(self.k_expand)?;
        }
        Ok(())
    }
}

/// Keeps the min(B, |children|) highest-reward children; ties broken by lower
/// node id. The returned list is ordered best first.
pub fn prune_top_b(tree: &SearchTree, children: &[NodeId], b: usize) -> Result<Vec<NodeId>, Error> {
    let mut scored: Vec<(f64, NodeId)> = Vec::with_capacity(children.len());
    for &id in children {
        let node = tree.get(id)?;
        let reward = node
            .prior_reward
            .ok_or_else(|| Error::Other(format!("pruning requires a scored child (node {id})")))?;
        scored.push((reward, id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(b);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Runs beam search from `task`. Depth proceeds in rounds: every expandable
/// frontier node (after optional chaining) is expanded into k_expand scored
/// children, and the global top-B children form the next frontier.
pub fn run_beam_search(
    task: &str,
    params: &BeamParams,
    roles: &RoleSet,
    ledger: &CostLedger,
    seed: u64,
) -> Result<SearchResult, Error> {
    params.validate()?;
    let mut needs = RoleRequirements::default();
    if let Some(cit) = &params.cit {
        needs = cit.requirements();
    }
    needs.transition = true;
    roles.validate(&needs)?;

    let mut tree = SearchTree::new(State::root(task));
    let mut frontier: Vec<NodeId> = vec![0];
    let mut finished: Vec<NodeId> = Vec::new();
    let mut frontier_sizes = Vec::new();
    let mut expanded = 0usize;
    let mut collapsed = 0usize;
    let mut early_best: Option<NodeId> = None;
    let mut rounds = 0usize;

    loop {
        let mut expandable = Vec::new();
        for &id in &frontier {
            let st = tree.get(id)?.state.as_ref().expect("beam nodes carry states");
            if st.is_terminal || st.depth >= params.depth_limit {
                finished.push(id);
            } else {
                expandable.push(id);
            }
        }
        if expandable.is_empty() {
            break;
        }
        frontier_sizes.push(expandable.len());
        rounds += 1;

        let mut new_children = Vec::new();
        for id in expandable {
            let (tail, cached) = match &params.cit {
                Some(cfg) => {
                    let out = chaining_phase(&mut tree, id, roles, cfg, params.depth_limit, seed, ledger)?;
                    collapsed += out.collapsed;
                    (out.tail, out.cached)
                }
                None => (id, Vec::new()),
            };
            let st = tree.get(tail)?.state.clone().expect("beam nodes carry states");
            if st.is_terminal || st.depth >= params.depth_limit {
                finished.push(tail);
                continue;
            }
            let kids =
                reuse_children(&mut tree, tail, &cached, params.k_expand, roles, seed, ledger, true)?;
            expanded += 1;
            new_children.extend(kids);
        }
        if new_children.is_empty() {
            break;
        }
        let pruned = prune_top_b(&tree, &new_children, params.beam_width)?;
        if params.stop_at_terminal {
            let top = pruned[0];
            if tree.get(top)?.state.as_ref().is_some_and(|s| s.is_terminal) {
                early_best = Some(top);
                break;
            }
        }
        frontier = pruned;
    }

    let best = match early_best {
        Some(id) => Some(id),
        None => pick_best(&mut tree, &finished, roles, ledger, seed)?,
    };
    Ok(SearchResult { tree, best, frontier_sizes, expanded, collapsed, iterations: rounds })
}

/// Chooses the answer node among the finished tails: terminals first, then
/// highest reward, then lower id. Tails created by chaining have no creation
/// reward yet and are scored here.
fn pick_best(
    tree: &mut SearchTree,
    finished: &[NodeId],
    roles: &RoleSet,
    ledger: &CostLedger,
    seed: u64,
) -> Result<Option<NodeId>, Error> {
    let _ = seed;
    let mut best: Option<(bool, f64, NodeId)> = None;
    for &id in finished {
        let node = tree.get(id)?;
        let terminal = node.state.as_ref().is_some_and(|s| s.is_terminal);
        let reward = match node.prior_reward {
            Some(r) => r,
            None => match node.parent_id {
                Some(parent) => {
                    let parent_state = tree.get(parent)?.state.clone().expect("beam parents carry states");
                    let action = tree.get(id)?.action.clone().expect("non-root node");
                    let depth = parent_state.depth;
                    let rec = Recorder::new(ledger, Phase::Score, depth);
                    let signal = roles.score_reward(&parent_state, &action, &rec)?;
                    tree.get_mut(id)?.prior_reward = Some(signal.value);
                    signal.value
                }
                None => 0.0,
            },
        };
        let candidate = (terminal, reward, id);
        let better = match &best {
            None => true,
            Some((bt, br, bid)) => {
                (candidate.0, candidate.1) > (*bt, *br)
                    || (candidate.0 == *bt && candidate.1 == *br && id < *bid)
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.map(|(_, _, id)| id))
}
