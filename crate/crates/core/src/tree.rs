//! MDP view of tree search: states, actions, nodes and tree bookkeeping
//! shared by every engine.

use serde::{Deserialize, Serialize};

use crate::error::TreeError;

/// Index of a node inside its [`SearchTree`]. The root is always 0; ids are
/// assigned by a per-tree monotone counter so exports are deterministic under
/// a fixed seed.
pub type NodeId = usize;

/// A task state: the problem plus the reasoning steps taken so far (or, for
/// QA-style transitions, the question/answer transcript).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub text: String,
    /// Number of actions on the path from the root.
    pub depth: usize,
    pub is_terminal: bool,
}

impl State {
    pub fn root(text: impl Into<String>) -> Self {
        Self { text: text.into(), depth: 0, is_terminal: false }
    }
}

/// Where an action came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionSource {
    Policy,
    ChainingCache,
    AggregatorCanonical,
}

/// A reasoning step or sub-question proposed by a role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub text: String,
    pub source: ActionSource,
}

impl Action {
    pub fn new(text: impl Into<String>, source: ActionSource) -> Self {
        Self { text: text.into(), source }
    }

    /// Non-empty after whitespace trimming.
    pub fn is_valid(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

/// A node of the search tree: the action that reached it, the resulting state
/// (absent under lazy sampling), visit/value statistics and chain provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    /// `None` only for the root, which has no incoming action.
    pub action: Option<Action>,
    pub state: Option<State>,
    /// Transition confidence in [0,1]; 1.0 for concatenation transitions.
    pub reward_conf: f64,
    /// Cumulative-reward list; Q is the arithmetic mean of these.
    pub rewards: Vec<f64>,
    pub visit_count: u64,
    pub children_ids: Vec<NodeId>,
    /// Created during a chaining phase.
    pub chained: bool,
    /// Reward assigned when the node was scored at creation, used for
    /// selection among unvisited children. Not part of the Q statistics.
    pub prior_reward: Option<f64>,
    /// Depth of the node (parent depth + 1), tracked independently of the
    /// optional state so lazily sampled nodes still know where they sit.
    pub depth: usize,
}

/// A reward in [0,1] together with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub value: f64,
    pub kind: RewardKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Usefulness,
    Correctness,
    Combined,
    TerminalReturn,
}

impl RewardSignal {
    pub fn combined(value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value));
        Self { value, kind: RewardKind::Combined }
    }
}

/// An in-memory search tree. Confined to one search task; no concurrent
/// mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn new(root_state: State) -> Self {
        let root = SearchNode {
            id: 0,
            parent_id: None,
            action: None,
            state: Some(root_state),
            reward_conf: 1.0,
            rewards: Vec::new(),
            visit_count: 0,
            children_ids: Vec::new(),
            chained: false,
            prior_reward: None,
            depth: 0,
        };
        Self { nodes: vec![root] }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn get(&self, id: NodeId) -> Result<&SearchNode, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn get_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, TreeError> {
        self.nodes.get_mut(id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches a child under `parent_id` and returns the fresh id.
    pub fn attach_child(
        &mut self,
        parent_id: NodeId,
        action: Action,
        state: Option<State>,
        conf: f64,
    ) -> Result<NodeId, TreeError> {
        let parent_depth = self.get(parent_id)?.depth;
        let id = self.nodes.len();
        self.nodes.push(SearchNode {
            id,
            parent_id: Some(parent_id),
            action: Some(action),
            state,
            reward_conf: conf,
            rewards: Vec::new(),
            visit_count: 0,
            children_ids: Vec::new(),
            chained: false,
            prior_reward: None,
            depth: parent_depth + 1,
        });
        self.nodes[parent_id].children_ids.push(id);
        Ok(id)
    }

    /// Ordered list of node ids from the root down to `node_id` (inclusive).
    pub fn path_to_root(&self, node_id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = Vec::new();
        let mut cur = self.get(node_id)?;
        loop {
            path.push(cur.id);
            match cur.parent_id {
                Some(p) => cur = self.get(p)?,
                None => break,
            }
        }
        path.reverse();
        Ok(path)
    }

    /// Arithmetic mean of the node's cumulative-reward list.
    pub fn node_q(&self, id: NodeId) -> Result<f64, TreeError> {
        let node = self.get(id)?;
        node_q(node)
    }
}

/// Outcome of one engine run over a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub tree: SearchTree,
    /// Highest-ranked terminal node, or the best leaf when no terminal was
    /// reached.
    pub best: Option<NodeId>,
    /// Expandable frontier size per beam round; empty for MCTS runs.
    pub frontier_sizes: Vec<usize>,
    /// Nodes that received a full expansion (k_expand children).
    pub expanded: usize,
    /// Nodes that collapsed during chaining (one committed child each).
    pub collapsed: usize,
    pub iterations: usize,
}

impl SearchResult {
    /// Final answer text: the state of the best node.
    pub fn best_text(&self) -> Option<&str> {
        let id = self.best?;
        self.tree.nodes.get(id)?.state.as_ref().map(|s| s.text.as_str())
    }
}

/// Q-value of a node: mean of its reward list. Undefined on an empty list.
pub fn node_q(node: &SearchNode) -> Result<f64, TreeError> {
    if node.rewards.is_empty() {
        return Err(TreeError::EmptyRewards(node.id));
    }
    Ok(node.rewards.iter().sum::<f64>() / node.rewards.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn action(text: &str) -> Action {
        Action::new(text, ActionSource::Policy)
    }

    #[test]
    fn attach_to_root() {
        let mut tree = SearchTree::new(State::root("P."));
        let id = tree
            .attach_child(0, action("Step 1: ..."), Some(State { text: "P.\nStep 1: ...".into(), depth: 1, is_terminal: false }), 1.0)
            .unwrap();
        assert_eq!(id, 1);
        assert_eq!(tree.get(1).unwrap().depth, 1);
        assert_eq!(tree.root().children_ids, vec![1]);
    }

    #[test]
    fn attach_twice_keeps_order() {
        let mut tree = SearchTree::new(State::root("P."));
        let a = tree.attach_child(0, action("a"), None, 1.0).unwrap();
        let b = tree.attach_child(0, action("b"), None, 1.0).unwrap();
        assert_ne!(a, b);
        assert_eq!(tree.root().children_ids, vec![a, b]);
    }

    #[test]
    fn attach_to_missing_parent() {
        let mut tree = SearchTree::new(State::root("P."));
        let err = tree.attach_child(999, action("a"), None, 1.0).unwrap_err();
        assert_eq!(err, TreeError::UnknownNode(999));
    }

    #[test]
    fn path_of_root() {
        let tree = SearchTree::new(State::root("P."));
        assert_eq!(tree.path_to_root(0).unwrap(), vec![0]);
    }

    #[test]
    fn path_of_chain() {
        let mut tree = SearchTree::new(State::root("P."));
        let a = tree.attach_child(0, action("a"), None, 1.0).unwrap();
        let b = tree.attach_child(a, action("b"), None, 1.0).unwrap();
        assert_eq!(tree.path_to_root(b).unwrap(), vec![0, a, b]);
    }

    #[test]
    fn path_length_is_depth_plus_one() {
        let mut tree = SearchTree::new(State::root("P."));
        let mut cur = 0;
        for i in 0..3 {
            cur = tree.attach_child(cur, action(&format!("s{i}")), None, 1.0).unwrap();
        }
        assert_eq!(tree.get(cur).unwrap().depth, 3);
        assert_eq!(tree.path_to_root(cur).unwrap().len(), 4);
    }

    #[test]
    fn q_values() {
        let mut tree = SearchTree::new(State::root("P."));
        let a = tree.attach_child(0, action("a"), None, 1.0).unwrap();
        tree.get_mut(a).unwrap().rewards = vec![0.5];
        assert_eq!(tree.node_q(a).unwrap(), 0.5);
        tree.get_mut(a).unwrap().rewards = vec![1.0, 0.0];
        assert_eq!(tree.node_q(a).unwrap(), 0.5);
        tree.get_mut(a).unwrap().rewards = vec![0.9, 0.9, 0.3];
        assert!((tree.node_q(a).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn q_on_empty_rewards() {
        let tree = SearchTree::new(State::root("P."));
        assert_eq!(tree.node_q(0).unwrap_err(), TreeError::EmptyRewards(0));
    }

    #[test]
    fn child_depth_is_parent_plus_one() {
        let mut tree = SearchTree::new(State::root("P."));
        let a = tree.attach_child(0, action("a"), None, 1.0).unwrap();
        let b = tree.attach_child(a, action("b"), None, 1.0).unwrap();
        for node in &tree.nodes {
            if let Some(p) = node.parent_id {
                assert_eq!(node.depth, tree.get(p).unwrap().depth + 1);
            }
        }
        let _ = b;
    }
}
