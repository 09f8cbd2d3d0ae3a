//! Uniform contracts for the LLM-profiled roles, prompt template rendering,
//! and strict parsers for every output format the role prompts demand.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cit::ClusterSet;
use crate::costlab::Recorder;
use crate::error::{ConfigError, ParseError, RoleError};
use crate::tree::{Action, RewardSignal, State};

/// Attempts allowed before an unparsable role output becomes a typed failure.
pub const RETRY_CAP: usize = 3;

/// Marker phrase a policy emits when the final answer is reached.
pub const TERMINAL_MARKER: &str = "now we can answer the question";

/// The six profiled roles. Every ledger entry carries exactly one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    Policy,
    Reward,
    Transition,
    BnJudge,
    Aggregator,
    Equivalence,
}

/// Whether an action's text marks a terminal step.
pub fn is_terminal_action(text: &str) -> bool {
    text.trim_start().to_ascii_lowercase().starts_with(TERMINAL_MARKER)
}

// ---------------------------------------------------------------------------
// Role traits
// ---------------------------------------------------------------------------

/// Generates candidate actions. `sample` records one ledger entry per action
/// (the expansion accounting); `sample_batch` records a single entry for the
/// whole batch (the rollout accounting, one request with n choices).
pub trait PolicyRole: Send + Sync {
    fn sample(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError>;
    fn sample_batch(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError>;
}

pub trait RewardRole: Send + Sync {
    fn score(&self, state: &State, action: &Action, rec: &Recorder) -> Result<RewardSignal, RoleError>;
}

/// Explicit transition model (QA style): answers the sub-question and reports
/// a confidence for the reached state.
pub trait TransitionRole: Send + Sync {
    fn step(&self, state: &State, action: &Action, rec: &Recorder) -> Result<(State, f64, bool), RoleError>;
}

/// Rates a candidate step 1-4 for logical compulsoriness.
pub trait BnJudgeRole: Send + Sync {
    fn rate(&self, state: &State, candidate: &Action, rec: &Recorder) -> Result<u8, RoleError>;
}

/// Clusters a candidate list in one invocation.
pub trait AggregatorRole: Send + Sync {
    fn cluster(&self, state: &State, candidates: &[Action], rec: &Recorder) -> Result<ClusterSet, RoleError>;
}

/// Binary oracle for semantic overlap of two candidate actions.
pub trait EquivalenceRole: Send + Sync {
    fn same(&self, context: &State, a: &Action, b: &Action, rec: &Recorder) -> Result<bool, RoleError>;
}

/// How the next state is produced from (state, action).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMode {
    /// Next state text = state text + numbered step line; confidence 1.
    Concatenate,
    /// A transition role answers the sub-question and reports confidence.
    Explicit,
}

/// The bundle of profiled roles behind uniform contracts.
#[derive(Clone)]
pub struct RoleSet {
    pub policy: Arc<dyn PolicyRole>,
    pub reward: Arc<dyn RewardRole>,
    pub transition: Option<Arc<dyn TransitionRole>>,
    pub bn_judge: Option<Arc<dyn BnJudgeRole>>,
    pub aggregator: Option<Arc<dyn AggregatorRole>>,
    pub equivalence: Option<Arc<dyn EquivalenceRole>>,
    pub transition_mode: TransitionMode,
}

impl RoleSet {
    /// Samples exactly `k` actions, padding by re-invocation when the backend
    /// returns blank or missing outputs, up to [`RETRY_CAP`] extra attempts.
    pub fn sample_actions(
        &self,
        state: &State,
        k: usize,
        seed: u64,
        rec: &Recorder,
    ) -> Result<Vec<Action>, RoleError> {
        debug_assert!(k >= 1);
        let mut out: Vec<Action> = Vec::with_capacity(k);
        let mut attempt = 0usize;
        let mut next_seed = seed;
        while out.len() < k {
            let got = self.policy.sample(state, k - out.len(), next_seed, rec)?;
            out.extend(got.into_iter().filter(Action::is_valid));
            if out.len() >= k {
                break;
            }
            attempt += 1;
            if attempt > RETRY_CAP {
                return Err(RoleError::new(
                    RoleKind::Policy,
                    format!("only {} valid actions after {} attempts (wanted {k})", out.len(), attempt),
                ));
            }
            next_seed = next_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        }
        out.truncate(k);
        Ok(out)
    }

    /// One batched policy invocation for a rollout step.
    pub fn sample_actions_batch(
        &self,
        state: &State,
        k: usize,
        seed: u64,
        rec: &Recorder,
    ) -> Result<Vec<Action>, RoleError> {
        self.policy.sample_batch(state, k, seed, rec)
    }

    pub fn score_reward(&self, state: &State, action: &Action, rec: &Recorder) -> Result<RewardSignal, RoleError> {
        debug_assert!(action.is_valid());
        self.reward.score(state, action, rec)
    }

    /// Applies the transition model. Concatenation mode appends a numbered
    /// step line and reports confidence 1; explicit mode delegates to the
    /// transition role.
    pub fn apply_transition(
        &self,
        state: &State,
        action: &Action,
        rec: &Recorder,
    ) -> Result<(State, f64, bool), RoleError> {
        match self.transition_mode {
            TransitionMode::Concatenate => {
                let is_terminal = is_terminal_action(&action.text);
                let next = State {
                    text: format!("{}\nStep {}: {}", state.text, state.depth + 1, action.text),
                    depth: state.depth + 1,
                    is_terminal,
                };
                Ok((next, 1.0, is_terminal))
            }
            TransitionMode::Explicit => {
                let role = self.transition.as_ref().ok_or_else(|| {
                    RoleError::new(RoleKind::Transition, "explicit transitions require a transition role")
                })?;
                role.step(state, action, rec)
            }
        }
    }

    /// Completeness check against an engine's requirements; all problems are
    /// reported at once, before any invocation.
    pub fn validate(&self, needs: &RoleRequirements) -> Result<(), ConfigError> {
        let mut missing = Vec::new();
        if needs.transition && self.transition.is_none() && self.transition_mode == TransitionMode::Explicit {
            missing.push("transition");
        }
        if needs.bn_judge && self.bn_judge.is_none() {
            missing.push("bn_judge");
        }
        if needs.aggregator && self.aggregator.is_none() {
            missing.push("aggregator");
        }
        if needs.equivalence && self.equivalence.is_none() {
            missing.push("equivalence");
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(format!("missing roles: {}", missing.join(", "))))
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RoleRequirements {
    pub transition: bool,
    pub bn_judge: bool,
    pub aggregator: bool,
    pub equivalence: bool,
}

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

/// Parses one decimal literal in [0,1]. No clamping; out-of-range is an error.
pub fn parse_float_score(text: &str) -> Result<f64, ParseError> {
    let trimmed = text.trim();
    if trimmed.is_empty() || trimmed.split_whitespace().count() != 1 {
        return Err(ParseError::NotNumeric(text.to_string()));
    }
    let value: f64 = trimmed.parse().map_err(|_| ParseError::NotNumeric(text.to_string()))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(ParseError::OutOfRange(trimmed.to_string()));
    }
    Ok(value)
}

/// Parses a single branching-necessity rating in 1..=4.
pub fn parse_bn_rating(text: &str) -> Result<u8, ParseError> {
    match text.trim() {
        "1" => Ok(1),
        "2" => Ok(2),
        "3" => Ok(3),
        "4" => Ok(4),
        _ => Err(ParseError::BadRating(text.to_string())),
    }
}

/// Case-insensitive YES/NO on the first alphabetic token; trailing
/// punctuation is tolerated, anything else is rejected.
pub fn parse_yes_no(text: &str) -> Result<bool, ParseError> {
    let token = text
        .trim()
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_end_matches(|c: char| c.is_ascii_punctuation());
    match token.to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(ParseError::BadYesNo(text.to_string())),
    }
}

/// Parses the aggregator's bracketed literal list of
/// `{"canonical_action": ..., "count": ...}` records. Accepts both single-
/// and double-quoted strings; cluster order is preserved.
pub fn parse_cluster_list(text: &str) -> Result<ClusterSet, ParseError> {
    let mut p = ClusterParser { chars: text.trim().chars().collect(), pos: 0 };
    let records = p.parse()?;
    let mut canonicals = Vec::with_capacity(records.len());
    let mut counts = Vec::with_capacity(records.len());
    for (canonical, count) in records {
        if count == 0 {
            return Err(ParseError::NonPositiveCount);
        }
        canonicals.push(canonical);
        counts.push(count);
    }
    Ok(ClusterSet::from_counts(canonicals, counts))
}

struct ClusterParser {
    chars: Vec<char>,
    pos: usize,
}

impl ClusterParser {
    fn parse(&mut self) -> Result<Vec<(String, u64)>, ParseError> {
        self.skip_ws();
        self.expect('[')?;
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(']') => {
                    self.pos += 1;
                    break;
                }
                Some('{') => {
                    out.push(self.record()?);
                    self.skip_ws();
                    if self.peek() == Some(',') {
                        self.pos += 1;
                    }
                }
                _ => return Err(self.err("expected '{' or ']'")),
            }
        }
        self.skip_ws();
        if self.pos != self.chars.len() {
            return Err(self.err("trailing content after list"));
        }
        Ok(out)
    }

    fn record(&mut self) -> Result<(String, u64), ParseError> {
        self.expect('{')?;
        let mut canonical: Option<String> = None;
        let mut count: Option<u64> = None;
        loop {
            self.skip_ws();
            match self.peek() {
                Some('}') => {
                    self.pos += 1;
                    break;
                }
                Some('"') | Some('\'') => {
                    let key = self.string()?;
                    self.skip_ws();
                    self.expect(':')?;
                    self.skip_ws();
                    match key.as_str() {
                        "canonical_action" => canonical = Some(self.string()?),
                        "count" => count = Some(self.integer()?),
                        _ => {
                            // Unknown keys are skipped: value may be string or int.
                            if matches!(self.peek(), Some('"') | Some('\'')) {
                                self.string()?;
                            } else {
                                self.integer()?;
                            }
                        }
                    }
                    self.skip_ws();
                    if self.peek() == Some(',') {
                        self.pos += 1;
                    }
                }
                _ => return Err(self.err("expected key or '}'")),
            }
        }
        let canonical = canonical.ok_or(ParseError::MissingKey("canonical_action"))?;
        let count = count.ok_or(ParseError::MissingKey("count"))?;
        Ok((canonical, count))
    }

    fn string(&mut self) -> Result<String, ParseError> {
        let quote = match self.peek() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(self.err("expected string literal")),
        };
        self.pos += 1;
        let mut out = String::new();
        loop {
            match self.next() {
                Some('\\') => match self.next() {
                    Some(c) => out.push(c),
                    None => return Err(self.err("unterminated escape")),
                },
                Some(c) if c == quote => break,
                Some(c) => out.push(c),
                None => return Err(self.err("unterminated string")),
            }
        }
        Ok(out)
    }

    fn integer(&mut self) -> Result<u64, ParseError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            return Err(ParseError::NonPositiveCount);
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected integer"));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse().map_err(|_| self.err("integer overflow"))
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected {c:?}")))
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn err(&self, msg: &str) -> ParseError {
        ParseError::BadClusterList(format!("{msg} at offset {}", self.pos))
    }
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// The shipped prompt templates, one per (framework, role) pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Rap,
    Rest,
    TotBs,
    BnDp,
    BnAgg,
    BnEq,
    CorrectnessEval,
    UsefulnessEval,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 8] = [
        TemplateKind::Rap,
        TemplateKind::Rest,
        TemplateKind::TotBs,
        TemplateKind::BnDp,
        TemplateKind::BnAgg,
        TemplateKind::BnEq,
        TemplateKind::CorrectnessEval,
        TemplateKind::UsefulnessEval,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Rap => "rap.txt",
            TemplateKind::Rest => "rest.txt",
            TemplateKind::TotBs => "tot_bs.txt",
            TemplateKind::BnDp => "bn_dp.txt",
            TemplateKind::BnAgg => "bn_agg.txt",
            TemplateKind::BnEq => "bn_eq.txt",
            TemplateKind::CorrectnessEval => "correctness_eval.txt",
            TemplateKind::UsefulnessEval => "usefulness_eval.txt",
        }
    }
}

/// A system message plus a user pattern with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub system: String,
    pub user_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

/// Substitutes `{name}` placeholders. Only `{identifier}` forms are
/// placeholders; braces around non-identifier content (e.g. the aggregator's
/// literal output format) pass through untouched. Rendering is pure:
/// identical bindings produce identical bytes.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<Vec<Message>, ParseError> {
    let user = substitute(&template.user_pattern, bindings)?;
    let system = substitute(&template.system, bindings)?;
    let mut messages = Vec::with_capacity(2);
    if !system.is_empty() {
        messages.push(Message::system(system));
    }
    messages.push(Message::user(user));
    Ok(messages)
}

fn substitute(pattern: &str, bindings: &BTreeMap<String, String>) -> Result<String, ParseError> {
    let re = placeholder_regex();
    let mut out = String::with_capacity(pattern.len());
    let mut last = 0;
    for caps in re.captures_iter(pattern) {
        let whole = caps.get(0).unwrap();
        let name = &caps[1];
        out.push_str(&pattern[last..whole.start()]);
        match bindings.get(name) {
            Some(value) => out.push_str(value),
            None => return Err(ParseError::UnboundPlaceholder(name.to_string())),
        }
        last = whole.end();
    }
    out.push_str(&pattern[last..]);
    Ok(out)
}

fn placeholder_regex() -> &'static regex::Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Shipped templates plus optional per-file overrides from a directory.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

const SYSTEM_HEADER: &str = "<<<SYSTEM>>>";
const USER_HEADER: &str = "<<<USER>>>";

impl TemplateStore {
    /// The defaults shipped with the crate.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        let sources: [(TemplateKind, &str); 8] = [
            (TemplateKind::Rap, include_str!("../templates/rap.txt")),
            (TemplateKind::Rest, include_str!("../templates/rest.txt")),
            (TemplateKind::TotBs, include_str!("../templates/tot_bs.txt")),
            (TemplateKind::BnDp, include_str!("../templates/bn_dp.txt")),
            (TemplateKind::BnAgg, include_str!("../templates/bn_agg.txt")),
            (TemplateKind::BnEq, include_str!("../templates/bn_eq.txt")),
            (TemplateKind::CorrectnessEval, include_str!("../templates/correctness_eval.txt")),
            (TemplateKind::UsefulnessEval, include_str!("../templates/usefulness_eval.txt")),
        ];
        for (kind, text) in sources {
            templates.insert(kind, Self::parse_file(kind, text));
        }
        Self { templates }
    }

    /// Overrides builtins with any matching files found in `dir`.
    pub fn load_dir(dir: &std::path::Path) -> std::io::Result<Self> {
        let mut store = Self::builtin();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                store.templates.insert(kind, Self::parse_file(kind, &text));
            }
        }
        Ok(store)
    }

    fn parse_file(kind: TemplateKind, text: &str) -> PromptTemplate {
        let (system, user) = match text.find(USER_HEADER) {
            Some(idx) => {
                let system = text[..idx].trim_start_matches(SYSTEM_HEADER).trim().to_string();
                let user = text[idx + USER_HEADER.len()..].trim().to_string();
                (system, user)
            }
            None => (String::new(), text.trim().to_string()),
        };
        PromptTemplate { kind, system, user_pattern: user }
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }
}
