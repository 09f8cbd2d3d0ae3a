//! OpenAI-compatible chat-completions client and the HTTP-backed role
//! adapters. The wire format is the plain chat protocol: a request with
//! model, messages, temperature, max_tokens and seed; responses are read from
//! `choices[*].message.content` and `usage.{prompt_tokens,completion_tokens}`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cit::ClusterSet;
use crate::costlab::Recorder;
use crate::error::{RoleError, TransportError};
use crate::roles::{
    is_terminal_action, parse_bn_rating, parse_cluster_list, parse_float_score, parse_yes_no,
    render_prompt, AggregatorRole, BnJudgeRole, EquivalenceRole, Message, PolicyRole, RewardRole,
    RoleKind, RoleSet, TemplateKind, TemplateStore, TransitionMode, RETRY_CAP,
};
use crate::tree::{Action, ActionSource, RewardSignal, State};

use super::{estimate_tokens, split_problem_steps};

/// Connection settings for one chat-completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Bearer token; usually injected from an environment variable by the
    /// harness, never serialized back out.
    #[serde(skip_serializing, default)]
    pub api_key: Option<String>,
    pub max_output_tokens: u32,
    pub request_timeout_secs: u64,
    pub temperature: f64,
}

impl HttpEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            max_output_tokens: 1000,
            request_timeout_secs: 60,
            temperature: 0.7,
        }
    }

    fn with(&self, temperature: f64, max_tokens: u32) -> Self {
        Self { temperature, max_output_tokens: max_tokens, ..self.clone() }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// One completed exchange: texts plus token accounting. `estimated` is set
/// when the endpoint omitted usage and the whitespace fallback was applied.
#[derive(Debug, Clone)]
pub struct Completion {
    pub texts: Vec<String>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub estimated: bool,
    pub wall_time: f64,
}

/// Sends one chat request and returns the first choice's content with token
/// counts. Retryable transport failures (connection errors, 429, 5xx) are
/// retried up to [`RETRY_CAP`] times.
pub fn http_complete(
    config: &HttpEndpointConfig,
    messages: &[Message],
    seed: Option<u64>,
) -> Result<(String, u64, u64), TransportError> {
    let c = http_complete_n(config, messages, 1, seed)?;
    let text = c.texts.into_iter().next().unwrap_or_default();
    Ok((text, c.tokens_in, c.tokens_out))
}

/// Like [`http_complete`] but asks for `n` choices in one request.
pub fn http_complete_n(
    config: &HttpEndpointConfig,
    messages: &[Message],
    n: usize,
    seed: Option<u64>,
) -> Result<Completion, TransportError> {
    let mut attempt = 0usize;
    loop {
        match complete_once(config, messages, n, seed) {
            Ok(done) => return Ok(done),
            Err(e) if e.retryable() && attempt < RETRY_CAP => {
                attempt += 1;
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            Err(e) => return Err(e),
        }
    }
}

fn complete_once(
    config: &HttpEndpointConfig,
    messages: &[Message],
    n: usize,
    seed: Option<u64>,
) -> Result<Completion, TransportError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.request_timeout_secs))
        .build()
        .map_err(|e| TransportError::Request(e.to_string()))?;
    let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
    let body = ChatRequest {
        model: &config.model_name,
        messages,
        temperature: config.temperature,
        max_tokens: config.max_output_tokens,
        seed,
        n: if n > 1 { Some(n) } else { None },
    };
    let mut req = client.post(&url).json(&body);
    if let Some(key) = &config.api_key {
        req = req.bearer_auth(key);
    }
    let started = Instant::now();
    let resp = req.send().map_err(|e| TransportError::Request(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        return Err(TransportError::Status(status.as_u16()));
    }
    let parsed: ChatResponse = resp
        .json()
        .map_err(|e| TransportError::Schema(e.to_string()))?;
    if parsed.choices.is_empty() {
        return Err(TransportError::Schema("no choices in response".into()));
    }
    let mut texts = Vec::with_capacity(parsed.choices.len());
    for choice in parsed.choices {
        let content = choice
            .message
            .content
            .ok_or_else(|| TransportError::Schema("choice missing message.content".into()))?;
        texts.push(content);
    }
    let wall_time = started.elapsed().as_secs_f64();
    match parsed.usage {
        Some(u) => Ok(Completion {
            texts,
            tokens_in: u.prompt_tokens,
            tokens_out: u.completion_tokens,
            estimated: false,
            wall_time,
        }),
        None => {
            // Never fabricate usage: fall back to whitespace tokens, flagged.
            let tokens_in = messages.iter().map(|m| estimate_tokens(&m.content)).sum();
            let tokens_out = texts.iter().map(|t| estimate_tokens(t)).sum();
            Ok(Completion { texts, tokens_in, tokens_out, estimated: true, wall_time })
        }
    }
}

// ---------------------------------------------------------------------------
// Role adapters
// ---------------------------------------------------------------------------

/// Builds HTTP-backed roles from an endpoint, a template store and the
/// framework's policy template.
#[derive(Clone)]
pub struct HttpRoleBuilder {
    pub endpoint: HttpEndpointConfig,
    pub store: Arc<TemplateStore>,
    pub policy_template: TemplateKind,
    pub reward_template: TemplateKind,
    /// Temperature for reward/judge/aggregator/equivalence calls.
    pub eval_temperature: f64,
}

impl HttpRoleBuilder {
    pub fn new(endpoint: HttpEndpointConfig, store: TemplateStore, policy_template: TemplateKind) -> Self {
        Self {
            endpoint,
            store: Arc::new(store),
            policy_template,
            reward_template: TemplateKind::UsefulnessEval,
            eval_temperature: 0.8,
        }
    }

    pub fn build(&self, mode: TransitionMode) -> RoleSet {
        let shared = Arc::new(self.clone());
        RoleSet {
            policy: Arc::new(HttpPolicy(shared.clone())),
            reward: Arc::new(HttpReward(shared.clone())),
            transition: None,
            bn_judge: Some(Arc::new(HttpBnJudge(shared.clone()))),
            aggregator: Some(Arc::new(HttpAggregator(shared.clone()))),
            equivalence: Some(Arc::new(HttpEquivalence(shared))),
            transition_mode: mode,
        }
    }

    fn policy_bindings(&self, state: &State) -> BTreeMap<String, String> {
        let (problem, steps, next) = split_problem_steps(&state.text);
        let mut b = BTreeMap::new();
        match self.policy_template {
            TemplateKind::Rap => {
                b.insert("question".into(), problem);
                b.insert("transcript".into(), steps);
                b.insert("sub_number".into(), next.to_string());
            }
            _ => {
                b.insert("problem".into(), problem);
                b.insert("steps".into(), steps);
                b.insert("step_number".into(), next.to_string());
            }
        }
        b
    }
}

fn first_line(text: &str) -> String {
    text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

struct HttpPolicy(Arc<HttpRoleBuilder>);

impl HttpPolicy {
    fn request(&self, state: &State, n: usize, seed: u64) -> Result<(Vec<Action>, Completion), RoleError> {
        let b = &self.0;
        let messages = render_prompt(b.store.get(b.policy_template), &b.policy_bindings(state))
            .map_err(|e| RoleError::new(RoleKind::Policy, e.to_string()))?;
        let done = http_complete_n(&b.endpoint, &messages, n, Some(seed))
            .map_err(|e| RoleError { role: RoleKind::Policy, message: e.to_string(), retryable: e.retryable() })?;
        let actions = done
            .texts
            .iter()
            .map(|t| Action::new(first_line(t), ActionSource::Policy))
            .collect();
        Ok((actions, done))
    }
}

impl PolicyRole for HttpPolicy {
    fn sample(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError> {
        // One request and one ledger entry per action: per-action accounting.
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let (mut actions, done) = self.request(state, 1, seed.wrapping_add(i as u64))?;
            rec.record(RoleKind::Policy, done.tokens_in, done.tokens_out, done.wall_time, done.estimated);
            out.append(&mut actions);
        }
        Ok(out)
    }

    fn sample_batch(&self, state: &State, k: usize, seed: u64, rec: &Recorder) -> Result<Vec<Action>, RoleError> {
        let (actions, done) = self.request(state, k, seed)?;
        rec.record(RoleKind::Policy, done.tokens_in, done.tokens_out, done.wall_time, done.estimated);
        Ok(actions)
    }
}

/// Runs a single-completion request against a template and parses the reply,
/// re-asking on parse failures up to [`RETRY_CAP`] times. Every attempt is a
/// real invocation and is ledgered by the caller through `record`.
fn ask_parsed<T>(
    b: &HttpRoleBuilder,
    role: RoleKind,
    kind: TemplateKind,
    bindings: &BTreeMap<String, String>,
    max_tokens: u32,
    rec: &Recorder,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, RoleError> {
    let messages =
        render_prompt(b.store.get(kind), bindings).map_err(|e| RoleError::new(role, e.to_string()))?;
    let cfg = b.endpoint.with(b.eval_temperature, max_tokens);
    let mut last_err = String::new();
    for attempt in 0..=RETRY_CAP {
        let done = http_complete_n(&cfg, &messages, 1, Some(attempt as u64))
            .map_err(|e| RoleError { role, message: e.to_string(), retryable: e.retryable() })?;
        rec.record(role, done.tokens_in, done.tokens_out, done.wall_time, done.estimated);
        match parse(done.texts[0].trim()) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = e,
        }
    }
    Err(RoleError::new(role, format!("unparsable after {} attempts: {last_err}", RETRY_CAP + 1)))
}

struct HttpReward(Arc<HttpRoleBuilder>);

impl RewardRole for HttpReward {
    fn score(&self, state: &State, action: &Action, rec: &Recorder) -> Result<RewardSignal, RoleError> {
        let (problem, steps, _) = split_problem_steps(&state.text);
        let mut bindings = BTreeMap::new();
        bindings.insert("problem".into(), problem);
        bindings.insert("steps".into(), steps);
        bindings.insert("candidate".into(), action.text.clone());
        let value = ask_parsed(
            &self.0,
            RoleKind::Reward,
            self.0.reward_template,
            &bindings,
            10,
            rec,
            |t| parse_float_score(t).map_err(|e| e.to_string()),
        )?;
        Ok(RewardSignal::combined(value))
    }
}

struct HttpBnJudge(Arc<HttpRoleBuilder>);

impl BnJudgeRole for HttpBnJudge {
    fn rate(&self, state: &State, candidate: &Action, rec: &Recorder) -> Result<u8, RoleError> {
        let (problem, steps, _) = split_problem_steps(&state.text);
        let mut bindings = BTreeMap::new();
        bindings.insert("task".into(), problem);
        bindings.insert("partial_path".into(), steps);
        bindings.insert("candidate".into(), candidate.text.clone());
        ask_parsed(&self.0, RoleKind::BnJudge, TemplateKind::BnDp, &bindings, 5, rec, |t| {
            parse_bn_rating(t).map_err(|e| e.to_string())
        })
    }
}

struct HttpAggregator(Arc<HttpRoleBuilder>);

impl AggregatorRole for HttpAggregator {
    fn cluster(&self, state: &State, candidates: &[Action], rec: &Recorder) -> Result<ClusterSet, RoleError> {
        let (problem, steps, _) = split_problem_steps(&state.text);
        let listing = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.text))
            .collect::<Vec<_>>()
            .join("\n");
        let mut bindings = BTreeMap::new();
        bindings.insert("question".into(), problem);
        bindings.insert("steps".into(), steps);
        bindings.insert("candidates".into(), listing);
        ask_parsed(&self.0, RoleKind::Aggregator, TemplateKind::BnAgg, &bindings, 1000, rec, |t| {
            parse_cluster_list(t).map_err(|e| e.to_string())
        })
    }
}

struct HttpEquivalence(Arc<HttpRoleBuilder>);

impl EquivalenceRole for HttpEquivalence {
    fn same(&self, context: &State, a: &Action, b: &Action, rec: &Recorder) -> Result<bool, RoleError> {
        let mut bindings = BTreeMap::new();
        bindings.insert("context".into(), context.text.clone());
        bindings.insert("step_a".into(), a.text.clone());
        bindings.insert("step_b".into(), b.text.clone());
        ask_parsed(&self.0, RoleKind::Equivalence, TemplateKind::BnEq, &bindings, 5, rec, |t| {
            parse_yes_no(t).map_err(|e| e.to_string())
        })
    }
}

// Terminal detection for HTTP-produced actions shares the marker rule.
pub fn http_action_is_terminal(action: &Action) -> bool {
    is_terminal_action(&action.text)
}
