//! Tests for the chat-completions client against a scripted local server:
//! retry policy, schema failures, usage fallback and role-level accounting.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::json;

use cit_core::backends::{http_complete, http_complete_n, HttpEndpointConfig, HttpRoleBuilder};
use cit_core::costlab::{CostLedger, Phase, Recorder};
use cit_core::error::TransportError;
use cit_core::roles::{Message, TemplateKind, TemplateStore, TransitionMode};
use cit_core::{RoleKind, State};

struct MockServer {
    base_url: String,
    hits: Arc<AtomicUsize>,
}

/// Serves the scripted `(status, body)` responses in order, repeating the
/// last one once the script is exhausted.
fn serve(responses: Vec<(u16, String)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let hits_bg = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let n = hits_bg.fetch_add(1, Ordering::SeqCst);
            let (status, body) = &responses[n.min(responses.len() - 1)];

            // Drain the request: headers, then content-length bytes of body.
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body_buf = vec![0u8; content_length];
            let _ = reader.read_exact(&mut body_buf);

            let reply = format!(
                "HTTP/1.1 {status} MOCK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    MockServer { base_url, hits }
}

fn ok_body(contents: &[&str], with_usage: bool) -> String {
    let choices: Vec<_> = contents
        .iter()
        .map(|c| json!({"message": {"role": "assistant", "content": c}}))
        .collect();
    let mut body = json!({"choices": choices});
    if with_usage {
        body["usage"] = json!({"prompt_tokens": 12, "completion_tokens": 5});
    }
    body.to_string()
}

fn endpoint(server: &MockServer) -> HttpEndpointConfig {
    HttpEndpointConfig::new(server.base_url.clone(), "mock-model")
}

fn prompt() -> Vec<Message> {
    vec![Message::system("score the step"), Message::user("Step 1: add two and two")]
}

#[test]
fn returns_first_choice_and_usage() {
    let server = serve(vec![(200, ok_body(&["0.8"], true))]);
    let (text, tokens_in, tokens_out) = http_complete(&endpoint(&server), &prompt(), None).unwrap();
    assert_eq!(text, "0.8");
    assert_eq!((tokens_in, tokens_out), (12, 5));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn server_errors_are_retried_until_success() {
    let server = serve(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, ok_body(&["fine"], true)),
    ]);
    let done = http_complete_n(&endpoint(&server), &prompt(), 1, Some(7)).unwrap();
    assert_eq!(done.texts, vec!["fine"]);
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let server = serve(vec![(404, "{}".into())]);
    let err = http_complete(&endpoint(&server), &prompt(), None).unwrap_err();
    assert!(matches!(err, TransportError::Status(404)));
    assert!(!err.retryable());
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_content_is_a_schema_error_without_retry() {
    let body = json!({"choices": [{"message": {"role": "assistant"}}]}).to_string();
    let server = serve(vec![(200, body)]);
    let err = http_complete(&endpoint(&server), &prompt(), None).unwrap_err();
    assert!(matches!(err, TransportError::Schema(_)));
    assert!(!err.retryable());
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_usage_falls_back_to_flagged_estimates() {
    let server = serve(vec![(200, ok_body(&["one two three"], false))]);
    let done = http_complete_n(&endpoint(&server), &prompt(), 1, None).unwrap();
    assert!(done.estimated);
    // Whitespace token estimate of the reply.
    assert_eq!(done.tokens_out, 3);
    assert!(done.tokens_in > 0);
}

#[test]
fn batched_request_returns_all_choices() {
    let server = serve(vec![(200, ok_body(&["a", "b", "c"], true))]);
    let done = http_complete_n(&endpoint(&server), &prompt(), 3, None).unwrap();
    assert_eq!(done.texts, vec!["a", "b", "c"]);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn policy_role_samples_and_ledgers_through_the_client() {
    let server = serve(vec![(200, ok_body(&["Add the two numbers."], true))]);
    let builder =
        HttpRoleBuilder::new(endpoint(&server), TemplateStore::builtin(), TemplateKind::TotBs);
    let roles = builder.build(TransitionMode::Concatenate);
    let ledger = CostLedger::new("mock");
    let rec = Recorder::new(&ledger, Phase::Expand, 0);
    let state = State::root("What is 2 + 2?");
    let actions = roles.sample_actions(&state, 1, 5, &rec).unwrap();
    assert_eq!(actions.len(), 1);
    assert_eq!(actions[0].text, "Add the two numbers.");
    assert_eq!(ledger.invocations_by_role(RoleKind::Policy), 1);
    assert_eq!(ledger.tokens_in(), 12);
}
