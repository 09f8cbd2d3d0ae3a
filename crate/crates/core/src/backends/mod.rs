//! Interchangeable role backends: an OpenAI-compatible HTTP client for real
//! endpoints and a deterministic scripted world that makes every cost law
//! exactly checkable at desk scale.

pub mod http;
pub mod synth;

pub use http::{http_complete, http_complete_n, Completion, HttpEndpointConfig, HttpRoleBuilder};
pub use synth::{synth_roles, EasyRule, SynthWorldSpec};

/// Splits a concatenated state text into (problem, steps-block, next step
/// number). The problem is everything before the first "Step 1:" line; the
/// steps block is "None" while empty, matching the prompt input format.
pub fn split_problem_steps(text: &str) -> (String, String, usize) {
    let mut problem_lines = Vec::new();
    let mut step_lines = Vec::new();
    let mut steps = 0usize;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("Step ") && trimmed.contains(':') {
            steps += 1;
            step_lines.push(line);
        } else if step_lines.is_empty() {
            problem_lines.push(line);
        } else {
            // continuation of a multi-line step
            step_lines.push(line);
        }
    }
    let problem = problem_lines.join("\n").trim().to_string();
    let steps_block = if step_lines.is_empty() { "None".to_string() } else { step_lines.join("\n") };
    (problem, steps_block, steps + 1)
}

/// Whitespace token estimate, used whenever an endpoint omits usage counts
/// and always by the synthetic world.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_empty_steps() {
        let (p, s, n) = split_problem_steps("What is 2+2?");
        assert_eq!(p, "What is 2+2?");
        assert_eq!(s, "None");
        assert_eq!(n, 1);
    }

    #[test]
    fn split_two_steps() {
        let text = "What is 2+2?\nStep 1: add\nStep 2: check";
        let (p, s, n) = split_problem_steps(text);
        assert_eq!(p, "What is 2+2?");
        assert_eq!(s, "Step 1: add\nStep 2: check");
        assert_eq!(n, 3);
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens("a b  c"), 3);
        assert_eq!(estimate_tokens(""), 0);
    }
}
