//! Vision-language model harness: prompt rendering, endpoint querying,
//! answer parsing and scoring.

mod answer;
mod endpoint;
mod prompt;

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cohort::Task;
use crate::eval::{metrics_from_confusion, ClassificationMetrics, Confusion};

pub use answer::{parse_answer, ParsedAnswer};
pub use endpoint::{
    build_request, extract_reply, query_endpoint, ChatTransport, EndpointConfig, HttpTransport, MockScript,
    MockServer, ModelAnswer, TransportError,
};
pub use prompt::{question, render_prompt, PromptInstance, ANSWER_INSTRUCTION, NONE_RECORDED, PROLOGUE};

#[derive(Debug, Error)]
pub enum LvlmError {
    #[error("endpoint unavailable for {request_id} after {attempts} attempts: {last}")]
    EndpointUnavailable {
        request_id: String,
        attempts: usize,
        last: String,
    },
    #[error("request {request_id} timed out after {timeout_ms} ms")]
    Timeout { request_id: String, timeout_ms: u64 },
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("unexpected endpoint response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} holding the endpoint token is not set")]
    MissingToken(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalPolicy {
    /// Metrics over answered instances only.
    #[default]
    AnsweredOnly,
    /// Every instance counts; a refusal is scored as the wrong label.
    RefusalAsWrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmReport {
    pub task: Task,
    pub policy: RefusalPolicy,
    pub total: usize,
    pub answered: usize,
    pub yes: usize,
    pub no: usize,
    pub refusals: usize,
    /// `answered / total`, as a percentage.
    pub answerable_pct: Option<f64>,
    pub metrics: ClassificationMetrics,
}

pub fn score_lvlm(task: Task, answers: &[ParsedAnswer], truth: &[u8], policy: RefusalPolicy) -> LvlmReport {
    assert_eq!(answers.len(), truth.len(), "answers must align with instances");
    let mut confusion = Confusion::default();
    let (mut yes, mut no, mut refusals) = (0, 0, 0);
    for (a, &t) in answers.iter().zip(truth) {
        let predicted = match a {
            ParsedAnswer::Yes => {
                yes += 1;
                Some(1)
            }
            ParsedAnswer::No => {
                no += 1;
                Some(0)
            }
            ParsedAnswer::Refusal => {
                refusals += 1;
                match policy {
                    RefusalPolicy::AnsweredOnly => None,
                    RefusalPolicy::RefusalAsWrong => Some(1 - t),
                }
            }
        };
        match (t, predicted) {
            (1, Some(1)) => confusion.tp += 1,
            (0, Some(1)) => confusion.fp += 1,
            (1, Some(0)) => confusion.fn_ += 1,
            (_, Some(_)) => confusion.tn += 1,
            (_, None) => {}
        }
    }
    let total = answers.len();
    LvlmReport {
        task,
        policy,
        total,
        answered: yes + no,
        yes,
        no,
        refusals,
        answerable_pct: (total > 0).then(|| 100.0 * (yes + no) as f64 / total as f64),
        metrics: metrics_from_confusion(confusion),
    }
}

/// Queries every instance with at most `config.concurrency` requests in
/// flight; answers come back in instance order.
pub fn run_lvlm(
    instances: &[PromptInstance],
    transport: &dyn ChatTransport,
    config: &EndpointConfig,
    image_root: &Path,
) -> Result<Vec<ModelAnswer>, LvlmError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .map_err(|e| LvlmError::BadResponse(e.to_string()))?;
    pool.install(|| {
        instances
            .par_iter()
            .map(|inst| {
                let body = build_request(inst, config, image_root)?;
                query_endpoint(inst, &body, transport, config)
            })
            .collect()
    })
}

/// One JSON object per instance with the prompt (or its hash when
/// redacted), the raw reply and the parsed answer.
pub fn write_log(
    path: &Path,
    instances: &[PromptInstance],
    answers: &[ModelAnswer],
    redact: bool,
) -> Result<(), LvlmError> {
    let io = |e: std::io::Error| LvlmError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for (inst, a) in instances.iter().zip(answers) {
        let prompt = if redact {
            json!({"redacted": true, "sha256": crate::util::sha256_hex(inst.text.as_bytes())})
        } else {
            json!(inst.text)
        };
        let line = json!({
            "request_id": inst.request_id(),
            "stay_id": inst.stay_id,
            "task": inst.task,
            "prompt": prompt,
            "image_refs": inst.image_refs,
            "ground_truth": inst.ground_truth,
            "raw": a.raw,
            "parsed": a.parsed,
            "attempts": a.attempts,
            "latency_ms": a.latency_ms,
            "model": a.model,
        });
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ParsedAnswer::*;

    #[test]
    fn answerable_fraction() {
        let answers = [Yes, No, Yes, No, Yes, No, Yes, No, Refusal, Refusal];
        let truth = [1, 0, 0, 0, 1, 1, 1, 0, 1, 0];
        let r = score_lvlm(Task::Mortality, &answers, &truth, RefusalPolicy::AnsweredOnly);
        assert_eq!(r.answerable_pct, Some(80.0));
        assert_eq!(r.answered + r.refusals, r.total);
        assert_eq!(r.metrics.confusion, Confusion { tp: 3, fp: 1, fn_: 1, tn: 3 });
        let w = score_lvlm(Task::Mortality, &answers, &truth, RefusalPolicy::RefusalAsWrong);
        assert_eq!(w.metrics.confusion, Confusion { tp: 3, fp: 2, fn_: 2, tn: 3 });
    }

    #[test]
    fn all_refusals() {
        let r = score_lvlm(Task::Los, &[Refusal, Refusal], &[1, 0], RefusalPolicy::AnsweredOnly);
        assert_eq!(r.answerable_pct, Some(0.0));
        assert_eq!(r.metrics.accuracy, None);
        assert_eq!(r.metrics.precision, None);
    }
}
