//! Two-stage re-ranking: the classifier proposes top-K candidates and a
//! pluggable backend makes the final selection. Backends emit a raw
//! reply string like an LLM would; shared resolution code matches the
//! reply against the candidate labels and falls back to the classifier
//! top-1 on anything else.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{ConfusionMap, Example, LabelMap};
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::objectives::{softmax, MetricsReport};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::trainer::encode_checkpoint_dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub class_id: usize,
    pub probability: f64,
}

/// Top-K classes by softmax probability, plus the query text.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub text: String,
}

impl CandidateSet {
    pub fn top1(&self) -> usize {
        self.candidates[0].class_id
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.candidates.iter().any(|c| c.class_id == class_id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.class_id).collect()
    }
}

/// Softmax the logits and keep the top min(k, C) classes, ordered by
/// probability descending with ties broken toward the lower class id.
pub fn top_k_candidates(logits: &[f64], k: usize, text: &str) -> Result<CandidateSet> {
    if logits.is_empty() {
        return Err(Error::Shape("top_k_candidates on empty logits".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let candidates = order
        .into_iter()
        .take(k.min(probs.len()))
        .map(|class_id| Candidate {
            class_id,
            probability: probs[class_id],
        })
        .collect();
    Ok(CandidateSet {
        candidates,
        text: text.to_string(),
    })
}

/// Built-in prompt template, version 1.
pub const TEMPLATE_V1: &str = include_str!("../templates/rerank_v1.txt");

/// Deterministic prompt rendering: the query text verbatim and the
/// candidates as a numbered list in candidate order.
pub fn build_prompt(text: &str, candidate_labels: &[&str], template: &str) -> Result<String> {
    if candidate_labels.is_empty() {
        return Err(Error::Config("prompt needs at least one candidate".into()));
    }
    for placeholder in ["{text}", "{candidates}"] {
        if !template.contains(placeholder) {
            return Err(Error::Template(format!(
                "template is missing the {placeholder} placeholder"
            )));
        }
    }
    let numbered: Vec<String> = candidate_labels
        .iter()
        .enumerate()
        .map(|(i, label)| format!("{}. {label}", i + 1))
        .collect();
    Ok(template
        .replace("{text}", text)
        .replace("{candidates}", &numbered.join("\n")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Matched,
    FallbackInvalid,
    FallbackTimeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    pub final_class: usize,
    pub raw_reply: String,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Inline prompt template text; defaults to the built-in v1
    /// template. Mutually exclusive with `template_file`.
    #[serde(default)]
    pub template: Option<String>,
    /// Path to a template file with {text}/{candidates} placeholders.
    #[serde(default)]
    pub template_file: Option<std::path::PathBuf>,
    #[serde(default = "d_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "d_retries")]
    pub max_retries: u32,
    #[serde(default = "d_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "d_concurrency")]
    pub concurrency: usize,
}

fn d_timeout_ms() -> u64 {
    30_000
}
fn d_retries() -> u32 {
    3
}
fn d_backoff_ms() -> u64 {
    250
}
fn d_concurrency() -> usize {
    4
}

/// Bearer token environment variable for the HTTP backend.
pub const TOKEN_ENV: &str = "IMB_RERANK_TOKEN";

/// Serializable backend selection, as it appears in CLI config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Upper bound: picks the gold label whenever it is in the
    /// candidate list, otherwise the classifier top-1.
    Oracle,
    /// Schema-mismatch model: with probability `p` the pick is replaced
    /// by a confusion-adjacent label.
    SimulatedMismatch {
        p: f64,
        confusion: ConfusionMap,
        #[serde(default)]
        seed: u64,
    },
    Http(HttpBackendConfig),
}

pub enum Backend {
    Oracle,
    Simulated {
        p: f64,
        confusion: ConfusionMap,
        rng: RngState,
    },
    Http(HttpBackend),
}

impl Backend {
    pub fn from_config(config: &BackendConfig) -> Result<Backend> {
        Ok(match config {
            BackendConfig::Oracle => Backend::Oracle,
            BackendConfig::SimulatedMismatch { p, confusion, seed } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "mismatch probability must be in [0, 1], got {p}"
                    )));
                }
                Backend::Simulated {
                    p: *p,
                    confusion: confusion.clone(),
                    rng: RngState::new(*seed),
                }
            }
            BackendConfig::Http(http) => Backend::Http(HttpBackend::new(http.clone())?),
        })
    }

    fn is_http(&self) -> bool {
        matches!(self, Backend::Http(_))
    }
}

enum Reply {
    Text(String),
    TransportFailure(String),
}

/// Match a backend reply against the candidate labels (trimmed,
/// case-insensitive, exact) and fall back to the classifier top-1
/// otherwise.
fn resolve(reply: Reply, set: &CandidateSet, labels: &LabelMap) -> RerankResult {
    match reply {
        Reply::TransportFailure(msg) => RerankResult {
            final_class: set.top1(),
            raw_reply: msg,
            resolution: Resolution::FallbackTimeout,
        },
        Reply::Text(raw) => {
            let wanted = raw.trim().to_lowercase();
            let matched = set.candidates.iter().find(|c| {
                labels
                    .name(c.class_id)
                    .is_some_and(|n| n.to_lowercase() == wanted)
            });
            match matched {
                Some(c) => RerankResult {
                    final_class: c.class_id,
                    raw_reply: raw,
                    resolution: Resolution::Matched,
                },
                None => RerankResult {
                    final_class: set.top1(),
                    raw_reply: raw,
                    resolution: Resolution::FallbackInvalid,
                },
            }
        }
    }
}

/// The selection an omniscient re-ranker would make: gold when it was
/// proposed, otherwise the classifier top-1.
fn oracle_pick(set: &CandidateSet, gold: Option<usize>) -> usize {
    match gold {
        Some(g) if set.contains(g) => g,
        _ => set.top1(),
    }
}

/// Weighted draw over the neighbors of `class`, preferring neighbors
/// inside the candidate list (renormalized); when none qualifies the raw
/// adjacent label is emitted and will fail candidate matching.
fn draw_mismatch(
    confusion: &ConfusionMap,
    class: usize,
    set: &CandidateSet,
    rng: &mut RngState,
) -> Option<usize> {
    let neighbors = confusion.neighbors(class);
    if neighbors.is_empty() {
        return None;
    }
    let in_candidates: Vec<(usize, f64)> = neighbors
        .iter()
        .filter(|(n, _)| set.contains(*n))
        .copied()
        .collect();
    let pool = if in_candidates.is_empty() {
        neighbors.to_vec()
    } else {
        in_candidates
    };
    let total: f64 = pool.iter().map(|(_, w)| w).sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    for &(n, w) in &pool {
        acc += w;
        if u < acc {
            return Some(n);
        }
    }
    pool.last().map(|&(n, _)| n)
}

/// Run one candidate set through the backend. `gold` feeds the oracle
/// and simulated backends; the HTTP backend never sees it.
pub fn rerank(
    backend: &mut Backend,
    set: &CandidateSet,
    labels: &LabelMap,
    gold: Option<usize>,
) -> Result<RerankResult> {
    if set.candidates.is_empty() {
        return Err(Error::Config("rerank needs a non-empty candidate set".into()));
    }
    let reply = match backend {
        Backend::Oracle => {
            let pick = oracle_pick(set, gold);
            Reply::Text(label_name(labels, pick)?)
        }
        Backend::Simulated { p, confusion, rng } => {
            let pick = oracle_pick(set, gold);
            let final_pick = if *p > 0.0 && rng.next_f64() < *p {
                draw_mismatch(confusion, pick, set, rng).unwrap_or(pick)
            } else {
                pick
            };
            Reply::Text(label_name(labels, final_pick)?)
        }
        Backend::Http(http) => {
            let candidate_labels: Vec<&str> = set
                .candidates
                .iter()
                .map(|c| labels.name(c.class_id).unwrap_or("<unknown>"))
                .collect();
            let prompt = build_prompt(&set.text, &candidate_labels, http.template())?;
            http.complete(&prompt)
        }
    };
    Ok(resolve(reply, set, labels))
}

fn label_name(labels: &LabelMap, id: usize) -> Result<String> {
    labels
        .name(id)
        .map(str::to_string)
        .ok_or_else(|| Error::Index(format!("class id {id} has no label")))
}

/// Chat-completions-style client with retries and bounded concurrency.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    token: Option<String>,
    template: String,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        if config.timeout_ms == 0 {
            return Err(Error::Config("http timeout must be positive".into()));
        }
        let template = match (&config.template, &config.template_file) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either template or template_file, not both".into(),
                ))
            }
            (Some(text), None) => text.clone(),
            (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| {
                Error::Template(format!("cannot read template {}: {e}", path.display()))
            })?,
            (None, None) => TEMPLATE_V1.to_string(),
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Ok(HttpBackend {
            agent,
            token: std::env::var(TOKEN_ENV).ok(),
            template,
            config,
        })
    }

    fn template(&self) -> &str {
        &self.template
    }

    /// POST the prompt, retrying with exponential backoff; any failure
    /// after the retry budget becomes a transport-failure reply.
    fn complete(&self, prompt: &str) -> Reply {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1),
                ));
            }
            let mut request = self
                .agent
                .post(&self.config.endpoint)
                .set("content-type", "application/json");
            if let Some(token) = &self.token {
                request = request.set("authorization", &format!("Bearer {token}"));
            }
            match request.send_string(&body.to_string()) {
                Ok(response) => match response.into_string() {
                    Ok(text) => match extract_reply(&text) {
                        Some(content) => return Reply::Text(content),
                        None => {
                            last_error = format!("unparseable response: {text}");
                        }
                    },
                    Err(e) => last_error = format!("read failure: {e}"),
                },
                Err(e) => last_error = format!("transport failure: {e}"),
            }
        }
        Reply::TransportFailure(last_error)
    }
}

fn extract_reply(body: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ResolutionCounts {
    pub matched: usize,
    pub fallback_invalid: usize,
    pub fallback_timeout: usize,
}

impl ResolutionCounts {
    fn record(&mut self, r: Resolution) {
        match r {
            Resolution::Matched => self.matched += 1,
            Resolution::FallbackInvalid => self.fallback_invalid += 1,
            Resolution::FallbackTimeout => self.fallback_timeout += 1,
        }
    }
}

/// Paired evaluation of the classifier alone and the reranked pipeline
/// over identical per-example logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub classifier: MetricsReport,
    pub reranked: MetricsReport,
    pub delta_macro_f1: f64,
    pub per_class_delta_f1: Vec<f64>,
    pub resolution_counts: ResolutionCounts,
}

pub fn pipeline_eval<T: Scalar>(
    ckpt: &Checkpoint<T>,
    backend: &mut Backend,
    dataset: &[Example],
    k: usize,
) -> Result<PipelineReport> {
    let encoded = encode_checkpoint_dataset(ckpt, dataset)?;
    let mut sets = Vec::with_capacity(encoded.len());
    let mut classifier_preds = Vec::with_capacity(encoded.len());
    let mut golds = Vec::with_capacity(encoded.len());
    for (ex, raw) in encoded.iter().zip(dataset) {
        let mask = vec![true; ex.ids.len()];
        let logits = ckpt.model.predict_logits(&ex.ids, &mask)?;
        classifier_preds.push(argmax(&logits));
        golds.push(ex.label);
        sets.push(top_k_candidates(&logits, k, &raw.text)?);
    }

    let results: Vec<RerankResult> = if backend.is_http() {
        let Backend::Http(http) = backend else {
            unreachable!()
        };
        rerank_http_batch(http, &sets, &ckpt.label_map)?
    } else {
        sets.iter()
            .zip(&golds)
            .map(|(set, &gold)| rerank(backend, set, &ckpt.label_map, Some(gold)))
            .collect::<Result<_>>()?
    };

    let mut counts = ResolutionCounts::default();
    let reranked_preds: Vec<usize> = results
        .iter()
        .map(|r| {
            counts.record(r.resolution);
            r.final_class
        })
        .collect();

    let classes = ckpt.label_map.len();
    let classifier = MetricsReport::compute(&classifier_preds, &golds, classes)?;
    let reranked = MetricsReport::compute(&reranked_preds, &golds, classes)?;
    let per_class_delta_f1: Vec<f64> = reranked
        .per_class_f1
        .iter()
        .zip(&classifier.per_class_f1)
        .map(|(r, c)| r - c)
        .collect();
    Ok(PipelineReport {
        delta_macro_f1: reranked.macro_f1 - classifier.macro_f1,
        per_class_delta_f1,
        classifier,
        reranked,
        resolution_counts: counts,
    })
}

/// Fan HTTP requests over a bounded worker pool, reassembling results in
/// input order.
fn rerank_http_batch(
    http: &HttpBackend,
    sets: &[CandidateSet],
    labels: &LabelMap,
) -> Result<Vec<RerankResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RerankResult>>> = Mutex::new(vec![None; sets.len()]);
    let workers = http.config.concurrency.max(1).min(sets.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sets.len() {
                    break;
                }
                let set = &sets[i];
                let candidate_labels: Vec<&str> = set
                    .candidates
                    .iter()
                    .map(|c| labels.name(c.class_id).unwrap_or("<unknown>"))
                    .collect();
                let reply = match build_prompt(&set.text, &candidate_labels, http.template()) {
                    Ok(prompt) => http.complete(&prompt),
                    Err(e) => Reply::TransportFailure(e.to_string()),
                };
                let result = resolve(reply, set, labels);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect())
}
