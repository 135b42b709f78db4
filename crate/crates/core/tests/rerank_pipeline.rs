//! Two-stage pipeline behavior against a trained toy checkpoint: oracle
//! bounds, schema-mismatch degradation, and the HTTP backend contract.

use std::io::{Read, Write};
use std::net::TcpListener;

use imb_core::checkpoint::Checkpoint;
use imb_core::data::{synth_generate, ConfusionMap, Example, LabelMap, SynthConfig};
use imb_core::rerank::{
    pipeline_eval, Backend, BackendConfig, HttpBackendConfig, Resolution,
};
use imb_core::trainer::{train, EncoderSettings, TrainConfig, TrainOutcome};

fn trained_checkpoint() -> (Checkpoint<f64>, Vec<Example>, LabelMap, ConfusionMap) {
    let config = SynthConfig {
        num_classes: 6,
        head_count: 60,
        tail_count: 30,
        exponent: 1.0,
        tokens_per_example: (4, 10),
        keywords_per_class: 6,
        overlap: 0.1,
        seed: 5,
    };
    let ds = synth_generate(&config).unwrap();
    let dev = synth_generate(&SynthConfig { seed: 6, ..config }).unwrap();
    let train_config = TrainConfig {
        epochs: 10,
        batch_size: 16,
        seed: 3,
        max_vocab: 300,
        encoder: EncoderSettings {
            d_model: 32,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: Some(64),
            max_len: 16,
            ..EncoderSettings::default()
        },
        ..TrainConfig::default()
    };
    let outcome: TrainOutcome<f64> =
        train(&train_config, &ds.examples, &dev.examples, &ds.label_map).unwrap();
    (
        outcome.checkpoint,
        dev.examples,
        ds.label_map,
        ds.confusion,
    )
}

#[test]
fn oracle_backend_dominates_and_saturates_at_full_k() {
    let (ckpt, dev, labels, _) = trained_checkpoint();
    let classes = labels.len();
    let mut last_accuracy = 0.0;
    for k in 1..=classes {
        let mut backend = Backend::Oracle;
        let report = pipeline_eval(&ckpt, &mut backend, &dev, k).unwrap();
        assert!(
            report.delta_macro_f1 >= -1e-12,
            "oracle delta at k={k} is {}",
            report.delta_macro_f1
        );
        assert!(
            report.reranked.accuracy >= last_accuracy - 1e-12,
            "oracle accuracy regressed at k={k}"
        );
        last_accuracy = report.reranked.accuracy;
        if k == 1 {
            // Candidates are exactly the top-1, so both arms agree.
            assert_eq!(report.classifier, report.reranked);
        }
        if k == classes {
            assert_eq!(report.reranked.accuracy, 1.0);
            assert_eq!(report.resolution_counts.fallback_invalid, 0);
            assert_eq!(report.resolution_counts.fallback_timeout, 0);
        }
    }
}

#[test]
fn cross_schema_mismatch_degrades_macro_f1() {
    let (ckpt, dev, _, confusion) = trained_checkpoint();
    let mut negative = 0;
    for seed in 0..5 {
        let mut backend = Backend::from_config(&BackendConfig::SimulatedMismatch {
            p: 0.5,
            confusion: confusion.clone(),
            seed,
        })
        .unwrap();
        let report = pipeline_eval(&ckpt, &mut backend, &dev, 6).unwrap();
        if report.delta_macro_f1 < 0.0 {
            negative += 1;
        }
    }
    assert!(
        negative >= 4,
        "mismatch degraded macro-F1 in only {negative} of 5 seeds"
    );
}

#[test]
fn unreachable_endpoint_falls_back_to_classifier() {
    let (ckpt, dev, _, _) = trained_checkpoint();
    let subset = &dev[..6.min(dev.len())];
    let mut backend = Backend::from_config(&BackendConfig::Http(HttpBackendConfig {
        endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
        model: "test-model".into(),
        template: None,
        template_file: None,
        timeout_ms: 200,
        max_retries: 1,
        backoff_ms: 1,
        concurrency: 2,
    }))
    .unwrap();
    let report = pipeline_eval(&ckpt, &mut backend, subset, 3).unwrap();
    assert_eq!(report.resolution_counts.fallback_timeout, subset.len());
    // Fallback is the classifier top-1, so the arms agree exactly.
    assert_eq!(report.classifier, report.reranked);
    assert_eq!(report.delta_macro_f1, 0.0);
}

/// Minimal chat-completions mock: answers every request with the given
/// content and records request bodies.
fn spawn_mock(replies: &'static str, hits: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for _ in 0..hits {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buffer = Vec::new();
            let mut chunk = [0u8; 4096];
            let body_start;
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buffer.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buffer.windows(4).position(|w| w == b"\r\n\r\n") {
                    body_start = pos + 4;
                    break;
                }
            }
            let header = String::from_utf8_lossy(&buffer[..body_start]).to_string();
            let content_length: usize = header
                .lines()
                .find(|l| l.to_lowercase().starts_with("content-length:"))
                .and_then(|l| l.split(':').nth(1))
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0);
            while buffer.len() < body_start + content_length {
                let n = stream.read(&mut chunk).unwrap();
                buffer.extend_from_slice(&chunk[..n]);
            }
            bodies.push(String::from_utf8_lossy(&buffer[body_start..]).to_string());
            let payload = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": replies}}]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                payload.len(),
                payload
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        bodies
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

#[test]
fn http_backend_matches_valid_replies_and_sends_zero_temperature() {
    let (ckpt, dev, labels, _) = trained_checkpoint();
    let subset = &dev[..4];
    // The mock always answers with class 2's label.
    let reply: &'static str = Box::leak(labels.name(2).unwrap().to_string().into_boxed_str());
    let (endpoint, handle) = spawn_mock(reply, subset.len());
    let mut backend = Backend::from_config(&BackendConfig::Http(HttpBackendConfig {
        endpoint,
        model: "mock-model".into(),
        template: None,
        template_file: None,
        timeout_ms: 5_000,
        max_retries: 0,
        backoff_ms: 1,
        concurrency: 1,
    }))
    .unwrap();
    let report = pipeline_eval(&ckpt, &mut backend, subset, labels.len()).unwrap();
    let bodies = handle.join().unwrap();

    // Every reply names a candidate (k = C), so everything matches and
    // every prediction is class 2.
    assert_eq!(report.resolution_counts.matched, subset.len());
    let predicted: usize = report.reranked.confusion.iter().map(|row| row[2]).sum();
    assert_eq!(predicted, subset.len());

    for body in &bodies {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "mock-model");
        assert_eq!(v["temperature"], 0);
        assert_eq!(v["messages"][0]["role"], "user");
        let content = v["messages"][0]["content"].as_str().unwrap();
        assert!(content.contains("Reply with exactly one label from the list"));
    }
}

#[test]
fn http_invalid_reply_falls_back_with_flag() {
    let (ckpt, dev, labels, _) = trained_checkpoint();
    let subset = &dev[..3];
    let (endpoint, handle) = spawn_mock("Definitely Not A Label", subset.len());
    let mut backend = Backend::from_config(&BackendConfig::Http(HttpBackendConfig {
        endpoint,
        model: "mock-model".into(),
        template: None,
        template_file: None,
        timeout_ms: 5_000,
        max_retries: 0,
        backoff_ms: 1,
        concurrency: 3,
    }))
    .unwrap();
    let report = pipeline_eval(&ckpt, &mut backend, subset, labels.len()).unwrap();
    handle.join().unwrap();
    assert_eq!(report.resolution_counts.fallback_invalid, subset.len());
    assert_eq!(report.classifier, report.reranked);

    let mut seq = Backend::Oracle;
    let oracle = pipeline_eval(&ckpt, &mut seq, subset, labels.len()).unwrap();
    assert_eq!(oracle.resolution_counts.fallback_invalid, 0);
    let _ = Resolution::Matched;
}
