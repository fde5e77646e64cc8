//! End-to-end synthesis checks: determinism on disk, strict fault
//! accounting, and the HTTP backend against a real local socket, including
//! proof that credentials stay out of every persisted artifact.

use std::io::{Read as IoRead, Write as IoWrite};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use persona_moe::error::Error;
use persona_moe::synth::corpus::builtin_queries;
use persona_moe::synth::{
    synthesize_dataset, to_jsonl_string, write_jsonl, write_stats, DeterministicBackend,
    GeneratorBackend, HttpBackend, HttpConfig,
};

// --- deterministic backend -------------------------------------------------

#[test]
fn jsonl_on_disk_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().expect("tempdir");
    let queries = builtin_queries(300, 42);
    let mut blobs = Vec::new();
    for run in 0..2 {
        let (records, stats) = synthesize_dataset(&DeterministicBackend, &queries, 42).expect("synth");
        assert!(stats.consistent());
        let path = dir.path().join(format!("run{run}.jsonl"));
        write_jsonl(&records, &path).expect("write");
        blobs.push(std::fs::read(&path).expect("read back"));
    }
    assert_eq!(blobs[0], blobs[1], "same seed must give byte-identical JSONL");

    // A different seed changes synthesis inputs, not the accounting.
    let queries_b = builtin_queries(300, 43);
    let (records_b, stats_b) = synthesize_dataset(&DeterministicBackend, &queries_b, 43).expect("synth");
    assert!(stats_b.consistent());
    assert_ne!(to_jsonl_string(&records_b).expect("jsonl").into_bytes(), blobs[0]);
}

#[test]
fn fault_queries_are_rejected_and_accounted() {
    let mut queries = builtin_queries(40, 7);
    queries.push("[[fault:zero-p]] Please plan the road trip.".to_string());
    queries.push("[[fault:dual-pole]] Please plan the road trip.".to_string());
    queries.push("[[fault:zero-p]] What about the book club?".to_string());
    let (records, stats) = synthesize_dataset(&DeterministicBackend, &queries, 7).expect("synth");
    assert_eq!(stats.input, 43);
    assert_eq!(stats.rejected_zero_p, 2);
    assert_eq!(stats.rejected_exclusion, 1);
    assert_eq!(stats.accepted + stats.rejected_total(), stats.input);
    assert_eq!(records.len(), stats.accepted);
    for r in &records {
        assert!(!r.query.contains("[[fault:"), "fault query slipped through: {:?}", r.query);
    }
}

// --- fake completion endpoint ----------------------------------------------

struct Captured {
    authorization: Option<String>,
    body: String,
}

/// One-thread HTTP/1.1 stub. Serves the scripted (status, completion-text)
/// list in order, repeating the last entry, and captures each request.
struct FakeServer {
    endpoint: String,
    rx: mpsc::Receiver<Captured>,
    handle: Option<thread::JoinHandle<()>>,
}

impl FakeServer {
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let endpoint = format!("http://{}/v1/complete", listener.local_addr().expect("addr"));
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming() {
                let mut stream = match stream {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let (head_end, mut got) = loop {
                    let n = match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => return,
                        Ok(n) => n,
                    };
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = find_header_end(&buf) {
                        break (pos, buf.len());
                    }
                };
                let head = String::from_utf8_lossy(&buf[..head_end]).to_string();
                let content_length = head
                    .lines()
                    .find_map(|l| {
                        let (k, v) = l.split_once(':')?;
                        if k.eq_ignore_ascii_case("content-length") {
                            v.trim().parse::<usize>().ok()
                        } else {
                            None
                        }
                    })
                    .unwrap_or(0);
                let body_start = head_end + 4;
                while got < body_start + content_length {
                    let n = match stream.read(&mut chunk) {
                        Ok(0) | Err(_) => return,
                        Ok(n) => n,
                    };
                    buf.extend_from_slice(&chunk[..n]);
                    got += n;
                }
                let authorization = head.lines().find_map(|l| {
                    let (k, v) = l.split_once(':')?;
                    if k.eq_ignore_ascii_case("authorization") {
                        Some(v.trim().to_string())
                    } else {
                        None
                    }
                });
                let body = String::from_utf8_lossy(&buf[body_start..body_start + content_length]).to_string();
                if tx.send(Captured { authorization, body }).is_err() {
                    return;
                }
                let (status, completion) = script[served.min(script.len() - 1)].clone();
                served += 1;
                let payload = if status == 200 {
                    serde_json::to_string(&serde_json::json!({ "completion": completion }))
                        .expect("payload")
                } else {
                    String::from("{\"error\":\"scripted failure\"}")
                };
                let reason = match status {
                    200 => "OK",
                    429 => "Too Many Requests",
                    500 => "Internal Server Error",
                    _ => "Error",
                };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        FakeServer { endpoint, rx, handle: Some(handle) }
    }

    fn config(&self, api_key_env: Option<&str>) -> HttpConfig {
        HttpConfig {
            endpoint: self.endpoint.clone(),
            model: "stub".into(),
            timeout_secs: 5,
            max_retries: 2,
            api_key_env: api_key_env.map(str::to_string),
        }
    }

    fn captured(&self) -> Vec<Captured> {
        self.rx.try_iter().collect()
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        // Unblock the accept loop so the thread exits.
        if let Ok(addr) = self.endpoint.trim_start_matches("http://").split('/').next().unwrap_or("").parse::<std::net::SocketAddr>() {
            let _ = std::net::TcpStream::connect(addr);
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn good_cues() -> String {
    "##Social Cue: The speaker is juggling a sudden change.\n##Task Cue: Lay out clear steps."
        .to_string()
}

fn good_traits() -> String {
    "##Traits: highC, lowN".to_string()
}

fn good_response() -> String {
    "##Response: I will respond neatly and gently.\n##Persona Behavior Rationale: structure plus steadiness."
        .to_string()
}

#[test]
fn http_backend_produces_records_and_sends_bearer_token() {
    let server = FakeServer::start(vec![
        (200, good_cues()),
        (200, good_traits()),
        (200, good_response()),
    ]);
    let var = "PERSONA_MOE_TEST_KEY_ROUNDTRIP";
    std::env::set_var(var, "sk-fixture-0042");
    let backend = HttpBackend::new(server.config(Some(var))).expect("backend");

    let queries = vec!["Please draft a checklist for the move.".to_string()];
    let (records, stats) = synthesize_dataset(&backend, &queries, 5).expect("synth");
    assert_eq!(stats.accepted, 1);
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].response, "I will respond neatly and gently.");
    assert_eq!(records[0].social_cue, "The speaker is juggling a sudden change.");
    assert_eq!(
        records[0].traits.iter().map(|p| p.label()).collect::<Vec<_>>(),
        vec!["highC", "lowN"]
    );

    let captured = server.captured();
    assert_eq!(captured.len(), 3, "one POST per generation step");
    for c in &captured {
        assert_eq!(c.authorization.as_deref(), Some("Bearer sk-fixture-0042"));
        let body: serde_json::Value = serde_json::from_str(&c.body).expect("request body is JSON");
        assert_eq!(body["model"], "stub");
        assert!(body["prompt"].is_string() && body["seed"].is_u64());
    }

    // The credential must not leak into anything we persist.
    let dir = tempfile::tempdir().expect("tempdir");
    let jsonl = dir.path().join("http.jsonl");
    let stats_path = dir.path().join("http.stats.json");
    write_jsonl(&records, &jsonl).expect("write");
    write_stats(&stats, &stats_path).expect("write");
    for path in [&jsonl, &stats_path] {
        let text = std::fs::read_to_string(path).expect("read");
        assert!(!text.contains("sk-fixture-0042"), "credential leaked into {:?}", path);
    }
    std::env::remove_var(var);
}

#[test]
fn http_backend_retries_transient_failures_then_succeeds() {
    let server = FakeServer::start(vec![
        (500, String::new()),
        (429, String::new()),
        (200, good_cues()),
    ]);
    let backend = HttpBackend::new(server.config(None)).expect("backend");
    let cues = backend
        .detect_situation_cues("Please plan the retreat.", 1)
        .expect("third attempt succeeds");
    assert_eq!(cues.1, "Lay out clear steps.");
    assert_eq!(server.captured().len(), 3, "500 and 429 must both be retried");
}

#[test]
fn http_backend_fails_fast_on_client_errors() {
    let server = FakeServer::start(vec![(404, String::new())]);
    let backend = HttpBackend::new(server.config(None)).expect("backend");
    let err = backend.detect_situation_cues("Please plan the retreat.", 1).unwrap_err();
    assert!(matches!(err, Error::Backend(_)));
    assert_eq!(server.captured().len(), 1, "4xx responses must not be retried");
}

#[test]
fn http_backend_rejects_malformed_completions_as_parse_errors() {
    let server = FakeServer::start(vec![
        (200, "no sections at all".to_string()),
        (200, good_cues()),
        (200, "##Traits: highC, dragons".to_string()),
    ]);
    let backend = HttpBackend::new(server.config(None)).expect("backend");

    let err = backend.detect_situation_cues("Please plan the retreat.", 1).unwrap_err();
    assert!(matches!(err, Error::ParseCompletion { .. }), "got {err:?}");

    let (social, task) = backend.detect_situation_cues("Please plan the retreat.", 2).expect("cues");
    let err = backend.identify_traits(&social, &task, 2).unwrap_err();
    assert!(matches!(err, Error::ParseCompletion { .. }), "got {err:?}");
}

#[test]
fn credential_errors_name_the_variable_but_never_the_value() {
    let var = "PERSONA_MOE_TEST_KEY_SECRECY";
    std::env::set_var(var, "sk-super-secret");
    // Endpoint refuses everything; the error must echo the status, not the key.
    let server = FakeServer::start(vec![(500, String::new())]);
    let backend = HttpBackend::new(server.config(Some(var))).expect("backend");
    let err = backend.detect_situation_cues("Please plan the retreat.", 1).unwrap_err();
    let msg = format!("{err:?}");
    assert!(!msg.contains("sk-super-secret"), "credential leaked into error: {msg}");
    std::env::remove_var(var);

    let backend = HttpBackend::new(HttpConfig {
        api_key_env: Some("PERSONA_MOE_KEY_NEVER_SET".into()),
        ..HttpConfig::default()
    })
    .expect("backend");
    let err = backend.detect_situation_cues("Please plan the retreat.", 1).unwrap_err();
    let msg = format!("{err:?}");
    assert!(msg.contains("PERSONA_MOE_KEY_NEVER_SET"), "error should name the variable: {msg}");
}
