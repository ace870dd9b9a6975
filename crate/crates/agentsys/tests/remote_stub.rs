//! Loopback tests for the remote chat backend against a minimal stub
//! HTTP server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread;

use agentsys::context::Action;
use agentsys::policy::{
    BlockRole, EndpointConfig, ParsedAction, PolicyBackend, PolicyError, PolicyPrompt, Purpose,
    RemoteBackend,
};

/// Serve `responses` (status, body) pairs, one per incoming request.
fn stub_server(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let addr = listener.local_addr().expect("stub addr");
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().expect("accept");
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read until the full body arrived per content-length
            loop {
                let n = stream.read(&mut chunk).expect("read");
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|line| {
                            let (name, value) = line.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse::<usize>().ok())?
                        })
                        .unwrap_or(0);
                    if buf.len() >= header_end + 4 + content_length {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            seen.push(String::from_utf8_lossy(&buf).into_owned());
            let reason = if status == 200 { "OK" } else { "Too Many Requests" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).expect("write");
        }
        seen
    });
    (format!("http://{addr}"), handle)
}

fn prompt() -> PolicyPrompt {
    let mut p = PolicyPrompt::new(Purpose::MainStep, "system text");
    p.push(BlockRole::User, "{\"query\":\"do the task\"}".to_string());
    p
}

#[test]
fn stub_action_and_usage_mapping() {
    let body = serde_json::json!({
        "choices": [{"message": {"content": "{\"action\":\"stop\"}"}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    })
    .to_string();
    let (url, handle) = stub_server(vec![(200, body)]);
    let mut backend = RemoteBackend::new(EndpointConfig::new(&url, "stub-model"));
    let resp = backend.next(&prompt()).expect("stub call succeeds");
    assert_eq!(resp.parsed, ParsedAction::Act(Action::Stop));
    assert_eq!(resp.tokens_in, 10);
    assert_eq!(resp.tokens_out, 5);
    let seen = handle.join().unwrap();
    assert!(seen[0].contains("POST /chat/completions"));
    assert!(seen[0].contains("stub-model"));
}

#[test]
fn repeated_429_is_a_transport_failure() {
    let body = "{\"error\":\"slow down\"}".to_string();
    let (url, handle) = stub_server(vec![(429, body.clone()), (429, body)]);
    let mut backend = RemoteBackend::new(EndpointConfig::new(&url, "stub-model"));
    let err = backend.next(&prompt()).expect_err("must fail");
    assert!(matches!(err, PolicyError::Transport(_)));
    assert_eq!(handle.join().unwrap().len(), 2, "one retry after the first 429");
}

#[test]
fn prose_then_valid_json_uses_the_re_ask() {
    let prose = serde_json::json!({
        "choices": [{"message": {"content": "Sure! I think I should stop now."}}],
    })
    .to_string();
    let fixed = serde_json::json!({
        "choices": [{"message": {"content": "{\"action\":\"stop\"}"}}],
    })
    .to_string();
    let (url, handle) = stub_server(vec![(200, prose), (200, fixed)]);
    let mut backend = RemoteBackend::new(EndpointConfig::new(&url, "stub-model"));
    let resp = backend.next(&prompt()).expect("re-ask recovers");
    assert_eq!(resp.parsed, ParsedAction::Act(Action::Stop));
    let seen = handle.join().unwrap();
    assert_eq!(seen.len(), 2);
    // the corrective turn rides along on the second request
    assert!(seen[1].contains("single valid JSON object"));
}

#[test]
fn prose_twice_is_a_format_failure() {
    let prose = serde_json::json!({
        "choices": [{"message": {"content": "I would rather chat."}}],
    })
    .to_string();
    let (url, _handle) = stub_server(vec![(200, prose.clone()), (200, prose)]);
    let mut backend = RemoteBackend::new(EndpointConfig::new(&url, "stub-model"));
    let err = backend.next(&prompt()).expect_err("must fail");
    assert!(matches!(err, PolicyError::Format(_)));
}
