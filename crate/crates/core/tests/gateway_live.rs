//! Live backend against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;
use urbanplan::gateway::{ChatRequest, Gateway, GatewayError, LiveBackend, RetryPolicy};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: String,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = v.trim().to_string(),
                    _ => {}
                }
            }
            let mut raw = vec![0; len];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or("").to_string(),
                auth,
                body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

fn gateway(base: &str, slept: Arc<Mutex<Vec<Duration>>>) -> Gateway {
    let mut g = Gateway::new(RetryPolicy::default(), 2).with_sleeper(move |d| slept.lock().unwrap().push(d));
    g.register("live", LiveBackend::new(base, "secret", "test-model", Duration::from_secs(5)));
    g
}

#[test]
fn posts_messages_and_returns_first_choice() {
    let (base, seen) = server(vec![(200, ok_body("[{\"task\": \"map_mapping\", \"id\": 0, \"dep\": [-1]}]"))]);
    let g = gateway(&base, Arc::default());
    let r = g.complete(&ChatRequest::user("live", "hello").with_temperature(0.2)).unwrap();
    assert!(r.content.starts_with("[{"));
    assert_eq!(r.attempt_count, 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth, "Bearer secret");
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["messages"][0]["role"], "user");
    assert_eq!(seen[0].body["messages"][0]["content"], "hello");
    assert_eq!(seen[0].body["temperature"], 0.2);
}

#[test]
fn retries_5xx_with_backoff() {
    let (base, seen) = server(vec![(503, "{}".into()), (500, "{}".into()), (200, ok_body("fine"))]);
    let slept = Arc::new(Mutex::new(Vec::new()));
    let r = gateway(&base, slept.clone()).complete(&ChatRequest::user("live", "x")).unwrap();
    assert_eq!(r.content, "fine");
    assert_eq!(r.attempt_count, 3);
    assert_eq!(r.backoff_ms, vec![500, 1000]);
    assert_eq!(*slept.lock().unwrap(), vec![Duration::from_millis(500), Duration::from_millis(1000)]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_three_retries() {
    let (base, seen) = server(vec![(500, "{}".into()); 4]);
    match gateway(&base, Arc::default()).complete(&ChatRequest::user("live", "x")) {
        Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn auth_and_client_errors_are_not_retried() {
    let (base, seen) = server(vec![(401, "{}".into())]);
    match gateway(&base, Arc::default()).complete(&ChatRequest::user("live", "x")) {
        Err(GatewayError::AuthError { status: 401, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);

    let (base, seen) = server(vec![(422, "{\"error\": \"bad\"}".into())]);
    match gateway(&base, Arc::default()).complete(&ChatRequest::user("live", "x")) {
        Err(GatewayError::Rejected { status: 422, body, .. }) => assert!(body.contains("bad")),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let g = gateway(&format!("http://127.0.0.1:{port}"), Arc::default());
    assert!(matches!(g.complete(&ChatRequest::user("live", "x")), Err(GatewayError::BackendUnavailable { attempts: 4, .. })));
}
