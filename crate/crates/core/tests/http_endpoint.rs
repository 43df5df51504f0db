use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use isostory::llm::{plan_with_llm, HttpEndpoint, DEFAULT_TEMPLATE};
use isostory::Error;

struct Captured {
    headers: Vec<String>,
    body: String,
}

/// Serves exactly one request with the given status line and body.
fn serve_once(status: &'static str, reply: &'static str, delay: Duration) -> (String, thread::JoinHandle<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/plan", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut headers = Vec::new();
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end().to_string();
            if line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            headers.push(line);
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body).unwrap();
        thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        );
        Captured {
            headers,
            body: String::from_utf8(body).unwrap(),
        }
    });
    (url, handle)
}

const REPLY: &str = r#"{"characters":[{"id":3,"name":"Ana","prompt":"a tall woman in a green coat"}],
"scenes":[{"prompt":"Ana opens the door","present":[3],"new":[3],"old":[]},
{"prompt":"Ana reads by the window","present":[3],"new":[],"old":[3]}]}"#;

#[test]
fn posts_request_and_parses_plan() {
    let (url, server) = serve_once("200 OK", REPLY, Duration::ZERO);
    let endpoint = HttpEndpoint::new(url, Some("secret".into()), Duration::from_secs(10)).unwrap();
    let plan = plan_with_llm("Ana has a quiet day", &endpoint, DEFAULT_TEMPLATE).unwrap();
    assert_eq!(plan.characters.len(), 1);
    assert_eq!(plan.characters[0].id, 0);
    assert_eq!(plan.scenes[1].old.iter().copied().collect::<Vec<_>>(), vec![0]);

    let seen = server.join().unwrap();
    assert!(seen.headers[0].starts_with("POST /plan"));
    assert!(seen
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret")));
    let sent: serde_json::Value = serde_json::from_str(&seen.body).unwrap();
    assert_eq!(sent["storyline"], "Ana has a quiet day");
    assert!(sent["instructions"].as_str().unwrap().contains("Ana has a quiet day"));
    assert!(sent["response_schema"].is_object());
}

#[test]
fn error_status_is_an_endpoint_error() {
    let (url, server) = serve_once("503 Service Unavailable", "busy", Duration::ZERO);
    let endpoint = HttpEndpoint::new(url, None, Duration::from_secs(10)).unwrap();
    let err = plan_with_llm("x", &endpoint, DEFAULT_TEMPLATE).unwrap_err();
    assert!(
        matches!(&err, Error::Endpoint(m) if m.contains("503") && m.contains("busy")),
        "{err}"
    );
    server.join().unwrap();
}

#[test]
fn slow_endpoint_times_out() {
    let (url, server) = serve_once("200 OK", REPLY, Duration::from_millis(1500));
    let endpoint = HttpEndpoint::new(url, None, Duration::from_millis(200)).unwrap();
    let err = plan_with_llm("x", &endpoint, DEFAULT_TEMPLATE).unwrap_err();
    assert!(matches!(err, Error::Endpoint(_)), "{err}");
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_fails_cleanly() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = HttpEndpoint::new(format!("http://127.0.0.1:{port}/"), None, Duration::from_secs(2)).unwrap();
    assert!(matches!(
        plan_with_llm("x", &endpoint, DEFAULT_TEMPLATE),
        Err(Error::Endpoint(_))
    ));
}
