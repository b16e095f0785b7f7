//! The NDJSON logit protocol end to end over loopback TCP.

mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use stylesteer::protocol::{serve, serve_tcp, Endpoint, RemoteProvider};
use stylesteer::steering::Retention;
use stylesteer::tokenizer::{load_external_vocab, parse_external_vocab};
use stylesteer::{decode, Error, LogitProvider, SteeringConfig, UniformProvider};

use common::{setup, Register};

/// Serves `provider` on an ephemeral port for the rest of the test process.
fn spawn_server(provider: Box<dyn LogitProvider>, name: &'static str) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || serve_tcp(listener, provider.as_ref(), name));
    Endpoint::Tcp(addr)
}

/// A one-connection server whose replies come from `reply(request_line)`.
fn spawn_scripted(mut reply: impl FnMut(&str) -> Option<String> + Send + 'static) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let mut line = String::new();
        while reader.read_line(&mut line).unwrap_or(0) > 0 {
            match reply(line.trim()) {
                Some(out) => {
                    if writeln!(writer, "{out}").is_err() {
                        return;
                    }
                }
                None => return,
            }
            line.clear();
        }
    });
    Endpoint::Tcp(addr)
}

fn hello_for(vocab_size: usize, fp: &str) -> String {
    format!(r#"{{"vocab_size":{vocab_size},"fingerprint":"{fp}","name":"scripted"}}"#)
}

fn request_id(line: &str) -> u64 {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["id"].as_u64().unwrap_or(0)
}

#[test]
fn remote_decoding_matches_in_process() {
    let s = setup(Register::Chivalric, 6000);
    let endpoint = spawn_server(Box::new(s.base.clone()), "ref");
    let mut remote = RemoteProvider::connect(&endpoint, &s.vocab).unwrap();
    assert_eq!(remote.descriptor().name, "ref");
    let mut local = s.base.clone();
    let prompt = s.vocab.tokenize("the knight rode to the city");
    for mode in ["greedy", "top-p"] {
        for lambda in [0.0, 0.3, 1.0] {
            let cfg = SteeringConfig {
                lambda,
                mode: mode.into(),
                max_new_tokens: 24,
                seed: 9,
                retention: Retention::Full,
                ..Default::default()
            };
            let a = decode(&mut local, Some(&s.prior), &prompt, &cfg).unwrap();
            let b = decode(&mut remote, Some(&s.prior), &prompt, &cfg).unwrap();
            assert_eq!(a.generated, b.generated, "{mode} λ={lambda}");
            // Logits survive the JSON round trip bit for bit.
            assert_eq!(a.steps, b.steps);
        }
    }
}

#[test]
fn fork_opens_an_independent_connection() {
    let s = setup(Register::Newswire, 3000);
    let endpoint = spawn_server(Box::new(s.base.clone()), "ref");
    let mut first = RemoteProvider::connect(&endpoint, &s.vocab).unwrap();
    let mut second = first.fork().unwrap();
    let ctx = s.vocab.tokenize("the market");
    let a = first.next_logits(&ctx).unwrap();
    let b = second.next_logits(&ctx).unwrap();
    assert_eq!(a, b);
}

#[test]
fn short_logit_vector_is_a_protocol_error() {
    let vocab = parse_external_vocab("a\nb\nc\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let v = vocab.len();
    let endpoint = spawn_scripted(move |line| {
        if line.contains("hello") {
            return Some(hello_for(v, &fp));
        }
        let logits = vec!["0.0"; v - 1].join(",");
        Some(format!(r#"{{"id":{},"logits":[{logits}]}}"#, request_id(line)))
    });
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    assert!(matches!(remote.next_logits(&[2]), Err(Error::Protocol(_))));
}

#[test]
fn non_finite_logits_are_rejected() {
    let vocab = parse_external_vocab("a\nb\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let endpoint = spawn_scripted(move |line| {
        if line.contains("hello") {
            return Some(hello_for(4, &fp));
        }
        // JSON has no NaN; a null slot stands in for one.
        Some(format!(r#"{{"id":{},"logits":[0.0,null,0.0,0.0]}}"#, request_id(line)))
    });
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    assert!(matches!(remote.next_logits(&[2]), Err(Error::Protocol(_))));
}

#[test]
fn fingerprint_mismatch_fails_the_handshake() {
    let ours = parse_external_vocab("a\nb\nc\n").unwrap();
    let theirs = parse_external_vocab("a\nc\nb\n").unwrap();
    assert_eq!(ours.len(), theirs.len());
    let endpoint = spawn_server(Box::new(UniformProvider::new(&theirs)), "uniform");
    match RemoteProvider::connect(&endpoint, &ours) {
        Err(Error::FingerprintMismatch { expected, found }) => {
            assert_eq!(expected, ours.fingerprint().to_hex());
            assert_eq!(found, theirs.fingerprint().to_hex());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake should fail"),
    }
}

#[test]
fn vocab_size_mismatch_fails_the_handshake() {
    let vocab = parse_external_vocab("a\nb\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let endpoint = spawn_scripted(move |_| Some(hello_for(5, &fp)));
    assert!(matches!(RemoteProvider::connect(&endpoint, &vocab), Err(Error::Protocol(_))));
}

#[test]
fn mismatched_response_id_is_a_protocol_error() {
    let vocab = parse_external_vocab("a\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let endpoint = spawn_scripted(move |line| {
        if line.contains("hello") {
            return Some(hello_for(3, &fp));
        }
        Some(format!(r#"{{"id":{},"logits":[0.0,0.0,0.0]}}"#, request_id(line) + 1))
    });
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    assert!(matches!(remote.next_logits(&[2]), Err(Error::Protocol(_))));
}

#[test]
fn server_error_reply_surfaces_as_remote_error() {
    let vocab = parse_external_vocab("a\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let endpoint = spawn_scripted(move |line| {
        if line.contains("hello") {
            return Some(hello_for(3, &fp));
        }
        Some(format!(r#"{{"id":{},"error":"out of memory"}}"#, request_id(line)))
    });
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    match remote.next_logits(&[2]) {
        Err(Error::Remote(msg)) => assert_eq!(msg, "out of memory"),
        other => panic!("expected remote error, got {other:?}"),
    }
}

#[test]
fn dropped_connection_yields_a_partial_record() {
    let vocab = parse_external_vocab("a\nb\n").unwrap();
    let fp = vocab.fingerprint().to_hex();
    let mut served = 0;
    let endpoint = spawn_scripted(move |line| {
        if line.contains("hello") {
            return Some(hello_for(4, &fp));
        }
        served += 1;
        (served <= 3).then(|| format!(r#"{{"id":{},"logits":[-9.0,-9.0,1.0,0.0]}}"#, request_id(line)))
    });
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    let cfg = SteeringConfig { max_new_tokens: 10, ..Default::default() };
    let rec = decode(&mut remote, None, &[2], &cfg).unwrap();
    assert_eq!(rec.generated, vec![2, 2, 2]);
    assert!(rec.is_partial());
}

#[test]
fn serve_answers_hello_logits_and_bad_contexts() {
    let vocab = parse_external_vocab("x\ny\n").unwrap();
    let mut provider = UniformProvider::new(&vocab);
    let input = b"{\"op\":\"hello\"}\n{\"id\":4,\"op\":\"logits\",\"context\":[2,3]}\n{\"id\":5,\"op\":\"logits\",\"context\":[99]}\n";
    let mut out = Vec::new();
    serve(&mut provider, "u", &input[..], &mut out).unwrap();
    let lines: Vec<serde_json::Value> =
        out.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["vocab_size"], 4);
    assert_eq!(lines[0]["fingerprint"], vocab.fingerprint().to_hex());
    assert_eq!(lines[1]["id"], 4);
    assert_eq!(lines[1]["logits"].as_array().unwrap().len(), 4);
    assert_eq!(lines[2]["id"], 5);
    assert!(lines[2]["error"].is_string());
}

#[test]
fn malformed_request_gets_error_and_close() {
    let vocab = parse_external_vocab("x\n").unwrap();
    let mut provider = UniformProvider::new(&vocab);
    let input = b"{not json\n{\"op\":\"hello\"}\n";
    let mut out = Vec::new();
    serve(&mut provider, "u", &input[..], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["id"], 0);
    assert!(v["error"].as_str().unwrap().contains("malformed"));
}

#[test]
fn large_external_vocabulary_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let mut f = std::fs::File::create(&path).unwrap();
    for i in 0..31_998 {
        writeln!(f, "tok{i:05}").unwrap();
    }
    drop(f);
    let vocab = load_external_vocab(&path).unwrap();
    assert_eq!(vocab.len(), 32_000);
    assert_eq!(vocab.id("tok00000"), Some(2));
    assert_eq!(vocab.tokenize("tok31997 zz"), vec![31_999, 1, 1]);

    let endpoint = spawn_server(Box::new(UniformProvider::new(&vocab)), "wide");
    let mut remote = RemoteProvider::connect(&endpoint, &vocab).unwrap();
    assert_eq!(remote.descriptor().vocab_size, 32_000);
    for step in 0..20u32 {
        let ctx: Vec<u32> = (0..=step).map(|i| 2 + i * 1000).collect();
        let l = remote.next_logits(&ctx).unwrap();
        assert_eq!(l.values.len(), 32_000);
        assert_eq!(l.step, ctx.len());
    }
}

#[test]
fn raw_client_can_talk_to_the_server() {
    let vocab = parse_external_vocab("p\nq\n").unwrap();
    let Endpoint::Tcp(addr) = spawn_server(Box::new(UniformProvider::new(&vocab)), "uniform") else { unreachable!() };
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writeln!(writer, r#"{{"op":"hello","id":0}}"#).unwrap();
    writeln!(writer, r#"{{"id":1,"op":"logits","context":[]}}"#).unwrap();
    let mut hello = String::new();
    reader.read_line(&mut hello).unwrap();
    assert!(hello.contains(r#""name":"uniform""#));
    let mut logits = String::new();
    reader.read_line(&mut logits).unwrap();
    assert_eq!(logits.trim(), r#"{"id":1,"logits":[0.0,0.0,0.0,0.0]}"#);
}
