//! The HTTP generator client against a local one-shot server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use diatool::augment::{derive_type2, stratify, AugmentError, AugmentationPlan, HttpGenerator, LanguagePack, Stratum};
use diatool::corpus::message_json;
use diatool::dialogue::{state_string, Trajectory};
use diatool::synth::{self, SeedCorpusConfig};

fn easy_seed() -> Trajectory {
    synth::seed_corpus(&SeedCorpusConfig { seed: 42, n_easy: 4, n_hard: 0 })
        .into_iter()
        .find(|s| stratify(s) == Stratum::Easy)
        .expect("an easy seed")
}

/// Serves `responses` in order, one connection each; returns the request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<Value>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(serde_json::from_slice(&buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn generator_output_is_used_after_a_retry() {
    let seed = easy_seed();
    let lang = LanguagePack::default();
    let field = seed.tools[0].required[0].clone();
    let plan = AugmentationPlan::easy(field.clone());
    let expected = derive_type2(&seed, &plan, None, &lang).unwrap();
    let reply = json!({ "messages": expected.messages.iter().map(message_json).collect::<Vec<_>>() }).to_string();

    let (url, server) = serve(vec![(500, "{}".into()), (200, reply)]);
    let client = HttpGenerator::new(url, Duration::from_secs(5), 1);
    let got = derive_type2(&seed, &plan, Some(&client), &lang).unwrap();
    assert_eq!(got, expected);
    assert_eq!(state_string(&got).unwrap(), "1→2→3→4→5");

    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 2);
    assert!(bodies[1]["prompt"].as_str().unwrap().contains(&field));
    assert_eq!(bodies[1]["source"]["messages"][0]["role"], "user");
}

#[test]
fn invalid_generator_output_is_rejected() {
    let seed = easy_seed();
    let plan = AugmentationPlan::easy(seed.tools[0].required[0].clone());
    // Echoing the seed does not hide the field.
    let reply = json!({ "messages": seed.messages.iter().map(message_json).collect::<Vec<_>>() }).to_string();
    let (url, server) = serve(vec![(200, reply)]);
    let client = HttpGenerator::new(url, Duration::from_secs(5), 0);
    let err = derive_type2(&seed, &plan, Some(&client), &LanguagePack::default()).unwrap_err();
    assert!(matches!(err, AugmentError::GeneratorRejected(_)), "{err:?}");
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = HttpGenerator::new(format!("http://127.0.0.1:{port}/"), Duration::from_secs(2), 2);
    let seed = easy_seed();
    let plan = AugmentationPlan::easy(seed.tools[0].required[0].clone());
    let err = derive_type2(&seed, &plan, Some(&client), &LanguagePack::default()).unwrap_err();
    assert!(matches!(err, AugmentError::GeneratorTransport(_)), "{err:?}");
}
