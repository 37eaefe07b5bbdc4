use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use causal_probe::metrics::SemanticPartition;
use causal_probe::policy::conformance::{probe_observation, run_conformance, ConformanceOptions};
use causal_probe::policy::server::{serve_tcp_once, ServeOptions};
use causal_probe::policy::{
    handshake, ClientOptions, Endpoint, Policy, PolicyError, SyntheticKind, SyntheticPolicy, SyntheticPolicySpec,
    TransportKind, WireClient,
};
use causal_probe::scene::aligned_weights;

const VIEWS: [&str; 3] = ["front", "overhead", "wrist"];

fn reference_policy(size: usize) -> Arc<SyntheticPolicy> {
    let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
    spec.chunk_len = 16;
    spec.weights = aligned_weights(8);
    spec.noise_std = 0.1;
    let parts = VIEWS
        .iter()
        .map(|v| {
            let labels = (0..size * size)
                .map(|i| causal_probe::metrics::Label::ALL[(i / 7) % 3])
                .collect();
            (v.to_string(), SemanticPartition::new(size, size, labels).unwrap())
        })
        .collect::<BTreeMap<_, _>>();
    Arc::new(SyntheticPolicy::new(spec, parts).unwrap())
}

/// Serve `policy` on a fresh loopback port; returns the address.
fn spawn_server(policy: Arc<SyntheticPolicy>, opts: ServeOptions) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let _ = serve_tcp_once(policy.as_ref(), &listener, &opts);
    });
    addr
}

/// A hand-driven peer: `script` receives every request line and returns the
/// raw reply, if any. Returning `Err(())` drops the connection.
fn spawn_scripted<F>(mut script: F) -> String
where
    F: FnMut(&str) -> Result<Option<String>, ()> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { return };
            match script(&line) {
                Ok(Some(reply)) => {
                    if out.write_all(reply.as_bytes()).is_err() {
                        return;
                    }
                }
                Ok(None) => {}
                Err(()) => return,
            }
        }
    });
    addr
}

const HELLO: &str = "{\"type\":\"hello\",\"version\":1,\"action_dim\":2,\"chunk_len\":1,\"views\":[\"front\"],\"introspection\":false}\n";

#[test]
fn tcp_actions_match_in_process_policy() {
    let policy = reference_policy(16);
    let addr = spawn_server(Arc::clone(&policy), ServeOptions::default());
    let handle = handshake(&Endpoint::Tcp { addr }, &ClientOptions::default()).unwrap();
    assert_eq!(handle.transport(), TransportKind::Tcp);
    assert_eq!(handle.session().action_dim, 8);
    assert_eq!(handle.session().chunk_len, 16);
    for i in 0..5 {
        let obs = probe_observation(&handle.session().views, (16, 16), i);
        let remote = handle.act(&obs, "go").unwrap();
        let local = policy.act(&obs, "go").unwrap();
        assert_eq!(remote, local, "probe {i}");
    }
    let obs = probe_observation(&handle.session().views, (16, 16), 0);
    let remote = handle.introspect(&obs, "go").unwrap();
    let local = policy.introspect(&obs, "go").unwrap();
    assert_eq!(remote.attention(), local.attention());
    assert_eq!(remote.embeddings(), local.embeddings());
    assert_eq!(remote.spatial_token_map(), local.spatial_token_map());
}

#[test]
fn out_of_order_replies_reach_their_requests() {
    let policy = reference_policy(16);
    let addr = spawn_server(
        Arc::clone(&policy),
        ServeOptions {
            concurrent: true,
            jitter_ms: 23,
            ..ServeOptions::default()
        },
    );
    let client = WireClient::connect_tcp(&addr, &ClientOptions::default()).unwrap();
    let views = client.session().views.clone();
    thread::scope(|s| {
        for worker in 0..8 {
            let (client, policy, views) = (&client, &policy, &views);
            s.spawn(move || {
                for j in 0..12 {
                    let obs = probe_observation(views, (16, 16), worker * 100 + j);
                    assert_eq!(client.act(&obs, "x").unwrap(), policy.act(&obs, "x").unwrap());
                }
            });
        }
    });
}

#[test]
fn version_mismatch_is_refused() {
    let addr = spawn_server(
        reference_policy(16),
        ServeOptions {
            advertise_version: 2,
            ..ServeOptions::default()
        },
    );
    match WireClient::connect_tcp(&addr, &ClientOptions::default()) {
        Err(PolicyError::VersionMismatch { client: 1, server: 2 }) => {}
        other => panic!("expected a version mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn silent_server_times_out_the_handshake() {
    let addr = spawn_scripted(|_| Ok(None));
    let opts = ClientOptions {
        handshake_timeout: Duration::from_millis(200),
        ..ClientOptions::default()
    };
    let t0 = Instant::now();
    match WireClient::connect_tcp(&addr, &opts) {
        Err(PolicyError::Timeout { what, .. }) => assert_eq!(what, "hello"),
        other => panic!("expected a timeout, got {:?}", other.map(|_| ())),
    }
    assert!(t0.elapsed() < Duration::from_secs(5));
}

#[test]
fn unanswered_act_times_out() {
    let addr = spawn_scripted(|line| Ok(line.contains("\"hello\"").then(|| HELLO.to_string())));
    let opts = ClientOptions {
        act_timeout: Duration::from_millis(200),
        ..ClientOptions::default()
    };
    let client = WireClient::connect_tcp(&addr, &opts).unwrap();
    let obs = probe_observation(&client.session().views, (4, 4), 0);
    match client.act(&obs, "x") {
        Err(PolicyError::Timeout { .. }) => {}
        other => panic!("expected a timeout, got {other:?}"),
    }
}

#[test]
fn dropped_connection_fails_fast_afterwards() {
    let addr = spawn_scripted(|line| {
        if line.contains("\"hello\"") {
            Ok(Some(HELLO.to_string()))
        } else {
            Err(())
        }
    });
    let client = WireClient::connect_tcp(&addr, &ClientOptions::default()).unwrap();
    let obs = probe_observation(&client.session().views, (4, 4), 0);
    let first = client.act(&obs, "x").unwrap_err();
    assert!(first.is_transport(), "{first:?}");
    assert!(client.is_closed());
    let t0 = Instant::now();
    for _ in 0..3 {
        let again = client.act(&obs, "x").unwrap_err();
        assert!(matches!(again, PolicyError::Closed(_)), "{again:?}");
    }
    assert!(t0.elapsed() < Duration::from_millis(500));
}

#[test]
fn server_error_carries_the_request_id() {
    let addr = spawn_scripted(|line| {
        if line.contains("\"hello\"") {
            return Ok(Some(HELLO.to_string()));
        }
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        Ok(Some(format!("{{\"type\":\"error\",\"id\":{},\"message\":\"model exploded\"}}\n", v["id"])))
    });
    let client = WireClient::connect_tcp(&addr, &ClientOptions::default()).unwrap();
    let obs = probe_observation(&client.session().views, (4, 4), 0);
    match client.act(&obs, "x") {
        Err(PolicyError::Server { id: Some(_), message }) => assert!(message.contains("model exploded")),
        other => panic!("expected a server error, got {other:?}"),
    }
    assert!(!client.is_closed());
}

#[test]
fn wrong_action_shape_is_malformed() {
    let addr = spawn_scripted(|line| {
        if line.contains("\"hello\"") {
            return Ok(Some(HELLO.to_string()));
        }
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        Ok(Some(format!("{{\"type\":\"action\",\"id\":{},\"action\":[[1.0,2.0,3.0]]}}\n", v["id"])))
    });
    let handle = handshake(&Endpoint::parse(&format!("tcp:{addr}")).unwrap(), &ClientOptions::default()).unwrap();
    let obs = probe_observation(&handle.session().views, (4, 4), 0);
    assert!(handle.act(&obs, "x").is_err());
}

#[test]
fn reference_server_passes_conformance() {
    let addr = spawn_server(reference_policy(32), ServeOptions::default());
    let client = WireClient::connect_tcp(&addr, &ClientOptions::default()).unwrap();
    let report = run_conformance(&client, &ConformanceOptions::default());
    for c in &report.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(report.passed());
}

#[test]
fn conformance_flags_a_wrong_hello() {
    let addr = spawn_server(
        reference_policy(32),
        ServeOptions {
            concurrent: true,
            ..ServeOptions::default()
        },
    );
    let client = WireClient::connect_tcp(&addr, &ClientOptions::default()).unwrap();
    let opts = ConformanceOptions {
        hello_fixture: Some(HELLO.to_string()),
        n_requests: 50,
        ..ConformanceOptions::default()
    };
    let report = run_conformance(&client, &opts);
    assert!(!report.passed());
    assert!(!report.checks[0].passed);
    assert!(report.checks[1..].iter().all(|c| c.passed), "{:?}", report.checks);
}

#[test]
fn connection_refused_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let err = WireClient::connect_tcp(&format!("127.0.0.1:{port}"), &ClientOptions::default())
        .map(|_| ())
        .unwrap_err();
    assert!(err.is_transport(), "{err:?}");
}
