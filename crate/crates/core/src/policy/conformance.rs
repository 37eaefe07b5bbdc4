//! Conformance suite for protocol-v1 servers: handshake transcript, pipelined
//! act requests, introspection payload validation, and liveness after bad
//! requests.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::wire::{encode_obs, to_line, ClientMessage, ServerMessage, WireClient};
use super::{Policy, PolicyError};
use crate::iss::ActionVector;
use crate::tensor::{ImageTensor, MultiViewObservation};

/// Server hello expected from the reference server in its default
/// configuration.
pub const HELLO_FIXTURE: &str = "{\"type\":\"hello\",\"version\":1,\"action_dim\":8,\"chunk_len\":16,\"views\":[\"front\",\"overhead\",\"wrist\"],\"introspection\":true}\n";

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceOptions {
    /// Expected hello line, byte for byte. `None` skips the comparison.
    pub hello_fixture: Option<String>,
    pub n_requests: usize,
    /// Distinct observations cycled through the pipelined requests.
    pub n_distinct: usize,
    pub image_size: (usize, usize),
    pub instruction: String,
}

impl Default for ConformanceOptions {
    fn default() -> Self {
        Self {
            hello_fixture: Some(HELLO_FIXTURE.to_string()),
            n_requests: 1000,
            n_distinct: 10,
            image_size: (32, 32),
            instruction: "conformance".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, result: Result<String, String>) -> CheckResult {
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Deterministic test pattern number `i` for every view of the session.
pub fn probe_observation(views: &[String], size: (usize, usize), i: usize) -> MultiViewObservation {
    let (w, h) = size;
    let map = views
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let data = (0..w * h * 3)
                .map(|j| ((j * 31 + i * 97 + v * 53) % 256) as u8)
                .collect();
            (name.clone(), ImageTensor::from_u8(w, h, 3, data).expect("sized buffer"))
        })
        .collect::<BTreeMap<_, _>>();
    MultiViewObservation::new(map, 1).expect("nonempty views")
}

fn handshake_check(client: &WireClient, opts: &ConformanceOptions) -> Result<String, String> {
    match &opts.hello_fixture {
        Some(f) if client.hello_line() == f => Ok(format!("hello matches fixture ({} bytes)", f.len())),
        Some(f) => Err(format!(
            "hello differs from fixture\n  got:      {:?}\n  expected: {:?}",
            client.hello_line(),
            f
        )),
        None => Ok(format!("hello {:?} (no fixture)", client.hello_line())),
    }
}

fn pipelined_check(client: &WireClient, opts: &ConformanceOptions) -> Result<String, String> {
    let s = client.session().clone();
    let probes: Vec<_> = (0..opts.n_distinct.max(1))
        .map(|i| probe_observation(&s.views, opts.image_size, i))
        .collect();
    let next = AtomicUsize::new(0);
    let answers: Mutex<Vec<Option<ActionVector>>> = Mutex::new(vec![None; opts.n_requests]);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..client.pipelining_depth() {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= opts.n_requests || failure.lock().unwrap().is_some() {
                    return;
                }
                match client.act(&probes[r % probes.len()], &opts.instruction) {
                    Ok(a) if a.shape() == (s.chunk_len, s.action_dim) => answers.lock().unwrap()[r] = Some(a),
                    Ok(a) => {
                        *failure.lock().unwrap() =
                            Some(format!("request {r}: action shape {:?}, expected {:?}", a.shape(), (s.chunk_len, s.action_dim)));
                    }
                    Err(e) => *failure.lock().unwrap() = Some(format!("request {r}: {e}")),
                }
            });
        }
    });
    if let Some(f) = failure.into_inner().unwrap() {
        return Err(f);
    }
    let answers = answers.into_inner().unwrap();
    for (r, a) in answers.iter().enumerate() {
        let first = &answers[r % probes.len()];
        if a != first {
            return Err(format!(
                "request {r} answered differently from request {} on the same observation",
                r % probes.len()
            ));
        }
    }
    Ok(format!(
        "{} requests at depth {}, {} distinct observations, replies deterministic",
        opts.n_requests,
        client.pipelining_depth(),
        probes.len()
    ))
}

fn introspection_check(client: &WireClient, opts: &ConformanceOptions) -> Result<String, String> {
    let s = client.session();
    let obs = probe_observation(&s.views, opts.image_size, 0);
    match client.introspect(&obs, &opts.instruction) {
        Ok(p) => {
            if let Some(v) = p.spatial_token_map().keys().find(|v| !s.views.contains(v)) {
                return Err(format!("spatial map names unknown view {v}"));
            }
            if s.introspection {
                Ok(format!(
                    "payload valid: {} tokens, dim {}, {} spatial",
                    p.n_tokens(),
                    p.dim(),
                    p.spatial_token_count()
                ))
            } else {
                Err("server returned introspection without advertising it".into())
            }
        }
        Err(PolicyError::Server { .. }) | Err(PolicyError::Unsupported(_)) if !s.introspection => {
            Ok("not advertised; request refused with an error as expected".into())
        }
        Err(e) => Err(e.to_string()),
    }
}

fn liveness_check(client: &WireClient, opts: &ConformanceOptions) -> Result<String, String> {
    let expect_error = |label: &str, reply: Result<ServerMessage, PolicyError>, id: u64| -> Result<(), String> {
        match reply {
            Ok(ServerMessage::Error { id: Some(got), .. }) if got == id => Ok(()),
            Ok(other) => Err(format!("{label}: expected an error for request {id}, got {other:?}")),
            Err(e) => Err(format!("{label}: {e}")),
        }
    };
    let mut sent = 0u64;
    let reply = client.request_raw(|id| {
        sent = id;
        format!("{{\"type\":\"bogus\",\"id\":{id}}}\n")
    });
    expect_error("unknown type", reply, sent)?;
    let reply = client.request_raw(|id| {
        sent = id;
        format!("{{\"type\":\"act\",\"id\":{id},\"instruction\":\"x\"}}\n")
    });
    expect_error("act without obs", reply, sent)?;
    let obs = probe_observation(&client.session().views, (3, 2), 0);
    let reply = client.request_raw(|id| {
        sent = id;
        let mut wire = encode_obs(&obs);
        for img in wire.values_mut() {
            img.w += 1;
        }
        to_line(&ClientMessage::Act {
            id,
            instruction: "x".into(),
            obs: wire,
        })
    });
    expect_error("act with a truncated image", reply, sent)?;
    let good = probe_observation(&client.session().views, opts.image_size, 1);
    client
        .act(&good, &opts.instruction)
        .map_err(|e| format!("act after errors failed: {e}"))?;
    Ok("errors carried request ids and the server kept serving".into())
}

/// Run every check against a connected client.
pub fn run_conformance(client: &WireClient, opts: &ConformanceOptions) -> ConformanceReport {
    let checks = vec![
        check("handshake", handshake_check(client, opts)),
        check("pipelined_act", pipelined_check(client, opts)),
        check("introspection", introspection_check(client, opts)),
        check("error_liveness", liveness_check(client, opts)),
    ];
    ConformanceReport { checks }
}
