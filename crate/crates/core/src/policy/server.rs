//! A protocol-v1 server around any [`Policy`]. It backs the stdio stand-in
//! server of the CLI and the transport tests, and doubles as the reference
//! transcript generator for the conformance fixture.

use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use super::wire::{decode_obs, to_line, ClientMessage, ServerMessage};
use super::{Policy, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    /// Version advertised in the hello reply.
    pub advertise_version: u32,
    /// Answer each request on its own thread, so replies may overtake each
    /// other.
    pub concurrent: bool,
    /// Extra delay of `(id * 7) % jitter_ms` milliseconds per request, to
    /// force out-of-order replies in tests.
    pub jitter_ms: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            advertise_version: PROTOCOL_VERSION,
            concurrent: false,
            jitter_ms: 0,
        }
    }
}

/// Compute the reply to one request line. `None` means no reply is owed.
pub fn respond(policy: &dyn Policy, line: &str, opts: &ServeOptions) -> Option<ServerMessage> {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.trim().is_empty() {
        return None;
    }
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return Some(ServerMessage::Error {
                id: None,
                message: format!("invalid JSON: {e}"),
            })
        }
    };
    let id = value.get("id").and_then(Value::as_u64);
    let msg: ClientMessage = match serde_json::from_value(value.clone()) {
        Ok(m) => m,
        Err(e) => {
            let kind = value.get("type").and_then(Value::as_str).unwrap_or("<missing>");
            return Some(ServerMessage::Error {
                id,
                message: format!("cannot handle request of type `{kind}`: {e}"),
            });
        }
    };
    if opts.jitter_ms > 0 {
        if let Some(id) = id {
            thread::sleep(Duration::from_millis((id * 7) % opts.jitter_ms));
        }
    }
    Some(match msg {
        ClientMessage::Hello { .. } => {
            let mut session = policy.session().clone();
            session.protocol_version = opts.advertise_version;
            ServerMessage::hello(&session)
        }
        ClientMessage::Act { id, instruction, obs } => match decode_obs(&obs, 1)
            .and_then(|o| policy.act(&o, &instruction))
        {
            Ok(a) => ServerMessage::Action { id, action: a.rows() },
            Err(e) => ServerMessage::Error {
                id: Some(id),
                message: e.to_string(),
            },
        },
        ClientMessage::Introspect { id, instruction, obs } => match decode_obs(&obs, 1)
            .and_then(|o| policy.introspect(&o, &instruction))
        {
            Ok(p) => ServerMessage::introspection(id, &p),
            Err(e) => ServerMessage::Error {
                id: Some(id),
                message: e.to_string(),
            },
        },
    })
}

fn send<W: Write>(out: &Mutex<W>, msg: &ServerMessage) -> io::Result<()> {
    let mut w = out.lock().unwrap();
    w.write_all(to_line(msg).as_bytes())?;
    w.flush()
}

/// Serve requests until the reader reaches end of input.
pub fn serve<R, W>(policy: &dyn Policy, reader: R, writer: W, opts: &ServeOptions) -> io::Result<()>
where
    R: BufRead,
    W: Write + Send,
{
    let out = Mutex::new(writer);
    thread::scope(|scope| -> io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if opts.concurrent {
                let out = &out;
                scope.spawn(move || {
                    if let Some(reply) = respond(policy, &line, opts) {
                        let _ = send(out, &reply);
                    }
                });
            } else if let Some(reply) = respond(policy, &line, opts) {
                send(&out, &reply)?;
            }
        }
        Ok(())
    })
}

/// Accept one TCP connection on `listener` and serve it to completion.
pub fn serve_tcp_once(policy: &dyn Policy, listener: &TcpListener, opts: &ServeOptions) -> io::Result<()> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let reader = io::BufReader::new(stream.try_clone()?);
    serve(policy, reader, stream, opts)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::metrics::{Label, SemanticPartition};
    use crate::policy::synthetic::{SyntheticKind, SyntheticPolicy, SyntheticPolicySpec};

    fn policy() -> SyntheticPolicy {
        let part = SemanticPartition::uniform(2, 2, Label::Act).unwrap();
        let mut spec = SyntheticPolicySpec::new(SyntheticKind::RegionMeanLinear);
        spec.action_dim = 2;
        spec.weights.act = vec![1.0, 0.0];
        SyntheticPolicy::new(spec, BTreeMap::from([("front".to_string(), part)])).unwrap()
    }

    #[test]
    fn unknown_type_gets_an_error_with_its_id() {
        let r = respond(&policy(), "{\"type\":\"bogus\",\"id\":5}", &ServeOptions::default()).unwrap();
        assert!(matches!(r, ServerMessage::Error { id: Some(5), .. }));
    }

    #[test]
    fn garbage_gets_an_error_without_id() {
        let r = respond(&policy(), "{not json", &ServeOptions::default()).unwrap();
        assert!(matches!(r, ServerMessage::Error { id: None, .. }));
        assert!(respond(&policy(), "   ", &ServeOptions::default()).is_none());
    }

    #[test]
    fn serve_answers_each_line_in_order() {
        let input = "{\"type\":\"hello\",\"version\":1}\n{\"type\":\"bogus\",\"id\":1}\n";
        let mut out = Vec::new();
        serve(&policy(), input.as_bytes(), &mut out, &ServeOptions::default()).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "{\"type\":\"hello\",\"version\":1,\"action_dim\":2,\"chunk_len\":1,\"views\":[\"front\"],\"introspection\":true}"
        );
        assert!(lines[1].starts_with("{\"type\":\"error\",\"id\":1,"));
    }
}
