//! The policy abstraction: anything that maps a multi-view observation and an
//! instruction to an action, reached in-process, over a child's stdio, or over
//! TCP.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::IntrospectionPayload;
use crate::iss::ActionVector;
use crate::tensor::MultiViewObservation;

pub mod conformance;
pub mod server;
pub mod synthetic;
pub mod wire;

pub use synthetic::{
    synth_policy, RegionWeights, SyntheticKind, SyntheticPolicy, SyntheticPolicySpec, TokenLinearPolicy,
};
pub use wire::{ClientOptions, WireClient};

/// Protocol version spoken by this client.
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Error)]
pub enum PolicyError {
    /// The connection failed. Retrying on a fresh session may succeed.
    #[error("transport failure{}: {message}", fmt_id(.id))]
    Transport { id: Option<u64>, message: String },

    /// The server answered this request with an error payload.
    #[error("policy error{}: {message}", fmt_id(.id))]
    Server { id: Option<u64>, message: String },

    #[error("protocol version mismatch: client speaks {client}, server answered {server}")]
    VersionMismatch { client: u32, server: u32 },

    #[error("timed out after {after:?} waiting for {what}")]
    Timeout { what: String, after: Duration },

    #[error("malformed message: {0}")]
    Malformed(String),

    /// The session does not offer this capability.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An earlier transport error closed the session.
    #[error("session closed: {0}")]
    Closed(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

fn fmt_id(id: &Option<u64>) -> String {
    id.map(|i| format!(" (request {i})")).unwrap_or_default()
}

impl PolicyError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PolicyError::Transport { .. } | PolicyError::Timeout { .. })
    }

    /// Whether this is a transport-level failure (as opposed to a bad reply
    /// or a bad request).
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            PolicyError::Transport { .. } | PolicyError::Timeout { .. } | PolicyError::Closed(_)
        )
    }
}

/// Parameters pinned by the handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub protocol_version: u32,
    pub action_dim: usize,
    pub chunk_len: usize,
    pub views: Vec<String>,
    pub introspection: bool,
}

impl Session {
    /// Check that an observation carries exactly the negotiated views.
    pub fn check_views(&self, obs: &MultiViewObservation) -> Result<(), PolicyError> {
        let names = obs.view_names();
        let mut expected = self.views.clone();
        expected.sort();
        if names != expected {
            return Err(PolicyError::InvalidRequest(format!(
                "observation views {names:?} do not match session views {:?}",
                self.views
            )));
        }
        Ok(())
    }

    pub fn check_action(&self, action: &ActionVector) -> Result<(), PolicyError> {
        if action.shape() != (self.chunk_len, self.action_dim) {
            return Err(PolicyError::Malformed(format!(
                "action shape {:?}, session expects {:?}",
                action.shape(),
                (self.chunk_len, self.action_dim)
            )));
        }
        Ok(())
    }
}

/// A queryable policy. Implementations must be safe to call from several
/// threads at once.
pub trait Policy: Send + Sync {
    fn session(&self) -> &Session;

    /// The policy's point prediction for `obs`.
    fn act(&self, obs: &MultiViewObservation, instruction: &str) -> Result<ActionVector, PolicyError>;

    fn introspect(
        &self,
        _obs: &MultiViewObservation,
        _instruction: &str,
    ) -> Result<IntrospectionPayload, PolicyError> {
        Err(PolicyError::Unsupported("introspection".into()))
    }

    /// Maximum useful number of concurrent `act` calls.
    fn pipelining_depth(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Synthetic,
    Stdio,
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Synthetic => "synthetic",
            TransportKind::Stdio => "stdio",
            TransportKind::Tcp => "tcp",
        })
    }
}

/// A policy plus the transport it is reached through. Cheap to clone and share.
#[derive(Clone)]
pub struct PolicyHandle {
    transport: TransportKind,
    inner: Arc<dyn Policy>,
}

impl fmt::Debug for PolicyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyHandle")
            .field("transport", &self.transport)
            .field("session", self.inner.session())
            .finish()
    }
}

impl PolicyHandle {
    pub fn new(transport: TransportKind, policy: Arc<dyn Policy>) -> Self {
        Self {
            transport,
            inner: policy,
        }
    }

    pub fn transport(&self) -> TransportKind {
        self.transport
    }

    pub fn session(&self) -> &Session {
        self.inner.session()
    }

    pub fn pipelining_depth(&self) -> usize {
        self.inner.pipelining_depth().max(1)
    }

    pub fn policy(&self) -> &Arc<dyn Policy> {
        &self.inner
    }

    pub fn act(&self, obs: &MultiViewObservation, instruction: &str) -> Result<ActionVector, PolicyError> {
        self.inner.session().check_views(obs)?;
        let action = self.inner.act(obs, instruction)?;
        self.inner.session().check_action(&action)?;
        Ok(action)
    }

    pub fn introspect(
        &self,
        obs: &MultiViewObservation,
        instruction: &str,
    ) -> Result<IntrospectionPayload, PolicyError> {
        if !self.inner.session().introspection {
            return Err(PolicyError::Unsupported(
                "session did not advertise introspection".into(),
            ));
        }
        self.inner.session().check_views(obs)?;
        self.inner.introspect(obs, instruction)
    }
}

/// Where to find a policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    /// Spawn `program args...` and speak the wire protocol over its stdio.
    Stdio { program: String, args: Vec<String> },
    /// Connect to `host:port`.
    Tcp { addr: String },
}

impl Endpoint {
    /// Parse `stdio:<command line>` or `tcp:<host:port>`. The command line is
    /// split on whitespace; quote-free commands only.
    pub fn parse(s: &str) -> Result<Self, PolicyError> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| PolicyError::InvalidRequest("empty stdio command".into()))?;
            Ok(Endpoint::Stdio {
                program,
                args: parts.collect(),
            })
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(PolicyError::InvalidRequest("empty tcp address".into()));
            }
            Ok(Endpoint::Tcp { addr: addr.to_string() })
        } else {
            Err(PolicyError::InvalidRequest(format!(
                "unknown endpoint `{s}`; expected stdio:<cmd> or tcp:<host:port>"
            )))
        }
    }
}

/// Open a wire session with an external policy.
pub fn handshake(endpoint: &Endpoint, opts: &ClientOptions) -> Result<PolicyHandle, PolicyError> {
    let (kind, client) = match endpoint {
        Endpoint::Stdio { program, args } => (TransportKind::Stdio, WireClient::spawn_stdio(program, args, opts)?),
        Endpoint::Tcp { addr } => (TransportKind::Tcp, WireClient::connect_tcp(addr, opts)?),
    };
    Ok(PolicyHandle::new(kind, Arc::new(client)))
}
