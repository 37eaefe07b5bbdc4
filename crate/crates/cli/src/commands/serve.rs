use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::Path;

use anyhow::{Context, Result};
use causal_probe::policy::conformance::{run_conformance, ConformanceOptions, ConformanceReport};
use causal_probe::policy::server::{serve, serve_tcp_once, ServeOptions};
use causal_probe::policy::{ClientOptions, Endpoint, WireClient};

use crate::connect::SynthPolicyFile;
use crate::exit::validation;

pub struct ConformanceArgs<'a> {
    pub endpoint: &'a str,
    /// Expected hello line; `None` uses the built-in fixture.
    pub fixture: Option<&'a Path>,
    pub skip_fixture: bool,
    pub requests: usize,
}

/// Connect to a policy server and run the protocol checks against it.
pub fn conformance(args: &ConformanceArgs) -> Result<ConformanceReport> {
    let endpoint = Endpoint::parse(args.endpoint).map_err(|e| validation(e.to_string()))?;
    let opts = ClientOptions::default();
    let client = match &endpoint {
        Endpoint::Stdio { program, args } => WireClient::spawn_stdio(program, args, &opts),
        Endpoint::Tcp { addr } => WireClient::connect_tcp(addr, &opts),
    }
    .with_context(|| format!("connecting to {}", args.endpoint))?;
    let mut copts = ConformanceOptions {
        n_requests: args.requests,
        ..ConformanceOptions::default()
    };
    if args.skip_fixture {
        copts.hello_fixture = None;
    } else if let Some(p) = args.fixture {
        let text = std::fs::read_to_string(p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
        copts.hello_fixture = Some(if text.ends_with('\n') { text } else { text + "\n" });
    }
    Ok(run_conformance(&client, &copts))
}

/// Serve a synthetic policy file on stdio, or on one TCP connection.
pub fn serve_synth(spec: &Path, tcp: Option<&str>, opts: &ServeOptions) -> Result<()> {
    let file = SynthPolicyFile::load(spec)?;
    let handle = file.build(spec.parent().unwrap_or(Path::new(".")))?;
    let policy = handle.policy().as_ref();
    match tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp_once(policy, &listener, opts)?;
        }
        None => serve(policy, BufReader::new(io::stdin().lock()), io::stdout(), opts)?,
    }
    Ok(())
}
