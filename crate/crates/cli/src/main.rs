use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use causal_probe::policy::server::ServeOptions;
use causal_probe::policy::PROTOCOL_VERSION;
use clap::{Parser, Subcommand};

use causal_probe_cli::commands::{bench, correlate, fidelity, iss, robustness, serve, sweep, synth};
use causal_probe_cli::exit::{self, validation};
use causal_probe_cli::run::{Overrides, RunContext};

#[derive(Parser)]
#[command(name = "causal-probe", version, about = "Interventional saliency for action-predicting policies")]
struct Cli {
    /// Run manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Master seed; overrides the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// stdio:<cmd>, tcp:<host:port> or synth:<policy.json>; overrides the manifest.
    #[arg(long, global = true)]
    policy: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Saliency maps, overlays and nmr metrics for every episode.
    Iss,
    /// Interventional action MSE over a grid of mask counts and keep
    /// probabilities.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "50,100,150,200")]
        n_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        p_list: Vec<f32>,
    },
    /// Map stability under nuisance-only noise against action change.
    Robustness {
        #[arg(long, default_value_t = 1.0)]
        lambda: f32,
    },
    /// Correlation of map change with action change under perturbations.
    Fidelity {
        /// Strength applied to every configured perturbation.
        #[arg(long)]
        lambda: Option<f32>,
    },
    /// Correlation of nmr@k with task success rates.
    Correlate {
        /// CSV with columns task, seed, success_rate.
        #[arg(long)]
        success: Option<PathBuf>,
    },
    /// ISS latency per timestep against a single policy query.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "50,100,150,200")]
        n_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.3")]
        p_list: Vec<f32>,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
    },
    /// Render synthetic episodes, a matching policy and a manifest.
    Synth {
        /// Generation spec (JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Check a policy server against the wire protocol.
    ServeConformance {
        /// Expected hello line; the built-in fixture is used otherwise.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Skip the byte-exact hello comparison.
        #[arg(long, conflicts_with = "fixture")]
        no_fixture: bool,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
    },
    /// Serve a synthetic policy file over the wire protocol.
    #[command(hide = true)]
    ServeSynth {
        #[arg(long)]
        spec: PathBuf,
        /// Listen for one TCP connection instead of using stdio.
        #[arg(long)]
        tcp: Option<String>,
        #[arg(long, default_value_t = PROTOCOL_VERSION)]
        advertise_version: u32,
        #[arg(long)]
        concurrent: bool,
        #[arg(long, default_value_t = 0)]
        jitter_ms: u64,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CAUSAL_PROBE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| validation(format!("CAUSAL_PROBE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn with_manifest(cli: &Cli, name: &str, f: impl FnOnce(&mut RunContext) -> Result<()>) -> Result<()> {
    let path = cli
        .manifest
        .as_ref()
        .ok_or_else(|| validation(format!("{name} needs --manifest")))?;
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        policy: cli.policy.clone(),
    };
    let mut ctx = RunContext::new(path, &ov)?;
    let result = f(&mut ctx);
    ctx.finish(name, result)
}

fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Iss => with_manifest(cli, "iss", iss::run),
        Command::Sweep { n_list, p_list } => with_manifest(cli, "sweep", |c| sweep::run(c, n_list, p_list)),
        Command::Robustness { lambda } => with_manifest(cli, "robustness", |c| robustness::run(c, *lambda)),
        Command::Fidelity { lambda } => with_manifest(cli, "fidelity", |c| fidelity::run(c, *lambda)),
        Command::Correlate { success } => {
            with_manifest(cli, "correlate", |c| correlate::run(c, success.as_deref()))
        }
        Command::Bench { n_list, p_list, rounds } => {
            with_manifest(cli, "bench", |c| bench::run(c, n_list, p_list, *rounds))
        }
        Command::Synth { spec } => {
            let out = cli.out.as_ref().ok_or_else(|| validation("synth needs --out"))?;
            let written = synth::run(spec.as_deref(), out)?;
            println!("wrote {} files under {}", written.len(), out.display());
            Ok(())
        }
        Command::ServeConformance {
            fixture,
            no_fixture,
            requests,
        } => {
            let endpoint = cli
                .policy
                .as_deref()
                .ok_or_else(|| validation("serve-conformance needs --policy stdio:<cmd> or tcp:<host:port>"))?;
            let report = serve::conformance(&serve::ConformanceArgs {
                endpoint,
                fixture: fixture.as_deref(),
                skip_fixture: *no_fixture,
                requests: *requests,
            })?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("conformance.json"), serde_json::to_string_pretty(&report)?)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(anyhow::anyhow!("conformance checks failed"))
            }
        }
        Command::ServeSynth {
            spec,
            tcp,
            advertise_version,
            concurrent,
            jitter_ms,
        } => serve::serve_synth(
            spec,
            tcp.as_deref(),
            &ServeOptions {
                advertise_version: *advertise_version,
                concurrent: *concurrent,
                jitter_ms: *jitter_ms,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::VALIDATION } else { exit::OK });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}
