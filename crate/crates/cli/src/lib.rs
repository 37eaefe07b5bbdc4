//! Library side of the `causal-probe` binary: manifests, the episode store,
//! policy connection and one module per subcommand.

pub mod analysis;
pub mod commands;
pub mod connect;
pub mod exit;
pub mod manifest;
pub mod plot;
pub mod run;
pub mod store;
