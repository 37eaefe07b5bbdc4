pub mod bench;
pub mod correlate;
pub mod fidelity;
pub mod iss;
pub mod robustness;
pub mod serve;
pub mod sweep;
pub mod synth;
