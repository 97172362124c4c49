//! Shared fixtures for the pipeline benchmarks.

use sirtgp_core::{assemble_design, generate_session, Design, SessionData, SimConfig};

/// A small baseline-style session: 6 channels, 50 timepoints, 4 characters.
pub fn small_session(seed: u64) -> SessionData {
    generate_session(&SimConfig {
        text: "BENCH".into(),
        sequences: 3,
        seed,
        ..SimConfig::default()
    })
    .expect("valid benchmark config")
}

/// Full-size baseline calibration session (19 characters, 5 sequences).
pub fn baseline_session(seed: u64) -> SessionData {
    generate_session(&SimConfig {
        seed,
        ..SimConfig::default()
    })
    .expect("valid benchmark config")
}

pub fn design_of(session: &SessionData) -> Design {
    assemble_design(session).expect("labeled session")
}
