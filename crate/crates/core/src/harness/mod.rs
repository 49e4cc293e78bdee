//! Orchestration: hyperparameter records, editing regimes, benchmark runs,
//! and report files.

mod hparams;
mod regime;
mod report;

pub use hparams::{
    default_hparams, hparams_with_targets, load_hparams, parse_hparams, set_knob, HparamSet, Knob,
    KnobValue,
};
pub use regime::{run_regime, BenchReport, RegimeKind, RegimeSpec};
pub use report::{comparable_report_text, render_table, report_to_text, write_report_file};

/// Environment variable consulted when no explicit seed is given.
pub const SEED_ENV_VAR: &str = "MICROEDIT_SEED";

pub(crate) fn fnv64_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h
}
