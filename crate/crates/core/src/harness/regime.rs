//! The three editing regimes.
//!
//! Single: snapshot, edit, evaluate, rollback — the model reloads original
//! weights after every edit. Batch: the same per chunk. Sequential: edits
//! accumulate with no rollback and every request is evaluated against the
//! final model.

use crate::editors::{apply_to_model, rollback, EditOutcome, Editor};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, evaluate_edit, MetricReport};
use crate::factworld::EditRequest;
use crate::harness::HparamSet;
use crate::microlm::{BaseResponder, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    Single,
    Batch,
    Sequential,
}

impl RegimeKind {
    pub fn parse(s: &str) -> Result<RegimeKind> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(RegimeKind::Single),
            "batch" => Ok(RegimeKind::Batch),
            "sequential" | "seq" => Ok(RegimeKind::Sequential),
            other => Err(Error::Contract(format!("unknown regime `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegimeKind::Single => "single",
            RegimeKind::Batch => "batch",
            RegimeKind::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    /// Chunk size; batch regime only.
    pub batch_size: Option<usize>,
}

impl RegimeSpec {
    pub fn single() -> Self {
        RegimeSpec {
            kind: RegimeKind::Single,
            batch_size: None,
        }
    }

    pub fn batch(size: usize) -> Self {
        RegimeSpec {
            kind: RegimeKind::Batch,
            batch_size: Some(size),
        }
    }

    pub fn sequential() -> Self {
        RegimeSpec {
            kind: RegimeKind::Sequential,
            batch_size: None,
        }
    }

    /// When metrics are taken, fixed per regime.
    pub fn evaluation_point(&self) -> &'static str {
        match self.kind {
            RegimeKind::Single => "per-edit",
            RegimeKind::Batch => "per-chunk",
            RegimeKind::Sequential => "after-all",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RegimeKind::Batch => match self.batch_size {
                Some(n) if n >= 1 => Ok(()),
                _ => Err(Error::Contract("batch regime requires batch_size ≥ 1".into())),
            },
            _ => {
                if self.batch_size.is_some() {
                    return Err(Error::Contract(
                        "batch_size is only meaningful for the batch regime".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub method: crate::editors::Method,
    pub regime: RegimeSpec,
    pub world_seed: u64,
    pub hparams_fingerprint: u64,
    pub per_edit: Vec<MetricReport>,
    pub aggregate: MetricReport,
    /// (request index, error category and message) for edits that failed.
    pub failures: Vec<(usize, String)>,
    pub total_seconds: f64,
}

/// Runs one editor over a benchmark under a regime.
///
/// Capability violations surface before any model mutation. Individual edit
/// failures are recorded (a zero-reliability evaluation against the
/// unchanged model) and the run continues.
pub fn run_regime(
    model: &mut ModelState,
    editor: &mut dyn Editor,
    benchmark: &[EditRequest],
    regime: &RegimeSpec,
    hparams: &HparamSet,
    world_seed: u64,
    gen_len: usize,
) -> Result<BenchReport> {
    regime.validate()?;
    let caps = editor.capabilities();
    match regime.kind {
        RegimeKind::Batch if !caps.supports_batch => {
            return Err(Error::Capability(format!(
                "{} cannot run the batch regime: its batch-edit capability is NO",
                editor.method()
            )));
        }
        RegimeKind::Sequential if !caps.supports_sequential => {
            return Err(Error::Capability(format!(
                "{} cannot run the sequential regime: its sequential-edit capability is NO",
                editor.method()
            )));
        }
        _ => {}
    }
    if benchmark.is_empty() {
        return Err(Error::Contract("empty benchmark".into()));
    }

    let started = std::time::Instant::now();
    let base = model.clone();
    let pre = BaseResponder(&base);
    let mut per_edit: Vec<MetricReport> = Vec::with_capacity(benchmark.len());
    let mut failures: Vec<(usize, String)> = Vec::new();

    match regime.kind {
        RegimeKind::Single => {
            for (i, req) in benchmark.iter().enumerate() {
                match apply_to_model(editor, model, std::slice::from_ref(req), hparams, true) {
                    Ok(mut outcome) => {
                        let report = {
                            let post = editor.responder(model);
                            evaluate_edit(&pre, post.as_ref(), req, &outcome, gen_len)?
                        };
                        per_edit.push(report);
                        rollback(editor, model, &mut outcome)?;
                    }
                    Err(e) => {
                        failures.push((i, format!("{}: {e}", e.category())));
                        per_edit.push(failed_edit_report(&pre, model, editor, req, gen_len)?);
                    }
                }
            }
        }
        RegimeKind::Batch => {
            let chunk = regime.batch_size.unwrap();
            let mut idx = 0usize;
            for requests in benchmark.chunks(chunk) {
                match apply_to_model(editor, model, requests, hparams, true) {
                    Ok(mut outcome) => {
                        // Chunk cost is shared evenly across its members.
                        let share = outcome.elapsed_seconds / requests.len() as f64;
                        {
                            let post = editor.responder(model);
                            for req in requests {
                                let mut report =
                                    evaluate_edit(&pre, post.as_ref(), req, &outcome, gen_len)?;
                                report.time_s = share;
                                per_edit.push(report);
                            }
                        }
                        rollback(editor, model, &mut outcome)?;
                    }
                    Err(e) => {
                        for (j, req) in requests.iter().enumerate() {
                            failures.push((idx + j, format!("{}: {e}", e.category())));
                            per_edit.push(failed_edit_report(&pre, model, editor, req, gen_len)?);
                        }
                    }
                }
                idx += requests.len();
            }
        }
        RegimeKind::Sequential => {
            let mut outcomes: Vec<Option<EditOutcome>> = Vec::with_capacity(benchmark.len());
            for (i, req) in benchmark.iter().enumerate() {
                match apply_to_model(editor, model, std::slice::from_ref(req), hparams, false) {
                    Ok(outcome) => outcomes.push(Some(outcome)),
                    Err(e) => {
                        failures.push((i, format!("{}: {e}", e.category())));
                        outcomes.push(None);
                    }
                }
            }
            // Retention: every request scored against the final model.
            let post = editor.responder(model);
            let zero = EditOutcome::new(crate::editors::WeightDelta::Weights(Default::default()));
            for (req, outcome) in benchmark.iter().zip(&outcomes) {
                let o = outcome.as_ref().unwrap_or(&zero);
                per_edit.push(evaluate_edit(&pre, post.as_ref(), req, o, gen_len)?);
            }
        }
    }

    Ok(BenchReport {
        method: editor.method(),
        regime: *regime,
        world_seed,
        hparams_fingerprint: hparams.fingerprint(),
        aggregate: aggregate(&per_edit),
        per_edit,
        failures,
        total_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluation of a request whose edit failed: the model is unchanged, so
/// reliability is the base model's (usually zero) and locality is one.
fn failed_edit_report(
    pre: &BaseResponder,
    model: &ModelState,
    editor: &dyn Editor,
    req: &EditRequest,
    gen_len: usize,
) -> Result<MetricReport> {
    let zero = EditOutcome::new(crate::editors::WeightDelta::Weights(Default::default()));
    let post = editor.responder(model);
    evaluate_edit(pre, post.as_ref(), req, &zero, gen_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::{make_editor, Method};
    use crate::harness::default_hparams;

    const GEN: usize = 8;

    #[test]
    fn single_regime_round_trips_the_model_bitwise() {
        let (world, mut model, bench) = tiny_setup();
        let base = model.clone();
        let mut editor = make_editor(Method::FtL, &world).unwrap();
        let hp = default_hparams(Method::FtL, &model.config).unwrap();
        let report = run_regime(
            &mut model,
            editor.as_mut(),
            &bench[..2],
            &RegimeSpec::single(),
            &hp,
            world.seed,
            GEN,
        )
        .unwrap();
        assert_eq!(report.per_edit.len(), 2);
        assert!(model.bit_eq(&base), "single regime must restore the model");
    }

    #[test]
    fn sequential_regime_changes_the_model_and_scores_all_edits() {
        let (world, mut model, bench) = tiny_setup();
        let base = model.clone();
        let mut editor = make_editor(Method::Rome, &world).unwrap();
        let hp = default_hparams(Method::Rome, &model.config).unwrap();
        let report = run_regime(
            &mut model,
            editor.as_mut(),
            &bench[..3],
            &RegimeSpec::sequential(),
            &hp,
            world.seed,
            GEN,
        )
        .unwrap();
        assert_eq!(report.per_edit.len(), 3);
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert!(
            !model.bit_eq(&base),
            "sequential weight edits must persist"
        );
    }

    #[test]
    fn batch_regime_with_non_batch_editor_is_rejected_before_mutation() {
        let (world, mut model, bench) = tiny_setup();
        let base = model.clone();
        let mut editor = make_editor(Method::Rome, &world).unwrap();
        let hp = default_hparams(Method::Rome, &model.config).unwrap();
        let err = run_regime(
            &mut model,
            editor.as_mut(),
            &bench[..3],
            &RegimeSpec::batch(3),
            &hp,
            world.seed,
            GEN,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
        assert!(model.bit_eq(&base));
    }

    #[test]
    fn batch_regime_evaluates_each_chunk_member() {
        let (world, mut model, bench) = tiny_setup();
        let base = model.clone();
        let mut editor = make_editor(Method::Memit, &world).unwrap();
        let hp = default_hparams(Method::Memit, &model.config).unwrap();
        let report = run_regime(
            &mut model,
            editor.as_mut(),
            &bench[..4],
            &RegimeSpec::batch(2),
            &hp,
            world.seed,
            GEN,
        )
        .unwrap();
        assert_eq!(report.per_edit.len(), 4);
        assert!(model.bit_eq(&base), "batch regime rolls back per chunk");
    }

    #[test]
    fn sequential_with_ike_is_a_capability_error() {
        let (world, mut model, bench) = tiny_setup();
        let mut editor = make_editor(Method::Ike, &world).unwrap();
        let hp = default_hparams(Method::Ike, &model.config).unwrap();
        let err = run_regime(
            &mut model,
            editor.as_mut(),
            &bench[..2],
            &RegimeSpec::sequential(),
            &hp,
            world.seed,
            GEN,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn regime_spec_validation() {
        assert!(RegimeSpec::batch(0).validate().is_err());
        assert!(RegimeSpec::single().validate().is_ok());
        assert!(RegimeSpec {
            kind: RegimeKind::Single,
            batch_size: Some(2)
        }
        .validate()
        .is_err());
        assert_eq!(RegimeSpec::sequential().evaluation_point(), "after-all");
    }
}
