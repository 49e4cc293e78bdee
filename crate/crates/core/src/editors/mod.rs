//! The method layer: seven knowledge-editing methods behind one
//! `apply_to_model` contract, with capability flags enforced before any
//! model mutation and a snapshot-based rollback switch.

mod common;
mod ftl;
mod grace;
mod ike;
mod kn;
mod memit;
mod rome;
mod serac;

pub use common::weight_payload_bytes;
pub use ftl::FtlEditor;
pub use grace::{CodebookEntry, GraceEditor};
pub use ike::IkeEditor;
pub use kn::KnEditor;
pub use memit::MemitEditor;
pub use rome::RomeEditor;
pub use serac::SeracEditor;

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::factworld::{EditRequest, FactWorld, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{BaseResponder, ModelCheckpoint, ModelState, ModuleAddress, Responder};
use crate::tensor::Tensor;
use crate::trainer::TrainRun;

// ── Methods and capabilities ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    FtL,
    Kn,
    Rome,
    Memit,
    Ike,
    Grace,
    SeracLite,
    // Registered but out of scope; requesting them yields a clear error.
    Mend,
    Ke,
    Pmet,
    Melo,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "ft-l" | "ftl" | "ft_l" => Ok(Method::FtL),
            "kn" => Ok(Method::Kn),
            "rome" => Ok(Method::Rome),
            "memit" => Ok(Method::Memit),
            "ike" => Ok(Method::Ike),
            "grace" => Ok(Method::Grace),
            "serac" | "serac-lite" | "serac_lite" => Ok(Method::SeracLite),
            "mend" => Ok(Method::Mend),
            "ke" => Ok(Method::Ke),
            "pmet" => Ok(Method::Pmet),
            "melo" => Ok(Method::Melo),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::FtL => "ft-l",
            Method::Kn => "kn",
            Method::Rome => "rome",
            Method::Memit => "memit",
            Method::Ike => "ike",
            Method::Grace => "grace",
            Method::SeracLite => "serac-lite",
            Method::Mend => "mend",
            Method::Ke => "ke",
            Method::Pmet => "pmet",
            Method::Melo => "melo",
        }
    }

    pub fn implemented(&self) -> bool {
        !matches!(self, Method::Mend | Method::Ke | Method::Pmet | Method::Melo)
    }

    pub fn all_implemented() -> [Method; 7] {
        [
            Method::FtL,
            Method::Kn,
            Method::Rome,
            Method::Memit,
            Method::Ike,
            Method::Grace,
            Method::SeracLite,
        ]
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditArea {
    ExternalModel,
    InContext,
    MlpCodebook,
    Mlp,
    MlpRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditorCapabilities {
    pub supports_batch: bool,
    pub supports_sequential: bool,
    pub needs_training: bool,
    pub edit_area: EditArea,
}

/// The capability matrix for every registered method.
pub fn capabilities_of(method: Method) -> EditorCapabilities {
    use EditArea::*;
    let row = |b, s, t, area| EditorCapabilities {
        supports_batch: b,
        supports_sequential: s,
        needs_training: t,
        edit_area: area,
    };
    match method {
        Method::SeracLite => row(true, true, true, ExternalModel),
        Method::Ike => row(false, false, true, InContext),
        Method::Grace => row(false, true, false, MlpCodebook),
        Method::Kn => row(false, true, false, Mlp),
        Method::Rome => row(false, true, false, Mlp),
        Method::Memit => row(true, true, false, Mlp),
        Method::FtL => row(false, true, false, Mlp),
        // Flags for the out-of-scope rows, kept for table rendering.
        Method::Mend => row(true, true, true, Mlp),
        Method::Ke => row(true, true, true, Mlp),
        Method::Pmet => row(true, true, false, Mlp),
        Method::Melo => row(true, true, false, MlpCodebook),
    }
}

// ── Deltas and outcomes ──────────────────────────────────────────────

/// What an editor changed: per-address weight deltas to be added to the
/// weights, or auxiliary state for non-weight methods.
#[derive(Debug, Clone)]
pub enum WeightDelta {
    Weights(BTreeMap<ModuleAddress, Tensor>),
    Aux(AuxState),
}

#[derive(Debug, Clone)]
pub enum AuxState {
    CodebookEntries(Vec<CodebookEntry>),
    MemoryRecords(usize),
    PromptPrefix(Vec<TokenId>),
}

/// Editor-private undo information consumed by `rollback`.
#[derive(Debug, Clone)]
pub enum AuxUndo {
    RestoreCodebook(Vec<CodebookEntry>),
    TruncateMemory(usize),
    TruncatePrefixes(usize),
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub delta: WeightDelta,
    pub elapsed_seconds: f64,
    pub extra_state_bytes: u64,
    /// Structured diagnostics: chosen layer, solver residuals, losses.
    pub method_log: Vec<(String, String)>,
    pub(crate) snapshot: Option<ModelCheckpoint>,
    pub(crate) aux_undo: Option<AuxUndo>,
}

impl EditOutcome {
    pub(crate) fn new(delta: WeightDelta) -> Self {
        EditOutcome {
            delta,
            elapsed_seconds: 0.0,
            extra_state_bytes: 0,
            method_log: Vec::new(),
            snapshot: None,
            aux_undo: None,
        }
    }

    pub(crate) fn log(&mut self, key: &str, value: impl std::fmt::Display) {
        self.method_log.push((key.to_string(), value.to_string()));
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }

    pub fn log_value(&self, key: &str) -> Option<&str> {
        self.method_log
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// `key=value` diagnostic lines.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.method_log {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

// ── The editor contract ──────────────────────────────────────────────

pub trait Editor {
    fn method(&self) -> Method;

    fn capabilities(&self) -> EditorCapabilities {
        capabilities_of(self.method())
    }

    /// Whether required auxiliary structures have been trained.
    fn is_trained(&self) -> bool {
        true
    }

    /// Trains auxiliary structures (demo store, scope classifier).
    fn prepare(
        &mut self,
        _model: &ModelState,
        _world: &FactWorld,
        _run: &mut TrainRun,
    ) -> Result<()> {
        Ok(())
    }

    /// Method-specific application. Preconditions (capabilities, training,
    /// non-empty batch) are enforced by [`apply_to_model`]; on error the
    /// model must be left untouched.
    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome>;

    /// The query path evaluation uses after this editor ran.
    fn responder<'a>(&'a self, model: &'a ModelState) -> Box<dyn Responder + 'a> {
        Box::new(BaseResponder(model))
    }

    /// Reverts auxiliary state recorded in an outcome.
    fn undo_aux(&mut self, _undo: AuxUndo) {}

    /// Clears all auxiliary state (codebook, memory, prefixes).
    fn reset(&mut self);
}

/// Builds an editor for an implemented method; the four registered
/// out-of-scope methods yield an `unimplemented-method` error.
pub fn make_editor(method: Method, world: &FactWorld) -> Result<Box<dyn Editor>> {
    match method {
        Method::FtL => Ok(Box::new(FtlEditor::new())),
        Method::Kn => Ok(Box::new(KnEditor::new())),
        Method::Rome => Ok(Box::new(RomeEditor::new(world))),
        Method::Memit => Ok(Box::new(MemitEditor::new(world))),
        Method::Ike => Ok(Box::new(IkeEditor::new(world))),
        Method::Grace => Ok(Box::new(GraceEditor::new())),
        Method::SeracLite => Ok(Box::new(SeracEditor::new(world))),
        other => Err(Error::UnimplementedMethod(other.name().to_string())),
    }
}

/// The unified editing entry point.
///
/// Capability and training checks run before anything can mutate; when
/// `keep_original` is set, the pre-edit weights ride along in the outcome
/// for a later [`rollback`].
pub fn apply_to_model(
    editor: &mut dyn Editor,
    model: &mut ModelState,
    requests: &[EditRequest],
    hparams: &HparamSet,
    keep_original: bool,
) -> Result<EditOutcome> {
    if requests.is_empty() {
        return Err(Error::Contract("apply_to_model with zero requests".into()));
    }
    let caps = editor.capabilities();
    if requests.len() > 1 && !caps.supports_batch {
        return Err(Error::Capability(format!(
            "{} received {} requests but its batch-edit capability is NO",
            editor.method(),
            requests.len()
        )));
    }
    if caps.needs_training && !editor.is_trained() {
        return Err(Error::TrainingRequired(editor.method().name().to_string()));
    }
    if hparams.method() != editor.method() {
        return Err(Error::Hparams(format!(
            "hparams for {} passed to {}",
            hparams.method(),
            editor.method()
        )));
    }

    let snapshot = keep_original.then(|| model.snapshot());
    let started = Instant::now();
    let mut outcome = editor.apply_impl(model, requests, hparams)?;
    outcome.elapsed_seconds = started.elapsed().as_secs_f64();
    outcome.snapshot = snapshot;
    if matches!(caps.edit_area, EditArea::Mlp | EditArea::MlpRange) {
        outcome.extra_state_bytes = if keep_original {
            weight_payload_bytes(model)
        } else {
            0
        };
    }
    Ok(outcome)
}

/// Restores the pre-edit model bit-exactly and clears this edit's auxiliary
/// entries. Consumes the outcome's snapshot: a second call errors.
pub fn rollback(
    editor: &mut dyn Editor,
    model: &mut ModelState,
    outcome: &mut EditOutcome,
) -> Result<()> {
    let snap = outcome.snapshot.take().ok_or(Error::NoSnapshot)?;
    model.restore(&snap)?;
    if let Some(undo) = outcome.aux_undo.take() {
        editor.undo_aux(undo);
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_support::tiny_setup;
    use super::*;

    #[test]
    fn capability_rows_match_the_comparison_table() {
        let expect = [
            (Method::SeracLite, true, true, true, EditArea::ExternalModel),
            (Method::Ike, false, false, true, EditArea::InContext),
            (Method::Grace, false, true, false, EditArea::MlpCodebook),
            (Method::Kn, false, true, false, EditArea::Mlp),
            (Method::Rome, false, true, false, EditArea::Mlp),
            (Method::Memit, true, true, false, EditArea::Mlp),
            (Method::FtL, false, true, false, EditArea::Mlp),
        ];
        for (m, batch, seq, train, area) in expect {
            let c = capabilities_of(m);
            assert_eq!(c.supports_batch, batch, "{m} batch");
            assert_eq!(c.supports_sequential, seq, "{m} sequential");
            assert_eq!(c.needs_training, train, "{m} train");
            assert_eq!(c.edit_area, area, "{m} area");
        }
    }

    #[test]
    fn unimplemented_methods_error_by_name() {
        let world = super::test_support::tiny_world();
        for m in [Method::Mend, Method::Ke, Method::Pmet, Method::Melo] {
            match make_editor(m, &world) {
                Err(Error::UnimplementedMethod(name)) => assert_eq!(name, m.name()),
                Err(other) => panic!("expected unimplemented-method, got {other:?}"),
                Ok(_) => panic!("expected unimplemented-method, got an editor"),
            }
        }
    }

    #[test]
    fn method_parse_round_trips() {
        for m in Method::all_implemented() {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(matches!(Method::parse("gpt4"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn batch_to_non_batch_editor_is_capability_error_before_mutation() {
        let (world, mut model, bench) = tiny_setup();
        let before = model.snapshot();
        let mut editor = make_editor(Method::Rome, &world).unwrap();
        let hp = crate::harness::default_hparams(Method::Rome, &model.config).unwrap();
        let err = apply_to_model(editor.as_mut(), &mut model, &bench[..2], &hp, true).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
        let mut fresh = model.clone();
        fresh.restore(&before).unwrap();
        assert!(model.bit_eq(&fresh), "model mutated by a rejected call");
    }

    #[test]
    fn applying_then_subtracting_a_weight_delta_restores_weights() {
        let (world, mut model, bench) = tiny_setup();
        let before = model.snapshot();
        let mut editor = make_editor(Method::Rome, &world).unwrap();
        let hp = crate::harness::default_hparams(Method::Rome, &model.config).unwrap();
        let outcome = apply_to_model(editor.as_mut(), &mut model, &bench[..1], &hp, false).unwrap();
        let WeightDelta::Weights(deltas) = &outcome.delta else {
            panic!("weight editor must return weight deltas")
        };
        for (addr, delta) in deltas {
            let w = model.weight(addr).unwrap().clone();
            let undone = crate::tensor::sub(&w, delta).unwrap();
            model.set_weight(addr, undone).unwrap();
        }
        let mut base = model.clone();
        base.restore(&before).unwrap();
        let mut worst = 0.0_f64;
        for addr in model.addresses() {
            for (a, b) in model
                .weight(&addr)
                .unwrap()
                .data()
                .iter()
                .zip(base.weight(&addr).unwrap().data())
            {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-12, "apply-then-subtract residue {worst:.3e}");
    }

    #[test]
    fn sequential_mode_has_no_snapshot_to_roll_back() {
        let (world, mut model, bench) = tiny_setup();
        let mut editor = make_editor(Method::FtL, &world).unwrap();
        let hp = crate::harness::default_hparams(Method::FtL, &model.config).unwrap();
        let mut outcome =
            apply_to_model(editor.as_mut(), &mut model, &bench[..1], &hp, false).unwrap();
        assert!(!outcome.has_snapshot());
        assert!(matches!(
            rollback(editor.as_mut(), &mut model, &mut outcome),
            Err(Error::NoSnapshot)
        ));
    }

    #[test]
    fn untrained_editor_is_training_required_error() {
        let (world, mut model, bench) = tiny_setup();
        let mut editor = make_editor(Method::Ike, &world).unwrap();
        let hp = crate::harness::default_hparams(Method::Ike, &model.config).unwrap();
        assert!(matches!(
            apply_to_model(editor.as_mut(), &mut model, &bench[..1], &hp, true),
            Err(Error::TrainingRequired(_))
        ));
    }
}
