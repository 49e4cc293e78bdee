//! Memory-based editing with retrieval and classification routing.
//!
//! Edits are stored verbatim; a trained logistic scope classifier decides per
//! query whether the nearest stored edit applies. Routed queries whose
//! relation matches the stored edit answer with the stored target; everything
//! else defers to the base model. No composed (portability) answering is
//! attempted. Weights never change.

use crate::editors::{AuxState, AuxUndo, EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::{EditRequest, FactWorld, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{embed_prompt, ModelState, Responder};
use crate::trainer::{similarity_features, train_scope_classifier, ScopeClassifier, TrainRun};

struct MemoryRecord {
    request: EditRequest,
    relation: Option<u32>,
    embedding: Vec<f64>,
}

pub struct SeracEditor {
    world: FactWorld,
    classifier: Option<ScopeClassifier>,
    memory: Vec<MemoryRecord>,
}

impl SeracEditor {
    pub fn new(world: &FactWorld) -> Self {
        SeracEditor {
            world: world.clone(),
            classifier: None,
            memory: Vec::new(),
        }
    }

    pub fn classifier(&self) -> Option<&ScopeClassifier> {
        self.classifier.as_ref()
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    fn memory_bytes(&self) -> u64 {
        let tokens: usize = self
            .memory
            .iter()
            .map(|r| r.request.edit_prompt.len() + r.request.target.len())
            .sum();
        // Stored token payload plus classifier weights, bias and threshold.
        (tokens as u64) * 8 + 4 * 8
    }
}

impl Editor for SeracEditor {
    fn method(&self) -> Method {
        Method::SeracLite
    }

    fn is_trained(&self) -> bool {
        self.classifier.is_some()
    }

    fn prepare(
        &mut self,
        model: &ModelState,
        world: &FactWorld,
        run: &mut TrainRun,
    ) -> Result<()> {
        self.classifier = Some(train_scope_classifier(model, world, run)?);
        Ok(())
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        _hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let prev_len = self.memory.len();
        for r in requests {
            self.memory.push(MemoryRecord {
                relation: self.world.parse_question(&r.edit_prompt).map(|(rel, _)| rel),
                embedding: embed_prompt(model, &r.edit_prompt)?,
                request: r.clone(),
            });
        }
        let mut outcome =
            EditOutcome::new(WeightDelta::Aux(AuxState::MemoryRecords(requests.len())));
        outcome.extra_state_bytes = self.memory_bytes();
        outcome.aux_undo = Some(AuxUndo::TruncateMemory(prev_len));
        outcome.log("memory_records", self.memory.len());
        let clf = self.classifier.as_ref().unwrap();
        outcome.log("classifier_threshold", format!("{:.4}", clf.threshold));
        outcome.log(
            "classifier_held_out_accuracy",
            format!("{:.4}", clf.held_out_accuracy),
        );
        Ok(outcome)
    }

    fn responder<'a>(&'a self, model: &'a ModelState) -> Box<dyn Responder + 'a> {
        Box::new(SeracResponder {
            model,
            editor: self,
        })
    }

    fn undo_aux(&mut self, undo: AuxUndo) {
        if let AuxUndo::TruncateMemory(len) = undo {
            self.memory.truncate(len);
        }
    }

    fn reset(&mut self) {
        self.memory.clear();
    }
}

pub struct SeracResponder<'a> {
    model: &'a ModelState,
    editor: &'a SeracEditor,
}

impl SeracResponder<'_> {
    /// Routing decision: nearest record by embedding cosine, gated by the
    /// scope classifier, answered only when the query's relation matches.
    fn route(&self, prompt: &[TokenId]) -> Result<Option<Vec<TokenId>>> {
        if self.editor.memory.is_empty() {
            return Ok(None);
        }
        let clf = self
            .editor
            .classifier
            .as_ref()
            .ok_or_else(|| Error::TrainingRequired("serac-lite".into()))?;
        let q_emb = embed_prompt(self.model, prompt)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, rec) in self.editor.memory.iter().enumerate() {
            let c = crate::trainer::cosine(&q_emb, &rec.embedding);
            if best.map(|(_, bc)| c > bc).unwrap_or(true) {
                best = Some((i, c));
            }
        }
        let (idx, _) = best.unwrap();
        let rec = &self.editor.memory[idx];
        let features = similarity_features(
            &q_emb,
            &rec.embedding,
            prompt,
            &rec.request.edit_prompt,
        );
        if clf.score(features) < clf.threshold {
            return Ok(None);
        }
        let q_relation = self.editor.world.parse_question(prompt).map(|(r, _)| r);
        if q_relation.is_some() && q_relation == rec.relation {
            Ok(Some(rec.request.target.clone()))
        } else {
            Ok(None)
        }
    }
}

impl Responder for SeracResponder<'_> {
    fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        match self.route(prompt)? {
            Some(answer) => Ok(answer),
            None => crate::microlm::answer(self.model, prompt),
        }
    }

    /// Free-running generation defers to the base model; the memory layer
    /// only overrides answers.
    fn generate_free(&self, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
        crate::microlm::generate_free(self.model, prompt, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::apply_to_model;
    use crate::harness::default_hparams;

    fn prepared(world: &FactWorld, model: &ModelState) -> SeracEditor {
        let mut e = SeracEditor::new(world);
        e.prepare(model, world, &mut TrainRun::classifier_default(3)).unwrap();
        e
    }

    #[test]
    fn exact_edit_prompt_routes_to_the_stored_target() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::SeracLite, &model.config).unwrap();
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let responder = editor.responder(&model);
        let got = responder.answer(&bench[0].edit_prompt).unwrap();
        assert_eq!(got, bench[0].target);
    }

    #[test]
    fn batch_editing_stores_every_request() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::SeracLite, &model.config).unwrap();
        let mut editor = prepared(&world, &model);
        let outcome = apply_to_model(&mut editor, &mut model, &bench[..4], &hp, false).unwrap();
        assert_eq!(editor.memory_len(), 4);
        assert_eq!(outcome.log_value("memory_records"), Some("4"));
        let responder = editor.responder(&model);
        for r in &bench[..4] {
            assert_eq!(responder.answer(&r.edit_prompt).unwrap(), r.target);
        }
    }

    #[test]
    fn weights_never_change() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::SeracLite, &model.config).unwrap();
        let before = model.snapshot();
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..2], &hp, false).unwrap();
        let responder = editor.responder(&model);
        let _ = responder.answer(&bench[0].locality_probes[0].0).unwrap();
        drop(responder);
        let mut base = model.clone();
        base.restore(&before).unwrap();
        assert!(model.bit_eq(&base));
    }

    #[test]
    fn composed_portability_prompts_are_not_answered_from_memory() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::SeracLite, &model.config).unwrap();
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let responder = editor.responder(&model);
        for (probe, _) in &bench[0].portability_probes {
            let got = responder.answer(probe).unwrap();
            let base = crate::microlm::answer(&model, probe).unwrap();
            assert_eq!(got, base, "portability probe must defer to the base model");
        }
    }
}
