//! In-context editing.
//!
//! No weights change: the edit is a prompt prefix holding the k nearest
//! demonstration items (by embedding cosine against the edit prompt), each
//! rendered as statement / separator / question / answer, followed by the
//! new fact's statement. Every query is routed through prefix + query.

use crate::editors::{AuxState, AuxUndo, EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::{demo_items, EditRequest, FactWorld, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{embed_prompt, ModelState, Responder};
use crate::trainer::{cosine, TrainRun};

struct Demo {
    rendered: Vec<TokenId>,
    embedding: Vec<f64>,
}

pub struct IkeEditor {
    world: FactWorld,
    demos: Option<Vec<Demo>>,
    prefixes: Vec<Vec<TokenId>>,
}

impl IkeEditor {
    pub fn new(world: &FactWorld) -> Self {
        IkeEditor {
            world: world.clone(),
            demos: None,
            prefixes: Vec::new(),
        }
    }

    pub fn active_prefix(&self) -> Option<&[TokenId]> {
        self.prefixes.last().map(|p| p.as_slice())
    }

    fn render_fact_statement(&self, request: &EditRequest) -> Result<Vec<TokenId>> {
        let (relation, subject) = self
            .world
            .parse_question(&request.edit_prompt)
            .ok_or_else(|| {
                Error::EditFailure("edit prompt does not match any relation template".into())
            })?;
        let vocab = self.world.vocab();
        let o_star = self
            .world
            .entity_id(vocab.word(request.target[0]))
            .ok_or_else(|| Error::EditFailure("edit target is not an entity".into()))?;
        Ok(self.world.statement_tokens(subject, relation, o_star, 0))
    }
}

impl Editor for IkeEditor {
    fn method(&self) -> Method {
        Method::Ike
    }

    fn is_trained(&self) -> bool {
        self.demos.is_some()
    }

    /// Builds the demonstration store: corpus statements with embeddings.
    fn prepare(
        &mut self,
        model: &ModelState,
        world: &FactWorld,
        _run: &mut TrainRun,
    ) -> Result<()> {
        let vocab = world.vocab();
        let sep = vocab.sep_id();
        let end = vocab.end_id();
        let mut demos = Vec::new();
        for item in demo_items(world) {
            let mut rendered = item.statement.clone();
            rendered.push(sep);
            rendered.extend_from_slice(&item.question);
            rendered.push(item.answer);
            rendered.push(end);
            demos.push(Demo {
                embedding: embed_prompt(model, &item.statement)?,
                rendered,
            });
        }
        self.demos = Some(demos);
        Ok(())
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let request = &requests[0];
        if !self.prefixes.is_empty() {
            return Err(Error::Capability(
                "ike holds an active edit and its sequential-edit capability is NO".into(),
            ));
        }
        let demos = self.demos.as_ref().expect("trained checked upstream");
        if demos.is_empty() {
            return Err(Error::Contract("empty demo store".into()));
        }
        let k = hparams.int("k")? as usize;

        let q_emb = embed_prompt(model, &request.edit_prompt)?;
        let mut ranked: Vec<(usize, f64)> = demos
            .iter()
            .enumerate()
            .map(|(i, d)| (i, cosine(&q_emb, &d.embedding)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let vocab = self.world.vocab();
        let fact_stmt = self.render_fact_statement(request)?;
        // Nearest demonstration sits closest to the query; the new fact comes
        // last, immediately before the routed prompt.
        let mut chosen: Vec<usize> = ranked.iter().take(k).map(|(i, _)| *i).collect();
        chosen.reverse();

        let assemble = |chosen: &[usize]| -> Vec<TokenId> {
            let mut prefix = Vec::new();
            for &i in chosen {
                prefix.extend_from_slice(&demos[i].rendered);
            }
            prefix.extend_from_slice(&fact_stmt);
            prefix.push(vocab.sep_id());
            prefix
        };
        let mut prefix = assemble(&chosen);
        // Keep headroom for the query and a short answer.
        let budget = model.config.context_len.saturating_sub(request.edit_prompt.len() + 4);
        while prefix.len() > budget && !chosen.is_empty() {
            chosen.remove(0);
            prefix = assemble(&chosen);
        }
        if prefix.len() > budget {
            return Err(Error::OverLength {
                got: prefix.len(),
                max: budget,
            });
        }

        self.prefixes.push(prefix.clone());
        let mut outcome = EditOutcome::new(WeightDelta::Aux(AuxState::PromptPrefix(prefix.clone())));
        outcome.extra_state_bytes = prefix.len() as u64 * 8;
        outcome.aux_undo = Some(AuxUndo::TruncatePrefixes(self.prefixes.len() - 1));
        outcome.log("k_used", chosen.len());
        outcome.log("prefix_tokens", prefix.len());
        Ok(outcome)
    }

    fn responder<'a>(&'a self, model: &'a ModelState) -> Box<dyn Responder + 'a> {
        Box::new(IkeResponder {
            model,
            prefix: self.active_prefix().unwrap_or(&[]),
        })
    }

    fn undo_aux(&mut self, undo: AuxUndo) {
        if let AuxUndo::TruncatePrefixes(len) = undo {
            self.prefixes.truncate(len);
        }
    }

    fn reset(&mut self) {
        self.prefixes.clear();
    }
}

pub struct IkeResponder<'a> {
    model: &'a ModelState,
    prefix: &'a [TokenId],
}

impl IkeResponder<'_> {
    fn routed(&self, prompt: &[TokenId]) -> Vec<TokenId> {
        let mut full = Vec::with_capacity(self.prefix.len() + prompt.len());
        full.extend_from_slice(self.prefix);
        full.extend_from_slice(prompt);
        // The context window keeps the most recent tokens.
        let cap = self.model.config.context_len.saturating_sub(2);
        if full.len() > cap {
            full.drain(..full.len() - cap);
        }
        full
    }
}

impl Responder for IkeResponder<'_> {
    fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        crate::microlm::answer(self.model, &self.routed(prompt))
    }

    fn generate_free(&self, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
        crate::microlm::generate_free(self.model, &self.routed(prompt), len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::apply_to_model;
    use crate::harness::{default_hparams, set_knob};

    fn prepared(world: &FactWorld, model: &ModelState) -> IkeEditor {
        let mut e = IkeEditor::new(world);
        e.prepare(model, world, &mut TrainRun::classifier_default(1)).unwrap();
        e
    }

    #[test]
    fn zero_demos_prefix_is_just_the_new_fact() {
        let (world, mut model, bench) = tiny_setup();
        let mut hp = default_hparams(Method::Ike, &model.config).unwrap();
        set_knob(&mut hp, "k", 0);
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let prefix = editor.active_prefix().unwrap();
        let stmt = editor.render_fact_statement(&bench[0]).unwrap();
        let mut want = stmt;
        want.push(world.vocab().sep_id());
        assert_eq!(prefix, want.as_slice());
    }

    #[test]
    fn weights_are_bitwise_unchanged_by_edit_and_evaluation() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Ike, &model.config).unwrap();
        let before = model.snapshot();
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let responder = editor.responder(&model);
        let _ = responder.answer(&bench[0].edit_prompt).unwrap();
        let _ = responder.generate_free(&bench[0].edit_prompt, 8).unwrap();
        drop(responder);
        let mut base = model.clone();
        base.restore(&before).unwrap();
        assert!(model.bit_eq(&base));
    }

    #[test]
    fn second_edit_without_rollback_is_a_capability_error() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Ike, &model.config).unwrap();
        let mut editor = prepared(&world, &model);
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        assert!(matches!(
            apply_to_model(&mut editor, &mut model, &bench[1..2], &hp, false),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn extra_bytes_are_prefix_tokens_times_eight() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Ike, &model.config).unwrap();
        let mut editor = prepared(&world, &model);
        let outcome = apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let prefix_len = editor.active_prefix().unwrap().len() as u64;
        assert_eq!(outcome.extra_state_bytes, prefix_len * 8);
    }
}
