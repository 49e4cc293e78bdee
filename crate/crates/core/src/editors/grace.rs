//! Codebook editing with deferral radii.
//!
//! Each edit stores (key, value, radius, label) at one MLP sublayer: the key
//! is the sublayer input at the final prompt token, the value an optimized
//! replacement for the sublayer output there. At inference the codebook only
//! fires when the incoming activation falls within a stored key's radius;
//! everything else is bitwise base-model behavior. The configured address
//! names the layer's down-projection; the wrapped site is the MLP sublayer
//! containing it, so keys and values are both d_model wide.

use crate::editors::common::value_optimize;
use crate::editors::{AuxState, AuxUndo, EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::{EditRequest, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{forward, HookSpec, ModelState, ModuleAddress, Responder};
use crate::tensor::Tensor;

const CONFLICT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub radius: f64,
    pub label: Vec<TokenId>,
}

pub struct GraceEditor {
    codebook: Vec<CodebookEntry>,
    layer: Option<usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl GraceEditor {
    pub fn new() -> Self {
        GraceEditor {
            codebook: Vec::new(),
            layer: None,
        }
    }

    pub fn codebook(&self) -> &[CodebookEntry] {
        &self.codebook
    }

    pub fn entry_bytes(d_model: usize) -> u64 {
        ((2 * d_model + 2) * 8) as u64
    }

    /// Conflict-aware insertion. Same label within an existing radius grows
    /// that radius to cover the new key; different labels within range shrink
    /// both radii to half the key distance minus a margin.
    fn insert(&mut self, mut entry: CodebookEntry) -> bool {
        for existing in &mut self.codebook {
            let d = dist(&existing.key, &entry.key);
            if existing.label == entry.label && d <= existing.radius {
                existing.radius = existing.radius.max(d);
                return false;
            }
        }
        for existing in &mut self.codebook {
            if existing.label == entry.label {
                continue;
            }
            let d = dist(&existing.key, &entry.key);
            if d <= existing.radius || d <= entry.radius {
                let shrunk = d / 2.0 - CONFLICT_MARGIN;
                existing.radius = existing.radius.min(shrunk);
                entry.radius = entry.radius.min(shrunk);
            }
        }
        self.codebook.push(entry);
        true
    }

    fn nearest(&self, key: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.codebook.iter().enumerate() {
            let d = dist(&e.key, key);
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((i, d));
            }
        }
        best
    }
}

impl Default for GraceEditor {
    fn default() -> Self {
        Self::new()
    }
}

impl Editor for GraceEditor {
    fn method(&self) -> Method {
        Method::Grace
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let request = &requests[0];
        let address = hparams.targets()[0].clone();
        let layer = address
            .layer()
            .ok_or_else(|| Error::Address(address.path().to_string()))?;
        model.resolve(&address)?;
        if let Some(existing) = self.layer {
            if existing != layer {
                return Err(Error::Contract(format!(
                    "codebook already bound to layer {existing}, requested {layer}"
                )));
            }
        }

        let init_radius = hparams.float("init_radius")?;
        let v_steps = hparams.int("v_steps")? as usize;
        let v_lr = hparams.float("v_lr")?;

        let position = request.edit_prompt.len() - 1;
        let mlp = ModuleAddress::new(format!("blocks.{layer}.mlp"));
        let out = forward(
            model,
            &request.edit_prompt,
            &[
                HookSpec::capture_input(mlp.clone(), vec![position]),
                HookSpec::capture_output(mlp.clone(), vec![position]),
            ],
        )?;
        let key = out
            .captures
            .iter()
            .find(|c| c.mode == crate::microlm::HookMode::CaptureInput)
            .map(|c| c.value.clone())
            .ok_or_else(|| Error::Contract("key capture missed".into()))?;
        let v_init = out
            .captures
            .iter()
            .find(|c| c.mode == crate::microlm::HookMode::CaptureOutput)
            .map(|c| c.value.clone())
            .ok_or_else(|| Error::Contract("value capture missed".into()))?;

        let opt = value_optimize(
            model,
            layer,
            position,
            &request.edit_prompt,
            &request.target,
            v_init,
            v_steps,
            v_lr,
            0.0,
        )?;

        let saved = self.codebook.clone();
        let entry = CodebookEntry {
            key: key.data().to_vec(),
            value: opt.v_star.data().to_vec(),
            radius: init_radius,
            label: request.target.clone(),
        };
        let inserted = self.insert(entry.clone());
        self.layer = Some(layer);

        let mut outcome = EditOutcome::new(WeightDelta::Aux(AuxState::CodebookEntries(vec![
            entry,
        ])));
        outcome.extra_state_bytes =
            self.codebook.len() as u64 * Self::entry_bytes(model.config.d_model);
        outcome.aux_undo = Some(AuxUndo::RestoreCodebook(saved));
        outcome.log("layer", layer);
        outcome.log("entries", self.codebook.len());
        outcome.log("inserted", inserted);
        outcome.log("nll_first", format!("{:.6}", opt.first_nll));
        outcome.log("nll_last", format!("{:.6}", opt.last_nll));
        Ok(outcome)
    }

    fn responder<'a>(&'a self, model: &'a ModelState) -> Box<dyn Responder + 'a> {
        Box::new(GraceResponder {
            model,
            editor: self,
        })
    }

    fn undo_aux(&mut self, undo: AuxUndo) {
        if let AuxUndo::RestoreCodebook(saved) = undo {
            self.codebook = saved;
            if self.codebook.is_empty() {
                self.layer = None;
            }
        }
    }

    fn reset(&mut self) {
        self.codebook.clear();
        self.layer = None;
    }
}

pub struct GraceResponder<'a> {
    model: &'a ModelState,
    editor: &'a GraceEditor,
}

impl GraceResponder<'_> {
    /// One greedy step: look the final-position activation up in the
    /// codebook; on a hit, rerun with the stored value substituted.
    fn next_token(&self, seq: &[TokenId]) -> Result<TokenId> {
        let Some(layer) = self.editor.layer else {
            return crate::microlm::next_token(self.model, seq);
        };
        let mlp = ModuleAddress::new(format!("blocks.{layer}.mlp"));
        let last = seq.len() - 1;
        let out = forward(
            self.model,
            seq,
            &[HookSpec::capture_input(mlp.clone(), vec![last])],
        )?;
        let act = out
            .captured(&mlp, last)
            .ok_or_else(|| Error::Contract("activation capture missed".into()))?;
        if let Some((idx, d)) = self.editor.nearest(act.data()) {
            let entry = &self.editor.codebook[idx];
            if d <= entry.radius {
                let patched = forward(
                    self.model,
                    seq,
                    &[HookSpec::replace_output(
                        mlp,
                        vec![last],
                        Tensor::new(vec![1, entry.value.len()], entry.value.clone())?,
                    )],
                )?;
                let row = patched.logits.row(patched.logits.rows() - 1);
                return Ok(argmax(row) as TokenId);
            }
        }
        let row = out.logits.row(out.logits.rows() - 1);
        Ok(argmax(row) as TokenId)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

impl Responder for GraceResponder<'_> {
    fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        let end = self.model.end_token();
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while seq.len() < self.model.config.context_len {
            let t = self.next_token(&seq)?;
            if t == end {
                break;
            }
            out.push(t);
            seq.push(t);
        }
        Ok(out)
    }

    fn generate_free(&self, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
        let head = self.model.config.context_len.saturating_sub(prompt.len());
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..len.min(head) {
            let t = self.next_token(&seq)?;
            out.push(t);
            seq.push(t);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::{apply_to_model, rollback};
    use crate::harness::default_hparams;

    #[test]
    fn exact_key_hit_applies_the_stored_value() {
        let (_, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Grace, &model.config).unwrap();
        let mut editor = GraceEditor::new();
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let layer = editor.layer.unwrap();
        let req = &bench[0];
        // Re-querying the exact prompt lands at distance 0 from the key.
        let mlp = ModuleAddress::new(format!("blocks.{layer}.mlp"));
        let out = forward(
            &model,
            &req.edit_prompt,
            &[HookSpec::capture_input(mlp, vec![req.edit_prompt.len() - 1])],
        )
        .unwrap();
        let act = out.captures[0].value.data();
        let (idx, d) = editor.nearest(act).unwrap();
        assert_eq!(idx, 0);
        assert!(d <= 1e-12, "exact requery must land on the key, d = {d}");
    }

    #[test]
    fn deferral_is_bitwise_base_behavior() {
        let (_, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Grace, &model.config).unwrap();
        let mut editor = GraceEditor::new();
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();

        let responder = editor.responder(&model);
        // Locality probes live far from the edit key at the hooked site.
        for (probe, _) in &bench[0].locality_probes {
            let wrapped = responder.answer(probe).unwrap();
            let base = crate::microlm::answer(&model, probe).unwrap();
            assert_eq!(wrapped, base, "deferral changed a base answer");
        }
    }

    #[test]
    fn conflicting_keys_shrink_both_radii() {
        let mut editor = GraceEditor::new();
        let e1 = CodebookEntry {
            key: vec![0.0, 0.0],
            value: vec![1.0, 1.0],
            radius: 1.0,
            label: vec![5],
        };
        let mut e2 = e1.clone();
        e2.key = vec![0.3, 0.0];
        e2.label = vec![9];
        editor.insert(e1);
        editor.insert(e2);
        let want = 0.15 - CONFLICT_MARGIN;
        assert!((editor.codebook[0].radius - want).abs() < 1e-12);
        assert!((editor.codebook[1].radius - want).abs() < 1e-12);
    }

    #[test]
    fn same_label_absorbs_and_expands() {
        let mut editor = GraceEditor::new();
        let e1 = CodebookEntry {
            key: vec![0.0, 0.0],
            value: vec![1.0, 1.0],
            radius: 1.0,
            label: vec![5],
        };
        let mut e2 = e1.clone();
        e2.key = vec![0.5, 0.0];
        editor.insert(e1);
        let inserted = editor.insert(e2);
        assert!(!inserted, "same-label in-radius key is absorbed");
        assert_eq!(editor.codebook.len(), 1);
        assert!((editor.codebook[0].radius - 1.0).abs() < 1e-12);

        let mut e3 = editor.codebook[0].clone();
        e3.key = vec![0.9, 0.0];
        e3.radius = 0.1;
        // Within the existing 1.0 radius, same label: radius stays ≥ distance.
        editor.insert(e3);
        assert_eq!(editor.codebook.len(), 1);
    }

    #[test]
    fn rollback_restores_codebook_radii() {
        let (_, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Grace, &model.config).unwrap();
        let mut editor = GraceEditor::new();
        let mut o1 = apply_to_model(&mut editor, &mut model, &bench[..1], &hp, true).unwrap();
        let after_first = editor.codebook.clone();
        let mut o2 = apply_to_model(&mut editor, &mut model, &bench[1..2], &hp, true).unwrap();
        rollback(&mut editor, &mut model, &mut o2).unwrap();
        assert_eq!(editor.codebook, after_first);
        rollback(&mut editor, &mut model, &mut o1).unwrap();
        assert!(editor.codebook.is_empty());
    }
}
