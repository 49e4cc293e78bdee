//! Constrained fine-tuning of a single MLP matrix.
//!
//! Gradient descent on the NLL of the target given the edit prompt, with
//! every entry clamped to an L∞ ball of radius ε around its original value
//! after each step. Stops early as soon as the greedy answer matches.

use std::collections::BTreeMap;

use crate::editors::common::teacher_targets;
use crate::editors::{EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::harness::HparamSet;
use crate::microlm::{answer_matches, build_forward, ModelState, ParamSelection};
use crate::tape::Tape;
use crate::tensor;

pub struct FtlEditor;

impl FtlEditor {
    pub fn new() -> Self {
        FtlEditor
    }
}

impl Default for FtlEditor {
    fn default() -> Self {
        Self::new()
    }
}

impl Editor for FtlEditor {
    fn method(&self) -> Method {
        Method::FtL
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let request = &requests[0];
        let address = hparams.targets()[0].clone();
        let steps = hparams.int("steps")? as usize;
        let lr = hparams.float("lr")?;
        let eps = hparams.float("eps_inf")?;

        let w0 = model.weight(&address)?.clone();
        let (inputs, targets) = teacher_targets(&request.edit_prompt, &request.target);
        let param_list = [address.clone()];

        let mut steps_taken = 0usize;
        let mut last_loss = f64::NAN;
        for _ in 0..steps {
            if answer_matches(model, &request.edit_prompt, &request.target)? {
                break;
            }
            let mut tape = Tape::new();
            let built = build_forward(
                &mut tape,
                model,
                &inputs,
                &ParamSelection::Only(&param_list),
                &[],
                &[],
            )?;
            let loss = tape.ce_mean(built.logits, &targets)?;
            last_loss = tape.value(loss).item();
            if !last_loss.is_finite() {
                model.set_weight(&address, w0)?;
                return Err(Error::Divergence(format!(
                    "non-finite loss at fine-tuning step {steps_taken}"
                )));
            }
            let g = tape.grad(loss, &[built.params[&address]])?;
            let mut w = model.weight(&address)?.clone();
            for ((wv, gv), w0v) in w.data_mut().iter_mut().zip(g[0].data()).zip(w0.data()) {
                let stepped = *wv - lr * gv;
                *wv = stepped.clamp(w0v - eps, w0v + eps);
            }
            model.set_weight(&address, w)?;
            steps_taken += 1;
        }

        let w_final = model.weight(&address)?.clone();
        let delta = tensor::sub(&w_final, &w0)?;
        let max_change = delta.max_abs();
        let hit = answer_matches(model, &request.edit_prompt, &request.target)?;

        let mut deltas = BTreeMap::new();
        deltas.insert(address.clone(), delta);
        let mut outcome = EditOutcome::new(WeightDelta::Weights(deltas));
        outcome.log("target", address.path());
        outcome.log("steps_taken", steps_taken);
        outcome.log("last_loss", format!("{last_loss:.6}"));
        outcome.log("max_change_inf", format!("{max_change:.3e}"));
        outcome.log("answer_flipped", hit);
        Ok(outcome)
    }

    fn reset(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::{apply_to_model, rollback};
    use crate::harness::{default_hparams, set_knob};

    #[test]
    fn zero_radius_leaves_weights_bitwise_unchanged() {
        let (_, mut model, bench) = tiny_setup();
        let mut hp = default_hparams(Method::FtL, &model.config).unwrap();
        set_knob(&mut hp, "eps_inf", 0.0);
        let before = model.snapshot();
        let mut editor = FtlEditor::new();
        apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let mut base = model.clone();
        base.restore(&before).unwrap();
        assert!(model.bit_eq(&base));
    }

    #[test]
    fn clamp_invariant_holds_after_editing() {
        let (_, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::FtL, &model.config).unwrap();
        let eps = hp.float("eps_inf").unwrap();
        let address = hp.targets()[0].clone();
        let w0 = model.weight(&address).unwrap().clone();
        let mut editor = FtlEditor::new();
        let outcome = apply_to_model(&mut editor, &mut model, &bench[..1], &hp, false).unwrap();
        let w1 = model.weight(&address).unwrap();
        let mut max_dev = 0.0_f64;
        for (a, b) in w1.data().iter().zip(w0.data()) {
            max_dev = max_dev.max((a - b).abs());
        }
        assert!(
            max_dev <= eps + 1e-12,
            "clamp violated: {max_dev:.3e} > {eps:.3e}"
        );
        let logged: f64 = outcome.log_value("max_change_inf").unwrap().parse().unwrap();
        assert!((logged - max_dev).abs() < 1e-12);
    }

    #[test]
    fn rollback_restores_bit_exactly() {
        let (_, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::FtL, &model.config).unwrap();
        let before = model.snapshot();
        let mut editor = FtlEditor::new();
        let mut outcome = apply_to_model(&mut editor, &mut model, &bench[..1], &hp, true).unwrap();
        rollback(&mut editor, &mut model, &mut outcome).unwrap();
        let mut base = model.clone();
        base.restore(&before).unwrap();
        assert!(model.bit_eq(&base));
    }
}
