//! Knowledge-neuron editing.
//!
//! Integrated-gradients attribution of the old answer's probability with
//! respect to each MLP hidden neuron at the answer position (straight path
//! from zero activation, m-step right Riemann sum), then a value-slot shift:
//! each selected neuron's `mlp.down` column moves by α times the unembedding
//! difference between the new and old target tokens.

use std::collections::BTreeMap;

use crate::editors::{EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::harness::HparamSet;
use crate::microlm::{
    build_forward, forward, HookSpec, ModelState, ModuleAddress, ParamSelection, VarHook,
};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

pub struct KnEditor;

impl KnEditor {
    pub fn new() -> Self {
        KnEditor
    }

    /// Integrated gradients of p(token | prompt) w.r.t. the hidden vector at
    /// (layer, position): h ⊙ (1/m)·Σ_{t=1..m} ∇p |_{(t/m)·h}.
    pub fn integrated_gradients(
        model: &ModelState,
        prompt: &[crate::factworld::TokenId],
        layer: usize,
        position: usize,
        token: crate::factworld::TokenId,
        m: usize,
    ) -> Result<Vec<f64>> {
        let addr = ModuleAddress::mlp_down(layer);
        let captured = forward(
            model,
            prompt,
            &[HookSpec::capture_input(addr.clone(), vec![position])],
        )?;
        let h_act = captured
            .captured(&addr, position)
            .cloned()
            .ok_or_else(|| Error::Contract("activation capture missed".into()))?;

        let d_mlp = h_act.numel();
        let mut grad_sum = vec![0.0f64; d_mlp];
        for t in 1..=m {
            let alpha = t as f64 / m as f64;
            let scaled = tensor::scale(&h_act, alpha);
            let mut tape = Tape::new();
            let h_var = tape.leaf(scaled);
            let built = build_forward(
                &mut tape,
                model,
                prompt,
                &ParamSelection::None,
                &[],
                &[VarHook::MlpHidden {
                    layer,
                    position,
                    var: h_var,
                }],
            )?;
            let p = tape.target_prob(built.logits, position, token as usize)?;
            let g = tape.grad(p, &[h_var])?;
            for (s, gv) in grad_sum.iter_mut().zip(g[0].data()) {
                *s += gv;
            }
        }
        Ok(h_act
            .data()
            .iter()
            .zip(&grad_sum)
            .map(|(h, g)| h * g / m as f64)
            .collect())
    }
}

impl Default for KnEditor {
    fn default() -> Self {
        Self::new()
    }
}

impl Editor for KnEditor {
    fn method(&self) -> Method {
        Method::Kn
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let request = &requests[0];
        let m = hparams.int("steps")? as usize;
        let top_k = hparams.int("top_k")? as usize;
        let alpha = hparams.float("alpha")?;
        if top_k > model.config.d_mlp {
            return Err(Error::Contract(format!(
                "top_k {top_k} larger than hidden width {}",
                model.config.d_mlp
            )));
        }
        let layers: Vec<usize> = hparams
            .targets()
            .iter()
            .map(|a| a.layer().ok_or_else(|| Error::Address(a.path().to_string())))
            .collect::<Result<_>>()?;

        let position = request.edit_prompt.len() - 1;
        let old = request.old_target[0];
        let new = request.target[0];

        let mut scored: Vec<(usize, usize, f64)> = Vec::new();
        for &layer in &layers {
            let ig = Self::integrated_gradients(model, &request.edit_prompt, layer, position, old, m)?;
            for (i, v) in ig.into_iter().enumerate() {
                scored.push((layer, i, v));
            }
        }
        // Highest attribution first; ties break toward the lowest index.
        scored.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let selected: Vec<(usize, usize, f64)> = scored.into_iter().take(top_k).collect();

        let unembed = model.weight(&ModuleAddress::new("unembed"))?;
        let d_model = model.config.d_model;
        let diff: Vec<f64> = (0..d_model)
            .map(|j| alpha * (unembed.at(new as usize, j) - unembed.at(old as usize, j)))
            .collect();

        let mut deltas: BTreeMap<ModuleAddress, Tensor> = BTreeMap::new();
        for &(layer, neuron, _) in &selected {
            let addr = ModuleAddress::mlp_down(layer);
            let delta = deltas
                .entry(addr)
                .or_insert_with(|| Tensor::zeros(&[d_model, model.config.d_mlp]));
            for (j, dv) in diff.iter().enumerate() {
                let v = delta.at(j, neuron) + dv;
                delta.set(j, neuron, v);
            }
        }
        if alpha != 0.0 {
            for (addr, delta) in &deltas {
                let w_new = tensor::add(model.weight(addr)?, delta)?;
                model.set_weight(addr, w_new)?;
            }
        }

        let mut outcome = EditOutcome::new(WeightDelta::Weights(deltas));
        outcome.log("layers", format!("{layers:?}"));
        outcome.log("top_k", top_k);
        outcome.log("alpha", alpha);
        if let Some((l, n, v)) = selected.first() {
            outcome.log("top_neuron", format!("layer {l} neuron {n} ig {v:.3e}"));
        }
        Ok(outcome)
    }

    fn reset(&mut self) {}
}
