//! Rank-one model editing.
//!
//! Pipeline per request: average the `mlp.down` input key at the subject's
//! last token over prefixed prompts (k*), estimate a key covariance C from
//! corpus forward passes, optimize a value v* that makes the model emit the
//! target when substituted at (layer, subject-last), then apply the
//! closed-form rank-one update W ← W + (v* − Wk*)·uᵀ with
//! u = C⁻¹k*/(k*ᵀC⁻¹k*), so that W'k* = v* exactly.

use std::collections::BTreeMap;

use crate::editors::common::{mean_key, multi_rank_update, value_optimize, CovarianceCache};
use crate::editors::{EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::{emit_training_corpus, EditRequest, FactWorld, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{causal_trace, select_edit_layer, ModelState, ModuleAddress};
use crate::rng::CounterRng;
use crate::tensor;

pub struct RomeEditor {
    corpus: Vec<Vec<TokenId>>,
    cov: CovarianceCache,
}

impl RomeEditor {
    pub fn new(world: &FactWorld) -> Self {
        RomeEditor {
            corpus: emit_training_corpus(world, world.seed),
            cov: CovarianceCache::new(),
        }
    }

    fn pick_layer(
        &self,
        model: &ModelState,
        request: &EditRequest,
        hparams: &HparamSet,
        fallback: usize,
    ) -> Result<usize> {
        if !hparams.flag("auto_layer")? {
            return Ok(fallback);
        }
        let noise_scale = hparams.float("noise_scale")?;
        let n_samples = hparams.int("trace_samples")? as usize;
        let seed = hparams.int("trace_seed")? as u64;
        let salt = crate::editors::common::prompt_salt(&request.edit_prompt);
        let mut rng = CounterRng::seed(seed ^ salt);
        let trace = causal_trace(model, request, noise_scale, n_samples, &mut rng)?;
        match select_edit_layer(&trace) {
            Ok(layer) => Ok(layer),
            // Localization failure falls back to the configured layer.
            Err(Error::Localization(_)) => Ok(fallback),
            Err(e) => Err(e),
        }
    }
}

impl Editor for RomeEditor {
    fn method(&self) -> Method {
        Method::Rome
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let request = &requests[0];
        let target_addr = &hparams.targets()[0];
        let fallback_layer = target_addr
            .layer()
            .ok_or_else(|| Error::Address(target_addr.path().to_string()))?;
        let layer = self.pick_layer(model, request, hparams, fallback_layer)?;
        let address = ModuleAddress::mlp_down(layer);
        model.resolve(&address)?;

        let subject_last = request.subject_span.1 - 1;
        let prefix_count = hparams.int("prefix_count")? as usize;
        let cov_samples = hparams.int("covariance_samples")? as usize;
        let ridge = hparams.float("ridge")?;
        let v_steps = hparams.int("v_steps")? as usize;
        let v_lr = hparams.float("v_lr")?;
        let beta = hparams.float("beta")?;

        let k_star = mean_key(
            model,
            layer,
            &request.edit_prompt,
            subject_last,
            &self.corpus,
            prefix_count,
        )?;
        let cov = self
            .cov
            .get_or_build(model, layer, &self.corpus, cov_samples, ridge)?;

        let w = model.weight(&address)?.clone();
        let v0 = tensor::matvec(&w, &k_star)?;
        let opt = value_optimize(
            model,
            layer,
            subject_last,
            &request.edit_prompt,
            &request.target,
            v0.clone(),
            v_steps,
            v_lr,
            beta,
        )?;
        let residual = tensor::sub(&opt.v_star, &v0)?;
        let update = multi_rank_update(&[k_star.clone()], &[residual.clone()], &cov)?;
        let w_new = tensor::add(&w, &update.delta)?;

        // Exactness by construction: W'k* = v*.
        let achieved = tensor::matvec(&w_new, &k_star)?;
        let exact_err = achieved
            .data()
            .iter()
            .zip(opt.v_star.data())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));

        model.set_weight(&address, w_new)?;

        let mut deltas = BTreeMap::new();
        deltas.insert(address.clone(), update.delta);
        let mut outcome = EditOutcome::new(WeightDelta::Weights(deltas));
        outcome.log("layer", layer);
        outcome.log("target", address.path());
        outcome.log("kappa", format!("{:.6e}", update.kappas[0]));
        outcome.log("residual_norm", format!("{:.6e}", norm(&residual)));
        outcome.log("exactness_inf", format!("{exact_err:.3e}"));
        outcome.log("nll_first", format!("{:.6}", opt.first_nll));
        outcome.log("nll_last", format!("{:.6}", opt.last_nll));
        outcome.log("cov_samples", cov.n_samples);
        outcome.log("cov_ridge", format!("{:.3e}", cov.ridge_used));
        Ok(outcome)
    }

    fn reset(&mut self) {}
}

fn norm(t: &tensor::Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}
