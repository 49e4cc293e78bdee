//! Mass editing over a range of MLP layers.
//!
//! Per request the target value z is optimized at the last layer of the
//! range exactly as in the rank-one method; the remaining gap (z − current
//! value at z's layer) is then spread across the range: each layer absorbs
//! 1/(layers remaining) of it through the multi-request closed-form update,
//! and activations are recomputed before the next layer. With a single
//! layer and a single request this reduces to the rank-one edit exactly.

use std::collections::BTreeMap;

use crate::editors::common::{mean_key, multi_rank_update, value_optimize, CovarianceCache};
use crate::editors::{EditOutcome, Editor, Method, WeightDelta};
use crate::error::{Error, Result};
use crate::factworld::{emit_training_corpus, EditRequest, FactWorld, TokenId};
use crate::harness::HparamSet;
use crate::microlm::{ModelState, ModuleAddress};
use crate::tensor::{self, Tensor};

pub struct MemitEditor {
    corpus: Vec<Vec<TokenId>>,
    cov: CovarianceCache,
}

impl MemitEditor {
    pub fn new(world: &FactWorld) -> Self {
        MemitEditor {
            corpus: emit_training_corpus(world, world.seed),
            cov: CovarianceCache::new(),
        }
    }
}

impl Editor for MemitEditor {
    fn method(&self) -> Method {
        Method::Memit
    }

    fn apply_impl(
        &mut self,
        model: &mut ModelState,
        requests: &[EditRequest],
        hparams: &HparamSet,
    ) -> Result<EditOutcome> {
        let mut layers: Vec<usize> = hparams
            .targets()
            .iter()
            .map(|a| a.layer().ok_or_else(|| Error::Address(a.path().to_string())))
            .collect::<Result<_>>()?;
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::Hparams("memit requires a layer range".into()));
        }
        let z_layer = *layers.last().unwrap();

        let prefix_count = hparams.int("prefix_count")? as usize;
        let cov_samples = hparams.int("covariance_samples")? as usize;
        let ridge = hparams.float("ridge")?;
        let v_steps = hparams.int("v_steps")? as usize;
        let v_lr = hparams.float("v_lr")?;
        let beta = hparams.float("beta")?;

        let z_address = ModuleAddress::mlp_down(z_layer);
        let pre_weights: BTreeMap<String, Tensor> = layers
            .iter()
            .map(|&l| {
                let a = ModuleAddress::mlp_down(l);
                Ok((a.path().to_string(), model.weight(&a)?.clone()))
            })
            .collect::<Result<_>>()?;

        // Step 1: optimize the target value z per request at the last layer.
        let subject_lasts: Vec<usize> = requests.iter().map(|r| r.subject_span.1 - 1).collect();
        let mut z_targets = Vec::with_capacity(requests.len());
        let mut first_nlls = Vec::new();
        let mut last_nlls = Vec::new();
        for (r, &pos) in requests.iter().zip(&subject_lasts) {
            let k_z = mean_key(model, z_layer, &r.edit_prompt, pos, &self.corpus, prefix_count)?;
            let w_z = model.weight(&z_address)?;
            let v0 = tensor::matvec(w_z, &k_z)?;
            let opt = value_optimize(
                model,
                z_layer,
                pos,
                &r.edit_prompt,
                &r.target,
                v0,
                v_steps,
                v_lr,
                beta,
            )
            .map_err(|e| {
                restore(model, &pre_weights);
                e
            })?;
            first_nlls.push(opt.first_nll);
            last_nlls.push(opt.last_nll);
            z_targets.push(opt.v_star);
        }

        // Step 2: spread residuals across the range, low layers first.
        let mut deltas: BTreeMap<ModuleAddress, Tensor> = BTreeMap::new();
        let mut applied: Vec<usize> = Vec::new();
        let total = layers.len();
        for (li, &layer) in layers.iter().enumerate() {
            let remaining = (total - li) as f64;
            let step = (|| -> Result<(ModuleAddress, Tensor)> {
                // Current value each z-key maps to under the present weights.
                let mut residuals = Vec::with_capacity(requests.len());
                let mut keys = Vec::with_capacity(requests.len());
                for (ri, r) in requests.iter().enumerate() {
                    let pos = subject_lasts[ri];
                    let k_z =
                        mean_key(model, z_layer, &r.edit_prompt, pos, &self.corpus, prefix_count)?;
                    let w_z = model.weight(&z_address)?;
                    let current = tensor::matvec(w_z, &k_z)?;
                    let mut gap = tensor::sub(&z_targets[ri], &current)?;
                    for g in gap.data_mut() {
                        *g /= remaining;
                    }
                    residuals.push(gap);
                    keys.push(if layer == z_layer {
                        k_z
                    } else {
                        mean_key(model, layer, &r.edit_prompt, pos, &self.corpus, prefix_count)?
                    });
                }
                let cov = self
                    .cov
                    .get_or_build(model, layer, &self.corpus, cov_samples, ridge)?;
                let update = multi_rank_update(&keys, &residuals, &cov)?;
                let address = ModuleAddress::mlp_down(layer);
                let w_new = tensor::add(model.weight(&address)?, &update.delta)?;
                model.set_weight(&address, w_new)?;
                Ok((address, update.delta))
            })();
            match step {
                Ok((address, delta)) => {
                    deltas.insert(address, delta);
                    applied.push(layer);
                }
                Err(e) => {
                    restore(model, &pre_weights);
                    return Err(Error::EditFailure(format!(
                        "layer {layer} failed after layers {applied:?} applied: {e}"
                    )));
                }
            }
        }

        // Residual left after the final layer (should be ~0 by exactness).
        let mut final_gap = 0.0_f64;
        for (ri, r) in requests.iter().enumerate() {
            let pos = subject_lasts[ri];
            let k_z = mean_key(model, z_layer, &r.edit_prompt, pos, &self.corpus, prefix_count)?;
            let now = tensor::matvec(model.weight(&z_address)?, &k_z)?;
            for (a, b) in now.data().iter().zip(z_targets[ri].data()) {
                final_gap = final_gap.max((a - b).abs());
            }
        }

        let mut outcome = EditOutcome::new(WeightDelta::Weights(deltas));
        outcome.log("layers", format!("{layers:?}"));
        outcome.log("z_layer", z_layer);
        outcome.log("requests", requests.len());
        outcome.log("final_gap_inf", format!("{final_gap:.3e}"));
        outcome.log(
            "nll_first",
            format!("{:.6}", first_nlls.iter().sum::<f64>() / first_nlls.len() as f64),
        );
        outcome.log(
            "nll_last",
            format!("{:.6}", last_nlls.iter().sum::<f64>() / last_nlls.len() as f64),
        );
        Ok(outcome)
    }

    fn reset(&mut self) {}
}

fn restore(model: &mut ModelState, saved: &BTreeMap<String, Tensor>) {
    for (path, w) in saved {
        let _ = model.set_weight(&ModuleAddress::new(path.clone()), w.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::test_support::tiny_setup;
    use crate::editors::{apply_to_model, RomeEditor};
    use crate::harness::{default_hparams, hparams_with_targets};

    #[test]
    fn single_layer_single_request_reduces_to_rome() {
        let (world, model, bench) = tiny_setup();
        let rome_hp = default_hparams(Method::Rome, &model.config).unwrap();
        let layer = rome_hp.targets()[0].clone();

        for (i, req) in bench.iter().take(3).enumerate() {
            let mut m_rome = model.clone();
            let mut rome = RomeEditor::new(&world);
            apply_to_model(&mut rome, &mut m_rome, std::slice::from_ref(req), &rome_hp, false)
                .unwrap();

            let memit_hp =
                hparams_with_targets(Method::Memit, &model.config, std::slice::from_ref(&layer))
                    .unwrap();
            let mut m_memit = model.clone();
            let mut memit = MemitEditor::new(&world);
            apply_to_model(&mut memit, &mut m_memit, std::slice::from_ref(req), &memit_hp, false)
                .unwrap();

            let mut max_diff = 0.0_f64;
            for addr in model.addresses() {
                let a = m_rome.weight(&addr).unwrap();
                let b = m_memit.weight(&addr).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    max_diff = max_diff.max((x - y).abs());
                }
            }
            assert!(
                max_diff < 1e-6,
                "edit {i}: reduction mismatch {max_diff:.3e}"
            );
        }
    }

    #[test]
    fn batch_of_requests_applied_in_one_call() {
        let (world, mut model, bench) = tiny_setup();
        let hp = default_hparams(Method::Memit, &model.config).unwrap();
        let mut editor = MemitEditor::new(&world);
        let outcome = apply_to_model(&mut editor, &mut model, &bench[..4], &hp, false).unwrap();
        assert_eq!(outcome.log_value("requests"), Some("4"));
        let gap: f64 = outcome.log_value("final_gap_inf").unwrap().parse().unwrap();
        assert!(gap < 1e-8, "final layer misses its targets by {gap:.3e}");
    }

    #[test]
    fn achieved_target_means_near_zero_deltas() {
        // If z already equals the current value, every layer delta is ~0.
        let (world, model, bench) = tiny_setup();
        let hp = default_hparams(Method::Memit, &model.config).unwrap();
        let mut editor = MemitEditor::new(&world);
        let layers: Vec<usize> = hp.targets().iter().map(|a| a.layer().unwrap()).collect();
        let z_layer = *layers.last().unwrap();
        let req = &bench[0];
        let pos = req.subject_span.1 - 1;
        let k = mean_key(&model, z_layer, &req.edit_prompt, pos, &editor.corpus, 4).unwrap();
        let w = model
            .weight(&ModuleAddress::mlp_down(z_layer))
            .unwrap()
            .clone();
        let z = tensor::matvec(&w, &k).unwrap();

        // Hand-spread the zero residual across layers.
        let mut m = model.clone();
        let total = layers.len();
        for (li, &layer) in layers.iter().enumerate() {
            let remaining = (total - li) as f64;
            let k_now = mean_key(&m, z_layer, &req.edit_prompt, pos, &editor.corpus, 4).unwrap();
            let current = tensor::matvec(
                m.weight(&ModuleAddress::mlp_down(z_layer)).unwrap(),
                &k_now,
            )
            .unwrap();
            let mut gap = tensor::sub(&z, &current).unwrap();
            for g in gap.data_mut() {
                *g /= remaining;
            }
            let k_l = if layer == z_layer {
                k_now
            } else {
                mean_key(&m, layer, &req.edit_prompt, pos, &editor.corpus, 4).unwrap()
            };
            let cov = editor
                .cov
                .get_or_build(&m, layer, &editor.corpus.clone(), 200, 0.01)
                .unwrap();
            let up = multi_rank_update(&[k_l], &[gap], &cov).unwrap();
            assert!(up.delta.max_abs() < 1e-8, "layer {layer} delta not ~0");
            let addr = ModuleAddress::mlp_down(layer);
            let w_new = tensor::add(m.weight(&addr).unwrap(), &up.delta).unwrap();
            m.set_weight(&addr, w_new).unwrap();
        }
    }
}
