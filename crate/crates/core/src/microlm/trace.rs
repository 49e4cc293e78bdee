//! Causal tracing: locate the layer whose states carry a fact.
//!
//! The clean run is recorded, subject-token embeddings are corrupted with
//! Gaussian noise, and each (layer, token) cell measures how much restoring
//! that layer's clean post-MLP state at that token recovers the clean target
//! probability. Restoration replaces the residual-stream state after the
//! block's MLP, so restoring every cell provably recovers the clean run.

use crate::error::{Error, Result};
use crate::factworld::{EditRequest, TokenId};
use crate::microlm::{forward, HookSpec, ModelState, ModuleAddress};
use crate::rng::CounterRng;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone)]
pub struct TraceResult {
    /// Indirect effect per (layer, token): p_restored − p_corrupted.
    pub grid: Tensor,
    pub clean_prob: f64,
    pub corrupted_prob: f64,
    /// Token index of the last subject token in the traced prompt.
    pub subject_last: usize,
}

fn target_prob(state: &ModelState, tokens: &[TokenId], hooks: &[HookSpec], target: TokenId) -> Result<f64> {
    let out = forward(state, tokens, hooks)?;
    let last = out.logits.rows() - 1;
    let sm = softmax(&Tensor::vector(out.logits.row(last).to_vec()))?;
    Ok(sm.data()[target as usize])
}

pub fn causal_trace(
    state: &ModelState,
    request: &EditRequest,
    noise_scale: f64,
    n_samples: usize,
    rng: &mut CounterRng,
) -> Result<TraceResult> {
    let (s_start, s_end) = request.subject_span;
    if s_start >= s_end || s_end > request.edit_prompt.len() {
        return Err(Error::Contract(format!(
            "subject span {s_start}..{s_end} invalid for prompt of {}",
            request.edit_prompt.len()
        )));
    }
    if noise_scale < 0.0 {
        return Err(Error::Contract("noise_scale must be non-negative".into()));
    }
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be positive".into()));
    }
    let tokens = &request.edit_prompt;
    let t_len = tokens.len();
    let n_layers = state.config.n_layers;
    let target = request.old_target[0];

    // Clean run: capture every block's output at every position.
    let capture_hooks: Vec<HookSpec> = (0..n_layers)
        .map(|l| {
            HookSpec::capture_output(ModuleAddress::new(format!("blocks.{l}")), (0..t_len).collect())
        })
        .collect();
    let clean = forward(state, tokens, &capture_hooks)?;
    let last = clean.logits.rows() - 1;
    let clean_prob = softmax(&Tensor::vector(clean.logits.row(last).to_vec()))?.data()
        [target as usize];

    let mut clean_rows: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
    for l in 0..n_layers {
        let addr = ModuleAddress::new(format!("blocks.{l}"));
        for p in 0..t_len {
            clean_rows[l].push(clean.captured(&addr, p).unwrap().clone());
        }
    }

    let sigma = noise_scale * state.embedding_std();
    let subject_positions: Vec<usize> = (s_start..s_end).collect();
    let d = state.config.d_model;

    let mut grid = Tensor::zeros(&[n_layers, t_len]);
    let mut corrupted_prob = 0.0;

    for _ in 0..n_samples {
        let noise = Tensor::new(
            vec![subject_positions.len(), d],
            (0..subject_positions.len() * d)
                .map(|_| rng.normal_scaled(sigma))
                .collect(),
        )?;
        let corrupt_hook = HookSpec::add_to_output(
            ModuleAddress::new("embed"),
            subject_positions.clone(),
            noise,
        );

        let p_corr = target_prob(state, tokens, &[corrupt_hook.clone()], target)?;
        corrupted_prob += p_corr / n_samples as f64;

        for l in 0..n_layers {
            for p in 0..t_len {
                let restore = HookSpec::replace_output(
                    ModuleAddress::new(format!("blocks.{l}")),
                    vec![p],
                    Tensor::new(vec![1, d], clean_rows[l][p].data().to_vec())?,
                );
                let p_rest =
                    target_prob(state, tokens, &[corrupt_hook.clone(), restore], target)?;
                let cur = grid.at(l, p);
                grid.set(l, p, cur + (p_rest - p_corr) / n_samples as f64);
            }
        }
    }

    Ok(TraceResult {
        grid,
        clean_prob,
        corrupted_prob,
        subject_last: s_end - 1,
    })
}

/// Argmax over layers of the indirect effect at the subject's last token.
/// Ties break toward the lowest layer; an all-zero grid is a localization
/// error (the caller falls back to its configured layer).
pub fn select_edit_layer(trace: &TraceResult) -> Result<usize> {
    if trace.grid.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Localization(
            "causal trace grid is all zeros".into(),
        ));
    }
    let col = trace.subject_last;
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for l in 0..trace.grid.rows() {
        let v = trace.grid.at(l, col);
        if v > best_v {
            best_v = v;
            best = l;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_edit_benchmark, generate_world};
    use crate::microlm::{ModelConfig, ModelState};

    fn fixture() -> (ModelState, EditRequest) {
        let world = generate_world(10, 3, 20, 3).unwrap();
        let vocab = world.vocab();
        let model =
            ModelState::init(ModelConfig::tiny(vocab.len()), vocab, &mut CounterRng::seed(3))
                .unwrap();
        let req = generate_edit_benchmark(&world, 1, 5).unwrap().remove(0);
        (model, req)
    }

    #[test]
    fn zero_noise_gives_all_zero_grid() {
        let (model, req) = fixture();
        let mut rng = CounterRng::seed(1);
        let trace = causal_trace(&model, &req, 0.0, 2, &mut rng).unwrap();
        assert!(trace.grid.data().iter().all(|&v| v == 0.0));
        assert_eq!(trace.clean_prob, trace.corrupted_prob);
    }

    #[test]
    fn full_restoration_recovers_clean_probability() {
        let (model, req) = fixture();
        let tokens = &req.edit_prompt;
        let t_len = tokens.len();
        let n_layers = model.config.n_layers;
        let d = model.config.d_model;
        let target = req.old_target[0];

        let capture_hooks: Vec<HookSpec> = (0..n_layers)
            .map(|l| {
                HookSpec::capture_output(
                    ModuleAddress::new(format!("blocks.{l}")),
                    (0..t_len).collect(),
                )
            })
            .collect();
        let clean = forward(&model, tokens, &capture_hooks).unwrap();
        let last = clean.logits.rows() - 1;
        let clean_prob = softmax(&Tensor::vector(clean.logits.row(last).to_vec()))
            .unwrap()
            .data()[target as usize];

        let mut rng = CounterRng::seed(2);
        let (s0, s1) = req.subject_span;
        let noise = Tensor::new(
            vec![s1 - s0, d],
            (0..(s1 - s0) * d)
                .map(|_| rng.normal_scaled(3.0 * model.embedding_std()))
                .collect(),
        )
        .unwrap();
        let mut hooks =
            vec![HookSpec::add_to_output(ModuleAddress::new("embed"), (s0..s1).collect(), noise)];
        for l in 0..n_layers {
            let addr = ModuleAddress::new(format!("blocks.{l}"));
            let rows: Vec<Vec<f64>> = (0..t_len)
                .map(|p| clean.captured(&addr, p).unwrap().data().to_vec())
                .collect();
            hooks.push(HookSpec::replace_output(
                addr,
                (0..t_len).collect(),
                Tensor::from_rows(&rows),
            ));
        }
        let restored = target_prob(&model, tokens, &hooks, target).unwrap();
        assert!(
            (restored - clean_prob).abs() < 1e-9,
            "restored {restored} vs clean {clean_prob}"
        );
    }

    #[test]
    fn grid_entries_bounded_and_final_cell_positive_direction() {
        let (model, req) = fixture();
        let mut rng = CounterRng::seed(7);
        let trace = causal_trace(&model, &req, 3.0, 2, &mut rng).unwrap();
        for &v in trace.grid.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        // Restoring the final layer at the last token pins the last position
        // to the clean state.
        let l = model.config.n_layers - 1;
        let t = req.edit_prompt.len() - 1;
        let cell = trace.grid.at(l, t);
        let expected = trace.clean_prob - trace.corrupted_prob;
        assert!((cell - expected).abs() < 1e-12);
        if trace.clean_prob > trace.corrupted_prob {
            assert!(cell > 0.0);
        }
    }

    #[test]
    fn select_layer_argmax_and_tie_rules() {
        let mut grid = Tensor::zeros(&[6, 4]);
        grid.set(3, 3, 0.5);
        let trace = TraceResult {
            grid,
            clean_prob: 0.9,
            corrupted_prob: 0.1,
            subject_last: 3,
        };
        assert_eq!(select_edit_layer(&trace).unwrap(), 3);

        let mut grid = Tensor::zeros(&[6, 4]);
        grid.set(2, 3, 0.5);
        grid.set(5, 3, 0.5);
        let trace = TraceResult {
            grid,
            clean_prob: 0.9,
            corrupted_prob: 0.1,
            subject_last: 3,
        };
        assert_eq!(select_edit_layer(&trace).unwrap(), 2, "ties pick the lowest layer");

        let trace = TraceResult {
            grid: Tensor::zeros(&[6, 4]),
            clean_prob: 0.5,
            corrupted_prob: 0.5,
            subject_last: 3,
        };
        assert!(matches!(
            select_edit_layer(&trace),
            Err(Error::Localization(_))
        ));
    }

    #[test]
    fn degenerate_subject_span_is_contract_error() {
        let (model, mut req) = fixture();
        req.subject_span = (2, 2);
        let mut rng = CounterRng::seed(1);
        assert!(matches!(
            causal_trace(&model, &req, 1.0, 1, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
