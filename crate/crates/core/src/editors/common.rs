//! Machinery shared by the locate-then-edit methods: key extraction,
//! covariance estimation with ridge retry, value optimization, and the
//! rank-one / multi-request closed-form updates.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::factworld::TokenId;
use crate::linalg::{solve_spd, CholeskyFactor};
use crate::microlm::{build_forward, forward, HookSpec, ModelState, ModuleAddress, ParamSelection, VarHook};
use crate::rng::CounterRng;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

pub fn weight_payload_bytes(model: &ModelState) -> u64 {
    model
        .addresses()
        .iter()
        .map(|a| model.weight(a).unwrap().numel() as u64 * 8)
        .sum()
}

pub(crate) fn fnv64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub(crate) fn prompt_salt(tokens: &[TokenId]) -> u64 {
    fnv64(tokens.iter().flat_map(|t| t.to_le_bytes()))
}

/// Deterministic prefix choice: a pure function of (corpus length, count,
/// salt), so two editors computing keys for the same prompt agree exactly.
pub(crate) fn prefix_indices(corpus_len: usize, n: usize, salt: u64) -> Vec<usize> {
    let mut rng = CounterRng::seed(salt ^ 0x70f1_9e37_c0ffee11);
    (0..n).map(|_| rng.below(corpus_len)).collect()
}

/// Teacher-forcing layout: inputs and (position, token) targets for scoring
/// `target` as the continuation of `prompt`.
pub(crate) fn teacher_targets(
    prompt: &[TokenId],
    target: &[TokenId],
) -> (Vec<TokenId>, Vec<(usize, usize)>) {
    let mut inputs = prompt.to_vec();
    if target.len() > 1 {
        inputs.extend_from_slice(&target[..target.len() - 1]);
    }
    let targets = (0..target.len())
        .map(|i| (prompt.len() - 1 + i, target[i] as usize))
        .collect();
    (inputs, targets)
}

/// The `mlp.down` input (post-gelu hidden state) at one position.
pub(crate) fn mlp_key_at(
    model: &ModelState,
    layer: usize,
    tokens: &[TokenId],
    position: usize,
) -> Result<Tensor> {
    let addr = ModuleAddress::mlp_down(layer);
    let out = forward(
        model,
        tokens,
        &[HookSpec::capture_input(addr.clone(), vec![position])],
    )?;
    out.captured(&addr, position)
        .cloned()
        .ok_or_else(|| Error::Contract("key capture missed".into()))
}

/// k*: the mean `mlp.down` input at the subject's last token, averaged over
/// the bare prompt and corpus-sampled prefixes prepended to it.
pub(crate) fn mean_key(
    model: &ModelState,
    layer: usize,
    prompt: &[TokenId],
    subject_last: usize,
    corpus: &[Vec<TokenId>],
    n_prefixes: usize,
) -> Result<Tensor> {
    let mut acc = mlp_key_at(model, layer, prompt, subject_last)?;
    let mut count = 1.0;
    if !corpus.is_empty() {
        let salt = prompt_salt(prompt);
        for idx in prefix_indices(corpus.len(), n_prefixes, salt) {
            let prefix = &corpus[idx];
            let room = model.config.context_len.saturating_sub(prompt.len());
            let take = prefix.len().min(room);
            let mut tokens = prefix[..take].to_vec();
            tokens.extend_from_slice(prompt);
            let key = mlp_key_at(model, layer, &tokens, take + subject_last)?;
            for (a, k) in acc.data_mut().iter_mut().zip(key.data()) {
                *a += k;
            }
            count += 1.0;
        }
    }
    for a in acc.data_mut() {
        *a /= count;
    }
    Ok(acc)
}

/// Key second-moment matrix at one layer, with a ridge term, factored once
/// and cached by (layer, key-path fingerprint).
pub(crate) struct CovEntry {
    pub factor: CholeskyFactor,
    pub n_samples: usize,
    pub ridge_used: f64,
}

#[derive(Default)]
pub(crate) struct CovarianceCache {
    entries: HashMap<(usize, u64), Rc<CovEntry>>,
}

impl CovarianceCache {
    pub fn new() -> Self {
        CovarianceCache::default()
    }

    pub fn get_or_build(
        &mut self,
        model: &ModelState,
        layer: usize,
        corpus: &[Vec<TokenId>],
        n_samples: usize,
        ridge_lambda: f64,
    ) -> Result<Rc<CovEntry>> {
        let key = (layer, model.key_path_fingerprint(layer));
        if let Some(e) = self.entries.get(&key) {
            return Ok(Rc::clone(e));
        }
        let entry = Rc::new(build_covariance(model, layer, corpus, n_samples, ridge_lambda)?);
        self.entries.insert(key, Rc::clone(&entry));
        Ok(entry)
    }
}

fn build_covariance(
    model: &ModelState,
    layer: usize,
    corpus: &[Vec<TokenId>],
    n_samples: usize,
    ridge_lambda: f64,
) -> Result<CovEntry> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty corpus for covariance".into()));
    }
    let d = model.config.d_mlp;
    let addr = ModuleAddress::mlp_down(layer);
    let mut c = vec![0.0f64; d * d];
    let mut collected = 0usize;
    let mut item = 0usize;
    // Corpus positions in canonical order, cycling until the sample is full.
    while collected < n_samples {
        let seq = &corpus[item % corpus.len()];
        item += 1;
        if seq.is_empty() {
            continue;
        }
        let out = forward(
            model,
            seq,
            &[HookSpec::capture_input(addr.clone(), (0..seq.len()).collect())],
        )?;
        for cap in &out.captures {
            if collected == n_samples {
                break;
            }
            let k = cap.value.data();
            for i in 0..d {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                let row = &mut c[i * d..(i + 1) * d];
                for (cv, kv) in row.iter_mut().zip(k) {
                    *cv += ki * kv;
                }
            }
            collected += 1;
        }
    }
    let inv = 1.0 / collected as f64;
    for v in &mut c {
        *v *= inv;
    }
    let mean_diag = (0..d).map(|i| c[i * d + i]).sum::<f64>() / d as f64;

    // Ridge retry is owned here: λ, then 10λ, then 100λ.
    let mut ridge = ridge_lambda;
    for _ in 0..3 {
        let mut cm = Tensor::new(vec![d, d], c.clone())?;
        for i in 0..d {
            let v = cm.at(i, i) + ridge * mean_diag;
            cm.set(i, i, v);
        }
        match CholeskyFactor::factor(&cm) {
            Ok(factor) => {
                return Ok(CovEntry {
                    factor,
                    n_samples: collected,
                    ridge_used: ridge,
                })
            }
            Err(_) => ridge *= 10.0,
        }
    }
    Err(Error::EditFailure(format!(
        "covariance at layer {layer} not positive definite after ridge retries"
    )))
}

/// Optimizes the vector substituted for the MLP output at (layer, position)
/// to minimize the NLL of `target` given `prompt`, plus β‖v − v₀‖².
pub(crate) struct ValueOpt {
    pub v_star: Tensor,
    pub first_nll: f64,
    pub last_nll: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn value_optimize(
    model: &ModelState,
    layer: usize,
    position: usize,
    prompt: &[TokenId],
    target: &[TokenId],
    v_init: Tensor,
    steps: usize,
    lr: f64,
    beta: f64,
) -> Result<ValueOpt> {
    let (inputs, targets) = teacher_targets(prompt, target);
    let v0 = v_init.clone();
    let mut v = v_init;
    let mut first_nll = f64::NAN;
    let mut last_nll = f64::NAN;
    for step in 0..steps {
        let mut tape = Tape::new();
        let v_var = tape.leaf(v.clone());
        let v0_var = tape.leaf(v0.clone());
        let built = build_forward(
            &mut tape,
            model,
            &inputs,
            &ParamSelection::None,
            &[],
            &[VarHook::MlpOutput {
                layer,
                position,
                var: v_var,
            }],
        )?;
        let nll = tape.ce_mean(built.logits, &targets)?;
        let nll_v = tape.value(nll).item();
        if step == 0 {
            first_nll = nll_v;
        }
        last_nll = nll_v;
        let diff = tape.sub(v_var, v0_var)?;
        let sq = tape.mul(diff, diff)?;
        let pen_sum = tape.sum(sq);
        let pen = tape.scale(pen_sum, beta);
        let loss = tape.add(nll, pen)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Divergence(format!(
                "value optimization non-finite at step {step}"
            )));
        }
        let g = tape.grad(loss, &[v_var])?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g[0].data()) {
            *vi -= lr * gi;
        }
        if !v.all_finite() {
            return Err(Error::Divergence(format!(
                "value vector non-finite at step {step}"
            )));
        }
    }
    Ok(ValueOpt {
        v_star: v,
        first_nll,
        last_nll,
    })
}

/// Closed-form update forcing W'·kᵢ = W·kᵢ + rᵢ for every (key, residual)
/// pair, spending the change along C⁻¹-preferred directions:
/// Δ = R · (KᵀC⁻¹K)⁻¹ · KᵀC⁻¹. With one pair this is the rank-one update
/// Δ = r · (C⁻¹k)ᵀ / (kᵀC⁻¹k).
pub(crate) struct RankUpdate {
    pub delta: Tensor,
    /// Diagonal of KᵀC⁻¹K, one κ per request.
    pub kappas: Vec<f64>,
}

pub(crate) fn multi_rank_update(
    keys: &[Tensor],
    residuals: &[Tensor],
    cov: &CovEntry,
) -> Result<RankUpdate> {
    let n = keys.len();
    if n == 0 || residuals.len() != n {
        return Err(Error::Contract("keys/residuals mismatch".into()));
    }
    let d_mlp = keys[0].numel();
    let d_model = residuals[0].numel();

    let mut k_mat = Tensor::zeros(&[d_mlp, n]);
    for (j, k) in keys.iter().enumerate() {
        for i in 0..d_mlp {
            k_mat.set(i, j, k.data()[i]);
        }
    }
    let x = cov.factor.solve_mat(&k_mat)?; // C⁻¹K
    let gram = tensor::matmul_tn(&k_mat, &x)?; // KᵀC⁻¹K, SPD for independent keys
    let s = solve_spd(&gram, &tensor::transpose(&x)).map_err(|e| match e {
        Error::Singular(msg) => Error::EditFailure(format!(
            "request keys are linearly dependent in the C⁻¹ metric: {msg}"
        )),
        other => other,
    })?; // (KᵀC⁻¹K)⁻¹ KᵀC⁻¹

    let mut res_mat = Tensor::zeros(&[d_model, n]);
    for (j, r) in residuals.iter().enumerate() {
        for i in 0..d_model {
            res_mat.set(i, j, r.data()[i]);
        }
    }
    let delta = tensor::matmul(&res_mat, &s)?;
    let kappas = (0..n).map(|i| gram.at(i, i)).collect();
    Ok(RankUpdate { delta, kappas })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_worked_instance_identity_covariance() {
        // W = I₂, C = I₂, k* = [1,0], v* = [3,0] → W' = [[3,0],[0,1]].
        let w = Tensor::identity(2);
        let cov = CovEntry {
            factor: CholeskyFactor::factor(&Tensor::identity(2)).unwrap(),
            n_samples: 2,
            ridge_used: 0.0,
        };
        let k = Tensor::vector(vec![1.0, 0.0]);
        let v_star = Tensor::vector(vec![3.0, 0.0]);
        let v0 = tensor::matvec(&w, &k).unwrap();
        let r = tensor::sub(&v_star, &v0).unwrap();
        let up = multi_rank_update(&[k.clone()], &[r], &cov).unwrap();
        let w_new = tensor::add(&w, &up.delta).unwrap();
        assert_eq!(w_new.data(), &[3.0, 0.0, 0.0, 1.0]);
        let achieved = tensor::matvec(&w_new, &k).unwrap();
        assert_eq!(achieved.data(), v_star.data());
    }

    #[test]
    fn rank_update_is_exact_on_random_systems() {
        let mut rng = CounterRng::seed(31);
        for trial in 0..20 {
            let d_mlp = 24;
            let d_model = 10;
            // SPD covariance from random keys.
            let mut c = Tensor::zeros(&[d_mlp, d_mlp]);
            for _ in 0..80 {
                let k: Vec<f64> = (0..d_mlp).map(|_| rng.normal()).collect();
                for i in 0..d_mlp {
                    for j in 0..d_mlp {
                        let v = c.at(i, j) + k[i] * k[j] / 80.0;
                        c.set(i, j, v);
                    }
                }
            }
            for i in 0..d_mlp {
                let v = c.at(i, i) + 0.01;
                c.set(i, i, v);
            }
            let cov = CovEntry {
                factor: CholeskyFactor::factor(&c).unwrap(),
                n_samples: 80,
                ridge_used: 0.01,
            };
            let n = 1 + trial % 4;
            let keys: Vec<Tensor> = (0..n)
                .map(|_| Tensor::vector((0..d_mlp).map(|_| rng.normal()).collect()))
                .collect();
            let residuals: Vec<Tensor> = (0..n)
                .map(|_| Tensor::vector((0..d_model).map(|_| rng.normal()).collect()))
                .collect();
            let up = multi_rank_update(&keys, &residuals, &cov).unwrap();
            // Exactness: Δ·kᵢ = rᵢ within 1e-8.
            for (k, r) in keys.iter().zip(&residuals) {
                let got = tensor::matvec(&up.delta, k).unwrap();
                for (g, want) in got.data().iter().zip(r.data()) {
                    assert!(
                        (g - want).abs() < 1e-8,
                        "trial {trial}: {g} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn prefix_choice_is_a_pure_function() {
        let a = prefix_indices(100, 20, 12345);
        let b = prefix_indices(100, 20, 12345);
        assert_eq!(a, b);
        let c = prefix_indices(100, 20, 54321);
        assert_ne!(a, c);
    }

    #[test]
    fn teacher_targets_layout() {
        let (inputs, targets) = teacher_targets(&[5, 6, 7], &[9]);
        assert_eq!(inputs, vec![5, 6, 7]);
        assert_eq!(targets, vec![(2, 9)]);
        let (inputs, targets) = teacher_targets(&[5, 6], &[9, 4, 2]);
        assert_eq!(inputs, vec![5, 6, 9, 4]);
        assert_eq!(targets, vec![(1, 9), (2, 4), (3, 2)]);
    }
}
