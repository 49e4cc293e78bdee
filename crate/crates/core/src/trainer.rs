//! Training entry points: base micro-LM pretraining and the SERAC-lite
//! scope classifier. Both are deterministic functions of (world, config,
//! seed); repeat runs produce bit-identical checkpoints and loss curves.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factworld::{emit_training_corpus, FactWorld, TokenId};
use crate::microlm::{
    build_packed_forward, embed_prompt, ModelCheckpoint, ModelConfig, ModelState, ParamSelection,
};
use crate::rng::CounterRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Greedily packs batch items (in order) into rows of at most
/// `budget` total tokens. Items shorter than 2 tokens carry no target and
/// are dropped.
fn pack_batch(batch: &[usize], corpus: &[Vec<TokenId>], budget: usize) -> Vec<Vec<usize>> {
    let mut packs: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for &idx in batch {
        let len = corpus[idx].len();
        if len < 2 {
            continue;
        }
        if used + len > budget && !current.is_empty() {
            packs.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += len;
    }
    if !current.is_empty() {
        packs.push(current);
    }
    packs
}

const MOMENTUM: f64 = 0.9;
const WARMUP_FRACTION: f64 = 0.05;
const EARLY_STOP_STREAK: usize = 3;

/// One training run: configuration in, recorded curves out.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Loss recorded every this many steps.
    pub record_every: usize,
    /// Probe recall evaluated every this many steps.
    pub eval_every: usize,
    pub loss_curve: Vec<(u64, f64)>,
    pub validation: Vec<(u64, f64)>,
    /// Deep copy of the best-recall model seen during the run.
    pub best_checkpoint: Option<ModelCheckpoint>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            steps: 30_000,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            record_every: 10,
            eval_every: 250,
            loss_curve: Vec::new(),
            validation: Vec::new(),
            best_checkpoint: None,
        }
    }
}

impl TrainRun {
    pub fn new(steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainRun {
            steps,
            batch_size,
            learning_rate,
            seed,
            ..TrainRun::default()
        }
    }

    /// Sensible defaults for the logistic scope classifier.
    pub fn classifier_default(seed: u64) -> Self {
        TrainRun {
            steps: 600,
            batch_size: 0,
            learning_rate: 0.5,
            seed,
            record_every: 50,
            eval_every: 100,
            ..TrainRun::default()
        }
    }

    pub fn loss_curve_lines(&self) -> String {
        let mut out = String::new();
        for (step, loss) in &self.loss_curve {
            out.push_str(&format!("{step},{loss:.6}\n"));
        }
        out
    }
}

/// One question prompt per fact, answered by the fact's object.
pub fn recall_probes(world: &FactWorld) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let vocab = world.vocab();
    world
        .facts
        .iter()
        .map(|f| {
            (
                world.question_tokens(f.subject, f.relation, 0),
                vec![vocab.id(&world.entities[f.object as usize].name).unwrap()],
            )
        })
        .collect()
}

/// Fraction of probes whose greedy answer matches exactly.
pub fn validate_step(model: &ModelState, probes: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let mut hits = 0usize;
    for (prompt, expected) in probes {
        if crate::microlm::answer_matches(model, prompt, expected)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Next-token cross-entropy pretraining with momentum gradient descent and
/// linear warmup; returns the checkpoint with the best probe recall. Halts
/// early once recall stays at 100% for three consecutive evaluations.
pub fn train_base_lm(
    world: &FactWorld,
    config: &ModelConfig,
    run: &mut TrainRun,
) -> Result<ModelState> {
    let vocab = world.vocab();
    if vocab.len() != config.vocab_size {
        return Err(Error::Contract(format!(
            "config vocab_size {} vs world vocabulary of {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let corpus = emit_training_corpus(world, run.seed);
    for seq in &corpus {
        if seq.len() > config.context_len {
            return Err(Error::OverLength {
                got: seq.len(),
                max: config.context_len,
            });
        }
    }

    let mut rng = CounterRng::seed(run.seed);
    let mut init_rng = rng.split();
    let mut order_rng = rng.split();
    let mut model = ModelState::init(config.clone(), vocab, &mut init_rng)?;

    let mut velocity: BTreeMap<String, Tensor> = model
        .addresses()
        .iter()
        .map(|a| {
            (
                a.path().to_string(),
                Tensor::zeros(model.weight(a).unwrap().shape()),
            )
        })
        .collect();

    let probes = recall_probes(world);
    let warmup = ((run.steps as f64 * WARMUP_FRACTION).ceil() as usize).max(1);
    let addresses = model.addresses();

    let mut order: Vec<usize> = Vec::new();
    let mut best_recall = -1.0;
    let mut perfect_streak = 0usize;

    run.loss_curve.clear();
    run.validation.clear();

    for step in 0..run.steps {
        // Epoch-wise shuffled batching.
        let mut batch = Vec::with_capacity(run.batch_size);
        while batch.len() < run.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order_rng.shuffle(&mut order);
            }
            batch.push(order.pop().unwrap());
        }

        // Batch items ride in packed rows (block-diagonal attention), so the
        // full weight gradient materializes once per pack, not once per item.
        // Rows hold several context windows; per-segment positions stay valid.
        let packs = pack_batch(&batch, &corpus, 4 * config.context_len);
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut target_total = 0usize;
        for pack in &packs {
            let items: Vec<&[crate::factworld::TokenId]> =
                pack.iter().map(|&i| corpus[i].as_slice()).collect();
            let mut targets: Vec<(usize, usize)> = Vec::new();
            let mut offset = 0usize;
            for item in &items {
                for i in 0..item.len() - 1 {
                    targets.push((offset + i, item[i + 1] as usize));
                }
                offset += item.len();
            }

            let mut tape = Tape::new();
            let built = build_packed_forward(&mut tape, &model, &items, &ParamSelection::All)?;
            // Next-token cross-entropy, averaged over the pack's targets.
            let mean = tape.ce_mean(built.logits, &targets)?;
            let loss = tape.scale(mean, targets.len() as f64);
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                // run.best_checkpoint keeps the last good model.
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {step}; last good checkpoint retained"
                )));
            }
            loss_sum += loss_v;
            target_total += targets.len();

            let grads = tape.backward(loss)?;
            for (addr, var) in &built.params {
                if let Some(g) = &grads[var.index()] {
                    match grad_acc.get_mut(addr.path()) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_acc.insert(addr.path().to_string(), g.clone());
                        }
                    }
                }
            }
        }
        let batch_loss = loss_sum / target_total as f64;

        // Linear warmup over the first 5% of the budget, then linear decay
        // to 5% of the base rate by the final step, so marginal facts stop
        // flipping once memorization is nearly complete.
        let ramp = ((step + 1) as f64 / warmup as f64).min(1.0);
        let decay = 1.0 - 0.95 * (step as f64 / run.steps as f64);
        let lr_t = run.learning_rate * ramp * decay;
        let inv_batch = 1.0 / target_total as f64;
        for addr in &addresses {
            let Some(g) = grad_acc.get(addr.path()) else {
                continue;
            };
            let vel = velocity.get_mut(addr.path()).unwrap();
            for (v, gv) in vel.data_mut().iter_mut().zip(g.data()) {
                *v = MOMENTUM * *v + gv * inv_batch;
            }
            model.update_weight(addr, |w| {
                for (wv, v) in w.data_mut().iter_mut().zip(vel.data()) {
                    *wv -= lr_t * *v;
                }
            })?;
        }

        if step % run.record_every == 0 {
            run.loss_curve.push((step as u64, batch_loss));
        }

        let last_step = step + 1 == run.steps;
        if (step + 1) % run.eval_every == 0 || last_step {
            let recall = validate_step(&model, &probes)?;
            run.validation.push(((step + 1) as u64, recall));
            if recall > best_recall {
                best_recall = recall;
                run.best_checkpoint = Some(model.snapshot());
            }
            if recall >= 1.0 {
                perfect_streak += 1;
                if perfect_streak >= EARLY_STOP_STREAK {
                    break;
                }
            } else {
                perfect_streak = 0;
            }
        }
    }

    match &run.best_checkpoint {
        Some(ckpt) => {
            let mut best = model;
            best.restore(ckpt)?;
            Ok(best)
        }
        None => Ok(model),
    }
}

// ── Scope classifier (SERAC-lite) ────────────────────────────────────

/// Logistic gate over similarity features deciding whether a query belongs
/// to a stored edit's scope.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeClassifier {
    pub weights: [f64; 2],
    pub bias: f64,
    pub threshold: f64,
    pub held_out_accuracy: f64,
}

impl ScopeClassifier {
    pub fn score(&self, features: [f64; 2]) -> f64 {
        sigmoid(self.weights[0] * features[0] + self.weights[1] * features[1] + self.bias)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Jaccard overlap of the token sets.
pub fn token_overlap(a: &[TokenId], b: &[TokenId]) -> f64 {
    use std::collections::HashSet;
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// (embedding cosine, token overlap) between a query and a stored prompt.
pub fn similarity_features(
    emb_q: &[f64],
    emb_r: &[f64],
    q_tokens: &[TokenId],
    r_tokens: &[TokenId],
) -> [f64; 2] {
    [cosine(emb_q, emb_r), token_overlap(q_tokens, r_tokens)]
}

/// Trains the logistic scope gate on prompt pairs drawn from the first half
/// of the world's facts; the threshold maximizes balanced accuracy on a
/// held-out split of those pairs.
pub fn train_scope_classifier(
    model: &ModelState,
    world: &FactWorld,
    run: &mut TrainRun,
) -> Result<ScopeClassifier> {
    if world.facts.len() < 2 {
        return Err(Error::Contract(
            "world too small to build negative pairs".into(),
        ));
    }
    let n_pair_facts = (world.facts.len() / 2).max(2);
    let mut rng = CounterRng::seed(run.seed ^ 0x5ca1_ab1e);

    let fact_slice = &world.facts[..n_pair_facts.min(world.facts.len())];
    let mut embeddings: Vec<Vec<Vec<f64>>> = Vec::with_capacity(fact_slice.len());
    let mut prompts: Vec<Vec<Vec<TokenId>>> = Vec::with_capacity(fact_slice.len());
    for f in fact_slice {
        let n_templates = world.relations[f.relation as usize].templates.len();
        let ps: Vec<Vec<TokenId>> = (0..n_templates)
            .map(|t| world.question_tokens(f.subject, f.relation, t))
            .collect();
        let es = ps
            .iter()
            .map(|p| embed_prompt(model, p))
            .collect::<Result<Vec<_>>>()?;
        prompts.push(ps);
        embeddings.push(es);
    }

    let mut examples: Vec<([f64; 2], f64)> = Vec::new();
    for (fi, ps) in prompts.iter().enumerate() {
        for t in 1..ps.len() {
            examples.push((
                similarity_features(&embeddings[fi][0], &embeddings[fi][t], &ps[0], &ps[t]),
                1.0,
            ));
            // A negative partner drawn from a different fact.
            let mut gi = rng.below(prompts.len());
            if gi == fi {
                gi = (gi + 1) % prompts.len();
            }
            let gt = rng.below(prompts[gi].len());
            examples.push((
                similarity_features(
                    &embeddings[fi][0],
                    &embeddings[gi][gt],
                    &ps[0],
                    &prompts[gi][gt],
                ),
                0.0,
            ));
        }
    }

    rng.shuffle(&mut examples);
    let held = (examples.len() / 5).max(1);
    let (held_out, train) = examples.split_at(held);

    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    run.loss_curve.clear();
    for step in 0..run.steps {
        let mut gw = [0.0f64; 2];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (f, y) in train {
            let p = sigmoid(w[0] * f[0] + w[1] * f[1] + b);
            let err = p - y;
            gw[0] += err * f[0];
            gw[1] += err * f[1];
            gb += err;
            loss -= y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln();
        }
        let inv = 1.0 / train.len() as f64;
        w[0] -= run.learning_rate * gw[0] * inv;
        w[1] -= run.learning_rate * gw[1] * inv;
        b -= run.learning_rate * gb * inv;
        if step % run.record_every == 0 {
            run.loss_curve.push((step as u64, loss * inv));
        }
    }

    // Threshold sweep on the held-out split.
    let mut scored: Vec<(f64, f64)> = held_out
        .iter()
        .map(|(f, y)| (sigmoid(w[0] * f[0] + w[1] * f[1] + b), *y))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut best_threshold = 0.5;
    let mut best_balanced = -1.0;
    let mut candidates = vec![0.0];
    candidates.extend(scored.windows(2).map(|w| (w[0].0 + w[1].0) / 2.0));
    candidates.push(1.0);
    for &th in &candidates {
        let (mut tp, mut tn, mut fp, mut fnn) = (0.0, 0.0, 0.0, 0.0);
        for &(s, y) in &scored {
            match (s >= th, y >= 0.5) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let sens = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let spec = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
        let balanced = (sens + spec) / 2.0;
        if balanced > best_balanced {
            best_balanced = balanced;
            best_threshold = th;
        }
    }

    Ok(ScopeClassifier {
        weights: w,
        bias: b,
        threshold: best_threshold,
        held_out_accuracy: best_balanced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::generate_world;

    #[test]
    fn one_fact_world_memorizes_quickly() {
        let world = generate_world(4, 2, 1, 7).unwrap();
        let vocab = world.vocab();
        let config = ModelConfig::tiny(vocab.len());
        let mut run = TrainRun::new(500, 8, 0.02, 7);
        run.eval_every = 25;
        let model = train_base_lm(&world, &config, &mut run).unwrap();
        let probes = recall_probes(&world);
        let recall = validate_step(&model, &probes).unwrap();
        assert!(
            (recall - 1.0).abs() < 1e-12,
            "memorization floor not reached: recall {recall}"
        );
        assert!(!run.loss_curve.is_empty());
        assert!(!run.validation.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let world = generate_world(5, 2, 4, 3).unwrap();
        let vocab = world.vocab();
        let config = ModelConfig::tiny(vocab.len());
        let mut run_a = TrainRun::new(40, 4, 0.02, 11);
        run_a.eval_every = 20;
        let a = train_base_lm(&world, &config, &mut run_a).unwrap();
        let mut run_b = TrainRun::new(40, 4, 0.02, 11);
        run_b.eval_every = 20;
        let b = train_base_lm(&world, &config, &mut run_b).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(run_a.loss_curve, run_b.loss_curve);
        assert_eq!(run_a.validation, run_b.validation);
    }

    #[test]
    fn best_checkpoint_never_beaten_by_returned_model() {
        let world = generate_world(6, 2, 6, 5).unwrap();
        let vocab = world.vocab();
        let config = ModelConfig::tiny(vocab.len());
        let mut run = TrainRun::new(60, 4, 0.02, 2);
        run.eval_every = 20;
        let model = train_base_lm(&world, &config, &mut run).unwrap();
        let probes = recall_probes(&world);
        let returned = validate_step(&model, &probes).unwrap();
        let best_recorded = run
            .validation
            .iter()
            .map(|(_, r)| *r)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(returned >= best_recorded - 1e-12);
    }

    #[test]
    fn recall_is_order_invariant() {
        let world = generate_world(5, 2, 4, 9).unwrap();
        let vocab = world.vocab();
        let config = ModelConfig::tiny(vocab.len());
        let model = ModelState::init(config, vocab, &mut CounterRng::seed(1)).unwrap();
        let mut probes = recall_probes(&world);
        let a = validate_step(&model, &probes).unwrap();
        probes.reverse();
        let b = validate_step(&model, &probes).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_probe_set_is_contract_error() {
        let world = generate_world(5, 2, 4, 9).unwrap();
        let vocab = world.vocab();
        let model =
            ModelState::init(ModelConfig::tiny(vocab.len()), vocab, &mut CounterRng::seed(1))
                .unwrap();
        assert!(matches!(validate_step(&model, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn classifier_trains_deterministically_and_scores_identity_high() {
        let world = generate_world(12, 3, 24, 4).unwrap();
        let vocab = world.vocab();
        let model =
            ModelState::init(ModelConfig::tiny(vocab.len()), vocab, &mut CounterRng::seed(2))
                .unwrap();
        let mut run_a = TrainRun::classifier_default(5);
        let clf_a = train_scope_classifier(&model, &world, &mut run_a).unwrap();
        let mut run_b = TrainRun::classifier_default(5);
        let clf_b = train_scope_classifier(&model, &world, &mut run_b).unwrap();
        assert_eq!(clf_a, clf_b);

        // An identical pair has maximal features; it must clear the gate.
        let score = clf_a.score([1.0, 1.0]);
        assert!(
            score > clf_a.threshold,
            "identity score {score} vs threshold {}",
            clf_a.threshold
        );
    }

    #[test]
    fn token_overlap_is_jaccard() {
        assert_eq!(token_overlap(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_overlap(&[1, 2], &[3, 4]), 0.0);
        let o = token_overlap(&[1, 2, 3], &[2, 3, 4]);
        assert!((o - 0.5).abs() < 1e-12);
    }
}
