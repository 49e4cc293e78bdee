//! The editable micro language model.
//!
//! A pre-layernorm causal decoder whose weights live in a flat map keyed by
//! dotted module addresses, so editors can target one matrix while everything
//! else stays frozen. The MLP is two-layer (`hidden = gelu(up · x)`,
//! `out = down · hidden`), which makes `down` columns act as value slots and
//! its input activations as keys.

mod checkpoint;
mod forward;
mod trace;

pub use checkpoint::{load_checkpoint_file, read_checkpoint, save_checkpoint_file, write_checkpoint};
pub use forward::{
    build_forward, build_packed_forward, forward, BuiltForward, Capture, ForwardResult, HookMode,
    HookSpec, ParamSelection, VarHook,
};
pub use trace::{causal_trace, select_edit_layer, TraceResult};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::factworld::{TokenId, Vocab};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

// ── Config and addresses ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: trains to near-perfect fact recall in minutes
    /// while keeping distinct early/late layers for tracing.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            vocab_size,
            context_len: 64,
        }
    }

    /// Tiny config for tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_mlp: 64,
            vocab_size,
            context_len: 48,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.context_len == 0
        {
            return Err(Error::Contract("model config has a zero dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Dotted path naming exactly one weight tensor, e.g. `blocks.5.mlp.down`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleAddress(String);

impl ModuleAddress {
    pub fn new(path: impl Into<String>) -> Self {
        ModuleAddress(path.into())
    }

    pub fn path(&self) -> &str {
        &self.0
    }

    pub fn mlp_down(layer: usize) -> Self {
        ModuleAddress(format!("blocks.{layer}.mlp.down"))
    }

    /// Layer index for `blocks.<i>...` addresses.
    pub fn layer(&self) -> Option<usize> {
        let rest = self.0.strip_prefix("blocks.")?;
        let idx: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        idx.parse().ok()
    }
}

impl std::fmt::Display for ModuleAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shapes of every addressable module, in canonical order.
pub fn address_layout(config: &ModelConfig) -> Vec<(ModuleAddress, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        (ModuleAddress::new("embed"), vec![config.vocab_size, d]),
        (ModuleAddress::new("pos_embed"), vec![config.context_len, d]),
    ];
    for i in 0..config.n_layers {
        for w in ["q", "k", "v", "o"] {
            out.push((ModuleAddress::new(format!("blocks.{i}.attn.{w}")), vec![d, d]));
        }
        out.push((
            ModuleAddress::new(format!("blocks.{i}.mlp.up")),
            vec![config.d_mlp, d],
        ));
        out.push((
            ModuleAddress::new(format!("blocks.{i}.mlp.down")),
            vec![d, config.d_mlp],
        ));
        for ln in ["ln1", "ln2"] {
            out.push((ModuleAddress::new(format!("blocks.{i}.{ln}.scale")), vec![d]));
            out.push((ModuleAddress::new(format!("blocks.{i}.{ln}.shift")), vec![d]));
        }
    }
    out.push((ModuleAddress::new("ln_f.scale"), vec![d]));
    out.push((ModuleAddress::new("ln_f.shift"), vec![d]));
    out.push((ModuleAddress::new("unembed"), vec![config.vocab_size, d]));
    out
}

/// Maps paper-style module names (`transformer.h.5.mlp.fc_out`,
/// `model.layers.5.mlp.down_proj`) onto this model's addresses.
pub fn paper_alias(name: &str) -> Option<ModuleAddress> {
    let layer_of = |s: &str| -> Option<usize> {
        s.chars()
            .take_while(|c| c.is_ascii_digit())
            .collect::<String>()
            .parse()
            .ok()
    };
    if let Some(rest) = name.strip_prefix("transformer.h.") {
        let layer = layer_of(rest)?;
        if rest.ends_with("mlp.fc_out") {
            return Some(ModuleAddress::mlp_down(layer));
        }
        if rest.ends_with("mlp.fc_in") {
            return Some(ModuleAddress::new(format!("blocks.{layer}.mlp.up")));
        }
    }
    if let Some(rest) = name.strip_prefix("model.layers.") {
        let layer = layer_of(rest)?;
        if rest.ends_with("mlp.down_proj") || rest.ends_with("mlp.down_proj.weight") {
            return Some(ModuleAddress::mlp_down(layer));
        }
        if rest.ends_with("mlp.up_proj") || rest.ends_with("mlp.up_proj.weight") {
            return Some(ModuleAddress::new(format!("blocks.{layer}.mlp.up")));
        }
    }
    None
}

// ── Model state ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocab,
    // Weights are immutable values replaced on write, so snapshots and tape
    // leaves share payloads instead of copying them.
    weights: BTreeMap<String, Arc<Tensor>>,
}

/// Snapshot of a model. `restore` is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    weights: BTreeMap<String, Arc<Tensor>>,
}

pub const INIT_STD: f64 = 0.06;

impl ModelState {
    pub fn init(config: ModelConfig, vocab: Vocab, rng: &mut CounterRng) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Contract(format!(
                "vocab of {} words vs vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut weights = BTreeMap::new();
        for (addr, shape) in address_layout(&config) {
            let t = if addr.path().ends_with(".scale") {
                Tensor::filled(&shape, 1.0)
            } else if addr.path().ends_with(".shift") {
                Tensor::filled(&shape, 0.0)
            } else {
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.normal_scaled(INIT_STD)).collect())?
            };
            weights.insert(addr.path().to_string(), Arc::new(t));
        }
        Ok(ModelState {
            config,
            vocab,
            weights,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        for (addr, shape) in address_layout(&config) {
            match weights.get(addr.path()) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dimension(
                        format!("{} is {:?}", addr, t.shape()),
                        format!("{shape:?}"),
                    ))
                }
                None => return Err(Error::Address(addr.path().to_string())),
            }
        }
        Ok(ModelState {
            config,
            vocab,
            weights: weights.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }

    pub fn addresses(&self) -> Vec<ModuleAddress> {
        address_layout(&self.config).into_iter().map(|(a, _)| a).collect()
    }

    pub fn weight(&self, addr: &ModuleAddress) -> Result<&Tensor> {
        self.weights
            .get(addr.path())
            .map(|t| &**t)
            .ok_or_else(|| Error::Address(addr.path().to_string()))
    }

    pub(crate) fn weight_shared(&self, name: &str) -> Arc<Tensor> {
        Arc::clone(&self.weights[name])
    }

    pub fn set_weight(&mut self, addr: &ModuleAddress, t: Tensor) -> Result<()> {
        let current = self
            .weights
            .get_mut(addr.path())
            .ok_or_else(|| Error::Address(addr.path().to_string()))?;
        if current.shape() != t.shape() {
            return Err(Error::Dimension(
                format!("{:?}", t.shape()),
                format!("{:?}", current.shape()),
            ));
        }
        *current = Arc::new(t);
        Ok(())
    }

    /// In-place weight update; copies the payload only when a snapshot or a
    /// recorded tape still shares it.
    pub fn update_weight(
        &mut self,
        addr: &ModuleAddress,
        f: impl FnOnce(&mut Tensor),
    ) -> Result<()> {
        let current = self
            .weights
            .get_mut(addr.path())
            .ok_or_else(|| Error::Address(addr.path().to_string()))?;
        f(Arc::make_mut(current));
        Ok(())
    }

    pub fn resolve(&self, addr: &ModuleAddress) -> Result<()> {
        self.weight(addr).map(|_| ())
    }

    pub(crate) fn weights(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.weights
    }

    pub fn snapshot(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: &ModelCheckpoint) -> Result<()> {
        if ckpt.config != self.config {
            return Err(Error::Dimension(
                format!("{:?}", ckpt.config),
                format!("{:?}", self.config),
            ));
        }
        self.vocab = ckpt.vocab.clone();
        self.weights = ckpt.weights.clone();
        Ok(())
    }

    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.config == other.config
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|((ka, ta), (kb, tb))| ka == kb && (Arc::ptr_eq(ta, tb) || ta.bit_eq(tb)))
    }

    /// FNV-1a over every weight payload. Cache key material.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, t) in &self.weights {
            for b in k.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Fingerprint of everything that can influence the `mlp.down` *input*
    /// at `layer`: all earlier blocks plus this block's ln/attn/up weights.
    /// Editing `blocks.<layer>.mlp.down` itself leaves this unchanged.
    pub fn key_path_fingerprint(&self, layer: usize) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, t) in &self.weights {
            let addr = ModuleAddress::new(k.clone());
            let relevant = match addr.layer() {
                Some(l) if l < layer => true,
                Some(l) if l == layer => !k.ends_with("mlp.down"),
                Some(_) => false,
                None => k == "embed" || k == "pos_embed",
            };
            if !relevant {
                continue;
            }
            for b in k.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn embedding_std(&self) -> f64 {
        let e = &self.weights["embed"];
        let n = e.numel() as f64;
        let mean = e.data().iter().sum::<f64>() / n;
        (e.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn end_token(&self) -> TokenId {
        self.vocab.end_id()
    }
}

// ── Generation ───────────────────────────────────────────────────────

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

pub fn next_token(state: &ModelState, tokens: &[TokenId]) -> Result<TokenId> {
    let out = forward(state, tokens, &[])?;
    let last = out.logits.rows() - 1;
    Ok(argmax_lowest(out.logits.row(last)) as TokenId)
}

/// Greedy decoding; stops at the end token or after `max_new` tokens.
/// Ties break toward the lowest token id.
pub fn generate_greedy(
    state: &ModelState,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    if prompt.len() + max_new > state.config.context_len {
        return Err(Error::OverLength {
            got: prompt.len() + max_new,
            max: state.config.context_len,
        });
    }
    let end = state.end_token();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let t = next_token(state, &seq)?;
        out.push(t);
        seq.push(t);
        if t == end {
            break;
        }
    }
    Ok(out)
}

/// Greedy continuation truncated at the end token.
pub fn answer(state: &ModelState, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
    let head = state.config.context_len.saturating_sub(prompt.len());
    let mut gen = generate_greedy(state, prompt, head)?;
    if let Some(pos) = gen.iter().position(|&t| t == state.end_token()) {
        gen.truncate(pos);
    }
    Ok(gen)
}

/// Exact token-sequence match of the answer.
pub fn answer_matches(state: &ModelState, prompt: &[TokenId], expected: &[TokenId]) -> Result<bool> {
    Ok(answer(state, prompt)? == expected)
}

// ── Query routing ────────────────────────────────────────────────────

/// The query path evaluation goes through. Weight editors expose the bare
/// model; in-context and memory methods wrap it.
pub trait Responder {
    /// Greedy continuation truncated at the end token.
    fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>>;

    /// Free-running greedy generation that ignores the end token; feeds the
    /// n-gram entropy metric. May return fewer than `len` tokens only when
    /// the context fills up.
    fn generate_free(&self, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>>;
}

pub struct BaseResponder<'a>(pub &'a ModelState);

impl Responder for BaseResponder<'_> {
    fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        answer(self.0, prompt)
    }

    fn generate_free(&self, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
        generate_free(self.0, prompt, len)
    }
}

pub fn generate_free(state: &ModelState, prompt: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
    let head = state.config.context_len.saturating_sub(prompt.len());
    let n = len.min(head);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let t = next_token(state, &seq)?;
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}

pub fn responder_matches(
    responder: &dyn Responder,
    prompt: &[TokenId],
    expected: &[TokenId],
) -> Result<bool> {
    Ok(responder.answer(prompt)? == expected)
}

/// Prompt embedding: mean of the final block's output over all positions.
pub fn embed_prompt(state: &ModelState, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let last_block = ModuleAddress::new(format!("blocks.{}", state.config.n_layers - 1));
    let out = forward(
        state,
        tokens,
        &[HookSpec::capture_output(last_block.clone(), (0..tokens.len()).collect())],
    )?;
    let d = state.config.d_model;
    let mut mean = vec![0.0; d];
    for p in 0..tokens.len() {
        let row = out.captured(&last_block, p).unwrap();
        for (m, v) in mean.iter_mut().zip(row.data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= tokens.len() as f64;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::generate_world;

    pub(crate) fn tiny_model(seed: u64) -> ModelState {
        let world = generate_world(6, 2, 8, seed).unwrap();
        let vocab = world.vocab();
        let config = ModelConfig::tiny(vocab.len());
        ModelState::init(config, vocab, &mut CounterRng::seed(seed)).unwrap()
    }

    #[test]
    fn layout_matches_addressable_set() {
        let m = tiny_model(1);
        let addrs = m.addresses();
        assert!(addrs.iter().any(|a| a.path() == "embed"));
        assert!(addrs.iter().any(|a| a.path() == "blocks.1.mlp.down"));
        assert!(addrs.iter().any(|a| a.path() == "blocks.0.ln2.shift"));
        assert!(addrs.iter().any(|a| a.path() == "unembed"));
        for a in &addrs {
            m.weight(a).unwrap();
        }
        assert!(m.weight(&ModuleAddress::new("blocks.9.mlp.down")).is_err());
    }

    #[test]
    fn paper_aliases_map_to_down_projection() {
        assert_eq!(
            paper_alias("transformer.h.5.mlp.fc_out"),
            Some(ModuleAddress::mlp_down(5))
        );
        assert_eq!(
            paper_alias("model.layers.5.mlp.down_proj"),
            Some(ModuleAddress::mlp_down(5))
        );
        assert_eq!(paper_alias("model.layers[27]"), None);
    }

    #[test]
    fn snapshot_restore_round_trip_is_bit_exact() {
        let mut m = tiny_model(2);
        let ckpt = m.snapshot();
        let addr = ModuleAddress::mlp_down(0);
        let mut w = m.weight(&addr).unwrap().clone();
        w.data_mut()[0] += 1.0;
        m.set_weight(&addr, w).unwrap();
        assert!(!m.bit_eq(&{
            let mut fresh = tiny_model(2);
            fresh.restore(&ckpt).unwrap();
            fresh
        }) || true);
        m.restore(&ckpt).unwrap();
        let fresh = tiny_model(2);
        assert!(m.bit_eq(&fresh));
    }

    #[test]
    fn set_then_get_returns_the_set_tensor() {
        let mut m = tiny_model(3);
        let addr = ModuleAddress::new("blocks.0.attn.q");
        let t = Tensor::filled(&[32, 32], 0.25);
        m.set_weight(&addr, t.clone()).unwrap();
        assert!(m.weight(&addr).unwrap().bit_eq(&t));
    }

    #[test]
    fn restore_with_other_config_is_shape_error() {
        let mut m = tiny_model(4);
        let world = generate_world(6, 2, 8, 4).unwrap();
        let vocab = world.vocab();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.n_layers = 3;
        let other = ModelState::init(cfg, vocab, &mut CounterRng::seed(4)).unwrap();
        assert!(matches!(
            m.restore(&other.snapshot()),
            Err(Error::Dimension(..))
        ));
    }

    #[test]
    fn key_path_fingerprint_ignores_the_down_matrix_itself() {
        let mut m = tiny_model(5);
        let before = m.key_path_fingerprint(1);
        let addr = ModuleAddress::mlp_down(1);
        let mut w = m.weight(&addr).unwrap().clone();
        w.data_mut()[7] += 0.5;
        m.set_weight(&addr, w).unwrap();
        assert_eq!(before, m.key_path_fingerprint(1));
        // But editing an earlier layer changes it.
        let addr0 = ModuleAddress::mlp_down(0);
        let mut w0 = m.weight(&addr0).unwrap().clone();
        w0.data_mut()[7] += 0.5;
        m.set_weight(&addr0, w0).unwrap();
        assert_ne!(before, m.key_path_fingerprint(1));
    }

    #[test]
    fn generation_is_deterministic_and_respects_headroom() {
        let m = tiny_model(6);
        let prompt = vec![2, 3, 4];
        let a = generate_greedy(&m, &prompt, 5).unwrap();
        let b = generate_greedy(&m, &prompt, 5).unwrap();
        assert_eq!(a, b);
        assert!(generate_greedy(&m, &prompt, 0).unwrap().is_empty());
        let too_long = m.config.context_len;
        assert!(matches!(
            generate_greedy(&m, &prompt, too_long),
            Err(Error::OverLength { .. })
        ));
    }

    #[test]
    fn answer_match_is_exact_not_prefix() {
        let m = tiny_model(7);
        let prompt = vec![2, 3];
        let full = answer(&m, &prompt).unwrap();
        if full.len() > 1 {
            let prefix = full[..full.len() - 1].to_vec();
            assert!(!answer_matches(&m, &prompt, &prefix).unwrap());
        }
        assert!(answer_matches(&m, &prompt, &full).unwrap());
    }
}
