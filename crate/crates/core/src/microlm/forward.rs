//! The forward pass: one tape-recorded implementation serves inference,
//! training, and hook-instrumented runs, so all paths agree bitwise.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factworld::TokenId;
use crate::microlm::{ModelState, ModuleAddress};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookMode {
    CaptureInput,
    CaptureOutput,
    ReplaceOutput,
    AddToOutput,
}

/// Instrumentation request for one activation site.
///
/// `payload` rows correspond to `positions` and must match the hooked
/// activation width. Capture modes return the selected rows keyed by
/// (address, position).
#[derive(Debug, Clone)]
pub struct HookSpec {
    pub address: ModuleAddress,
    pub positions: Vec<usize>,
    pub mode: HookMode,
    pub payload: Option<Tensor>,
}

impl HookSpec {
    pub fn capture_input(address: ModuleAddress, positions: Vec<usize>) -> Self {
        HookSpec {
            address,
            positions,
            mode: HookMode::CaptureInput,
            payload: None,
        }
    }

    pub fn capture_output(address: ModuleAddress, positions: Vec<usize>) -> Self {
        HookSpec {
            address,
            positions,
            mode: HookMode::CaptureOutput,
            payload: None,
        }
    }

    pub fn replace_output(address: ModuleAddress, positions: Vec<usize>, payload: Tensor) -> Self {
        HookSpec {
            address,
            positions,
            mode: HookMode::ReplaceOutput,
            payload: Some(payload),
        }
    }

    pub fn add_to_output(address: ModuleAddress, positions: Vec<usize>, payload: Tensor) -> Self {
        HookSpec {
            address,
            positions,
            mode: HookMode::AddToOutput,
            payload: Some(payload),
        }
    }
}

/// Differentiable single-row substitution, used by value optimization and
/// attribution. The replacement var must live on the same tape.
#[derive(Debug, Clone, Copy)]
pub enum VarHook {
    /// Replace the MLP sublayer output row at (layer, position).
    MlpOutput { layer: usize, position: usize, var: Var },
    /// Replace the post-gelu hidden row (the `mlp.down` input) at (layer, position).
    MlpHidden { layer: usize, position: usize, var: Var },
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub address: ModuleAddress,
    pub position: usize,
    pub mode: HookMode,
    pub value: Tensor,
}

pub struct ForwardResult {
    pub logits: Tensor,
    pub captures: Vec<Capture>,
}

impl ForwardResult {
    pub fn captured(&self, address: &ModuleAddress, position: usize) -> Option<&Tensor> {
        self.captures
            .iter()
            .find(|c| &c.address == address && c.position == position)
            .map(|c| &c.value)
    }
}

/// Activation sites that accept hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    Embed,
    Block(usize),
    Attn(usize),
    Mlp(usize),
    MlpDown(usize),
    FinalNorm,
}

fn resolve_site(state: &ModelState, addr: &ModuleAddress) -> Result<Site> {
    let p = addr.path();
    if p == "embed" {
        return Ok(Site::Embed);
    }
    if p == "ln_f" {
        return Ok(Site::FinalNorm);
    }
    if let Some(layer) = addr.layer() {
        if layer >= state.config.n_layers {
            return Err(Error::Address(p.to_string()));
        }
        let suffix = p
            .strip_prefix(&format!("blocks.{layer}"))
            .unwrap_or_default();
        return match suffix {
            "" => Ok(Site::Block(layer)),
            ".attn" => Ok(Site::Attn(layer)),
            ".mlp" => Ok(Site::Mlp(layer)),
            ".mlp.down" => Ok(Site::MlpDown(layer)),
            _ => Err(Error::Address(p.to_string())),
        };
    }
    Err(Error::Address(p.to_string()))
}

struct HookRuntime<'h> {
    hooks: &'h [HookSpec],
    sites: Vec<Site>,
    captures: Vec<Capture>,
}

impl<'h> HookRuntime<'h> {
    fn new(state: &ModelState, hooks: &'h [HookSpec], seq_len: usize) -> Result<Self> {
        let mut sites = Vec::with_capacity(hooks.len());
        for h in hooks {
            let site = resolve_site(state, &h.address)?;
            for &p in &h.positions {
                if p >= seq_len {
                    return Err(Error::Contract(format!(
                        "hook position {p} outside sequence of {seq_len}"
                    )));
                }
            }
            match h.mode {
                HookMode::ReplaceOutput | HookMode::AddToOutput => {
                    let payload = h.payload.as_ref().ok_or_else(|| {
                        Error::Contract(format!("hook at {} requires a payload", h.address))
                    })?;
                    if payload.rows() != h.positions.len() {
                        return Err(Error::Dimension(
                            format!("payload {:?}", payload.shape()),
                            format!("{} positions", h.positions.len()),
                        ));
                    }
                }
                _ => {}
            }
            sites.push(site);
        }
        Ok(HookRuntime {
            hooks,
            sites,
            captures: Vec::new(),
        })
    }

    fn capture(&mut self, tape: &Tape, site: Site, which: HookMode, value: Var) {
        for (h, s) in self.hooks.iter().zip(&self.sites) {
            if *s == site && h.mode == which {
                for &p in &h.positions {
                    self.captures.push(Capture {
                        address: h.address.clone(),
                        position: p,
                        mode: which,
                        value: Tensor::vector(tape.value(value).row(p).to_vec()),
                    });
                }
            }
        }
    }

    /// Applies replace/add hooks for a site's output, in declaration order.
    fn transform_output(&mut self, tape: &mut Tape, site: Site, mut value: Var) -> Result<Var> {
        self.capture(tape, site, HookMode::CaptureOutput, value);
        for (h, s) in self.hooks.iter().zip(&self.sites) {
            if *s != site {
                continue;
            }
            match h.mode {
                HookMode::ReplaceOutput => {
                    value =
                        tape.replace_rows_const(value, &h.positions, h.payload.as_ref().unwrap())?;
                }
                HookMode::AddToOutput => {
                    value = tape.add_rows_const(value, &h.positions, h.payload.as_ref().unwrap())?;
                }
                _ => {}
            }
        }
        Ok(value)
    }

    fn observe_input(&mut self, tape: &Tape, site: Site, value: Var) {
        self.capture(tape, site, HookMode::CaptureInput, value);
    }
}

/// Which weights become differentiable leaves.
pub enum ParamSelection<'a> {
    None,
    All,
    Only(&'a [ModuleAddress]),
}

impl ParamSelection<'_> {
    fn selected(&self, addr: &str) -> bool {
        match self {
            ParamSelection::None => false,
            ParamSelection::All => true,
            ParamSelection::Only(list) => list.iter().any(|a| a.path() == addr),
        }
    }
}

pub struct BuiltForward {
    pub logits: Var,
    pub params: BTreeMap<ModuleAddress, Var>,
    pub captures: Vec<Capture>,
}

/// Records the whole decoder pass on `tape`.
pub fn build_forward(
    tape: &mut Tape,
    state: &ModelState,
    tokens: &[TokenId],
    params: &ParamSelection,
    hooks: &[HookSpec],
    var_hooks: &[VarHook],
) -> Result<BuiltForward> {
    if tokens.len() > state.config.context_len {
        return Err(Error::OverLength {
            got: tokens.len(),
            max: state.config.context_len,
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let lengths = [tokens.len()];
    forward_core(tape, state, tokens, &positions, &lengths, params, hooks, var_hooks)
}

/// Several independent sequences share one forward pass: positions restart
/// per segment and the attention mask is block-diagonal causal, so packed
/// items cannot see each other. Weight gradients materialize once per pack
/// instead of once per item, which is what makes training fast.
pub fn build_packed_forward(
    tape: &mut Tape,
    state: &ModelState,
    items: &[&[TokenId]],
    params: &ParamSelection,
) -> Result<BuiltForward> {
    if items.is_empty() {
        return Err(Error::Contract("empty pack".into()));
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut lengths = Vec::with_capacity(items.len());
    for item in items {
        if item.len() > state.config.context_len {
            return Err(Error::OverLength {
                got: item.len(),
                max: state.config.context_len,
            });
        }
        tokens.extend_from_slice(item);
        positions.extend(0..item.len());
        lengths.push(item.len());
    }
    forward_core(tape, state, &tokens, &positions, &lengths, params, &[], &[])
}

#[allow(clippy::too_many_arguments)]
fn forward_core(
    tape: &mut Tape,
    state: &ModelState,
    tokens: &[TokenId],
    positions: &[usize],
    lengths: &[usize],
    params: &ParamSelection,
    hooks: &[HookSpec],
    var_hooks: &[VarHook],
) -> Result<BuiltForward> {
    let cfg = &state.config;
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    for &t in tokens {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::UnknownToken(format!("token id {t}")));
        }
    }
    for vh in var_hooks {
        let layer = match vh {
            VarHook::MlpOutput { layer, .. } | VarHook::MlpHidden { layer, .. } => *layer,
        };
        if layer >= cfg.n_layers {
            return Err(Error::Address(format!("blocks.{layer}.mlp")));
        }
    }

    let t_len = tokens.len();
    let mut rt = HookRuntime::new(state, hooks, t_len)?;
    let mut param_vars: BTreeMap<ModuleAddress, Var> = BTreeMap::new();

    let mut weight = |tape: &mut Tape, name: String| -> Var {
        let v = tape.leaf_shared(state.weight_shared(&name));
        if params.selected(&name) {
            param_vars.insert(ModuleAddress::new(name), v);
        }
        v
    };

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

    let embed = weight(tape, "embed".into());
    let pos_embed = weight(tape, "pos_embed".into());
    let tok = tape.gather_rows(embed, &ids)?;
    let pos = tape.gather_rows(pos_embed, positions)?;
    let mut h = tape.add(tok, pos)?;
    h = rt.transform_output(tape, Site::Embed, h)?;

    for layer in 0..cfg.n_layers {
        rt.observe_input(tape, Site::Block(layer), h);

        // Attention sublayer.
        let ln1 = layernorm_on_tape(tape, state, h, &format!("blocks.{layer}.ln1"), &mut weight)?;
        rt.observe_input(tape, Site::Attn(layer), ln1);
        let wq = weight(tape, format!("blocks.{layer}.attn.q"));
        let wk = weight(tape, format!("blocks.{layer}.attn.k"));
        let wv = weight(tape, format!("blocks.{layer}.attn.v"));
        let wo = weight(tape, format!("blocks.{layer}.attn.o"));
        let q = tape.matmul_nt(ln1, wq)?;
        let k = tape.matmul_nt(ln1, wk)?;
        let v = tape.matmul_nt(ln1, wv)?;
        let cat = tape.attention(q, k, v, lengths, cfg.n_heads)?;
        let mut attn_out = tape.matmul_nt(cat, wo)?;
        attn_out = rt.transform_output(tape, Site::Attn(layer), attn_out)?;
        h = tape.add(h, attn_out)?;

        // MLP sublayer.
        let ln2 = layernorm_on_tape(tape, state, h, &format!("blocks.{layer}.ln2"), &mut weight)?;
        rt.observe_input(tape, Site::Mlp(layer), ln2);
        let up = weight(tape, format!("blocks.{layer}.mlp.up"));
        let down = weight(tape, format!("blocks.{layer}.mlp.down"));
        let mut hidden = tape.matmul_nt(ln2, up)?;
        hidden = tape.gelu(hidden);
        rt.observe_input(tape, Site::MlpDown(layer), hidden);
        for vh in var_hooks {
            if let VarHook::MlpHidden {
                layer: l,
                position,
                var,
            } = vh
            {
                if *l == layer {
                    hidden = tape.replace_row(hidden, *var, *position)?;
                }
            }
        }
        let mut mlp_out = tape.matmul_nt(hidden, down)?;
        for vh in var_hooks {
            if let VarHook::MlpOutput {
                layer: l,
                position,
                var,
            } = vh
            {
                if *l == layer {
                    mlp_out = tape.replace_row(mlp_out, *var, *position)?;
                }
            }
        }
        mlp_out = rt.transform_output(tape, Site::Mlp(layer), mlp_out)?;
        mlp_out = rt.transform_output(tape, Site::MlpDown(layer), mlp_out)?;
        h = tape.add(h, mlp_out)?;
        h = rt.transform_output(tape, Site::Block(layer), h)?;
    }

    let xf = layernorm_on_tape(tape, state, h, "ln_f", &mut weight)?;
    let xf = rt.transform_output(tape, Site::FinalNorm, xf)?;
    let unembed = weight(tape, "unembed".into());
    let logits = tape.matmul_nt(xf, unembed)?;

    Ok(BuiltForward {
        logits,
        params: param_vars,
        captures: rt.captures,
    })
}

fn layernorm_on_tape(
    tape: &mut Tape,
    _state: &ModelState,
    x: Var,
    prefix: &str,
    weight: &mut impl FnMut(&mut Tape, String) -> Var,
) -> Result<Var> {
    let scale = weight(tape, format!("{prefix}.scale"));
    let shift = weight(tape, format!("{prefix}.shift"));
    let std = tape.standardize_rows(x)?;
    let scaled = tape.mul_row_broadcast(std, scale)?;
    tape.add_row_broadcast(scaled, shift)
}

/// Standard inference entry point: logits per position plus captured rows.
pub fn forward(state: &ModelState, tokens: &[TokenId], hooks: &[HookSpec]) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let built = build_forward(
        &mut tape,
        state,
        tokens,
        &ParamSelection::None,
        hooks,
        &[],
    )?;
    Ok(ForwardResult {
        logits: tape.value(built.logits).clone(),
        captures: built.captures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::generate_world;
    use crate::microlm::{ModelConfig, ModelState};
    use crate::rng::CounterRng;
    use crate::tensor;

    fn tiny_model(seed: u64) -> ModelState {
        let world = generate_world(6, 2, 8, seed).unwrap();
        let vocab = world.vocab();
        ModelState::init(ModelConfig::tiny(vocab.len()), vocab, &mut CounterRng::seed(seed))
            .unwrap()
    }

    #[test]
    fn empty_hook_list_matches_no_hooks_bitwise() {
        let m = tiny_model(1);
        let tokens = vec![2, 5, 7, 3];
        let a = forward(&m, &tokens, &[]).unwrap();
        let b = forward(&m, &tokens, &[]).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn self_substitution_is_identity() {
        let m = tiny_model(2);
        let tokens = vec![2, 5, 7, 3];
        let plain = forward(&m, &tokens, &[]).unwrap();
        for addr in ["embed", "blocks.0", "blocks.1.attn", "blocks.1.mlp", "blocks.0.mlp.down"] {
            let address = ModuleAddress::new(addr);
            let cap = forward(
                &m,
                &tokens,
                &[HookSpec::capture_output(address.clone(), vec![1, 3])],
            )
            .unwrap();
            let rows: Vec<Vec<f64>> = [1usize, 3]
                .iter()
                .map(|&p| cap.captured(&address, p).unwrap().data().to_vec())
                .collect();
            let payload = Tensor::from_rows(&rows);
            let replayed = forward(
                &m,
                &tokens,
                &[HookSpec::replace_output(address.clone(), vec![1, 3], payload)],
            )
            .unwrap();
            assert!(
                replayed.logits.bit_eq(&plain.logits),
                "self-substitution at {addr} changed logits"
            );
        }
    }

    #[test]
    fn zero_add_is_identity() {
        let m = tiny_model(3);
        let tokens = vec![2, 5, 7];
        let plain = forward(&m, &tokens, &[]).unwrap();
        let zeros = Tensor::zeros(&[2, m.config.d_model]);
        let hooked = forward(
            &m,
            &tokens,
            &[HookSpec::add_to_output(
                ModuleAddress::new("blocks.1"),
                vec![0, 2],
                zeros,
            )],
        )
        .unwrap();
        assert!(hooked.logits.bit_eq(&plain.logits));
    }

    #[test]
    fn unresolvable_hook_address_errors() {
        let m = tiny_model(4);
        let bad = HookSpec::capture_output(ModuleAddress::new("blocks.7.mlp"), vec![0]);
        assert!(matches!(
            forward(&m, &[2, 3], &[bad]),
            Err(crate::error::Error::Address(_))
        ));
    }

    #[test]
    fn softmax_rows_over_vocab_sum_to_one() {
        let m = tiny_model(5);
        let out = forward(&m, &[2, 3, 4], &[]).unwrap();
        for i in 0..out.logits.rows() {
            let sm = tensor::softmax(&Tensor::vector(out.logits.row(i).to_vec())).unwrap();
            let s: f64 = sm.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn over_length_and_unknown_token_error() {
        let m = tiny_model(6);
        let long = vec![2u32; m.config.context_len + 1];
        assert!(matches!(
            forward(&m, &long, &[]),
            Err(crate::error::Error::OverLength { .. })
        ));
        let huge = vec![m.config.vocab_size as u32 + 5];
        assert!(matches!(
            forward(&m, &huge, &[]),
            Err(crate::error::Error::UnknownToken(_))
        ));
    }

    #[test]
    fn packed_forward_matches_per_item_logits() {
        let m = tiny_model(9);
        let items: Vec<Vec<u32>> = vec![vec![2, 5, 7, 3], vec![4, 4, 6], vec![8, 2]];
        let refs: Vec<&[u32]> = items.iter().map(|v| v.as_slice()).collect();
        let mut tape = Tape::new();
        let built = build_packed_forward(&mut tape, &m, &refs, &ParamSelection::None).unwrap();
        let packed = tape.value(built.logits).clone();
        let mut offset = 0;
        for item in &items {
            let single = forward(&m, item, &[]).unwrap();
            for i in 0..item.len() {
                let p = packed.row(offset + i);
                let s = single.logits.row(i);
                for (a, b) in p.iter().zip(s) {
                    assert!(
                        (a - b).abs() < 1e-9,
                        "packed row diverges from single-sequence forward"
                    );
                }
            }
            offset += item.len();
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        // A randomized 2-block micro transformer, differentiated through the
        // full forward pass; checked against central differences.
        let m = tiny_model(7);
        let tokens = vec![2u32, 5, 7, 3];
        let targets = [(2usize, 4usize), (3, 6)];
        let check_addrs = [
            ModuleAddress::new("embed"),
            ModuleAddress::new("blocks.0.attn.q"),
            ModuleAddress::new("blocks.1.mlp.down"),
            ModuleAddress::new("blocks.1.ln2.scale"),
            ModuleAddress::new("unembed"),
        ];

        let mut tape = Tape::new();
        let built = build_forward(
            &mut tape,
            &m,
            &tokens,
            &ParamSelection::Only(&check_addrs),
            &[],
            &[],
        )
        .unwrap();
        let loss = tape.ce_mean(built.logits, &targets).unwrap();
        let wrt: Vec<_> = check_addrs.iter().map(|a| built.params[a]).collect();
        let grads = tape.grad(loss, &wrt).unwrap();

        let h = 1e-5;
        let mut rng = CounterRng::seed(123);
        for (ai, addr) in check_addrs.iter().enumerate() {
            let numel = m.weight(addr).unwrap().numel();
            for _ in 0..4 {
                let k = rng.below(numel);
                let eval = |delta: f64| -> f64 {
                    let mut pert = m.clone();
                    let mut w = pert.weight(addr).unwrap().clone();
                    w.data_mut()[k] += delta;
                    pert.set_weight(addr, w).unwrap();
                    let mut t2 = Tape::new();
                    let b2 = build_forward(
                        &mut t2,
                        &pert,
                        &tokens,
                        &ParamSelection::None,
                        &[],
                        &[],
                    )
                    .unwrap();
                    let l2 = t2.ce_mean(b2.logits, &targets).unwrap();
                    t2.value(l2).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads[ai].data()[k];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-6,
                    "{addr} coord {k}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}
