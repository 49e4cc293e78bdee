//! Hyperparameter records: a strict per-method knob registry, one canonical
//! flat `key = value` text format, layer-ratio defaults scaled to the micro
//! model, and a content fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use crate::editors::Method;
use crate::error::{Error, Result};
use crate::microlm::{address_layout, ModelConfig, ModuleAddress};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Knob {
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HparamSet {
    method: Method,
    targets: Vec<ModuleAddress>,
    numbers: BTreeMap<String, Knob>,
    flags: BTreeMap<String, bool>,
    pub source_path: Option<String>,
}

impl HparamSet {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn targets(&self) -> &[ModuleAddress] {
        &self.targets
    }

    pub fn int(&self, name: &str) -> Result<i64> {
        match self.numbers.get(name) {
            Some(Knob::Int(v)) => Ok(*v),
            Some(Knob::Float(v)) => Ok(*v as i64),
            None => Err(Error::Hparams(format!(
                "{} has no knob `{name}`",
                self.method
            ))),
        }
    }

    pub fn float(&self, name: &str) -> Result<f64> {
        match self.numbers.get(name) {
            Some(Knob::Float(v)) => Ok(*v),
            Some(Knob::Int(v)) => Ok(*v as f64),
            None => Err(Error::Hparams(format!(
                "{} has no knob `{name}`",
                self.method
            ))),
        }
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        self.flags.get(name).copied().ok_or_else(|| {
            Error::Hparams(format!("{} has no flag `{name}`", self.method))
        })
    }

    /// Canonical serialization; parsing it back yields an equal set.
    pub fn canonical(&self) -> String {
        let mut out = format!("method = {}\n", self.method.name());
        for t in &self.targets {
            out.push_str(&format!("target = {}\n", t.path()));
        }
        for (k, v) in &self.flags {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in &self.numbers {
            match v {
                Knob::Int(i) => out.push_str(&format!("{k} = {i}\n")),
                Knob::Float(f) => out.push_str(&format!("{k} = {f:?}\n")),
            }
        }
        out
    }

    /// Content hash over the canonical form (source path excluded).
    pub fn fingerprint(&self) -> u64 {
        crate::harness::fnv64_str(&self.canonical())
    }
}

#[derive(Clone, Copy)]
enum KnobDefault {
    Int(i64),
    Float(f64),
    Flag(bool),
}

/// The registry: every knob a method accepts, with its default. Unknown
/// names in a file are load-time errors.
fn registry(method: Method) -> Vec<(&'static str, KnobDefault)> {
    use KnobDefault::*;
    match method {
        Method::FtL => vec![("steps", Int(25)), ("lr", Float(5e-2)), ("eps_inf", Float(1e-3))],
        Method::Kn => vec![("steps", Int(20)), ("top_k", Int(10)), ("alpha", Float(2.0))],
        Method::Rome => vec![
            ("v_steps", Int(25)),
            ("v_lr", Float(0.5)),
            ("beta", Float(0.0625)),
            ("ridge", Float(1e-2)),
            ("covariance_samples", Int(10_000)),
            ("prefix_count", Int(20)),
            ("noise_scale", Float(3.0)),
            ("trace_samples", Int(10)),
            ("trace_seed", Int(0)),
            ("auto_layer", Flag(false)),
        ],
        Method::Memit => vec![
            ("v_steps", Int(25)),
            ("v_lr", Float(0.5)),
            ("beta", Float(0.0625)),
            ("ridge", Float(1e-2)),
            ("covariance_samples", Int(10_000)),
            ("prefix_count", Int(20)),
        ],
        Method::Ike => vec![("k", Int(2))],
        Method::Grace => vec![
            ("init_radius", Float(1.0)),
            ("v_steps", Int(25)),
            ("v_lr", Float(0.5)),
        ],
        Method::SeracLite => vec![],
        // Registered-but-unimplemented methods have no knobs.
        Method::Mend | Method::Ke | Method::Pmet | Method::Melo => vec![],
    }
}

/// Layer-ratio mapping from the reference 32-layer tables to `n` layers.
/// Clamped so at least one block follows the edit layer: attention after the
/// edited MLP is what routes the written value to the answer position.
fn scaled_layer(paper_layer: usize, n_layers: usize) -> usize {
    let scaled = ((paper_layer * n_layers) as f64 / 32.0).round() as usize;
    scaled.min(n_layers.saturating_sub(2))
}

fn default_targets(method: Method, config: &ModelConfig) -> Vec<ModuleAddress> {
    let n = config.n_layers;
    match method {
        // The reference tables put the rank-one edit at layer 5 of 32 and
        // constrained fine-tuning on the same module.
        Method::Rome | Method::FtL => vec![ModuleAddress::mlp_down(scaled_layer(5, n))],
        // Middle third of the stack.
        Method::Memit => {
            let lo = n / 3;
            let hi = ((2 * n) / 3).max(lo + 1).min(n);
            (lo..hi).map(ModuleAddress::mlp_down).collect()
        }
        // Last-quarter layer (ratio 27/32).
        Method::Grace => vec![ModuleAddress::mlp_down(((27 * n) / 32).min(n - 1))],
        // Candidate set for attribution: the whole stack.
        Method::Kn => (0..n).map(ModuleAddress::mlp_down).collect(),
        _ => vec![],
    }
}

fn resolve_targets(targets: &[ModuleAddress], config: &ModelConfig) -> Result<()> {
    let layout = address_layout(config);
    for t in targets {
        if !layout.iter().any(|(a, _)| a == t) {
            return Err(Error::Address(t.path().to_string()));
        }
    }
    Ok(())
}

/// Defaults for a method, with every address checked against the model
/// config.
pub fn default_hparams(method: Method, config: &ModelConfig) -> Result<HparamSet> {
    if !method.implemented() {
        return Err(Error::UnimplementedMethod(method.name().to_string()));
    }
    let targets = default_targets(method, config);
    resolve_targets(&targets, config)?;
    let mut numbers = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for (name, def) in registry(method) {
        match def {
            KnobDefault::Int(v) => {
                numbers.insert(name.to_string(), Knob::Int(v));
            }
            KnobDefault::Float(v) => {
                numbers.insert(name.to_string(), Knob::Float(v));
            }
            KnobDefault::Flag(v) => {
                flags.insert(name.to_string(), v);
            }
        }
    }
    Ok(HparamSet {
        method,
        targets,
        numbers,
        flags,
        source_path: None,
    })
}

/// Defaults with the target list replaced (addresses validated).
pub fn hparams_with_targets(
    method: Method,
    config: &ModelConfig,
    targets: &[ModuleAddress],
) -> Result<HparamSet> {
    let mut hp = default_hparams(method, config)?;
    resolve_targets(targets, config)?;
    hp.targets = targets.to_vec();
    Ok(hp)
}

/// Test/tuning helper: overrides one numeric knob in place.
pub fn set_knob(hp: &mut HparamSet, name: &str, value: impl Into<KnobValue>) {
    match value.into() {
        KnobValue::Int(v) => {
            hp.numbers.insert(name.to_string(), Knob::Int(v));
        }
        KnobValue::Float(v) => {
            hp.numbers.insert(name.to_string(), Knob::Float(v));
        }
        KnobValue::Flag(v) => {
            hp.flags.insert(name.to_string(), v);
        }
    }
}

pub enum KnobValue {
    Int(i64),
    Float(f64),
    Flag(bool),
}

impl From<i64> for KnobValue {
    fn from(v: i64) -> Self {
        KnobValue::Int(v)
    }
}

impl From<f64> for KnobValue {
    fn from(v: f64) -> Self {
        KnobValue::Float(v)
    }
}

impl From<bool> for KnobValue {
    fn from(v: bool) -> Self {
        KnobValue::Flag(v)
    }
}

/// Parses the canonical flat `key = value` text format. Missing knobs take
/// defaults; unknown knobs and unresolvable addresses are errors; the four
/// registered-but-unimplemented methods error as `unimplemented-method`.
pub fn parse_hparams(text: &str, config: &ModelConfig) -> Result<HparamSet> {
    let mut method: Option<Method> = None;
    let mut targets: Vec<ModuleAddress> = Vec::new();
    let mut pairs: Vec<(String, String)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse(format!(
                "hparams line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "method" => method = Some(Method::parse(value)?),
            "target" => targets.push(ModuleAddress::new(value)),
            _ => pairs.push((key.to_string(), value.to_string())),
        }
    }

    let method = method.ok_or_else(|| Error::Parse("hparams file missing `method`".into()))?;
    let mut hp = default_hparams(method, config)?;
    if !targets.is_empty() {
        resolve_targets(&targets, config)?;
        hp.targets = targets;
    }

    let reg = registry(method);
    for (key, value) in pairs {
        let Some((_, def)) = reg.iter().find(|(n, _)| *n == key) else {
            return Err(Error::Hparams(format!(
                "{} has no knob named `{key}`",
                method.name()
            )));
        };
        match def {
            KnobDefault::Int(_) => {
                let v: i64 = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("knob {key}: bad integer `{value}`")))?;
                hp.numbers.insert(key, Knob::Int(v));
            }
            KnobDefault::Float(_) => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("knob {key}: bad float `{value}`")))?;
                hp.numbers.insert(key, Knob::Float(v));
            }
            KnobDefault::Flag(_) => {
                let v: bool = value
                    .parse()
                    .map_err(|_| Error::Parse(format!("flag {key}: bad bool `{value}`")))?;
                hp.flags.insert(key, v);
            }
        }
    }
    Ok(hp)
}

pub fn load_hparams(path: &Path, config: &ModelConfig) -> Result<HparamSet> {
    let text = std::fs::read_to_string(path)?;
    let mut hp = parse_hparams(&text, config)?;
    hp.source_path = Some(path.display().to_string());
    Ok(hp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> ModelConfig {
        ModelConfig::desk_default(128)
    }

    #[test]
    fn rome_default_targets_the_ratio_mapped_layer() {
        let hp = default_hparams(Method::Rome, &desk_config()).unwrap();
        assert_eq!(hp.targets()[0].path(), "blocks.1.mlp.down");
        // And fine-tuning shares the same module.
        let ftl = default_hparams(Method::FtL, &desk_config()).unwrap();
        assert_eq!(ftl.targets()[0].path(), "blocks.1.mlp.down");
    }

    #[test]
    fn memit_default_is_the_middle_third() {
        let hp = default_hparams(Method::Memit, &desk_config()).unwrap();
        let layers: Vec<usize> = hp.targets().iter().map(|a| a.layer().unwrap()).collect();
        assert_eq!(layers, vec![2, 3]);
    }

    #[test]
    fn grace_default_is_the_last_quarter_layer() {
        let hp = default_hparams(Method::Grace, &desk_config()).unwrap();
        assert_eq!(hp.targets()[0].path(), "blocks.5.mlp.down");
    }

    #[test]
    fn unknown_knob_is_a_load_error() {
        let text = "method = kn\nlr = 0.5\n";
        match parse_hparams(text, &desk_config()) {
            Err(Error::Hparams(msg)) => assert!(msg.contains("lr"), "{msg}"),
            other => panic!("expected strict knob error, got {other:?}"),
        }
    }

    #[test]
    fn unresolvable_address_is_a_load_error() {
        let text = "method = rome\ntarget = blocks.99.mlp.down\n";
        assert!(matches!(
            parse_hparams(text, &desk_config()),
            Err(Error::Address(_))
        ));
    }

    #[test]
    fn unimplemented_method_errors_at_load() {
        let text = "method = mend\n";
        assert!(matches!(
            parse_hparams(text, &desk_config()),
            Err(Error::UnimplementedMethod(_))
        ));
    }

    #[test]
    fn canonical_round_trip_is_equal() {
        let mut hp = default_hparams(Method::Rome, &desk_config()).unwrap();
        set_knob(&mut hp, "v_lr", 0.25);
        set_knob(&mut hp, "auto_layer", true);
        let text = hp.canonical();
        let back = parse_hparams(&text, &desk_config()).unwrap();
        assert_eq!(hp, back);
        assert_eq!(hp.fingerprint(), back.fingerprint());
    }

    #[test]
    fn fingerprint_changes_iff_content_changes() {
        let hp = default_hparams(Method::Rome, &desk_config()).unwrap();
        let fp = hp.fingerprint();
        let mut changed = hp.clone();
        set_knob(&mut changed, "v_steps", 26);
        assert_ne!(fp, changed.fingerprint());
        let same = default_hparams(Method::Rome, &desk_config()).unwrap();
        assert_eq!(fp, same.fingerprint());
        let retargeted =
            hparams_with_targets(Method::Rome, &desk_config(), &[ModuleAddress::mlp_down(2)])
                .unwrap();
        assert_ne!(fp, retargeted.fingerprint());
    }

    #[test]
    fn scaled_layer_hits_reference_points() {
        assert_eq!(scaled_layer(5, 6), 1);
        assert_eq!(scaled_layer(5, 32), 5);
        assert_eq!(scaled_layer(5, 2), 0, "tiny models edit the first layer");
    }
}
