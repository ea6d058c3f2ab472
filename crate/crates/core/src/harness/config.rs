//! Flat `key = value` run configuration with a per-command schema.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{DfaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Str,
    Path,
    Int,
    Real,
    /// A real written as a decimal or an integer ratio like `4/255`.
    Fraction,
    Bool,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub help: &'static str,
    /// Output and checkpoint locations are left out of the config hash; records
    /// identify the checkpoint by its training hash instead.
    pub hashed: bool,
}

const fn key(name: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind,
        default,
        help,
        hashed: true,
    }
}

const fn output(name: &'static str, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Path,
        default,
        help,
        hashed: false,
    }
}

const fn checkpoint() -> KeySpec {
    KeySpec {
        name: "checkpoint",
        kind: Kind::Path,
        default: None,
        help: "checkpoint directory",
        hashed: false,
    }
}

const FORMATS: &[&str] = &["auto", "idx", "cifar-binary", "raw-array"];

macro_rules! dataset_keys {
    ($name:literal, $help:literal) => {
        [
            key($name, Kind::Str, None, $help),
            key(concat!($name, "-format"), Kind::Choice(FORMATS), Some("auto"), "dataset file format"),
            key(concat!($name, "-labels"), Kind::Path, None, "IDX label file (default: derived from the image path)"),
        ]
    };
}

const TRAIN_DATA: [KeySpec; 3] = dataset_keys!("data", "training set: a file path or synthetic:<glyphs|gratings>[:k=v,...]");
const EVAL_DATA: [KeySpec; 3] = dataset_keys!("data", "evaluation set: a file path or synthetic:<glyphs|gratings>[:k=v,...]");
const PROTO_DATA: [KeySpec; 3] = dataset_keys!("train-data", "training set used for class prototypes");
const ID_DATA: [KeySpec; 3] = dataset_keys!("id-data", "in-distribution test set");
const OOD_DATA: [KeySpec; 3] = dataset_keys!("ood-data", "out-of-distribution test set");

const TRAIN_KEYS: &[KeySpec] = &[
    key("classes", Kind::Int, None, "number of classes (default: from the dataset)"),
    key("mode", Kind::Choice(&["vanilla", "mixup", "manifold-mixup", "dfa"]), Some("dfa"), "training objective"),
    key("alpha", Kind::Real, Some("1.0"), "Beta(α, α) shape of the mixing coefficient"),
    key("sigma", Kind::Real, Some("0.05"), "standard deviation of the aggregation noise"),
    key("reduction", Kind::Choice(&["mean-squared", "root-of-norm"]), Some("mean-squared"), "aggregation loss reduction"),
    key("epochs", Kind::Int, Some("10"), "number of epochs"),
    key("batch-size", Kind::Int, Some("64"), "mini-batch size"),
    key("lr", Kind::Fraction, Some("0.05"), "constant learning rate"),
    key("lr-schedule", Kind::Str, None, "`full-scale` or rate:epochs pairs, e.g. 0.1:60,0.02:60 (overrides lr)"),
    key("momentum", Kind::Real, Some("0.9"), "SGD momentum"),
    key("weight-decay", Kind::Real, Some("0.0005"), "L2 weight decay"),
    key("embed-dim", Kind::Int, Some("64"), "embedding width"),
    key("score-scale", Kind::Real, Some("1.0"), "multiplier on cosine scores before softmax"),
    key("seed", Kind::Int, Some("0"), "random seed"),
    key("name", Kind::Str, None, "run label stored in the checkpoint (default: the mode)"),
    output("out", Some("checkpoint"), "checkpoint directory"),
    output("metrics", Some("metrics.jsonl"), "metrics file (appended)"),
];

const ATTACK_KEYS: &[KeySpec] = &[
    checkpoint(),
    key("method", Kind::Choice(&["fgsm", "pgd", "cw"]), Some("pgd"), "attack"),
    key("epsilon", Kind::Fraction, Some("4/255"), "l∞ budget on [0, 1] pixels"),
    key("step-size", Kind::Fraction, Some("2/255"), "PGD step size"),
    key("steps", Kind::Int, Some("8"), "PGD iterations or CW optimizer steps"),
    key("cw-c", Kind::Real, Some("0.01"), "CW trade-off constant"),
    key("cw-lr", Kind::Real, Some("0.01"), "CW Adam learning rate"),
    key("cw-box", Kind::Choice(&["tanh", "project"]), Some("tanh"), "CW box constraint"),
    key("random-start", Kind::Bool, Some("true"), "PGD uniform start inside the ball"),
    key("seed", Kind::Int, Some("0"), "random seed"),
    key("limit", Kind::Int, None, "evaluate only the first N samples"),
    output("metrics", Some("metrics.jsonl"), "metrics file (appended)"),
];

const OOD_KEYS: &[KeySpec] = &[
    checkpoint(),
    key("limit", Kind::Int, None, "use only the first N samples of each test set"),
    output("metrics", Some("metrics.jsonl"), "metrics file (appended)"),
    output("plot", None, "score histogram SVG"),
];

const ANALYZE_KEYS: &[KeySpec] = &[
    checkpoint(),
    key("pairs", Kind::Int, Some("1000"), "number of random pairs for the Lipschitz probe"),
    key("seed", Kind::Int, Some("0"), "random seed"),
    key("limit", Kind::Int, None, "use only the first N samples"),
    output("metrics", Some("metrics.jsonl"), "metrics file (appended)"),
    output("plot", None, "compactness bar chart SVG"),
];

const REPORT_KEYS: &[KeySpec] = &[
    output("metrics", Some("metrics.jsonl"), "metrics file to summarize"),
    output("out", Some("report"), "directory for tables and plots"),
];

pub const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model and write a checkpoint plus per-epoch records"),
    ("attack", "evaluate a checkpoint under one white-box attack"),
    ("ood", "score ID and OOD sets against class prototypes"),
    ("analyze", "measure class compactness and the Lipschitz residual"),
    ("report", "render tables and plots from a metrics file"),
];

/// Keys accepted by `command`, in display order.
pub fn schema(command: &str) -> Option<Vec<KeySpec>> {
    let parts: Vec<&[KeySpec]> = match command {
        "train" => vec![&TRAIN_DATA, TRAIN_KEYS],
        "attack" => vec![&EVAL_DATA, ATTACK_KEYS],
        "ood" => vec![&PROTO_DATA, &ID_DATA, &OOD_DATA, OOD_KEYS],
        "analyze" => vec![&EVAL_DATA, ANALYZE_KEYS],
        "report" => vec![REPORT_KEYS],
        _ => return None,
    };
    Some(parts.concat())
}

/// Parses `4/255`, `0.5` or `3` exactly: a ratio of integers is rounded once.
pub fn parse_fraction(text: &str) -> Result<f64> {
    let bad = || DfaError::Config(format!("`{text}` is not a number or integer ratio"));
    let text = text.trim();
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: i64 = num.trim().parse().map_err(|_| bad())?;
            let den: i64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(DfaError::Config(format!("`{text}` divides by zero")));
            }
            num as f64 / den as f64
        }
        None => text.parse::<f64>().map_err(|_| bad())?,
    };
    if !value.is_finite() {
        return Err(bad());
    }
    Ok(value)
}

fn parse_bool(text: &str) -> Result<bool> {
    match text {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(DfaError::Config(format!("`{other}` is not a boolean"))),
    }
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let ctx = |e: DfaError| DfaError::Config(format!("{}: {e}", spec.name));
    match spec.kind {
        Kind::Str | Kind::Path => Ok(()),
        Kind::Int => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| DfaError::Config(format!("{}: `{value}` is not a non-negative integer", spec.name))),
        Kind::Real => value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|_| ())
            .ok_or_else(|| DfaError::Config(format!("{}: `{value}` is not a finite number", spec.name))),
        Kind::Fraction => parse_fraction(value).map(|_| ()).map_err(ctx),
        Kind::Bool => parse_bool(value).map(|_| ()).map_err(ctx),
        Kind::Choice(options) if options.contains(&value) => Ok(()),
        Kind::Choice(options) => Err(DfaError::Config(format!(
            "{}: `{value}` is not one of {}",
            spec.name,
            options.join(", ")
        ))),
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DfaError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| DfaError::io(path, e))?;
    parse_config_text(&text)
}

/// Validated settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
    specs: Vec<KeySpec>,
}

impl RunConfig {
    /// Applies `layers` in order (later wins), then defaults; rejects unknown keys.
    pub fn resolve(command: &str, layers: &[Vec<(String, String)>]) -> Result<Self> {
        let specs = schema(command).ok_or_else(|| DfaError::Config(format!("unknown command `{command}`")))?;
        let mut values = BTreeMap::new();
        for (k, v) in layers.iter().flatten() {
            let spec = specs
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| DfaError::Config(format!("unknown key `{k}` for `{command}`")))?;
            check_value(spec, v)?;
            values.insert(k.clone(), v.clone());
        }
        for spec in &specs {
            if let (false, Some(d)) = (values.contains_key(spec.name), spec.default) {
                values.insert(spec.name.to_string(), d.to_string());
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
            specs,
        })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        debug_assert!(self.specs.iter().any(|s| s.name == key), "key `{key}` not in schema");
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.opt(key)
            .ok_or_else(|| DfaError::Config(format!("`{}` requires `{key}`", self.command)))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.str(key).map(PathBuf::from)
    }

    pub fn real(&self, key: &str) -> Result<f64> {
        parse_fraction(self.str(key)?)
    }

    pub fn int(&self, key: &str) -> Result<u64> {
        self.str(key)?
            .parse()
            .map_err(|_| DfaError::Config(format!("`{key}` must be an integer")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.int(key)? as usize)
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.opt(key).map(|_| self.usize(key)).transpose()
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        parse_bool(self.str(key)?)
    }

    /// First 16 hex digits of SHA-256 over the command and the sorted
    /// `key=value` lines of every result-affecting key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            if self.specs.iter().any(|s| s.name == k && s.hashed) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fractions_parse_exactly() {
        assert_eq!(parse_fraction("4/255").unwrap(), 4.0 / 255.0);
        assert_eq!(parse_fraction(" 8 / 255 ").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_fraction("0.25").unwrap(), 0.25);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("a/3").is_err());
        assert!(parse_fraction("inf").is_err());
    }

    #[test]
    fn file_then_flags_then_defaults() {
        let file = parse_config_text("# run\nmode = mixup\nalpha=0.5  # weaker mixing\n\n").unwrap();
        let flags = pairs(&[("alpha", "2.0"), ("data", "synthetic:glyphs")]);
        let cfg = RunConfig::resolve("train", &[file, flags]).unwrap();
        assert_eq!(cfg.str("mode").unwrap(), "mixup");
        assert_eq!(cfg.real("alpha").unwrap(), 2.0);
        assert_eq!(cfg.real("sigma").unwrap(), 0.05);
        assert_eq!(cfg.opt("classes"), None);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::resolve("train", &[pairs(&[("colour", "red")])]), Err(DfaError::Config(_))));
        assert!(RunConfig::resolve("train", &[pairs(&[("mode", "cutmix")])]).is_err());
        assert!(RunConfig::resolve("attack", &[pairs(&[("epsilon", "4/0")])]).is_err());
        assert!(RunConfig::resolve("attack", &[pairs(&[("steps", "-1")])]).is_err());
        assert!(RunConfig::resolve("fly", &[]).is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn hash_ignores_outputs_and_order() {
        let a = RunConfig::resolve("train", &[pairs(&[("data", "x"), ("seed", "3"), ("out", "a")])]).unwrap();
        let b = RunConfig::resolve("train", &[pairs(&[("out", "b"), ("seed", "3"), ("data", "x")])]).unwrap();
        let c = RunConfig::resolve("train", &[pairs(&[("data", "x"), ("seed", "4")])]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn hash_ignores_checkpoint_location() {
        let at = |dir: &str| RunConfig::resolve("attack", &[pairs(&[("data", "x"), ("checkpoint", dir)])]).unwrap().hash();
        assert_eq!(at("/tmp/a/ckpt"), at("/tmp/b/ckpt"));
    }
}
