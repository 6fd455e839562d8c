//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Variant};
use crate::training::{AdamConfig, RunSpec};

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub run: RunSpec,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub src_vocab_file: Option<PathBuf>,
    pub tgt_vocab_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            run: RunSpec::default(),
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            src_vocab_file: None,
            tgt_vocab_file: None,
        }
    }

    /// Canonical text form: every key, in a fixed order, floats in their
    /// shortest round-tripping representation.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let r = &self.run;
        let opt_f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        let opt_p = |v: &Option<PathBuf>| v.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("variant", m.variant.to_string()),
            ("layers", m.layers.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("ffn_mult", m.ffn_mult.to_string()),
            ("heads", m.heads.to_string()),
            ("dropout", format!("{:?}", m.dropout)),
            ("src_vocab", m.src_vocab.to_string()),
            ("tgt_vocab", m.tgt_vocab.to_string()),
            ("prenet_layers", m.prenet_layers.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("steps", r.steps.to_string()),
            ("batch_tokens", r.batch_tokens.to_string()),
            ("lr", format!("{:?}", r.lr)),
            ("warmup", r.warmup.to_string()),
            ("adam_beta1", format!("{:?}", r.adam.beta1)),
            ("adam_beta2", format!("{:?}", r.adam.beta2)),
            ("adam_eps", format!("{:?}", r.adam.eps)),
            ("clip_norm", opt_f(r.clip_norm)),
            ("label_smoothing", format!("{:?}", r.label_smoothing)),
            ("log_every", r.log_every.to_string()),
            ("seed", r.seed.to_string()),
            ("target_accuracy", opt_f(r.target_accuracy)),
            ("decode_samples", r.decode_samples.to_string()),
            ("train_src", opt_p(&self.train_src)),
            ("train_tgt", opt_p(&self.train_tgt)),
            ("valid_src", opt_p(&self.valid_src)),
            ("valid_tgt", opt_p(&self.valid_tgt)),
            ("src_vocab_file", opt_p(&self.src_vocab_file)),
            ("tgt_vocab_file", opt_p(&self.tgt_vocab_file)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses a config. Keys may appear in any order; missing keys take
    /// the defaults of the variant (which must be given).
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        let variant: Variant = take(&mut kv, "variant")?
            .ok_or_else(|| Error::Config("config is missing `variant`".into()))?;
        let mut cfg = RunConfig::new(ModelConfig::defaults(variant));
        cfg.apply(&mut kv)?;
        if let Some(key) = kv.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(cfg)
    }

    /// Applies `key = value` overrides (including `variant`, which resets
    /// variant-specific layer defaults only when they were not given).
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut kv = BTreeMap::new();
        for (k, v) in overrides {
            kv.insert(k.clone(), v.clone());
        }
        if let Some(v) = take::<Variant>(&mut kv, "variant")? {
            if v != self.model.variant {
                let d = ModelConfig::defaults(v);
                self.model.variant = v;
                self.model.prenet_layers = d.prenet_layers;
                self.model.encoder_layers = d.encoder_layers;
            }
        }
        self.apply(&mut kv)?;
        if let Some(key) = kv.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(())
    }

    fn apply(&mut self, kv: &mut BTreeMap<String, String>) -> Result<()> {
        let m = &mut self.model;
        set(kv, "layers", &mut m.layers)?;
        set(kv, "embed_dim", &mut m.embed_dim)?;
        set(kv, "ffn_mult", &mut m.ffn_mult)?;
        set(kv, "heads", &mut m.heads)?;
        set(kv, "dropout", &mut m.dropout)?;
        set(kv, "src_vocab", &mut m.src_vocab)?;
        set(kv, "tgt_vocab", &mut m.tgt_vocab)?;
        set(kv, "prenet_layers", &mut m.prenet_layers)?;
        set(kv, "encoder_layers", &mut m.encoder_layers)?;
        let r = &mut self.run;
        set(kv, "steps", &mut r.steps)?;
        set(kv, "batch_tokens", &mut r.batch_tokens)?;
        set(kv, "lr", &mut r.lr)?;
        set(kv, "warmup", &mut r.warmup)?;
        let AdamConfig { beta1, beta2, eps } = &mut r.adam;
        set(kv, "adam_beta1", beta1)?;
        set(kv, "adam_beta2", beta2)?;
        set(kv, "adam_eps", eps)?;
        set_opt(kv, "clip_norm", &mut r.clip_norm)?;
        set(kv, "label_smoothing", &mut r.label_smoothing)?;
        set(kv, "log_every", &mut r.log_every)?;
        set(kv, "seed", &mut r.seed)?;
        set_opt(kv, "target_accuracy", &mut r.target_accuracy)?;
        set(kv, "decode_samples", &mut r.decode_samples)?;
        set_path(kv, "train_src", &mut self.train_src)?;
        set_path(kv, "train_tgt", &mut self.train_tgt)?;
        set_path(kv, "valid_src", &mut self.valid_src)?;
        set_path(kv, "valid_tgt", &mut self.valid_tgt)?;
        set_path(kv, "src_vocab_file", &mut self.src_vocab_file)?;
        set_path(kv, "tgt_vocab_file", &mut self.tgt_vocab_file)?;
        Ok(())
    }

    /// Checks model and run settings.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.run.validate()
    }
}

/// Splits `key = value` lines, dropping `#` comments and blank lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if kv.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(kv)
}

fn take<T: FromStr>(kv: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: Debug,
{
    match kv.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e:?}"))),
    }
}

fn set<T: FromStr>(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: Debug,
{
    if let Some(v) = take(kv, key)? {
        *slot = v;
    }
    Ok(())
}

fn set_opt<T: FromStr>(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut Option<T>) -> Result<()>
where
    T::Err: Debug,
{
    match kv.remove(key).as_deref() {
        None => {}
        Some("none") => *slot = None,
        Some(v) => {
            *slot = Some(v.parse().map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e:?}")))?)
        }
    }
    Ok(())
}

fn set_path(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut Option<PathBuf>) -> Result<()> {
    match kv.remove(key).as_deref() {
        None => {}
        Some("none") => *slot = None,
        Some(v) => *slot = Some(PathBuf::from(v)),
    }
    Ok(())
}
