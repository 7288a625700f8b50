//! Run configuration: every component's settings in one JSON document.
//!
//! Files are merged over [`RunConfig::desk`], so a config only needs the
//! fields it changes. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::evalharness::BenchmarkConfig;
use crate::nets::NetConfig;
use crate::personalize::PieNetConfig;
use crate::training::{LossConfig, TrainConfig};

/// Held-out users for evaluation, drawn like the training corpus but from
/// a different seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutConfig {
    pub n_users: usize,
    pub images_per_user: usize,
    pub content_aware_fraction: f64,
    /// Added to the corpus seed.
    pub seed_offset: u64,
}

impl Default for HeldOutConfig {
    fn default() -> Self {
        Self { n_users: 4, images_per_user: 60, content_aware_fraction: 1.0, seed_offset: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub held_out: HeldOutConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub bench: BenchmarkConfig,
    pub pienet: PieNetConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Settings sized for a laptop CPU: 16 px images, a two-layer
    /// Transformer and a larger learning rate than the full-scale defaults.
    pub fn desk() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            held_out: HeldOutConfig::default(),
            net: NetConfig { embed_input_size: 16, enhancer_input_size: 16, transformer_layers: 2, ..NetConfig::default() },
            train: TrainConfig {
                lr: 1e-3,
                epochs_step1: 20,
                epochs_step2: 20,
                batch_step1: 16,
                batch_step2: 8,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            bench: BenchmarkConfig::default(),
            pienet: PieNetConfig::default(),
            serve: ServeConfig::default(),
        }
    }

    pub fn held_out_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            n_users: self.held_out.n_users,
            images_per_user: self.held_out.images_per_user,
            content_aware_fraction: self.held_out.content_aware_fraction,
            seed: self.corpus.seed.wrapping_add(self.held_out.seed_offset),
            ..self.corpus.clone()
        }
    }

    /// Per-component checks plus the constraints that span components.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.held_out_corpus().validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(field.replacen("corpus.", "held_out.", 1), message),
            other => other,
        })?;
        self.net.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.bench.validate()?;
        self.pienet.validate()?;
        if self.train.i_train + 1 > self.corpus.images_per_user {
            return Err(Error::config(
                "train.i_train",
                format!("i_train + 1 = {} exceeds corpus.images_per_user = {}", self.train.i_train + 1, self.corpus.images_per_user),
            ));
        }
        if let Some(&max) = self.bench.i_new_values.iter().max() {
            if max >= self.held_out.images_per_user {
                return Err(Error::config(
                    "bench.i_new_values",
                    format!("I_new = {max} leaves no unseen pairs with held_out.images_per_user = {}", self.held_out.images_per_user),
                ));
            }
        }
        Ok(())
    }

    /// Parses a JSON document merged over the desk preset and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::config("<file>", format!("not valid JSON: {e}")))?;
        Self::desk().with_overlay(overlay)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides; the value is parsed as JSON and
    /// taken as a string if that fails.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut overlay = Value::Object(Default::default());
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::config(o, "override must look like key.path=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut overlay;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::config(key, "path goes through a non-object"))?
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
            }
            *slot = value;
        }
        self.with_overlay(overlay)
    }

    fn with_overlay(self, overlay: Value) -> Result<Self> {
        let mut base = serde_json::to_value(&self)?;
        merge(&mut base, overlay, "")?;
        let obj = base.as_object().expect("RunConfig serializes to an object");
        fn section<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str) -> Result<T> {
            serde_json::from_value(obj[name].clone()).map_err(|e| Error::config(name, e.to_string()))
        }
        let cfg = RunConfig {
            corpus: section(obj, "corpus")?,
            held_out: section(obj, "held_out")?,
            net: section(obj, "net")?,
            train: section(obj, "train")?,
            loss: section(obj, "loss")?,
            bench: section(obj, "bench")?,
            pienet: section(obj, "pienet")?,
            serve: section(obj, "serve")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::config(p, "unknown field")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
