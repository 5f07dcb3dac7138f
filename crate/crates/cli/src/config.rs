//! Pipeline configuration: one schema, dotted-key overrides, generated help.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use tse_core::data::Mode;
use tse_core::frontend::FrontendConfig;
use tse_core::kmeans::KMeansParams;
use tse_core::model::{ModelConfig, SizePreset};
use tse_core::synth::SynthConfig;
use tse_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub kmeans: KMeansParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// Every config key with its description. `--help` is generated from this
/// table and the serialized defaults; a test keeps the two in step.
pub const DOCS: &[(&str, &str)] = &[
    ("frontend.n_mels", "mel bands in the log-mel front"),
    ("frontend.layer_count", "feature layers n (one codebook each)"),
    ("frontend.feat_dim", "feature dimension E per layer"),
    ("frontend.seed", "seed of the fixed random frontend weights"),
    ("frontend.frame_hop", "hop between frames, samples"),
    ("frontend.frame_win", "analysis window, samples"),
    ("frontend.n_fft", "FFT size"),
    ("frontend.context_weight", "weight of the cross-frame similarity context"),
    ("frontend.context_sharpness", "softmax sharpness of the similarity context"),
    ("frontend.context_exclude", "frames within this distance are left out of the context"),
    ("kmeans.k", "centroids per layer K"),
    ("kmeans.max_iter", "Lloyd iteration cap"),
    ("kmeans.tol", "stop when relative inertia improvement falls below this"),
    ("kmeans.seed", "k-means++ seed (layer l uses seed + l)"),
    ("model.size_preset", "custom | tiny | desk | s | m | l; applied before other model keys"),
    ("model.n_layers_in", "token layers consumed by the model"),
    ("model.k", "vocabulary size per layer"),
    ("model.d_model", "embedding width"),
    ("model.xattn_blocks", "cross-attention blocks"),
    ("model.xattn_heads", "heads per cross-attention block"),
    ("model.lm_blocks", "encoder-only LM blocks"),
    ("model.lm_heads", "heads per LM block"),
    ("model.mlp_hidden", "feed-forward hidden width"),
    ("model.feat_dim", "continuous input width in hybrid mode"),
    ("model.hybrid", "continuous mixture features instead of mixture tokens"),
    ("model.seed", "parameter initialisation seed"),
    ("train.steps", "optimizer steps"),
    ("train.batch", "mixtures per step"),
    ("train.lr", "AdamW learning rate"),
    ("train.weight_decay", "decoupled weight decay on matrices and embeddings"),
    ("train.snr_min", "lowest mixing SNR, dB"),
    ("train.snr_max", "highest mixing SNR, dB"),
    ("train.seed", "data sampling seed"),
    ("train.checkpoint_every", "steps between checkpoints (0 = final only)"),
    ("train.probe_every", "steps between accuracy probes (0 = never)"),
    ("train.clip_norm", "global gradient norm clip"),
    ("train.mode", "standard | nocat | hybrid"),
    ("train.target_accuracy", "stop once probe accuracy reaches this (null = never)"),
    ("synth.speakers", "synthetic speakers"),
    ("synth.utterances", "utterances per speaker"),
    ("synth.seconds", "utterance length, seconds"),
    ("synth.phones", "phone classes"),
    ("synth.seed", "corpus seed"),
];

/// Dotted keys of every leaf in `v`, in document order.
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |v, part| v.get(part))
}

/// Help section listing every key and its default.
pub fn keys_help() -> String {
    let defaults = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    let width = DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML file via --config, or --set key=value):\n");
    for (key, doc) in DOCS {
        let default = lookup(&defaults, key).map_or_else(|| "?".into(), Value::to_string);
        s += &format!("  {key:<width$}  {doc} [default: {default}]\n");
    }
    s
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut Vec<(String, Value)>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, child, out)?;
            }
        }
        other => out.push((prefix.to_string(), serde_json::to_value(other).context("config value")?)),
    }
    Ok(())
}

/// Raw configuration inputs, resolved by [`ConfigSource::resolve`].
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    /// `(dotted key, value)` pairs in application order.
    pub assignments: Vec<(String, Value)>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

impl ConfigSource {
    pub fn from_args(config: Option<&Path>, sets: &[String], seed: Option<u64>, mode: Option<Mode>) -> Result<Self> {
        let mut assignments = Vec::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            flatten_toml("", &table, &mut assignments)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
            assignments.push((k.trim().to_string(), parse_value(v.trim())));
        }
        Ok(Self { assignments, seed, mode })
    }

    /// Applies presets, assignments, `--seed` and `--mode`, then validates
    /// each section on its own.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut base = PipelineConfig::default();
        if let Some((_, v)) = self.assignments.iter().rev().find(|(k, _)| k == "model.size_preset") {
            let preset: SizePreset = serde_json::from_value(v.clone()).context("model.size_preset")?;
            base.model = ModelConfig::preset(preset);
        }
        let mut tree = serde_json::to_value(&base)?;
        for (key, value) in &self.assignments {
            set_key(&mut tree, key, value.clone())?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(tree).context("invalid config")?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.model.seed = seed;
            cfg.kmeans.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.train.mode = mode;
            cfg.model.hybrid = mode == Mode::Hybrid;
        }
        cfg.frontend.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Whether any input touches a key outside `allowed`.
    pub fn touches_other_than(&self, allowed: &[&str]) -> Option<String> {
        if self.seed.is_some() {
            return Some("--seed".into());
        }
        if self.mode.is_some() {
            return Some("--mode".into());
        }
        self.assignments
            .iter()
            .find(|(k, _)| !allowed.contains(&k.as_str()))
            .map(|(k, _)| k.clone())
    }
}

fn set_key(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        let Some(child) = map.get_mut(*part) else {
            bail!("unknown config key {key:?} (see --help for the list)");
        };
        if i + 1 == parts.len() {
            if child.is_object() {
                bail!("config key {key:?} names a section, not a value");
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    bail!("empty config key")
}

impl PipelineConfig {
    /// Cross-section agreement needed to train a model on this frontend
    /// and codebook.
    pub fn check_pipeline(&self) -> Result<()> {
        if self.frontend.layer_count != self.model.n_layers_in {
            bail!(
                "frontend.layer_count ({}) must equal model.n_layers_in ({})",
                self.frontend.layer_count,
                self.model.n_layers_in
            );
        }
        if self.kmeans.k != self.model.k {
            bail!("kmeans.k ({}) must equal model.k ({})", self.kmeans.k, self.model.k);
        }
        if self.model.hybrid != (self.train.mode == Mode::Hybrid) {
            bail!("model.hybrid must be true exactly when train.mode is hybrid");
        }
        if self.model.hybrid && self.model.feat_dim != self.frontend.feat_dim {
            bail!(
                "model.feat_dim ({}) must equal frontend.feat_dim ({}) in hybrid mode",
                self.model.feat_dim,
                self.frontend.feat_dim
            );
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
