//! Flat `key = value` run configuration.
//!
//! Values come from an optional file, then from command-line flags; later
//! sources win. Unknown keys are rejected wherever they appear.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctsae::data::{ClassKind, SynthSpec};
use ctsae::train::TrainConfig;
use ctsae::{Activation, BlockKind, FusionMode, ModelConfig, Stage};

use crate::error::{CliError, CliResult};

/// Every accepted key with its default; `None` means unset.
const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", Some("0")),
    ("deterministic", Some("false")),
    // dataset synthesis
    ("classes", Some("4")),
    ("per_class", Some("200")),
    ("size", Some("64")),
    ("noise", Some("0.05")),
    // model; unset fields come from the preset
    ("preset", Some("desk")),
    ("input_size", None),
    ("stages", None),
    ("token_grid", None),
    ("enc_embed", None),
    ("dec_embed", None),
    ("heads", None),
    ("mlp_ratio", None),
    ("fused_dim", None),
    ("latent_dim", None),
    ("pooled_size", None),
    ("fusion_mode", None),
    ("block_kind", None),
    ("durations", None),
    ("activation", None),
    // training
    ("epochs", Some("50")),
    ("batch_size", Some("16")),
    ("learning_rate", Some("0.001")),
    ("beta1", Some("0.9")),
    ("beta2", Some("0.999")),
    ("eps", Some("1e-8")),
    ("weight_decay", Some("0")),
    ("checkpoint_every", Some("10")),
    ("split", Some("0.7,0.1,0.2")),
    // clustering and ablation
    ("k", None),
    ("seeds", Some("0,1,2")),
    // paths
    ("data", None),
    ("out", None),
    ("checkpoint", None),
    ("latents", None),
    ("pred", None),
    ("truth", None),
    ("report", None),
];

const MODEL_KEYS: &[&str] = &[
    "preset",
    "input_size",
    "stages",
    "token_grid",
    "enc_embed",
    "dec_embed",
    "heads",
    "mlp_ratio",
    "fused_dim",
    "latent_dim",
    "pooled_size",
    "fusion_mode",
    "block_kind",
    "durations",
    "activation",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(k, _)| *k)
}

impl RunConfig {
    pub fn new() -> Self {
        let mut c = RunConfig::default();
        for (k, v) in KEYS {
            if let Some(v) = v {
                c.values.insert(k, v.to_string());
            }
        }
        c
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> CliResult<()> {
        let k = known(key).ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        self.values.insert(k, value.into());
        self.explicit.insert(k);
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> CliResult<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{} line {}", origin.display(), i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("{}: expected key = value, got {raw:?}", at())))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("{}: duplicate key {k:?}", at())));
            }
            self.set(k, v.trim()).map_err(|e| CliError::Config(format!("{}: {e}", at())))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut c = RunConfig::new();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key).is_some(), "{key}");
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.raw(key).ok_or_else(|| CliError::Config(format!("{key} is required")))?;
        v.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn flag(&self, key: &str) -> CliResult<bool> {
        match self.raw(key) {
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") | None => Ok(false),
            Some(v) => Err(CliError::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.raw(key).map(PathBuf::from).ok_or_else(|| CliError::Config(format!("{key} is required")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>> {
        let v = self.raw(key).unwrap_or("");
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {s:?} in {v:?}"))))
            .collect()
    }

    /// True when any model key came from the file or a flag.
    pub fn sets_model(&self) -> bool {
        MODEL_KEYS.iter().any(|k| self.explicit.contains(k))
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        let mut m = match self.raw("preset").unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            p => return Err(CliError::Config(format!("preset: unknown preset {p:?} (desk, tiny, full)"))),
        };
        let opt = |k: &str| self.raw(k).is_some();
        if opt("input_size") {
            m.input_size = self.get("input_size")?;
        }
        if opt("stages") {
            m.stage_schedule = parse_stages(self.raw("stages").unwrap())?;
        }
        for (key, field) in [
            ("token_grid", &mut m.token_grid),
            ("enc_embed", &mut m.enc_embed),
            ("dec_embed", &mut m.dec_embed),
            ("heads", &mut m.heads),
            ("mlp_ratio", &mut m.mlp_ratio),
            ("fused_dim", &mut m.fused_dim),
            ("latent_dim", &mut m.latent_dim),
            ("pooled_size", &mut m.pooled_size),
        ] {
            if opt(key) {
                *field = self.get(key)?;
            }
        }
        if let Some(v) = self.raw("fusion_mode") {
            m.fusion_mode = FusionMode::parse(v).ok_or_else(|| CliError::Config(format!("fusion_mode: unknown mode {v:?}")))?;
        }
        if let Some(v) = self.raw("block_kind") {
            m.block_kind = BlockKind::parse(v).ok_or_else(|| CliError::Config(format!("block_kind: unknown kind {v:?}")))?;
        }
        if let Some(v) = self.raw("activation") {
            m.activation = Activation::parse(v).ok_or_else(|| CliError::Config(format!("activation: unknown activation {v:?}")))?;
        }
        if opt("durations") {
            m.branch_durations = self.list("durations")?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let t = TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            weight_decay: self.get("weight_decay")?,
            seed: self.get("seed")?,
            checkpoint_every: self.get("checkpoint_every")?,
            log_path: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn split(&self) -> CliResult<(f64, f64, f64)> {
        match self.list::<f64>("split")?[..] {
            [a, b, c] if a > 0.0 && b >= 0.0 && c >= 0.0 && ((a + b + c) - 1.0).abs() < 1e-9 => Ok((a, b, c)),
            _ => Err(CliError::Config(format!("split: expected three non-negative fractions summing to 1, got {:?}", self.raw("split")))),
        }
    }

    pub fn synth(&self) -> CliResult<SynthSpec> {
        let classes: usize = self.get("classes")?;
        if classes == 0 || classes > ClassKind::ALL.len() {
            return Err(CliError::Config(format!("classes must be between 1 and {}, got {classes}", ClassKind::ALL.len())));
        }
        Ok(SynthSpec {
            classes: ClassKind::ALL[..classes].to_vec(),
            samples_per_class: self.get("per_class")?,
            noise: self.get("noise")?,
            image_size: self.get("size")?,
            seed: self.get("seed")?,
        })
    }

    /// Every set key, with the model keys expanded to their effective
    /// values, as text that [`RunConfig::apply_text`] reads back.
    pub fn resolved_text(&self) -> CliResult<String> {
        let mut values = self.values.clone();
        if let Ok(m) = self.model() {
            for (k, v) in model_entries(&m) {
                values.insert(k, v);
            }
        }
        let mut out = String::new();
        for (k, _) in KEYS {
            if let Some(v) = values.get(k) {
                writeln!(out, "{k} = {v}").unwrap();
            }
        }
        Ok(out)
    }

    pub fn write_resolved(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.resolved_text()?).map_err(|e| CliError::io(path, e))
    }
}

fn parse_stages(s: &str) -> CliResult<Vec<Stage>> {
    let bad = || CliError::Config(format!("stages: expected blocks:channels:size,..., got {s:?}"));
    s.split(',')
        .map(|part| {
            let f: Vec<usize> = part.trim().split(':').map(|x| x.parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
            match f[..] {
                [blocks, channels, size] => Ok(Stage { blocks, channels, size }),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Model keys written out from a resolved configuration.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let join = |v: Vec<String>| v.join(",");
    vec![
        ("input_size", m.input_size.to_string()),
        ("stages", join(m.stage_schedule.iter().map(|s| format!("{}:{}:{}", s.blocks, s.channels, s.size)).collect())),
        ("token_grid", m.token_grid.to_string()),
        ("enc_embed", m.enc_embed.to_string()),
        ("dec_embed", m.dec_embed.to_string()),
        ("heads", m.heads.to_string()),
        ("mlp_ratio", m.mlp_ratio.to_string()),
        ("fused_dim", m.fused_dim.to_string()),
        ("latent_dim", m.latent_dim.to_string()),
        ("pooled_size", m.pooled_size.to_string()),
        ("fusion_mode", m.fusion_mode.as_str().to_string()),
        ("block_kind", m.block_kind.as_str().to_string()),
        ("durations", join(m.branch_durations.iter().map(|d| d.to_string()).collect())),
        ("activation", m.activation.as_str().to_string()),
    ]
}

/// Lines `key: a vs b` for each model key that differs.
pub fn model_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    model_entries(a)
        .into_iter()
        .zip(model_entries(b))
        .filter(|(x, y)| x.1 != y.1)
        .map(|((k, x), (_, y))| format!("{k}: {x} vs {y}"))
        .collect()
}
