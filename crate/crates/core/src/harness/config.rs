use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentConfig;
use crate::encoder::{EncoderConfig, NormVariant};
use crate::error::{Error, Result};
use crate::pixelworld::Suite;

/// Normalization arm of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Cn,
    Sn,
    Cnsn,
    CnsnNocrop,
    Bn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Cn,
        Variant::Sn,
        Variant::Cnsn,
        Variant::CnsnNocrop,
        Variant::Bn,
    ];

    /// The five arms of the ablation table, without the BatchNorm baseline.
    pub const ABLATION: [Variant; 5] = [
        Variant::Base,
        Variant::Cn,
        Variant::Sn,
        Variant::Cnsn,
        Variant::CnsnNocrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cn => "cn",
            Variant::Sn => "sn",
            Variant::Cnsn => "cnsn",
            Variant::CnsnNocrop => "cnsn_nocrop",
            Variant::Bn => "bn",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::config(format!("unknown variant {name:?}")))
    }

    pub fn norm(self) -> NormVariant {
        match self {
            Variant::Base => NormVariant::None,
            Variant::Cn => NormVariant::CnOnly,
            Variant::Sn => NormVariant::SnOnly,
            Variant::Cnsn | Variant::CnsnNocrop => NormVariant::Cnsn,
            Variant::Bn => NormVariant::Bn,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Layer shapes and norm hyperparameters. The per-layer norms are
    /// replaced by the variant's; see [`RunConfig::resolved_encoder`].
    pub encoder: EncoderConfig,
    pub agent: AgentConfig,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub suites: Vec<Suite>,
    pub checkpoint_interval: usize,
    /// Write PNG frames of the first evaluation episode per suite.
    pub dump_frames: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Cnsn,
            encoder: EncoderConfig::default(),
            agent: AgentConfig::default(),
            total_steps: 50_000,
            eval_interval: 2_500,
            eval_episodes: 50,
            suites: Suite::ALL.to_vec(),
            checkpoint_interval: 5_000,
            dump_frames: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Load `path` (or start from the defaults) and apply `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        // Fill absent sections so overrides can address nested defaults.
        let defaults = serde_json::to_value(RunConfig::default())?;
        merge_missing(&mut value, &defaults);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    /// Encoder actually built for this run: the variant's norm on every
    /// layer, and crop disabled for `cnsn_nocrop`.
    pub fn resolved_encoder(&self) -> EncoderConfig {
        let mut enc = self.encoder.clone().with_norm(self.variant.norm());
        if self.variant == Variant::CnsnNocrop {
            enc.crossnorm.crop_enabled = false;
        }
        enc
    }

    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        RunConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.resolved_encoder();
        enc.validate()?;
        self.agent.validate(&enc)?;
        if self.eval_interval == 0 || self.eval_episodes == 0 || self.checkpoint_interval == 0 {
            return Err(Error::config(
                "eval_interval, eval_episodes and checkpoint_interval must be positive",
            ));
        }
        if self.suites.is_empty() {
            return Err(Error::config("at least one evaluation suite is required"));
        }
        let mut seen = self.suites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.suites.len() {
            return Err(Error::config("evaluation suites must be distinct"));
        }
        Ok(())
    }
}

fn merge_missing(value: &mut Value, defaults: &Value) {
    if let (Value::Object(map), Value::Object(def)) = (value, defaults) {
        for (k, dv) in def {
            match map.get_mut(k) {
                Some(v) => merge_missing(v, dv),
                None => {
                    map.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Apply one `dotted.path=value` override. Path segments index objects by
/// key and arrays by position; `*` applies to every array element. The value
/// is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    if path.is_empty() {
        return Err(Error::config(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    set_path(root, &segments, &value, path)
}

fn set_path(node: &mut Value, segments: &[&str], value: &Value, full: &str) -> Result<()> {
    let Some((head, rest)) = segments.split_first() else {
        *node = value.clone();
        return Ok(());
    };
    let missing = || Error::config(format!("override key {full:?}: no field {head:?}"));
    match node {
        Value::Object(map) => {
            let child = map.get_mut(*head).ok_or_else(missing)?;
            set_path(child, rest, value, full)
        }
        Value::Array(items) if *head == "*" => {
            for item in items {
                set_path(item, rest, value, full)?;
            }
            Ok(())
        }
        Value::Array(items) => {
            let i: usize = head.parse().map_err(|_| missing())?;
            let child = items.get_mut(i).ok_or_else(missing)?;
            set_path(child, rest, value, full)
        }
        _ => Err(missing()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diff_paths(a: &Value, b: &Value, prefix: String, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, v) in x {
                    diff_paths(v, &y[k], format!("{prefix}.{k}"), out);
                }
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
                for (i, (u, v)) in x.iter().zip(y).enumerate() {
                    diff_paths(u, v, format!("{prefix}.{i}"), out);
                }
            }
            _ if a != b => out.push(prefix),
            _ => {}
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_value(v).unwrap(), Value::String(v.name().into()));
        }
        assert!(matches!(Variant::parse("drq"), Err(Error::Config(_))));
    }

    #[test]
    fn nocrop_differs_from_cnsn_in_one_field() {
        let base = RunConfig::default();
        let a = serde_json::to_value(base.with_variant(Variant::Cnsn).resolved_encoder()).unwrap();
        let b = serde_json::to_value(base.with_variant(Variant::CnsnNocrop).resolved_encoder()).unwrap();
        let mut diffs = Vec::new();
        diff_paths(&a, &b, String::new(), &mut diffs);
        assert_eq!(diffs, vec![".crossnorm.crop_enabled".to_string()]);
    }

    #[test]
    fn cn_variant_has_no_selfnorm() {
        let enc = RunConfig::default().with_variant(Variant::Cn).resolved_encoder();
        assert!(enc.norms.iter().all(|n| n.has_crossnorm() && !n.has_selfnorm()));
        let enc = RunConfig::default().with_variant(Variant::Base).resolved_encoder();
        assert_eq!(enc.k_active, 0);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load_with_overrides(
            None,
            &[
                "agent.batch=32".into(),
                "encoder.layers.*.out_channels=16".into(),
                "variant=bn".into(),
                "suites=[\"train\",\"video_hard\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.agent.batch, 32);
        assert!(cfg.encoder.layers.iter().all(|l| l.out_channels == 16));
        assert_eq!(cfg.variant, Variant::Bn);
        assert_eq!(cfg.suites, vec![Suite::Train, Suite::VideoHard]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for o in ["agent.nope=1", "agent", "encoder.layers.9.stride=1", "agent.gamma=\"x\""] {
            let r = RunConfig::load_with_overrides(None, &[o.to_string()]);
            assert!(matches!(r, Err(Error::Config(_))), "{o}");
        }
        let r = RunConfig::load_with_overrides(None, &["agent.gamma=1.0".into()]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(RunConfig::from_json("{\"bogus\": 1}").is_err());
    }
}
