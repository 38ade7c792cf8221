//! Run configuration: one JSON document with a section per component,
//! dot-path overrides, cross-section validation and a provenance hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptationConfig;
use crate::augment::AugmentationConfig;
use crate::backbone::BackboneConfig;
use crate::data::{DataConfig, ToyConfig};
use crate::error::{Error, Result};
use crate::report::ReportConfig;
use crate::s2match::S2MatchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Parent of the per-run directories.
    pub dir: PathBuf,
    /// Save a checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
    pub eval_batch: usize,
    /// Metric accumulation shards for evaluation.
    pub workers: usize,
    /// Number of interior thresholds of the PR curve.
    pub pr_thresholds: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs".into(),
            checkpoint_every: 1,
            eval_batch: 8,
            workers: 1,
            pr_thresholds: 99,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adaptation: AdaptationConfig,
    pub augment: AugmentationConfig,
    pub s2match: S2MatchConfig,
    pub data: DataConfig,
    pub report: ReportConfig,
    pub output: OutputConfig,
    pub toy: ToyConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adaptation.validate(&self.backbone)?;
        self.augment.validate()?;
        self.s2match.validate()?;
        self.data.validate()?;
        self.report.validate()?;
        if self.augment.crop_size != self.backbone.input_size {
            return Err(Error::config(format!(
                "augment.crop_size {:?} must equal backbone.input_size {:?}",
                self.augment.crop_size, self.backbone.input_size
            )));
        }
        if self.s2match.cd_enabled && !self.backbone.neck_channels.is_multiple_of(2) {
            return Err(Error::config("backbone.neck_channels must be even when s2match.cd_enabled is set"));
        }
        let o = &self.output;
        if o.checkpoint_every == 0 || o.eval_batch == 0 || o.workers == 0 || o.pr_thresholds == 0 {
            return Err(Error::config("output.checkpoint_every, eval_batch, workers and pr_thresholds must be positive"));
        }
        Ok(())
    }

    /// Parses, applies `key.path=value` overrides, and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| Error::config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Defaults plus overrides, for runs without a config file.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_json("{}", overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `a.b.c` in `doc`. The value is parsed as JSON when possible and
/// taken as a string otherwise. Missing intermediate objects are created so
/// unknown keys surface as deserialization errors with their full path.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` has an empty segment")));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_the_published_hyperparameters() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = &c.s2match;
        assert_eq!((s.tau, s.tau_s, s.lambda_u), (0.95, 0.8, 1.0));
        assert_eq!((s.batch_labeled, s.batch_unlabeled, s.epochs), (2, 2, 30));
        assert_eq!(s.lr0, 2e-4);
    }

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        let c = RunConfig::with_overrides(&["s2match.tau=0.9".into(), "output.dir=/tmp/x".into(), "backbone.input_size=[32,32]".into(), "augment.crop_size=[32,32]".into()]).unwrap();
        assert_eq!(c.s2match.tau, 0.9);
        assert_eq!(c.output.dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.backbone.input_size, [32, 32]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_json(r#"{"s2match": {"taux": 1}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("s2match"), "{err}");
        assert!(err.to_string().contains("taux"), "{err}");
        let err = RunConfig::with_overrides(&["nope.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn cross_section_checks() {
        assert!(RunConfig::with_overrides(&["augment.crop_size=[32,32]".into()]).is_err());
        assert!(RunConfig::with_overrides(&["backbone.neck_channels=33".into()]).is_err());
        assert!(RunConfig::with_overrides(&["s2match.tau_s=0.99".into()]).is_err());
        assert!(RunConfig::with_overrides(&["output.workers=0".into()]).is_err());
        assert!(RunConfig::with_overrides(&["badform".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
        b.s2match.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back = RunConfig::from_json(&a.to_json(), &[]).unwrap();
        assert_eq!(back, a);
    }
}
