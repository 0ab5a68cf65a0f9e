//! Run configuration: JSON file, method preset and `--set` overrides merged
//! over the library defaults.
//!
//! Precedence, lowest first:
//! 1. `EstimatorConfig::default()`;
//! 2. the method preset's toggles (method taken from the flag, else the
//!    file, else `full`);
//! 3. keys present in the config file's `estimator` object;
//! 4. the preset's toggles again when `--method` is given on the command line;
//! 5. `--set path.to.key=value` overrides, in order.
//!
//! An `effective_config.json` written by a run therefore reproduces that run
//! when passed back with `--config` and no other flags.

use crate::error::{CliError, CliResult};
use alio_core::estimator::EstimatorConfig;
use clap::ValueEnum;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// Ablation presets over the angle residual and the map-update gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    /// Metric residuals only, every frame updates the map.
    Baseline,
    /// Adds the angle residual, every frame updates the map.
    AngleOnly,
    /// Angle residual plus degeneracy-gated map updates.
    Full,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::AngleOnly, Method::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::AngleOnly => "angle_only",
            Method::Full => "full",
        }
    }

    pub fn apply(&self, config: &mut EstimatorConfig) {
        let (angle, gating) = match self {
            Method::Baseline => (false, false),
            Method::AngleOnly => (true, false),
            Method::Full => (true, true),
        };
        config.residuals.angle.enabled = angle;
        config.degeneracy.gating_enabled = gating;
    }

    fn apply_to_value(&self, value: &mut Value) -> CliResult<()> {
        let mut config: EstimatorConfig = from_value(value.clone(), "estimator")?;
        self.apply(&mut config);
        *value = to_value(&config)?;
        Ok(())
    }
}

/// Everything a `run` needs. Also the layout of `--config` files, where every
/// field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `simulate`.
    pub dataset: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub method: Method,
    /// Recorded for provenance; the estimator itself is deterministic.
    pub seed: Option<u64>,
    pub estimator: EstimatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut estimator = EstimatorConfig::default();
        Method::Full.apply(&mut estimator);
        RunConfig { dataset: None, out: None, method: Method::Full, seed: None, estimator }
    }
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Internal(e.to_string()))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value, what: &str) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid {what} configuration: {e}")))
}

/// Recursively overwrites `base` with the keys of `over`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Applies one `path.to.key=value` override; the value is parsed as JSON
/// and taken as a string when that fails.
pub fn apply_set(value: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| CliError::Usage(format!("unknown configuration key `{path}`")))?;
    }
    *slot = parsed;
    Ok(())
}

pub fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    // reject unknown keys and wrong types up front
    from_value::<RunConfig>(value.clone(), "file")?;
    Ok(value)
}

/// Command-line inputs to [`resolve`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub sets: Vec<String>,
}

pub fn resolve(o: &Overrides) -> CliResult<RunConfig> {
    let file = match &o.config {
        Some(path) => read_config_file(path)?,
        None => Value::Object(Default::default()),
    };
    let file_method: Option<Method> = match file.get("method") {
        Some(m) => Some(from_value(m.clone(), "method")?),
        None => None,
    };
    let method = o.method.or(file_method).unwrap_or(Method::Full);

    let mut estimator = to_value(&EstimatorConfig::default())?;
    method.apply_to_value(&mut estimator)?;
    if let Some(over) = file.get("estimator") {
        merge(&mut estimator, over);
    }
    if let Some(m) = o.method {
        m.apply_to_value(&mut estimator)?;
    }
    let mut root = serde_json::json!({ "estimator": estimator });
    for s in &o.sets {
        apply_set(&mut root, &format!("estimator.{}", s.trim_start_matches("estimator.")))?;
    }
    let estimator: EstimatorConfig = from_value(root["estimator"].take(), "estimator")?;
    estimator.validate().map_err(CliError::Usage)?;

    let path_field = |key: &str| -> CliResult<Option<PathBuf>> {
        Ok(file.get(key).map(|v| from_value::<Option<PathBuf>>(v.clone(), key)).transpose()?.flatten())
    };
    let seed = match (o.seed, file.get("seed")) {
        (Some(s), _) => Some(s),
        (None, Some(v)) => from_value(v.clone(), "seed")?,
        (None, None) => None,
    };
    Ok(RunConfig {
        dataset: match &o.dataset {
            Some(d) => Some(d.clone()),
            None => path_field("dataset")?,
        },
        out: match &o.out {
            Some(d) => Some(d.clone()),
            None => path_field("out")?,
        },
        method,
        seed,
        estimator,
    })
}

/// JSON Schema of [`RunConfig`], with every default filled in.
pub fn config_schema() -> Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_map_to_toggles() {
        for (m, angle, gate) in
            [(Method::Baseline, false, false), (Method::AngleOnly, true, false), (Method::Full, true, true)]
        {
            let mut c = EstimatorConfig::default();
            m.apply(&mut c);
            assert_eq!((c.residuals.angle.enabled, c.degeneracy.gating_enabled), (angle, gate));
        }
    }

    #[test]
    fn set_overrides_nested_keys_and_rejects_unknown_ones() {
        let o = Overrides {
            sets: vec!["solver.max_iterations=3".into(), "degeneracy.variant=paper_eq11".into()],
            ..Overrides::default()
        };
        let c = resolve(&o).unwrap();
        assert_eq!(c.estimator.solver.max_iterations, 3);
        assert_eq!(c.estimator.degeneracy.variant, alio_core::degeneracy::ScoreVariant::PaperEq11);
        let bad = Overrides { sets: vec!["solver.nope=1".into()], ..Overrides::default() };
        assert!(matches!(resolve(&bad), Err(CliError::Usage(_))));
        let invalid = Overrides { sets: vec!["degeneracy.alpha=2".into()], ..Overrides::default() };
        assert!(matches!(resolve(&invalid), Err(CliError::Usage(_))));
    }

    #[test]
    fn flag_method_beats_file_and_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"method": "angle_only", "estimator": {"degeneracy": {"gating_enabled": true}}}"#,
        )
        .unwrap();
        let from_file = resolve(&Overrides { config: Some(path.clone()), ..Overrides::default() }).unwrap();
        assert_eq!(from_file.method, Method::AngleOnly);
        assert!(from_file.estimator.degeneracy.gating_enabled);
        let flagged =
            resolve(&Overrides { config: Some(path), method: Some(Method::Baseline), ..Overrides::default() })
                .unwrap();
        assert!(!flagged.estimator.degeneracy.gating_enabled);
        assert!(!flagged.estimator.residuals.angle.enabled);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"estimator": {"solver": {"iterations": 3}}}"#).unwrap();
        let r = resolve(&Overrides { config: Some(path), ..Overrides::default() });
        assert!(matches!(r, Err(CliError::Usage(_))));
    }
}
