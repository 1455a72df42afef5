//! `--set dotted.key=value` overrides on JSON-backed configs.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use tada::{Result, TadaError};

/// Applies each `key=value` to `base`. Keys must already exist in the
/// serialized config; values are read as JSON, falling back to a bare string.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| TadaError::Config(format!("override `{item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| TadaError::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| TadaError::Config(format!("invalid override: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tada::train::RunConfig;

    fn set(items: &[&str]) -> Result<RunConfig> {
        let items: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        apply(&RunConfig::default(), &items)
    }

    #[test]
    fn nested_keys_and_types() {
        let c = set(&[
            "model.dla.L=32",
            "train.adam.lr=0.01",
            "model.dla.window=hard",
            "model.mixer.l_c=4",
        ])
        .unwrap();
        assert_eq!(c.model.dla.l, 32);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.model.mixer.l_c, Some(4));
        assert_eq!(c.model.dla.window, tada::dla::WindowMode::Hard);
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        assert!(matches!(
            set(&["model.dla.nope=1"]),
            Err(TadaError::Config(_))
        ));
        assert!(matches!(
            set(&["model.dla.L=many"]),
            Err(TadaError::Config(_))
        ));
        assert!(matches!(set(&["seed"]), Err(TadaError::Config(_))));
        assert!(matches!(set(&["seed.x=1"]), Err(TadaError::Config(_))));
    }
}
