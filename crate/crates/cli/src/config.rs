//! Run configuration: a TOML file merged over the seeded desk defaults.

use std::path::Path;

use anyhow::{Context, Result};
use dehaze_core::train::desk::DeskConfig;
use serde_json::Value;

pub const DEFAULT_SEED: u64 = 2024;

/// Resolves the configuration for one run.
///
/// The seed comes from `--seed`, else from a top-level `seed` key, else
/// [`DEFAULT_SEED`]. Every other key overrides the matching field of
/// `DeskConfig::new(seed)`; unknown keys and ill-typed values are errors.
pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>) -> Result<DeskConfig> {
    let user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let table: toml::Table =
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            serde_json::to_value(table).context("converting config")?
        }
        None => Value::Object(Default::default()),
    };
    let file_seed = match user.get("seed") {
        Some(v) => Some(
            v.as_u64()
                .context("config key `seed` must be a non-negative integer")?,
        ),
        None => None,
    };
    let seed = seed_flag.or(file_seed).unwrap_or(DEFAULT_SEED);
    let mut merged = serde_json::to_value(DeskConfig::new(seed)).expect("config serializes");
    merge(&mut merged, user);
    merged["seed"] = Value::from(seed);
    let cfg: DeskConfig = serde_json::from_value(merged).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults_without_file() {
        assert_eq!(resolve(None, None).unwrap(), DeskConfig::new(DEFAULT_SEED));
        assert_eq!(resolve(None, Some(7)).unwrap(), DeskConfig::new(7));
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let f = write("seed = 5\n[adapt.optim]\nlr = 0.001\n[adapt.clahe]\ntiles = [2, 3]\n");
        let cfg = resolve(Some(f.path()), None).unwrap();
        let mut expected = DeskConfig::new(5);
        expected.adapt.optim.lr = 1e-3;
        expected.adapt.clahe.tiles = (2, 3);
        assert_eq!(cfg, expected);
    }

    #[test]
    fn flag_seed_wins() {
        let f = write("seed = 5\n");
        assert_eq!(resolve(Some(f.path()), Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        for text in [
            "colour = 1\n",
            "[adapt]\nlearning_rate = 0.1\n",
            "[adapt.weights]\nlambda_p = -1.0\n",
            "seed = -3\n",
        ] {
            assert!(resolve(Some(write(text).path()), None).is_err(), "{text}");
        }
    }
}
