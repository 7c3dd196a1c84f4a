//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must be in the
//! registry below — unknown keys are errors, not warnings, so typos fail
//! fast before any compute.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Known configuration keys and what they control.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("train.epochs", "maximum training epochs"),
    ("train.batch", "shapes per optimizer step"),
    ("train.lr", "Adam learning rate"),
    ("train.seed", "root seed for all named random streams"),
    ("train.target_miou", "stop early when train mIoU reaches this"),
    ("train.val_fraction", "held-out fraction for best-checkpoint tracking"),
    ("data.noise", "augmentation Gaussian noise sigma"),
    ("data.scale_min", "augmentation per-axis scale lower bound"),
    ("data.scale_max", "augmentation per-axis scale upper bound"),
    ("data.translate", "augmentation translation half-range"),
    ("pdnet.cloud_size", "tree leaf count (power of two; 0 = derive from data)"),
    ("pdnet.widths", "comma-separated encoder widths, bottom-up"),
    ("pdnet.bottleneck", "root bottleneck width"),
    ("pdnet.head", "comma-separated head hidden widths"),
    ("pdnet.lift", "leaf lift width"),
    ("pdnet.trees", "prediction ensemble size"),
    ("pdnet.subset", "points sampled per node for the split direction"),
    ("sparse.resolution", "voxel grid resolution per axis"),
    ("sparse.channels", "feature channels inside the network"),
    ("sparse.blocks", "number of receptive-field blocks"),
    ("pointcnn.k", "neighborhood size"),
    ("pointcnn.points", "comma-separated encoder level sizes"),
    ("pointcnn.channels", "comma-separated encoder channels"),
    ("pointcnn.s_hidden", "hidden width of the weighting MLP"),
    ("eval.seed", "seed for evaluation-time randomness"),
    ("eval.empty_union", "mIoU empty-union policy: one | skip"),
];

/// Parsed configuration.
#[derive(Clone, Debug, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    message: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::UnknownConfigKey { key });
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{origin}:{}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated positive integers.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => {
                let list: Result<Vec<usize>> = v
                    .split(',')
                    .map(|t| {
                        t.trim().parse().map_err(|_| {
                            Error::Config(format!("key '{key}': bad integer '{t}'"))
                        })
                    })
                    .collect();
                Ok(Some(list?))
            }
        }
    }

    /// Stable digest of the canonicalized contents, as hex.
    pub fn digest(&self) -> String {
        let mut canon = String::new();
        for (k, v) in &self.map {
            canon.push_str(k);
            canon.push('=');
            canon.push_str(v);
            canon.push('\n');
        }
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_comments() {
        let cfg = Config::parse(
            "train.epochs = 5\n# comment\ntrain.lr = 0.01  # inline\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.get_usize("train.epochs", 0).unwrap(), 5);
        assert_eq!(cfg.get_f64("train.lr", 0.0).unwrap(), 0.01);
        assert_eq!(cfg.get_usize("train.batch", 8).unwrap(), 8);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = Config::parse("train.eproches = 5\n", "test").unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn duplicate_key_is_error() {
        assert!(Config::parse("train.epochs = 5\ntrain.epochs = 6\n", "test").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = Config::parse("train.epochs = 5\n", "t").unwrap();
        let b = Config::parse("train.epochs = 5\n", "t").unwrap();
        let c = Config::parse("train.epochs = 6\n", "t").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn lists_parse() {
        let cfg = Config::parse("pdnet.widths = 16, 16,32\n", "t").unwrap();
        assert_eq!(
            cfg.get_usize_list("pdnet.widths").unwrap().unwrap(),
            vec![16, 16, 32]
        );
    }
}
