//! Flat `key = value` configuration with command-line overrides.
//!
//! Values are looked up in order: flag, `--set`, config file, built-in
//! default. Every resolved value is kept so the run manifest can record the
//! exact configuration a command used.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Every key any command understands. One config file can serve the whole
/// pipeline, so keys meant for other commands are accepted and ignored.
pub const KNOWN_KEYS: &[&str] = &[
    "augment",
    "base_channels",
    "batch_size",
    "decay",
    "epochs",
    "group_by",
    "height",
    "jobs",
    "lambda1",
    "lambda2",
    "lambda3",
    "lr0",
    "melange_prob",
    "n",
    "na_prob",
    "patch",
    "predict_batch_size",
    "predict_stride",
    "repeats",
    "resolution_m",
    "seed",
    "speckle",
    "stride",
    "texture",
    "token_cap",
    "toy",
    "val_fraction",
    "variant",
    "variants",
    "waviness",
    "weight_decay",
    "width",
];

#[derive(Clone, Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    overrides: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

fn check_key(key: &str, origin: &str) -> CliResult<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::usage(format!("{origin}: unknown key `{key}`")))
    }
}

pub fn parse_config(text: &str, origin: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        check_key(k, origin)?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::usage(format!("{origin}:{}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(map)
}

impl Settings {
    pub fn new(config: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::MissingInput(format!("config file {}: {e}", p.display())))?;
                parse_config(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        let mut overrides = BTreeMap::new();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set {s}: expected KEY=VALUE")))?;
            check_key(k.trim(), "--set")?;
            overrides.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Settings {
            file,
            overrides,
            resolved: BTreeMap::new(),
        })
    }

    /// Applies a dedicated command-line flag, which beats `--set`.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.overrides.insert(key.to_string(), v.to_string());
        }
    }

    pub fn resolve<T>(&mut self, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        let value = match self.overrides.get(key).or_else(|| self.file.get(key)) {
            Some(text) => text
                .parse::<T>()
                .map_err(|e| CliError::usage(format!("bad value for `{key}`: {text:?}: {e}")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Optional count rendered as `none` when absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OptCount(pub Option<usize>);

impl FromStr for OptCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(OptCount(None));
        }
        s.parse::<usize>().map(|v| OptCount(Some(v))).map_err(|e| e.to_string())
    }
}

impl Display for OptCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("none"),
        }
    }
}
