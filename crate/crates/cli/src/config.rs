//! Run configuration: defaults, then a config file, then command-line flags.

use std::path::{Path, PathBuf};

use gbsr_core::{Error, Result, SyntheticSpec, TrainConfig};
use serde_json::{Map, Value};

/// Everything a `train`, `evaluate` or `export-confidence` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub interactions: Option<PathBuf>,
    pub social: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            interactions: None,
            social: None,
            out: None,
            seeds: (0..5).collect(),
        }
    }
}

pub fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "command" => {}
            "interactions" => self.interactions = Some(value.trim().into()),
            "social" => self.social = Some(value.trim().into()),
            "out" => self.out = Some(value.trim().into()),
            "seed" | "seeds" => self.seeds = parse_seeds(value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::Config(format!("missing required setting {name:?}")))
    }

    /// Flat JSON object with every effective setting, loadable via `--config`.
    pub fn manifest(&self) -> Value {
        let mut m = Map::new();
        m.insert("command".into(), "train".into());
        for (k, p) in [("interactions", &self.interactions), ("social", &self.social), ("out", &self.out)] {
            if let Some(p) = p {
                m.insert(k.into(), p.display().to_string().into());
            }
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        m.insert("seeds".into(), seeds.join(",").into());
        for (k, v) in self.train.pairs() {
            if k != "seed" {
                m.insert(k.into(), v.into());
            }
        }
        Value::Object(m)
    }
}

pub fn set_synth(spec: &mut SyntheticSpec, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
    }
    match key {
        "command" | "out" => {}
        "cluster_count" | "clusters" => spec.cluster_count = num(key, value)?,
        "users_per_cluster" => spec.users_per_cluster = num(key, value)?,
        "items_per_cluster" => spec.items_per_cluster = num(key, value)?,
        "interaction_rate" => spec.interaction_rate = num(key, value)?,
        "intra_social_rate" => spec.intra_social_rate = num(key, value)?,
        "noise_fraction" | "eta" => spec.noise_fraction = num(key, value)?,
        "seed" => spec.seed = num(key, value)?,
        "split_ratio" => spec.split_ratio = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown synth key {key:?}"))),
    }
    Ok(())
}

/// Reads `key=value` lines, or a flat JSON object such as a run manifest.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            unreachable!("starts with a brace")
        };
        return map
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    other => {
                        return Err(Error::Config(format!(
                            "{}: key {k:?} must be a scalar, got {other}",
                            path.display()
                        )))
                    }
                };
                Ok((k, s))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_reloads_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("beta", "40").unwrap();
        cfg.set("seeds", "3,4").unwrap();
        cfg.set("interactions", "a.tsv").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, cfg.manifest().to_string()).unwrap();
        let mut back = RunConfig::default();
        for (k, v) in read_config_file(&path).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::default().set("gamma", "1").is_err());
        assert!(set_synth(&mut SyntheticSpec::default(), "beta", "1").is_err());
        assert!(parse_seeds(" , ").is_err());
    }
}
