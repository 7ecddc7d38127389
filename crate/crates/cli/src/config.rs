//! Run configuration loaded from a TOML file. Command-line flags override every key.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sopbench_core::eval::MatchConfig;
use sopbench_core::remote::RemoteEndpoint;
use sopbench_core::sop::BUNDLED_RULE_SETS;
use sopbench_core::GroundingConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub golden: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: Option<[f64; 3]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    /// A bundled rule set name or a path to a rule file.
    pub rules: Option<String>,
    pub policy: Option<String>,
    pub mix: Option<bool>,
    pub lenient: Option<bool>,
    pub model_name: Option<String>,
    pub paths: Paths,
    pub grounding: GroundingConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub remote: RemoteEndpoint,
    pub split: SplitConfig,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.as_os_str() != "-" && path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn must_exist(what: &str, p: &Option<PathBuf>) -> Result<(), CliError> {
    match p {
        Some(path) if path.as_os_str() != "-" && !path.exists() => {
            Err(CliError::config(format!("{what} path {} does not exist", path.display())))
        }
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Parses `src`, resolving relative paths against `base`.
    pub fn parse(src: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(src).map_err(|e| CliError::config(e.to_string()))?;
        rebase(base, &mut cfg.paths.input);
        rebase(base, &mut cfg.paths.output);
        rebase(base, &mut cfg.paths.golden);
        if let Some(r) = &cfg.rules {
            if !BUNDLED_RULE_SETS.contains(&r.as_str()) && Path::new(r).is_relative() {
                cfg.rules = Some(base.join(r).to_string_lossy().into_owned());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&src, base)
    }

    fn validate(&self) -> Result<(), CliError> {
        must_exist("input", &self.paths.input)?;
        must_exist("golden", &self.paths.golden)?;
        if let Some(out) = &self.paths.output {
            let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
            if let Some(parent) = parent {
                if !parent.exists() {
                    return Err(CliError::config(format!("output directory {} does not exist", parent.display())));
                }
            }
        }
        if let Some(r) = &self.rules {
            if !BUNDLED_RULE_SETS.contains(&r.as_str()) && !Path::new(r).exists() {
                return Err(CliError::config(format!("rules {r:?} is neither a bundled set nor an existing file")));
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::config("jobs must be at least 1"));
        }
        self.grounding.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("jobz = 3\n", Path::new(".")).unwrap_err();
        assert_eq!(err.code, 2);
        let err = RunConfig::parse("[grounding]\nexpand = 0.2\n", Path::new(".")).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn dotted_and_table_keys_agree() {
        let a = RunConfig::parse("grounding.expand_fraction = 0.2\n", Path::new(".")).unwrap();
        let b = RunConfig::parse("[grounding]\nexpand_fraction = 0.2\n", Path::new(".")).unwrap();
        assert_eq!(a.grounding, b.grounding);
        assert_eq!(a.grounding.click_threshold, 0.04);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = std::env::temp_dir();
        let name = format!("sopbench-config-test-{}.jsonl", std::process::id());
        std::fs::write(dir.join(&name), "").unwrap();
        let cfg = RunConfig::parse(&format!("[paths]\ninput = {name:?}\n"), &dir).unwrap();
        assert_eq!(cfg.paths.input.as_deref(), Some(dir.join(&name).as_path()));
        std::fs::remove_file(dir.join(&name)).unwrap();
    }

    #[test]
    fn missing_paths_are_config_errors() {
        let err = RunConfig::parse("[paths]\ninput = \"/definitely/not/here.jsonl\"\n", Path::new(".")).unwrap_err();
        assert_eq!(err.code, 2);
        let err = RunConfig::parse("rules = \"nope.jsonl\"\n", Path::new("/")).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn bad_grounding_values_fail() {
        assert!(RunConfig::parse("grounding.click_threshold = 1.5\n", Path::new(".")).is_err());
    }
}
