//! Experiment configuration files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use specbatch_core::policy::ProfileMode;
use specbatch_core::traffic::DEFAULT_GEN_LEN;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Sweep,
    Profile,
    Uniform,
    Dynamic,
    Timeline,
    Fit,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Profile => "profile",
            ExperimentKind::Uniform => "uniform",
            ExperimentKind::Dynamic => "dynamic",
            ExperimentKind::Timeline => "timeline",
            ExperimentKind::Fit => "fit",
        };
        f.write_str(name)
    }
}

/// A serving policy named in a config: `none`, `fixed-<s>` or `adaptive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySpec {
    Fixed(usize),
    Adaptive,
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PolicySpec::Fixed(0)),
            "adaptive" => Ok(PolicySpec::Adaptive),
            _ => s
                .strip_prefix("fixed-")
                .and_then(|n| n.parse().ok())
                .map(PolicySpec::Fixed)
                .ok_or_else(|| format!("unknown policy `{s}` (expected none, fixed-<s> or adaptive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Seconds.
    pub duration: f64,
    pub interval: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Requests per uniform run and per dynamic cell.
    pub count: usize,
    pub gen_len: usize,
    pub intervals: Vec<f64>,
    pub cvs: Vec<f64>,
    /// Batch sizes of the uniform experiment.
    pub batch_sizes: Vec<usize>,
    pub max_batch: usize,
    pub phases: Vec<PhaseConfig>,
    /// How many times the phase pattern is repeated.
    pub repeat: usize,
    pub group_size: usize,
    /// Optional cap on timeline requests; the schedule duration always bounds it.
    pub max_requests: Option<usize>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            gen_len: DEFAULT_GEN_LEN,
            intervals: (1..=8).map(|k| k as f64 / 10.0).collect(),
            cvs: vec![0.5, 1.0, 2.0, 5.0],
            batch_sizes: vec![1, 2, 4, 8, 16, 32],
            max_batch: specbatch_core::simulator::DEFAULT_MAX_BATCH,
            phases: vec![
                PhaseConfig { duration: 50.0, interval: 0.2, cv: 1.0 },
                PhaseConfig { duration: 50.0, interval: 1.0, cv: 1.0 },
            ],
            repeat: 3,
            group_size: specbatch_core::simulator::TIMELINE_GROUP,
            max_requests: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSettings {
    pub sizes: Vec<usize>,
    pub grid: Vec<usize>,
    #[serde(with = "mode_str")]
    pub mode: ProfileMode,
    pub samples: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            sizes: specbatch_core::policy::default_sizes(),
            grid: specbatch_core::policy::default_grid(),
            mode: ProfileMode::Simulated,
            samples: 200,
        }
    }
}

mod mode_str {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use specbatch_core::policy::ProfileMode;

    pub fn serialize<S: Serializer>(mode: &ProfileMode, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(mode)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ProfileMode, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

fn default_policies() -> Vec<String> {
    ["none", "fixed-2", "fixed-4", "adaptive"].iter().map(|s| s.to_string()).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Contents of a `--config` file. Relative paths resolve against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    pub calibration: PathBuf,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub profile: ProfileSettings,
    /// Prebuilt lookup table; profiled on the fly when absent.
    #[serde(default)]
    pub lut: Option<PathBuf>,
    /// Step-time measurements for `fit`.
    #[serde(default)]
    pub step_samples: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(calibration: impl Into<PathBuf>) -> Self {
        Self {
            kind: None,
            calibration: calibration.into(),
            trace: None,
            policies: default_policies(),
            workload: WorkloadConfig::default(),
            profile: ProfileSettings::default(),
            lut: None,
            step_samples: None,
            seed: 0,
            out_dir: default_out_dir(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn policy_specs(&self) -> Result<Vec<PolicySpec>> {
        if self.policies.is_empty() {
            return Err(HarnessError::Config("policy set is empty".into()));
        }
        self.policies.iter().map(|p| p.parse().map_err(HarnessError::Config)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.workload;
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        if w.count == 0 || w.gen_len == 0 || w.max_batch == 0 || w.group_size == 0 {
            return bad("workload count, gen_len, max_batch and group_size must be >= 1");
        }
        if w.intervals.iter().chain(&w.cvs).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("intervals and cvs must be positive");
        }
        if w.batch_sizes.contains(&0) {
            return bad("batch sizes must be >= 1");
        }
        if self.profile.samples == 0 || self.profile.grid.is_empty() || self.profile.sizes.is_empty() {
            return bad("profile needs sizes, a grid and samples >= 1");
        }
        self.policy_specs()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names() {
        assert_eq!("none".parse(), Ok(PolicySpec::Fixed(0)));
        assert_eq!("fixed-4".parse(), Ok(PolicySpec::Fixed(4)));
        assert_eq!("adaptive".parse(), Ok(PolicySpec::Adaptive));
        assert!("fixed-x".parse::<PolicySpec>().is_err());
        assert!("greedy".parse::<PolicySpec>().is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"calibration": "cal.json"}"#).unwrap();
        assert_eq!(c.workload.intervals.len(), 8);
        assert_eq!(c.workload.max_batch, 16);
        assert_eq!(c.profile.grid, (0..=8).collect::<Vec<_>>());
        assert_eq!(c.profile.mode, ProfileMode::Simulated);
        assert_eq!(c.policies.len(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"calibration": "c", "sede": 1}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"calibration": "c", "policies": ["fixed-"]}"#).unwrap();
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = ExperimentConfig::new("cal.json");
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = ExperimentConfig::new("cal.json");
        c.base_dir = "/tmp/exp".into();
        assert_eq!(c.resolve(Path::new("cal.json")), Path::new("/tmp/exp/cal.json"));
        assert_eq!(c.resolve(Path::new("/abs/x")), Path::new("/abs/x"));
    }
}
