//! Run configuration: a flat `key = value` text format shared by the config
//! file and the CLI flags. Every run writes its resolved config beside its
//! outputs so that reruns are reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forecast::ForecastMethod;
use crate::hmm::BinarizeRule;

/// Environment variable holding the default output root.
pub const OUT_ROOT_ENV: &str = "ECOMPLEX_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizationMode {
    Threshold,
    Hmm,
}

impl std::str::FromStr for RegularizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "threshold" => Ok(RegularizationMode::Threshold),
            "hmm" => Ok(RegularizationMode::Hmm),
            other => Err(Error::Config(format!("unknown regularization mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RegularizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizationMode::Threshold => "threshold",
            RegularizationMode::Hmm => "hmm",
        })
    }
}

/// Resolved configuration of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub exports: Option<PathBuf>,
    pub gdp: Option<PathBuf>,
    /// Directory of metric CSVs produced by the `metrics` stage.
    pub metrics_dir: Option<PathBuf>,
    /// Matrix file produced by the `regularize` stage.
    pub matrices: Option<PathBuf>,
    pub digit_level: u8,
    pub mode: RegularizationMode,
    pub binarize: BinarizeRule,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub min_count: usize,
    pub sigma: Option<f64>,
    pub bootstraps: usize,
    pub samples_per_bootstrap: usize,
    pub seed: u64,
    pub dts: Vec<u32>,
    pub methods: Vec<ForecastMethod>,
    pub bootstrap_count: usize,
    pub null_replicates: usize,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            exports: None,
            gdp: None,
            metrics_dir: None,
            matrices: None,
            digit_level: 4,
            mode: RegularizationMode::Threshold,
            binarize: BinarizeRule::ExpectedRca,
            grid_nx: 20,
            grid_ny: 20,
            min_count: 5,
            sigma: None,
            bootstraps: 1000,
            samples_per_bootstrap: 100,
            seed: 0,
            dts: vec![3, 4, 5],
            methods: ForecastMethod::ALL.to_vec(),
            bootstrap_count: 200,
            null_replicates: 100,
            workers: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Serialize as sorted `key = value` lines.
    pub fn to_flat(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        if let Some(p) = &self.exports {
            map.insert("exports", p.display().to_string());
        }
        if let Some(p) = &self.gdp {
            map.insert("gdp", p.display().to_string());
        }
        if let Some(p) = &self.metrics_dir {
            map.insert("metrics_dir", p.display().to_string());
        }
        if let Some(p) = &self.matrices {
            map.insert("matrices", p.display().to_string());
        }
        map.insert("digit_level", self.digit_level.to_string());
        map.insert("mode", self.mode.to_string());
        map.insert(
            "binarize",
            match self.binarize {
                BinarizeRule::ExpectedRca => "expected-rca".into(),
                BinarizeRule::Top2 => "top2".into(),
            },
        );
        map.insert("grid_nx", self.grid_nx.to_string());
        map.insert("grid_ny", self.grid_ny.to_string());
        map.insert("min_count", self.min_count.to_string());
        if let Some(s) = self.sigma {
            map.insert("sigma", s.to_string());
        }
        map.insert("bootstraps", self.bootstraps.to_string());
        map.insert("samples_per_bootstrap", self.samples_per_bootstrap.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert(
            "dts",
            self.dts.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
        );
        map.insert(
            "methods",
            self.methods
                .iter()
                .map(|m| m.as_str().to_owned())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("bootstrap_count", self.bootstrap_count.to_string());
        map.insert("null_replicates", self.null_replicates.to_string());
        map.insert("workers", self.workers.to_string());
        map.insert("out", self.out.display().to_string());

        let mut buf = String::new();
        for (k, v) in map {
            let _ = writeln!(buf, "{k} = {v}");
        }
        buf
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_flat(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one key. Used by both the file parser and CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "exports" => self.exports = Some(PathBuf::from(value)),
            "gdp" => self.gdp = Some(PathBuf::from(value)),
            "metrics_dir" => self.metrics_dir = Some(PathBuf::from(value)),
            "matrices" => self.matrices = Some(PathBuf::from(value)),
            "digit_level" => self.digit_level = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "binarize" => {
                self.binarize = match value {
                    "expected-rca" => BinarizeRule::ExpectedRca,
                    "top2" => BinarizeRule::Top2,
                    other => return Err(Error::Config(format!("unknown binarize rule `{other}`"))),
                }
            }
            "grid_nx" => self.grid_nx = parse(key, value)?,
            "grid_ny" => self.grid_ny = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "sigma" => self.sigma = Some(parse(key, value)?),
            "bootstraps" => self.bootstraps = parse(key, value)?,
            "samples_per_bootstrap" => self.samples_per_bootstrap = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dts" => {
                self.dts = value
                    .split(',')
                    .map(|v| parse::<u32>("dts", v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<Vec<_>>>()?;
            }
            "bootstrap_count" => self.bootstrap_count = parse(key, value)?,
            "null_replicates" => self.null_replicates = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat(&text)
    }

    /// Write the resolved config beside the run outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("resolved.cfg");
        std::fs::write(&path, self.to_flat()).map_err(|e| Error::io(path, e))
    }
}
