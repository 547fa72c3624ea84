//! TOML run configuration and the JSON-lines training log.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csd::CsdConfig;
use crate::error::{Error, Result};
use crate::esd::{EpochRecord, EsdConfig};
use crate::peaks::{FractionConvention, MIN_SEPARATION_DEG};
use crate::signal_model::SimulationConfig;

fn d_peak_nside() -> usize {
    16
}
fn d_rel_threshold() -> f64 {
    0.1
}
fn d_candidates() -> Vec<f64> {
    (1..=12).map(|i| i as f64 * 0.05).collect()
}
fn d_separation() -> f64 {
    MIN_SEPARATION_DEG
}

/// Peak extraction and scoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Healpix side of the detection grid.
    #[serde(default = "d_peak_nside")]
    pub peak_grid_nside: usize,
    /// Threshold used when none is selected on a validation split.
    #[serde(default = "d_rel_threshold")]
    pub rel_threshold: f64,
    /// Thresholds tried by validation selection.
    #[serde(default = "d_candidates")]
    pub threshold_candidates: Vec<f64>,
    #[serde(default = "d_separation")]
    pub min_separation_deg: f64,
    #[serde(default)]
    pub fraction_convention: FractionConvention,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            peak_grid_nside: d_peak_nside(),
            rel_threshold: d_rel_threshold(),
            threshold_candidates: d_candidates(),
            min_separation_deg: d_separation(),
            fraction_convention: FractionConvention::default(),
        }
    }
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.peak_grid_nside.is_power_of_two() || !(16..=128).contains(&self.peak_grid_nside) {
            return bad(format!(
                "evaluate.peak_grid_nside must be a power of two in [16, 128], got {}",
                self.peak_grid_nside
            ));
        }
        if !(0.0..1.0).contains(&self.rel_threshold) {
            return bad(format!("evaluate.rel_threshold must be in [0, 1), got {}", self.rel_threshold));
        }
        if self.threshold_candidates.is_empty() || self.threshold_candidates.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("evaluate.threshold_candidates must be a nonempty list of values in [0, 1)".into());
        }
        if !(0.0..90.0).contains(&self.min_separation_deg) {
            return bad(format!(
                "evaluate.min_separation_deg must be in [0, 90), got {}",
                self.min_separation_deg
            ));
        }
        Ok(())
    }
}

/// Every tunable of a pipeline run. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Threads for parallel sections; unset means all available cores.
    /// `workers = 1` makes training bit-reproducible.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub simulate: Option<SimulationConfig>,
    #[serde(default)]
    pub csd: CsdConfig,
    #[serde(default)]
    pub esd: EsdConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(s) => Error::Config(format!("line {}: {msg}", text[..s.start].lines().count().max(1))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(s) = &self.simulate {
            s.validate()?;
        }
        self.csd.validate()?;
        self.esd.validate()?;
        self.evaluate.validate()
    }

    /// The `[simulate]` section, required by the `simulate` subcommand.
    pub fn simulation(&self) -> Result<&SimulationConfig> {
        self.simulate
            .as_ref()
            .ok_or_else(|| Error::Config("missing [simulate] section (needs at least `shells`)".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Writes one JSON record per epoch.
pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).expect("epoch record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
