//! TOML run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use boxclean::active::LoopConfig;
use boxclean::correction::{BibMode, CorrectionConfig};
use boxclean::detector::SimConfig;
use boxclean::ledger::CostModel;
use boxclean::noise::{CorpusSpec, NoiseSpec};
use boxclean::pipeline::CleaningConfig;
use boxclean::Error;

/// Written next to the outputs of `run-pipeline` so later commands see the same settings.
pub const RESOLVED_FILE: &str = "run-config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub truth: Option<PathBuf>,
    pub crowd: Option<PathBuf>,
    /// Expert labels answering step-1 requests; defaults to `truth`.
    pub expert: Option<PathBuf>,
    /// Difficulty map written by `simulate-noise`; recomputed from the seed when absent.
    pub difficulty: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// `paper-like` or `none`; individual rates override it.
    pub preset: String,
    pub bkg_rate: Option<f64>,
    pub miss_rate: Option<f64>,
    pub loc_rate: Option<f64>,
    pub bib_rate: Option<f64>,
    pub loc_jitter_sigma: Option<f64>,
    pub difficulty_coupling: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            preset: "paper-like".into(),
            bkg_rate: None,
            miss_rate: None,
            loc_rate: None,
            bib_rate: None,
            loc_jitter_sigma: None,
            difficulty_coupling: None,
        }
    }
}

impl NoiseSection {
    pub fn spec(&self, seed: u64) -> anyhow::Result<NoiseSpec> {
        let base = match self.preset.as_str() {
            "paper-like" => NoiseSpec::paper_like(seed),
            "none" => NoiseSpec::none(seed),
            other => return Err(Error::Config(format!("unknown noise preset {other:?}")).into()),
        };
        let spec = NoiseSpec {
            bkg_rate: self.bkg_rate.unwrap_or(base.bkg_rate),
            miss_rate: self.miss_rate.unwrap_or(base.miss_rate),
            loc_rate: self.loc_rate.unwrap_or(base.loc_rate),
            bib_rate: self.bib_rate.unwrap_or(base.bib_rate),
            loc_jitter_sigma: self.loc_jitter_sigma.unwrap_or(base.loc_jitter_sigma),
            difficulty_coupling: self.difficulty_coupling.unwrap_or(base.difficulty_coupling),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionSection {
    pub gamma: f64,
    pub bib_mode: BibMode,
    pub bib_enabled: bool,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        let c = CorrectionConfig::default();
        CorrectionSection {
            gamma: c.gamma,
            bib_mode: c.bib_mode,
            bib_enabled: c.bib_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// `sim` or `external:<command>`.
    pub kind: String,
    pub sim: SimConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            kind: "sim".into(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorChoice {
    Simulated,
    External(String),
}

impl DetectorSection {
    pub fn choice(&self) -> anyhow::Result<DetectorChoice> {
        match self.kind.split_once(':') {
            _ if self.kind == "sim" => Ok(DetectorChoice::Simulated),
            Some(("external", cmd)) if !cmd.trim().is_empty() => Ok(DetectorChoice::External(cmd.to_string())),
            _ => Err(Error::Config(format!("detector {:?}: expected sim or external:<command>", self.kind)).into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    /// Shape of generated corpora (`simulate-noise --generate`).
    pub corpus: CorpusSpec,
    pub noise: NoiseSection,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub correction: CorrectionSection,
    pub costs: CostModel,
    pub detector: DetectorSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string(self).context("serializing run configuration")?;
        boxclean::io::write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => Err(Error::Config("a seed is required (--seed or `seed` in the config file)".into()).into()),
        }
    }

    pub fn cleaning(&self) -> anyhow::Result<CleaningConfig> {
        let correction = CorrectionConfig {
            iou_threshold: self.loop_cfg.iou_threshold,
            gamma: self.correction.gamma,
            mode: self.loop_cfg.mode,
            bib_mode: self.correction.bib_mode,
            bib_enabled: self.correction.bib_enabled,
        };
        let cfg = CleaningConfig {
            loop_cfg: self.loop_cfg.clone(),
            correction,
            costs: self.costs,
            detector: self.detector.sim.clone(),
        };
        cfg.loop_cfg.validate()?;
        cfg.correction.validate()?;
        cfg.costs.validate()?;
        Ok(cfg)
    }

    pub fn workdir(&self) -> anyhow::Result<&Path> {
        match &self.paths.workdir {
            Some(p) => Ok(p),
            None => bail!(Error::Config("a workdir is required (--workdir or paths.workdir)".into())),
        }
    }
}

/// Sets `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses() {
        let text = include_str!("../boxclean.example.toml");
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.loop_cfg.k, 40);
        assert_eq!(cfg.correction.gamma, 0.8);
        assert_eq!(cfg.detector.choice().unwrap(), DetectorChoice::Simulated);
        cfg.cleaning().unwrap();
        cfg.noise.spec(7).unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        cfg.paths.workdir = Some("run".into());
        cfg.noise.bkg_rate = Some(0.2);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_detectors() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[loop]\nkk = 3").is_err());
        for kind in ["gpu", "external:", "external:  "] {
            let d = DetectorSection {
                kind: kind.into(),
                ..DetectorSection::default()
            };
            assert!(d.choice().is_err(), "{kind}");
        }
        let d = DetectorSection {
            kind: "external:python det.py {train_json} {out_json}".into(),
            ..DetectorSection::default()
        };
        assert_eq!(d.choice().unwrap(), DetectorChoice::External("python det.py {train_json} {out_json}".into()));
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let err = RunConfig::default().seed().unwrap_err();
        let core = err.downcast_ref::<Error>().unwrap();
        assert_eq!(core.kind(), boxclean::ErrorKind::Config);
    }
}
