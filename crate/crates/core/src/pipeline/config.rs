use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::policy::PolicySpec;
use crate::am::AmConfig;
use crate::iit::CqlConfig;
use crate::isp::IspConfig;
use crate::sim::SimConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Days of last-exit traffic before the trial, feeding the history features.
    pub history_days: usize,
    /// Length of the randomized trial window.
    pub rct_days: usize,
    /// Days of logged traffic for the hourly and streaming datasets.
    pub log_days: usize,
    /// Logging policy: uniform page with this probability, otherwise last exit.
    pub explore_prob: f64,
    /// Share of users in the training split.
    pub train_ratio: f64,
    /// Warm-up days of last-exit traffic before each evaluation run.
    pub warmup_days: usize,
    pub eval_days: usize,
    /// One paired evaluation run per seed.
    pub eval_seeds: Vec<u64>,
    pub policies: Vec<PolicySpec>,
    /// Switch-rate threshold for streaming labels; the median ratio when unset.
    pub stream_threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            history_days: 14,
            rct_days: 7,
            log_days: 7,
            explore_prob: 0.5,
            train_ratio: 0.8,
            warmup_days: 14,
            eval_days: 7,
            eval_seeds: (101..=110).collect(),
            policies: vec![
                PolicySpec::Klan,
                PolicySpec::IspOnly,
                PolicySpec::IitOnly,
                PolicySpec::Random,
                PolicySpec::LastExit,
                PolicySpec::MostFrequent,
            ],
            stream_threshold: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub isp: IspConfig,
    pub iit: CqlConfig,
    pub am: AmConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the world seed and every model seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.isp.seed = seed;
        self.iit.seed = seed;
        self.am.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.isp.validate()?;
        self.iit.validate()?;
        self.am.validate()?;
        let k = self.sim.pages;
        if self.isp.pages != k || self.am.pages != k {
            return Err(Error::config(format!(
                "page counts disagree: sim {k}, isp {}, am {}",
                self.isp.pages, self.am.pages
            )));
        }
        let e = &self.experiment;
        if e.rct_days == 0 || e.log_days == 0 || e.eval_days == 0 {
            return Err(Error::config("rct_days, log_days and eval_days must be positive"));
        }
        if !(0.0..=1.0).contains(&e.explore_prob) {
            return Err(Error::config("explore_prob must be in [0,1]"));
        }
        if e.eval_seeds.is_empty() {
            return Err(Error::config("eval_seeds must not be empty"));
        }
        for p in &e.policies {
            p.validate(k)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_override_defaults() {
        let cfg = Config::from_toml("[sim]\npopulation = 50\n[experiment]\neval_seeds = [1, 2]\n").unwrap();
        assert_eq!(cfg.sim.population, 50);
        assert_eq!(cfg.experiment.eval_seeds, vec![1, 2]);
        assert_eq!(cfg.isp, IspConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_page_mismatch() {
        assert!(matches!(Config::from_toml("[sim]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[isp]\npages = 4\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let b = Config::default().with_seed(9);
        assert_eq!(a.hash(), Config::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
