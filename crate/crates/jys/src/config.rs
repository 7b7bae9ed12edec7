//! Experiment configuration: the structured config file, CLI-overridable
//! key by key, plus the stable hash embedded in every output.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::countdown::CountdownSpec;
use crate::data::{DataDistribution, DataFile};
use crate::error::{Error, Result};
use crate::kernels::{FactorizedKernel, KernelFamily, NoiseSchedule};
use crate::klub::{CoarseRateState, DeltaConvention, KlubConfig, KlubVariant};
use crate::oracle::ReverseOracle;
use crate::samplers::StepKernel;
use crate::scheduler::RefineObjective;

/// FNV-1a over the canonical JSON serialization; stable across runs and
/// platforms, embedded in every output file for reproducibility checks.
pub fn config_hash_hex<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Forward-kernel configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub vocab_size: usize,
    pub eps_min: f64,
    pub horizon: f64,
    pub gaussian_bandwidth: f64,
    pub gaussian_truncation: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Absorbing,
            vocab_size: 9,
            eps_min: 1e-3,
            horizon: 1.0,
            gaussian_bandwidth: 1.0,
            gaussian_truncation: 3,
        }
    }
}

impl KernelConfig {
    pub fn build(&self) -> Result<FactorizedKernel> {
        let schedule = NoiseSchedule::new(self.eps_min, self.horizon)?;
        FactorizedKernel::new(
            self.family,
            self.vocab_size,
            schedule,
            self.gaussian_bandwidth,
            self.gaussian_truncation,
        )
    }

    pub fn from_kernel(kernel: &FactorizedKernel) -> Self {
        KernelConfig {
            family: kernel.family,
            vocab_size: kernel.vocab_size,
            eps_min: kernel.schedule.eps_min(),
            horizon: kernel.schedule.horizon(),
            gaussian_bandwidth: kernel.gaussian_bandwidth,
            gaussian_truncation: kernel.gaussian_truncation,
        }
    }
}

/// Where the clean-data law comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Countdown { seq_len: usize, value_count: usize },
    File { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        let spec = CountdownSpec::default();
        DataSource::Countdown { seq_len: spec.seq_len, value_count: spec.value_count }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<DataDistribution> {
        match self {
            DataSource::Countdown { seq_len, value_count } => {
                let spec = CountdownSpec::new(*seq_len, *value_count)?;
                Ok(crate::countdown::exact_distribution(spec))
            }
            DataSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                let file: DataFile = serde_json::from_str(&text)?;
                file.into_distribution()
            }
        }
    }
}

/// Full experiment configuration; every key is overridable by a CLI flag of
/// the same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kernel: KernelConfig,
    pub data: DataSource,
    /// Monte-Carlo samples per KLUB evaluation.
    pub num_samples: usize,
    /// Paths drawn when evaluating a schedule's output quality.
    pub eval_ensemble: usize,
    pub seed: u64,
    /// Smallest reverse time, as a fraction of the horizon; rates blow up
    /// at exactly zero.
    pub t_min: f64,
    pub step_kernel: StepKernel,
    pub variant: KlubVariant,
    pub delta_convention: DeltaConvention,
    pub coarse_rate_state: CoarseRateState,
    pub objective: RefineObjective,
    /// Local blend of the data law toward uniform so parallel-sampling
    /// artifacts (contradictory contexts) keep finite rates.
    pub support_smoothing: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kernel: KernelConfig::default(),
            data: DataSource::default(),
            num_samples: 2048,
            eval_ensemble: 4096,
            seed: 0,
            t_min: 1e-4,
            step_kernel: StepKernel::Euler,
            variant: KlubVariant::QPath,
            delta_convention: DeltaConvention::FineLeg,
            coarse_rate_state: CoarseRateState::AtStepStart,
            objective: RefineObjective::CoarseRefinement,
            support_smoothing: 1e-6,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(Error::from)
    }

    pub fn build_oracle(&self) -> Result<ReverseOracle> {
        let kernel = self.kernel.build()?;
        let data = self.data.load()?;
        ReverseOracle::new(kernel, data)?.with_smoothing(self.support_smoothing)
    }

    pub fn klub_config(&self) -> KlubConfig {
        KlubConfig {
            num_samples: self.num_samples,
            variant: self.variant,
            delta_convention: self.delta_convention,
            coarse_rate_state: self.coarse_rate_state,
            step_kernel: self.step_kernel,
            ..KlubConfig::default()
        }
    }

    pub fn hash(&self) -> String {
        config_hash_hex(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn kernel_config_builds() {
        let cfg = KernelConfig {
            family: KernelFamily::Gaussian,
            vocab_size: 6,
            ..Default::default()
        };
        let kernel = cfg.build().unwrap();
        assert_eq!(kernel.vocab_size, 6);
        assert_eq!(KernelConfig::from_kernel(&kernel), cfg);
    }
}
