//! The `summary.json` of a run and its recomputation from `trace.csv`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use popinv::config::ExperimentConfig;
use popinv::datagen::PopulationDataset;
use popinv::experiment;
use popinv::inference::{condition_number, ConvergenceTrace, RunOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub experiment: u64,
    pub data: u64,
    pub run: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub model: String,
    pub n: usize,
    pub d_y: usize,
    pub seed: u64,
    pub observations_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateInfo {
    pub buffer_size: usize,
    pub dropped_acquisitions: usize,
    pub lipschitz_violations: usize,
    pub max_layer_norm: f64,
    pub final_inner_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub data: DataInfo,
    pub iterations: usize,
    pub rejected_steps: usize,
    /// Trailing iterations averaged into the relative errors.
    pub window: usize,
    /// Loss of the last accepted step.
    pub final_loss: Option<f64>,
    pub final_params: BTreeMap<String, f64>,
    pub truth: BTreeMap<String, f64>,
    pub relative_errors: BTreeMap<String, f64>,
    pub noise_covariance: Vec<Vec<f64>>,
    pub noise_condition_number: f64,
    pub surrogate: Option<SurrogateInfo>,
    pub config: ExperimentConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative errors recomputed from a trace.
pub fn relative_errors(cfg: &ExperimentConfig, trace: &ConvergenceTrace) -> BTreeMap<String, f64> {
    experiment::truth_values(cfg)
        .into_iter()
        .filter_map(|(name, truth)| {
            trace
                .relative_error(&name, truth, cfg.learning.window)
                .map(|e| (name, e))
        })
        .collect()
}

pub fn build(cfg: &ExperimentConfig, config_text: &str, data: &PopulationDataset, out: &RunOutput) -> Summary {
    let cov = out.params.gamma.covariance();
    let final_params = out.params.names().into_iter().zip(out.params.values()).collect();
    Summary {
        experiment: cfg.experiment.name().to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seeds: Seeds {
            experiment: cfg.seed,
            data: data.meta.seed,
            run: cfg.run_seed(),
        },
        data: DataInfo {
            model: data.meta.model.clone(),
            n: data.n(),
            d_y: data.d_y(),
            seed: data.meta.seed,
            observations_sha256: data.meta.observations_sha256.clone(),
        },
        iterations: out.trace.len(),
        rejected_steps: out.trace.rejected(),
        window: cfg.learning.window,
        final_loss: out.trace.records.iter().rev().map(|r| r.loss).find(|l| l.is_finite()),
        final_params,
        truth: experiment::truth_values(cfg).into_iter().collect(),
        relative_errors: relative_errors(cfg, &out.trace),
        noise_covariance: cov.rows().into_iter().map(|r| r.to_vec()).collect(),
        noise_condition_number: condition_number(&cov),
        surrogate: out.surrogate.as_ref().map(|s| SurrogateInfo {
            buffer_size: s.buffer.len(),
            dropped_acquisitions: s.report.dropped,
            lipschitz_violations: s.lipschitz_violations,
            max_layer_norm: s.max_layer_norm,
            final_inner_loss: s.report.inner_losses.last().copied(),
        }),
        config: cfg.clone(),
    }
}
