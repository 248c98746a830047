//! From a config to data, initial parameters, runs and studies.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ExperimentConfig, ExperimentKind, ModelConfig, StudyParam};
use crate::datagen::{self, DataSpec, PopulationDataset};
use crate::distance::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::inference::{
    convergence_study, run_inference, run_surrogate_inference, GradientMode, Params, RunOutput,
    StudyRow,
};
use crate::measures::{InputMeasure, NoiseCov, WmGeometry};
use crate::models::{Darcy1DModel, LorenzOracle};
use crate::rng;
use crate::surrogate::{MlpSurrogate, SurrogateTrainer};
use crate::optim::HalvingSchedule;

fn input_measure(kind: ExperimentKind, m: &[f64], sigma: &[f64]) -> InputMeasure {
    if kind.is_lorenz() {
        InputMeasure::gaussian(m, sigma)
    } else {
        InputMeasure::log_normal(m[0], sigma[0])
    }
}

/// Observation dimension.
pub fn d_y(cfg: &ExperimentConfig) -> usize {
    match &cfg.model {
        ModelConfig::Darcy { d_y, .. } => *d_y,
        ModelConfig::Lorenz { .. } => cfg.model.time_averaged().expect("lorenz").feature_dim(),
    }
}

/// How the data for `cfg` are generated.
pub fn data_spec(cfg: &ExperimentConfig) -> DataSpec {
    let kind = cfg.experiment;
    let alpha = input_measure(kind, &cfg.truth.m, &cfg.truth.sigma);
    match &cfg.model {
        ModelConfig::Darcy { f0, d_y } => {
            let t = &cfg.truth;
            let noise = match kind {
                ExperimentKind::DarcyWm | ExperimentKind::DarcyCombined => {
                    NoiseCov::whittle_matern(t.gamma, t.ell, t.upsilon, WmGeometry::line(*d_y))
                }
                _ => NoiseCov::scaled_identity(t.gamma, *d_y),
            };
            DataSpec::Darcy {
                f0: *f0,
                d_y: *d_y,
                alpha,
                noise,
            }
        }
        ModelConfig::Lorenz { data_init_sd, .. } => DataSpec::Lorenz {
            system: cfg.model.time_averaged().expect("lorenz"),
            alpha,
            init_sd: *data_init_sd,
        },
    }
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<PopulationDataset> {
    datagen::generate(&data_spec(cfg), cfg.data.n, cfg.data_seed())
}

/// Starting `(α, Γ)`, optionally perturbed per `init.jitter` with `seed`.
pub fn initial_params(cfg: &ExperimentConfig, jitter_seed: Option<u64>) -> Params {
    let kind = cfg.experiment;
    let init = &cfg.init;
    let mut m = init.m.clone();
    let mut sigma = init.sigma.clone();
    let mut gamma = init.gamma;
    let mut ell = init.ell;
    if let Some(seed) = jitter_seed.filter(|_| init.jitter > 0.0) {
        let mut r = rng::stream(seed, 0);
        let mut n = || init.jitter * r.sample::<f64, _>(StandardNormal);
        let frozen = |b: &str| cfg.learning.frozen.iter().any(|f| f == b);
        if !frozen("m") {
            m.iter_mut().for_each(|v| *v += n());
        }
        if !frozen("log_sigma") {
            sigma.iter_mut().for_each(|v| *v *= n().exp());
        }
        if !frozen("log_gamma") {
            gamma *= n().exp();
        }
        if !frozen("log_ell") {
            ell *= n().exp();
        }
    }
    let d = d_y(cfg);
    let noise = match kind {
        ExperimentKind::DarcyUncorrelated | ExperimentKind::DarcySurrogate => {
            NoiseCov::scaled_identity(gamma, d)
        }
        ExperimentKind::DarcyWm | ExperimentKind::DarcyCombined => {
            NoiseCov::whittle_matern(gamma, ell, cfg.truth.upsilon, WmGeometry::line(d))
        }
        ExperimentKind::L96Single | ExperimentKind::L96Multi => NoiseCov::cholesky_identity(d),
    };
    Params {
        alpha: input_measure(kind, &m, &sigma),
        gamma: noise,
    }
}

/// Ground truth for every reported parameter that has one.
pub fn truth_values(cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    let t = &cfg.truth;
    let mut out = Vec::new();
    let k = t.m.len();
    for (base, vals) in [("m", &t.m), ("sigma", &t.sigma)] {
        for (i, v) in vals.iter().enumerate() {
            let name = if k == 1 { base.to_string() } else { format!("{base}{i}") };
            out.push((name, *v));
        }
    }
    match cfg.experiment {
        ExperimentKind::DarcyUncorrelated | ExperimentKind::DarcySurrogate => {
            out.push(("gamma".into(), t.gamma));
        }
        ExperimentKind::DarcyWm | ExperimentKind::DarcyCombined => {
            out.push(("gamma".into(), t.gamma));
            out.push(("ell".into(), t.ell));
        }
        ExperimentKind::L96Single | ExperimentKind::L96Multi => {}
    }
    out
}

/// Relative errors (mean over the reporting window) for every parameter
/// with a ground truth.
pub fn relative_errors(cfg: &ExperimentConfig, out: &RunOutput) -> Vec<(String, f64)> {
    truth_values(cfg)
        .into_iter()
        .filter_map(|(name, truth)| {
            out.trace
                .relative_error(&name, truth, cfg.learning.window)
                .map(|e| (name, e))
        })
        .collect()
}

/// Reject data that cannot have come from this experiment.
pub fn check_data(cfg: &ExperimentConfig, data: &PopulationDataset) -> Result<()> {
    let want = d_y(cfg);
    if data.d_y() != want {
        return Err(Error::DataMismatch(format!(
            "experiment `{}` observes {want} values per row, data has {}",
            cfg.experiment.name(),
            data.d_y()
        )));
    }
    let model = data_spec(cfg).name();
    if data.meta.model != model {
        return Err(Error::DataMismatch(format!(
            "data come from a `{}` model, experiment needs `{model}`",
            data.meta.model
        )));
    }
    Ok(())
}

/// Fresh surrogate trainer for `cfg`.
pub fn surrogate_trainer(cfg: &ExperimentConfig, input_dim: usize) -> Result<Option<SurrogateTrainer>> {
    let Some(s) = &cfg.surrogate else {
        return Ok(None);
    };
    let shape = cfg.mlp_shape(input_dim, d_y(cfg)).expect("surrogate");
    let net = MlpSurrogate::new(shape, &mut rng::stream(rng::derive_seed(cfg.seed, 3), 0))?;
    let total = s.t_pre + cfg.learning.iterations * s.t_inner;
    let schedule = HalvingSchedule {
        lr0: s.lr,
        halvings: s.halvings,
        total_steps: total.max(1),
    };
    Ok(Some(SurrogateTrainer::new(net, schedule, s.batch)))
}

/// Run the configured inference on `data`, starting from `init`.
pub fn run_from(cfg: &ExperimentConfig, data: &PopulationDataset, init: Params) -> Result<RunOutput> {
    check_data(cfg, data)?;
    let measure = EmpiricalMeasure::new(data.observations.clone())?;
    let loss = cfg.loss_config();
    let run = cfg.run_config();
    match &cfg.model {
        ModelConfig::Darcy { f0, d_y } => {
            let model = Darcy1DModel::new(*f0, *d_y);
            if cfg.experiment.uses_surrogate() {
                let mut trainer = surrogate_trainer(cfg, 1)?.expect("surrogate");
                let schedule = cfg.surrogate_schedule().expect("surrogate");
                run_surrogate_inference(init, &measure, &model, &mut trainer, &schedule, &loss, &run)
            } else {
                run_inference(init, &measure, &model, &loss, &run)
            }
        }
        ModelConfig::Lorenz { infer_init_sd, .. } => {
            let model = cfg.model.time_averaged().expect("lorenz");
            let oracle = LorenzOracle {
                model,
                init_sd: *infer_init_sd,
            };
            let mut trainer = surrogate_trainer(cfg, model.param_dim())?.expect("surrogate");
            let schedule = cfg.surrogate_schedule().expect("surrogate");
            run_surrogate_inference(init, &measure, &oracle, &mut trainer, &schedule, &loss, &run)
        }
    }
}

/// Run from the configured (unjittered) initial point.
pub fn run(cfg: &ExperimentConfig, data: &PopulationDataset) -> Result<RunOutput> {
    run_from(cfg, data, initial_params(cfg, None))
}

/// Repeated runs over the study grid. Repeat `r` of a cell uses the same
/// data, initial point and iteration seeds under every gradient mode.
pub fn study(cfg: &ExperimentConfig) -> Result<Vec<StudyRow>> {
    let st = cfg
        .study
        .clone()
        .ok_or_else(|| Error::Config(format!("experiment `{}` has no [study] section", cfg.experiment.name())))?;
    if cfg.experiment.uses_surrogate() {
        return Err(Error::Config("studies run on the direct Darcy experiments only".into()));
    }
    let varied = match st.vary {
        StudyParam::Gamma => "gamma",
        StudyParam::Ell => "ell",
    };
    let run_one = |mode: GradientMode, n: usize, value: f64, r: usize| -> Result<f64> {
        let cell_seed = rng::derive_seed(
            rng::derive_seed(cfg.seed, n as u64),
            value.to_bits() ^ (r as u64).wrapping_mul(0x9E37_79B9),
        );
        let mut c = cfg.clone();
        match st.vary {
            StudyParam::Gamma => c.truth.gamma = value,
            StudyParam::Ell => c.truth.ell = value,
        }
        c.data.n = n;
        c.data.seed = Some(rng::derive_seed(cell_seed, 1));
        c.seed = cell_seed;
        c.learning.iterations = st.iterations;
        c.learning.gradient_mode = mode;
        let data = generate_data(&c)?;
        let init = initial_params(&c, Some(rng::derive_seed(cell_seed, 4)));
        let out = run_from(&c, &data, init)?;
        out.trace
            .relative_error(varied, value, c.learning.window)
            .ok_or_else(|| Error::Aborted("empty trace".into()))
    };
    convergence_study(&st.modes, &st.ns, &st.values, st.repeats, run_one)
}
