//! Experiment configuration.
//!
//! A config file is TOML. It must name an `experiment`; every other field
//! falls back to that experiment's preset, so a file only needs the values
//! it changes. Unknown keys are rejected.
//!
//! ```toml
//! experiment = "darcy-combined"
//! seed = 3
//!
//! [learning]
//! iterations = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{GradientMode, LossConfig, ParamGroup, Penalty, RunConfig};
use crate::models::{LorenzKind, TimeAveraged};
use crate::surrogate::{SurrogateSchedule, MlpShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Log-normal permeability, `Γ = γ² I`.
    DarcyUncorrelated,
    /// Whittle–Matérn noise, amplitude fixed, lengthscale learned.
    DarcyWm,
    /// Whittle–Matérn noise, amplitude and lengthscale learned.
    DarcyCombined,
    /// Darcy through a concurrently trained surrogate.
    DarcySurrogate,
    L96Single,
    L96Multi,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::DarcyUncorrelated,
        Self::DarcyWm,
        Self::DarcyCombined,
        Self::DarcySurrogate,
        Self::L96Single,
        Self::L96Multi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DarcyUncorrelated => "darcy-uncorrelated",
            Self::DarcyWm => "darcy-wm",
            Self::DarcyCombined => "darcy-combined",
            Self::DarcySurrogate => "darcy-surrogate",
            Self::L96Single => "l96-single",
            Self::L96Multi => "l96-multi",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown experiment `{name}` (known: {})", known.join(", ")))
            })
    }

    pub fn uses_surrogate(self) -> bool {
        matches!(self, Self::DarcySurrogate | Self::L96Single | Self::L96Multi)
    }

    pub fn is_lorenz(self) -> bool {
        matches!(self, Self::L96Single | Self::L96Multi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Darcy {
        f0: f64,
        d_y: usize,
    },
    Lorenz {
        system: LorenzKind,
        dt: f64,
        tau: f64,
        burn_in: f64,
        /// Initial-state spread used to generate the data.
        data_init_sd: f64,
        /// Initial-state spread assumed during inference.
        infer_init_sd: f64,
    },
}

impl ModelConfig {
    pub fn time_averaged(&self) -> Option<TimeAveraged> {
        match self {
            Self::Lorenz {
                system,
                dt,
                tau,
                burn_in,
                ..
            } => Some(TimeAveraged {
                system: *system,
                dt: *dt,
                tau: *tau,
                burn_in: *burn_in,
            }),
            Self::Darcy { .. } => None,
        }
    }
}

/// Ground truth in natural units. Noise fields are ignored for the
/// time-averaged experiments, whose noise is intrinsic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub m: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub ell: f64,
    #[serde(default)]
    pub upsilon: f64,
}

/// Starting point in natural units. With `jitter > 0` each run perturbs
/// `m` additively and the scale parameters multiplicatively by
/// `exp(jitter · N(0, 1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub m: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub ell: f64,
    #[serde(default)]
    pub jitter: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    /// Defaults to a seed derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    pub iterations: usize,
    pub n_s: usize,
    pub slices: usize,
    pub lr: f64,
    #[serde(default)]
    pub halvings: u32,
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub epsilon_kappa: f64,
    #[serde(default)]
    pub penalties: Vec<Penalty>,
    /// Stored parameter blocks held at their initial values.
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Trailing iterations averaged when reporting relative errors.
    pub window: usize,
    #[serde(default)]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub t_pre: usize,
    pub t_inner: usize,
    pub t_a: usize,
    pub n_pre: usize,
    pub batch: usize,
    #[serde(default = "one_usize")]
    pub acquisition_batch: usize,
    pub width: usize,
    pub depth: usize,
    pub lipschitz_bound: f64,
    pub lr: f64,
    #[serde(default)]
    pub halvings: u32,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyParam {
    Gamma,
    Ell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub ns: Vec<usize>,
    /// Ground-truth values of the varied noise parameter.
    pub values: Vec<f64>,
    pub vary: StudyParam,
    pub repeats: usize,
    pub modes: Vec<GradientMode>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub truth: TruthConfig,
    pub init: InitConfig,
    pub data: DataConfig,
    pub learning: LearningConfig,
    #[serde(default)]
    pub surrogate: Option<SurrogateConfig>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

fn penalty(group: ParamGroup, block: &str, index: usize, anchor: f64, weight: f64) -> Penalty {
    Penalty {
        group,
        block: block.into(),
        index,
        anchor,
        weight,
    }
}

fn darcy_base(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: kind,
        seed: 0,
        out_dir: None,
        model: ModelConfig::Darcy { f0: 10.0, d_y: 50 },
        truth: TruthConfig {
            m: vec![0.5],
            sigma: vec![0.25],
            gamma: 0.05,
            ell: 0.0,
            upsilon: 0.0,
        },
        init: InitConfig {
            m: vec![0.0],
            sigma: vec![0.5],
            gamma: 1.0,
            ell: 1.0,
            jitter: 0.0,
        },
        data: DataConfig { n: 10_000, seed: None },
        learning: LearningConfig {
            iterations: 2000,
            n_s: 10_000,
            slices: 100,
            lr: 0.1,
            halvings: 0,
            gradient_mode: GradientMode::Cut,
            epsilon_kappa: 0.0,
            penalties: vec![],
            frozen: vec![],
            window: 100,
            record_wall_time: false,
        },
        surrogate: None,
        study: None,
    }
}

fn lorenz_surrogate(batch: usize, n_pre: usize, halvings: u32) -> SurrogateConfig {
    SurrogateConfig {
        t_pre: 1000,
        t_inner: 20,
        t_a: 10_000,
        n_pre,
        batch,
        acquisition_batch: 1,
        width: 100,
        depth: 5,
        lipschitz_bound: 10.0,
        lr: 1e-3,
        halvings,
    }
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::DarcyUncorrelated => {
                let mut c = darcy_base(kind);
                c.learning.iterations = 1000;
                c.learning.n_s = 1000;
                c.init.jitter = 0.5;
                c.study = Some(StudyConfig {
                    ns: vec![10, 100, 1000, 10_000],
                    values: vec![0.01, 0.025, 0.063, 0.158, 0.398, 1.0],
                    vary: StudyParam::Gamma,
                    repeats: 50,
                    modes: vec![GradientMode::Cut, GradientMode::Standard],
                    iterations: 1000,
                });
                c
            }
            ExperimentKind::DarcyWm => {
                let mut c = darcy_base(kind);
                c.truth.gamma = 0.1;
                c.truth.ell = 0.25;
                c.truth.upsilon = 0.5;
                c.init.gamma = 0.1;
                c.learning.iterations = 1000;
                c.learning.n_s = 1000;
                c.learning.frozen = vec!["log_gamma".into()];
                c.init.jitter = 0.5;
                c.study = Some(StudyConfig {
                    ns: vec![10, 100, 1000, 10_000],
                    values: vec![0.01, 0.035, 0.120, 0.416, 1.443, 5.0],
                    vary: StudyParam::Ell,
                    repeats: 100,
                    modes: vec![GradientMode::Cut, GradientMode::Standard],
                    iterations: 1000,
                });
                c
            }
            ExperimentKind::DarcyCombined => {
                let mut c = darcy_base(kind);
                c.truth = TruthConfig {
                    m: vec![0.5],
                    sigma: vec![0.5],
                    gamma: 0.1,
                    ell: 0.25,
                    upsilon: 0.5,
                };
                c.learning.halvings = 10;
                c
            }
            ExperimentKind::DarcySurrogate => {
                let mut c = darcy_base(kind);
                c.data.n = 2000;
                c.learning.n_s = 1000;
                c.learning.halvings = 4;
                c.surrogate = Some(SurrogateConfig {
                    t_pre: 1000,
                    t_inner: 10,
                    t_a: 2000,
                    n_pre: 100,
                    batch: 100,
                    acquisition_batch: 1,
                    width: 100,
                    depth: 5,
                    lipschitz_bound: 10.0,
                    lr: 1e-3,
                    halvings: 5,
                });
                c
            }
            ExperimentKind::L96Single => ExperimentConfig {
                experiment: kind,
                seed: 0,
                out_dir: None,
                model: ModelConfig::Lorenz {
                    system: LorenzKind::Single { k: 6 },
                    dt: 0.01,
                    tau: 100.0,
                    burn_in: 20.0,
                    data_init_sd: 10.0,
                    infer_init_sd: 8.0,
                },
                truth: TruthConfig {
                    m: vec![10.0],
                    sigma: vec![1.0],
                    gamma: 0.0,
                    ell: 0.0,
                    upsilon: 0.0,
                },
                init: InitConfig {
                    m: vec![8.0],
                    sigma: vec![0.5],
                    gamma: 1.0,
                    ell: 1.0,
                    jitter: 0.0,
                },
                data: DataConfig { n: 10_000, seed: None },
                learning: LearningConfig {
                    iterations: 15_000,
                    n_s: 1000,
                    slices: 100,
                    lr: 1e-2,
                    halvings: 0,
                    gradient_mode: GradientMode::Cut,
                    epsilon_kappa: 1e-5,
                    penalties: vec![
                        penalty(ParamGroup::Alpha, "m", 0, 8.0, 1.0 / 50.0),
                        penalty(ParamGroup::Alpha, "log_sigma", 0, 0.5f64.ln(), 1.0 / 8.0),
                    ],
                    frozen: vec![],
                    window: 1000,
                    record_wall_time: false,
                },
                surrogate: Some(lorenz_surrogate(60, 60, 5)),
                study: None,
            },
            ExperimentKind::L96Multi => {
                let mut penalties = Vec::new();
                for i in 0..3 {
                    penalties.push(penalty(ParamGroup::Alpha, "m", i, [8.0, 2.0, 2.0][i], 1.0 / 50.0));
                }
                for i in 0..3 {
                    penalties.push(penalty(ParamGroup::Alpha, "log_sigma", i, 0.5f64.ln(), 1.0 / 8.0));
                }
                ExperimentConfig {
                    experiment: kind,
                    seed: 0,
                    out_dir: None,
                    model: ModelConfig::Lorenz {
                        system: LorenzKind::Multi { k: 9, l: 10, c: 10.0 },
                        dt: 1e-3,
                        tau: 100.0,
                        burn_in: 20.0,
                        data_init_sd: 5.0,
                        infer_init_sd: 8.0,
                    },
                    truth: TruthConfig {
                        m: vec![10.0, 0.8, 1.0],
                        sigma: vec![1.0, 0.1, 0.2],
                        gamma: 0.0,
                        ell: 0.0,
                        upsilon: 0.0,
                    },
                    init: InitConfig {
                        m: vec![8.0, 2.0, 2.0],
                        sigma: vec![0.5, 0.5, 0.5],
                        gamma: 1.0,
                        ell: 1.0,
                        jitter: 0.0,
                    },
                    data: DataConfig { n: 10_000, seed: None },
                    learning: LearningConfig {
                        iterations: 15_000,
                        n_s: 1000,
                        slices: 100,
                        lr: 1e-2,
                        halvings: 4,
                        gradient_mode: GradientMode::Cut,
                        epsilon_kappa: 1e-5,
                        penalties,
                        frozen: vec![],
                        window: 1000,
                        record_wall_time: false,
                    },
                    surrogate: Some(lorenz_surrogate(100, 100, 10)),
                    study: None,
                }
            }
        }
    }

    /// Parse TOML text, filling unspecified fields from the preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let name = user
            .get("experiment")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("config must name an `experiment`".into()))?;
        let kind = ExperimentKind::from_name(name)?;
        let preset = toml::Table::try_from(Self::preset(kind))
            .map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(preset, user);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.experiment;
        match (&self.model, k.is_lorenz()) {
            (ModelConfig::Darcy { .. }, false) | (ModelConfig::Lorenz { .. }, true) => {}
            _ => return Err(Error::Config(format!("model kind does not fit experiment `{}`", k.name()))),
        }
        let dim = match &self.model {
            ModelConfig::Darcy { d_y, .. } => {
                if *d_y < 2 {
                    return Err(Error::Config("d_y must be at least 2".into()));
                }
                1
            }
            ModelConfig::Lorenz { system, .. } => match system {
                LorenzKind::Single { .. } => 1,
                LorenzKind::Multi { .. } => 3,
            },
        };
        for (what, v) in [
            ("truth.m", &self.truth.m),
            ("truth.sigma", &self.truth.sigma),
            ("init.m", &self.init.m),
            ("init.sigma", &self.init.sigma),
        ] {
            if v.len() != dim {
                return Err(Error::Config(format!("{what} needs {dim} entries, got {}", v.len())));
            }
        }
        let positive = |what: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        for s in self.truth.sigma.iter().chain(&self.init.sigma) {
            positive("sigma", *s)?;
        }
        if !k.is_lorenz() {
            positive("truth.gamma", self.truth.gamma)?;
            positive("init.gamma", self.init.gamma)?;
            if matches!(k, ExperimentKind::DarcyWm | ExperimentKind::DarcyCombined) {
                positive("truth.ell", self.truth.ell)?;
                positive("truth.upsilon", self.truth.upsilon)?;
                positive("init.ell", self.init.ell)?;
            }
        }
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be at least 1".into()));
        }
        positive("learning.lr", self.learning.lr)?;
        self.loss_config().validate()?;
        if k.uses_surrogate() != self.surrogate.is_some() {
            return Err(Error::Config(format!(
                "experiment `{}` {} a [surrogate] section",
                k.name(),
                if k.uses_surrogate() { "requires" } else { "does not take" }
            )));
        }
        if let Some(s) = &self.surrogate {
            if s.n_pre == 0 || s.batch == 0 || s.width == 0 || s.depth == 0 || s.acquisition_batch == 0 {
                return Err(Error::Config("surrogate sizes must be positive".into()));
            }
            positive("surrogate.lr", s.lr)?;
            positive("surrogate.lipschitz_bound", s.lipschitz_bound)?;
        }
        if let Some(st) = &self.study {
            if st.ns.is_empty() || st.values.is_empty() || st.modes.is_empty() || st.repeats == 0 {
                return Err(Error::Config("study grid is empty".into()));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, 1))
    }

    pub fn run_seed(&self) -> u64 {
        crate::rng::derive_seed(self.seed, 2)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            n_s: self.learning.n_s,
            slices: self.learning.slices,
            gradient_mode: self.learning.gradient_mode,
            penalties: self.learning.penalties.clone(),
            epsilon_kappa: self.learning.epsilon_kappa,
            frozen: self.learning.frozen.clone(),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            iterations: self.learning.iterations,
            lr: self.learning.lr,
            halvings: self.learning.halvings,
            seed: self.run_seed(),
            record_wall_time: self.learning.record_wall_time,
        }
    }

    pub fn surrogate_schedule(&self) -> Option<SurrogateSchedule> {
        self.surrogate.as_ref().map(|s| SurrogateSchedule {
            t_pre: s.t_pre,
            t_inner: s.t_inner,
            t_a: s.t_a,
            n_pre: s.n_pre,
            batch: s.batch,
            outer_steps: self.learning.iterations,
            acquisition_batch: s.acquisition_batch,
        })
    }

    pub fn mlp_shape(&self, input_dim: usize, output_dim: usize) -> Option<MlpShape> {
        self.surrogate.as_ref().map(|s| MlpShape {
            input_dim,
            output_dim,
            width: s.width,
            depth: s.depth,
            lipschitz_bound: s.lipschitz_bound,
        })
    }
}

/// Overlay `user` onto `base`, recursing into tables.
fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                base.insert(k, toml::Value::Table(merge(b, u)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for kind in ExperimentKind::ALL {
            let preset = ExperimentConfig::preset(kind);
            preset.validate().unwrap();
            let text = preset.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), preset, "{}", kind.name());
        }
    }

    #[test]
    fn overrides_touch_only_named_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            "experiment = \"darcy-combined\"\nseed = 7\n[learning]\niterations = 5\n",
        )
        .unwrap();
        let mut want = ExperimentConfig::preset(ExperimentKind::DarcyCombined);
        want.seed = 7;
        want.learning.iterations = 5;
        assert_eq!(cfg, want);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "seed = 1",
            "experiment = \"nope\"",
            "experiment = \"darcy-wm\"\nbogus = 1",
            "experiment = \"darcy-wm\"\n[study]\nns = []",
            "experiment = \"l96-single\"\n[truth]\nm = [1.0, 2.0]",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn combined_preset_matches_published_schedule() {
        let c = ExperimentConfig::preset(ExperimentKind::DarcyCombined);
        assert_eq!((c.data.n, c.learning.n_s, c.learning.iterations, c.learning.halvings), (10_000, 10_000, 2000, 10));
        assert_eq!(c.learning.lr, 0.1);
        assert_eq!(c.learning.gradient_mode, GradientMode::Cut);
    }
}
