use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use popinv::config::ExperimentConfig;
use popinv::datagen::PopulationDataset;
use popinv::experiment;
use popinv::inference::{GradientMode, RunOutput, StudyRow};
use popinv::verify;

use crate::plot::{heatmap, LineChart, Series};
use crate::summary::{self, Summary};

/// Env var consulted when neither `--seed` nor the config sets a seed.
pub const SEED_ENV: &str = "POPINV_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] popinv::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use popinv::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Verification(_) => 5,
            Self::Core(e) => match e {
                E::Config(_) | E::Io(_) | E::Json(_) => 2,
                E::DataMismatch(_) | E::Parse { .. } | E::Integrity(_) | E::UnsupportedVersion { .. } => 3,
                E::Aborted(_) | E::Domain(_) | E::IntegrationDiverged { .. } | E::Contract { .. } => 4,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Load a config; `--seed` wins, then a `seed` written in the file, then
/// `POPINV_SEED`, then the preset.
fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| popinv::Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    let file_seed = text
        .parse::<toml::Table>()
        .ok()
        .is_some_and(|t| t.contains_key("seed"));
    if let Some(s) = seed {
        cfg.seed = s;
    } else if !file_seed {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
    }
    Ok(cfg)
}

fn out_root(cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    PathBuf::from(cfg.out_dir.as_deref().unwrap_or(fallback))
}

fn write_new(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn generate(config: &Path, out: Option<PathBuf>, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--n must be at least 1".into()));
        }
        cfg.data.n = n;
    }
    let path = out.unwrap_or_else(|| out_root(&cfg, "data").join(format!("{}.csv", cfg.experiment.name())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let data = experiment::generate_data(&cfg)?;
    data.save(&path)?;
    println!(
        "wrote {} rows x {} values to {} (model {}, seed {}, resampled {})",
        data.n(),
        data.d_y(),
        path.display(),
        data.meta.model,
        data.meta.seed,
        data.meta.resampled
    );
    Ok(())
}

pub struct InferArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub gradient_mode: Option<GradientMode>,
    pub plots: bool,
    pub resume: bool,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn infer(args: &InferArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(mode) = args.gradient_mode {
        cfg.learning.gradient_mode = mode;
    }
    let dir = args.out.clone().unwrap_or_else(|| {
        out_root(&cfg, "runs").join(format!("{}-seed{}", cfg.experiment.name(), cfg.seed))
    });
    if args.resume {
        return Err(CliError::Usage(format!(
            "--resume is not supported: run directories are immutable ({})",
            dir.display()
        )));
    }
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "run directory {} already exists and is not empty; choose another --out",
            dir.display()
        )));
    }
    let data = PopulationDataset::load(&args.data)?;
    experiment::check_data(&cfg, &data)?;
    let out = experiment::run(&cfg, &data)?;

    fs::create_dir_all(&dir)?;
    let config_text = cfg.to_toml_string()?;
    write_new(&dir.join(CONFIG_FILE), &config_text)?;
    write_new(&dir.join(TRACE_FILE), &out.trace.to_csv())?;
    let summary = summary::build(&cfg, &config_text, &data, &out);
    write_new(&dir.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary).map_err(popinv::Error::from)? + "\n"))?;
    if args.plots {
        write_plots(&dir.join("plots"), &summary, &out)?;
    }
    println!("run written to {}", dir.display());
    for (name, value) in &summary.final_params {
        match summary.relative_errors.get(name) {
            Some(e) => println!("  {name:>8} = {value:<12.6} rel. error {:.3}%", 100.0 * e),
            None => println!("  {name:>8} = {value:.6}"),
        }
    }
    if summary.rejected_steps > 0 {
        println!("  {} step(s) rejected", summary.rejected_steps);
    }
    Ok(())
}

fn write_plots(dir: &Path, summary: &Summary, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let trace = &out.trace;
    let iters: Vec<f64> = trace.records.iter().map(|r| r.iter as f64).collect();
    let loss = LineChart {
        title: "loss",
        x_label: "iteration",
        y_label: "loss",
        series: vec![Series {
            label: "loss",
            points: iters.iter().zip(&trace.records).map(|(&i, r)| (i, r.loss)).collect(),
        }],
        references: vec![],
        log_y: trace.records.iter().all(|r| !(r.loss <= 0.0)),
    };
    fs::write(dir.join("loss.svg"), loss.to_svg())?;
    for name in &trace.names {
        let col = trace.column(name).unwrap_or_default();
        let chart = LineChart {
            title: name,
            x_label: "iteration",
            y_label: name,
            series: vec![Series {
                label: name,
                points: iters.iter().copied().zip(col).collect(),
            }],
            references: summary.truth.get(name).map(|&t| ("truth", t)).into_iter().collect(),
            log_y: false,
        };
        fs::write(dir.join(format!("param_{name}.svg")), chart.to_svg())?;
    }
    fs::write(
        dir.join("noise_covariance.svg"),
        heatmap("learned noise covariance", &summary.noise_covariance),
    )?;
    Ok(())
}

pub fn study(config: &Path, out: Option<PathBuf>, repeats: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(r) = repeats {
        let st = cfg
            .study
            .as_mut()
            .ok_or_else(|| popinv::Error::Config(format!("experiment `{}` has no [study] section", cfg.experiment.name())))?;
        st.repeats = r;
        cfg.validate()?;
    }
    let path = out.unwrap_or_else(|| out_root(&cfg, "runs").join(format!("{}-study.csv", cfg.experiment.name())));
    let rows = experiment::study(&cfg)?;
    let mut text = String::from(StudyRow::csv_header());
    text.push('\n');
    for row in &rows {
        text.push_str(&row.csv_line());
        text.push('\n');
        if row.failures > 0 {
            eprintln!(
                "warning: {} of {} runs failed for mode {}, N = {}, value {}",
                row.failures,
                row.failures + row.runs,
                row.mode.name(),
                row.n,
                row.gamma_dagger
            );
        }
    }
    write_new(&path, &text)?;
    println!("{} cells written to {}", rows.len(), path.display());
    Ok(())
}

pub fn verify(filter: Option<&str>) -> Result<()> {
    let outcomes = verify::run(filter);
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!("no check matches `{}`", filter.unwrap_or(""))));
    }
    println!("{:<24} {:<10} {:<6} {:>9}  detail", "check", "category", "result", "ms");
    for o in &outcomes {
        println!(
            "{:<24} {:<10} {:<6} {:>9.1}  {}",
            o.name,
            o.category,
            if o.passed { "pass" } else { "FAIL" },
            o.elapsed_ms,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} of {} checks failed", outcomes.len())));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

/// Tolerance when comparing recomputed and stored relative errors.
const SCORE_TOL: f64 = 1e-12;

pub fn score(run_dir: &Path) -> Result<()> {
    let read = |name: &str| {
        fs::read_to_string(run_dir.join(name))
            .map_err(|e| popinv::Error::Config(format!("cannot read {}: {e}", run_dir.join(name).display())))
    };
    let config_text = read(CONFIG_FILE)?;
    let cfg = ExperimentConfig::from_toml_str(&config_text)?;
    let trace = popinv::inference::ConvergenceTrace::from_csv(&read(TRACE_FILE)?)?;
    let stored: Summary = serde_json::from_str(&read(SUMMARY_FILE)?).map_err(popinv::Error::from)?;

    let mut problems = Vec::new();
    if summary::sha256_hex(config_text.as_bytes()) != stored.config_sha256 {
        problems.push("config.toml does not match the hash in summary.json".to_string());
    }
    let recomputed = summary::relative_errors(&cfg, &trace);
    println!("{:<10} {:>14} {:>14}", "param", "summary", "recomputed");
    for (name, value) in &recomputed {
        let old = stored.relative_errors.get(name).copied();
        println!(
            "{name:<10} {:>14} {value:>14.6e}",
            old.map_or("-".to_string(), |v| format!("{v:.6e}"))
        );
        match old {
            Some(v) if (v - value).abs() <= SCORE_TOL * value.abs().max(1.0) => {}
            _ => problems.push(format!("relative error of `{name}` does not match")),
        }
    }
    for name in stored.relative_errors.keys() {
        if !recomputed.contains_key(name) {
            problems.push(format!("`{name}` is in summary.json but not recomputable"));
        }
    }
    if problems.is_empty() {
        println!("summary.json agrees with trace.csv");
        Ok(())
    } else {
        Err(CliError::Verification(problems.join("; ")))
    }
}
