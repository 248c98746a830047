//! Population data: generation from a ground truth and CSV persistence.
//!
//! Row `n` of a dataset reads stream `n` of the dataset seed, so rows can be
//! produced in any order or in parallel with identical results.
//!
//! On disk a dataset is `<name>.csv` (header `y0,…,y{d−1}`, one observation
//! per line) next to `<name>.meta.json`, which carries the generating truth,
//! the seed and a digest of the CSV bytes.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::measures::{InputMeasure, NoiseCov};
use crate::models::{Darcy1DModel, TimeAveraged};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Draws per row before a diverging Lorenz row is given up on.
pub const MAX_RESAMPLES: usize = 100;

/// How observations are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum DataSpec {
    /// `y = F(z) + ξ`, `z ∼ μ(α)`, `ξ ∼ N(0, Γ)`.
    Darcy {
        f0: f64,
        d_y: usize,
        alpha: InputMeasure,
        noise: NoiseCov,
    },
    /// `y = G_τ(z; s₀)`, `z ∼ μ(α)`, `s₀ ∼ N(0, init_sd² I)`.
    Lorenz {
        system: TimeAveraged,
        alpha: InputMeasure,
        init_sd: f64,
    },
}

impl DataSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Darcy { .. } => "darcy",
            Self::Lorenz { .. } => "lorenz",
        }
    }

    pub fn d_y(&self) -> usize {
        match self {
            Self::Darcy { d_y, .. } => *d_y,
            Self::Lorenz { system, .. } => system.feature_dim(),
        }
    }

    pub fn alpha(&self) -> &InputMeasure {
        match self {
            Self::Darcy { alpha, .. } | Self::Lorenz { alpha, .. } => alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Darcy { d_y, alpha, noise, .. } => {
                if alpha.dim() != 1 {
                    return Err(Error::Config("Darcy inputs are scalar".into()));
                }
                if noise.dim() != *d_y {
                    return Err(Error::Config(format!(
                        "noise dimension {} differs from d_y = {d_y}",
                        noise.dim()
                    )));
                }
            }
            Self::Lorenz { system, alpha, .. } => {
                if alpha.dim() != system.param_dim() {
                    return Err(Error::Config(format!(
                        "Lorenz system takes {} parameters, input measure has {}",
                        system.param_dim(),
                        alpha.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub model: String,
    pub spec: DataSpec,
    pub seed: u64,
    pub n: usize,
    pub d_y: usize,
    /// Rows redrawn because the solver diverged.
    #[serde(default)]
    pub resampled: usize,
    #[serde(default)]
    pub observations_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDataset {
    pub observations: Array2<f64>,
    pub meta: DatasetMeta,
}

/// `n` independent observations.
pub fn generate(spec: &DataSpec, n: usize, seed: u64) -> Result<PopulationDataset> {
    if n == 0 {
        return Err(contract("generate", "N must be at least 1"));
    }
    spec.validate()?;
    let d_y = spec.d_y();
    let (observations, resampled) = match spec {
        DataSpec::Darcy { f0, alpha, noise, .. } => {
            let model = Darcy1DModel::new(*f0, d_y);
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng::stream(seed, i);
                    let ez = rng::standard_normal(&mut r, 1, 1);
                    let en = rng::standard_normal(&mut r, 1, noise.eps_dim());
                    (ez.into_raw_vec_and_offset().0, en.into_raw_vec_and_offset().0)
                })
                .collect();
            let eps_z = Array2::from_shape_fn((n, 1), |(i, _)| rows[i].0[0]);
            let eps_n = Array2::from_shape_fn((n, noise.eps_dim()), |(i, j)| rows[i].1[j]);
            let z = alpha.sample_with(&eps_z);
            let xi = noise.sample_with(&eps_n)?;
            let shape = model.shape();
            let mut y = Array2::zeros((n, d_y));
            for i in 0..n {
                let zi = z[[i, 0]];
                if !(zi > 0.0) {
                    return Err(Error::Domain(format!("row {i}: permeability {zi}")));
                }
                for j in 0..d_y {
                    y[[i, j]] = shape[j] / zi + xi[[i, j]];
                }
            }
            (y, 0)
        }
        DataSpec::Lorenz {
            system,
            alpha,
            init_sd,
        } => {
            let rows: Vec<Result<(Vec<f64>, usize)>> = (0..n as u64)
                .into_par_iter()
                .map(|i| lorenz_row(system, alpha, *init_sd, seed, i))
                .collect();
            let mut y = Array2::zeros((n, d_y));
            let mut resampled = 0;
            for (i, row) in rows.into_iter().enumerate() {
                let (v, extra) = row?;
                resampled += extra;
                y.row_mut(i).iter_mut().zip(v).for_each(|(o, x)| *o = x);
            }
            (y, resampled)
        }
    };
    Ok(PopulationDataset {
        observations,
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            model: spec.name().into(),
            spec: spec.clone(),
            seed,
            n,
            d_y,
            resampled,
            observations_sha256: String::new(),
        },
    })
}

/// One time-averaged observation; a diverging draw of `(z, s₀)` is
/// replaced by the next draw from the same stream.
fn lorenz_row(
    system: &TimeAveraged,
    alpha: &InputMeasure,
    init_sd: f64,
    seed: u64,
    row: u64,
) -> Result<(Vec<f64>, usize)> {
    let mut r = rng::stream(seed, row);
    for attempt in 0..MAX_RESAMPLES {
        let z = alpha.sample(1, &mut r)?;
        let s0 = system.sample_initial(init_sd, &mut r);
        match system.g_tau(z.row(0).as_slice().expect("row"), &s0) {
            Ok(v) => return Ok((v, attempt)),
            Err(Error::IntegrationDiverged { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::IntegrationDiverged { time: f64::NAN })
}

/// Sidecar path `<stem>.meta.json` next to `csv`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    csv.with_file_name(format!("{stem}.meta.json"))
}

fn csv_bytes(y: &Array2<f64>) -> Vec<u8> {
    let mut out = String::new();
    let header: Vec<String> = (0..y.ncols()).map(|j| format!("y{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in y.rows() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

impl PopulationDataset {
    pub fn n(&self) -> usize {
        self.observations.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.observations.ncols()
    }

    /// Write `path` (CSV) and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let bytes = csv_bytes(&self.observations);
        let mut meta = self.meta.clone();
        meta.observations_sha256 = hex::encode(Sha256::digest(&bytes));
        fs::write(path, &bytes)?;
        fs::write(meta_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_bytes = fs::read(meta_path(path))?;
        let version: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
        let found = version
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Integrity("metadata has no format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::UnsupportedVersion {
                found: found as u32,
                supported: FORMAT_VERSION,
            });
        }
        let mut meta: DatasetMeta = serde_json::from_slice(&meta_bytes)?;
        let bytes = fs::read(path)?;
        let observations = parse_csv(&bytes)?;
        if observations.nrows() != meta.n || observations.ncols() != meta.d_y {
            return Err(Error::Integrity(format!(
                "metadata says {}x{}, file holds {}x{}",
                meta.n,
                meta.d_y,
                observations.nrows(),
                observations.ncols()
            )));
        }
        if !meta.observations_sha256.is_empty()
            && hex::encode(Sha256::digest(&bytes)) != meta.observations_sha256
        {
            return Err(Error::Integrity("observations do not match the recorded digest".into()));
        }
        meta.observations_sha256.clear();
        Ok(Self { observations, meta })
    }
}

/// Parse an observation CSV; errors carry the byte offset of the bad record.
pub fn parse_csv(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let d = reader
        .headers()
        .map_err(|e| Error::Parse {
            offset: 0,
            detail: e.to_string(),
        })?
        .len();
    if d == 0 {
        return Err(Error::Parse {
            offset: 0,
            detail: "empty header".into(),
        });
    }
    if !bytes.ends_with(b"\n") {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            detail: "file ends mid-record".into(),
        });
    }
    let mut values = Vec::new();
    let mut rows = 0;
    let mut record = csv::StringRecord::new();
    loop {
        let offset = reader.position().byte();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let offset = e.position().map(|p| p.byte()).unwrap_or(offset);
                return Err(Error::Parse {
                    offset,
                    detail: e.to_string(),
                });
            }
        }
        if record.len() != d {
            return Err(Error::Parse {
                offset,
                detail: format!("record has {} fields, header has {d}", record.len()),
            });
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                offset,
                detail: format!("`{field}` is not a number"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, d), values).expect("rows x d"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LorenzKind;

    fn darcy(n: usize, seed: u64) -> PopulationDataset {
        let spec = DataSpec::Darcy {
            f0: 10.0,
            d_y: 5,
            alpha: InputMeasure::log_normal(0.5, 0.25),
            noise: NoiseCov::scaled_identity(0.05, 5),
        };
        generate(&spec, n, seed).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let ds = darcy(20, 3);
        ds.save(&path).unwrap();
        assert!(dir.path().join("obs.meta.json").exists());
        let back = PopulationDataset::load(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        darcy(5, 3).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(PopulationDataset::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn bad_number_reports_offset() {
        let err = parse_csv(b"y0,y1\n1.0,2.0\n3.0,x\n").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        darcy(5, 3).save(&path).unwrap();
        let meta = meta_path(&path);
        let text = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(
            PopulationDataset::load(&path),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        darcy(5, 3).save(&path).unwrap();
        let meta = meta_path(&path);
        let text = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, text.replace("\"n\": 5", "\"n\": 6")).unwrap();
        assert!(matches!(PopulationDataset::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn same_seed_same_rows() {
        assert_eq!(darcy(50, 11).observations, darcy(50, 11).observations);
        assert_ne!(darcy(50, 11).observations, darcy(50, 12).observations);
        let prefix = darcy(10, 11).observations;
        assert_eq!(darcy(50, 11).observations.slice(ndarray::s![..10, ..]), prefix);
    }

    #[test]
    fn lorenz_rows_are_features() {
        let spec = DataSpec::Lorenz {
            system: TimeAveraged {
                system: LorenzKind::Single { k: 6 },
                dt: 0.01,
                tau: 1.0,
                burn_in: 0.5,
            },
            alpha: InputMeasure::gaussian(&[10.0], &[1.0]),
            init_sd: 10.0,
        };
        let ds = generate(&spec, 3, 1).unwrap();
        assert_eq!(ds.observations.dim(), (3, 27));
        assert!(ds.observations.iter().all(|v| v.is_finite()));
    }
}
