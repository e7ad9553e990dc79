//! Subcommand bodies: read inputs, run, write results and a manifest.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use saber::complexity::{estimate_density, lfc_saber};
use saber::gpr::BandwidthMode;
use saber::saber::{predict_saber, sigma_saber, SaberModel};
use saber::Dataset;

use crate::experiments::{
    fit_saber, global_bandwidth, run_active_loop, run_comparison, run_proportionality, ActiveLoopConfig,
    ComparisonConfig, ProportionalityConfig, SaberSettings,
};
use crate::io::{
    config_hash, ensure_dir, input_header, read_inputs, write_manifest, write_matrix, write_rows, CliError,
    CliResult, Manifest,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn comparison(mut cfg: ComparisonConfig, seed: Option<u64>, out: &Path) -> CliResult<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let res = run_comparison(&cfg)?;
    ensure_dir(out)?;
    write_rows(&out.join("comparison.csv"), &res.methods)?;
    write_rows(&out.join("datasets.csv"), &res.datasets)?;
    write_manifest(
        out,
        &Manifest {
            experiment: "comparison",
            version: VERSION,
            config: &cfg,
            config_sha256: config_hash(&cfg),
            seeds: res.datasets.iter().map(|r| r.seed).collect(),
            wall_seconds: res.wall_seconds,
            outputs: vec!["comparison.csv".into(), "datasets.csv".into()],
            summary: json!({
                "methods": res.methods,
                "shared_bandwidth": res.shared_bandwidth,
                "hyper": res.hyper,
                "gate_scale": res.gate_scale,
                "gate_reg": res.gate_reg,
                "lls_saber_scale": res.lls_saber_scale,
            }),
        },
    )
}

pub fn proportionality(mut cfg: ProportionalityConfig, seed: Option<u64>, out: &Path) -> CliResult<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let res = run_proportionality(&cfg)?;
    ensure_dir(out)?;
    write_rows(&out.join("curves.csv"), &res.curve)?;
    write_manifest(
        out,
        &Manifest {
            experiment: "proportionality",
            version: VERSION,
            config: &cfg,
            config_sha256: config_hash(&cfg),
            seeds: res.seeds.clone(),
            wall_seconds: res.wall_seconds,
            outputs: vec!["curves.csv".into()],
            summary: json!({
                "corr_noise": res.corr_noise,
                "corr_density": res.corr_density,
            }),
        },
    )
}

pub fn active_loop(mut cfg: ActiveLoopConfig, seed: Option<u64>, out: &Path) -> CliResult<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let res = run_active_loop(&cfg)?;
    ensure_dir(out)?;
    let mut outputs = vec!["iterations.csv".to_string()];
    for it in &res.iterations {
        let name = format!("samples_{}.csv", it.iteration);
        write_matrix(&out.join(&name), &input_header(2), &it.samples)?;
        outputs.push(name);
    }
    write_rows(&out.join("iterations.csv"), &res.iterations)?;
    write_manifest(
        out,
        &Manifest {
            experiment: "active-loop",
            version: VERSION,
            config: &cfg,
            config_sha256: config_hash(&cfg),
            seeds: res.iterations.iter().map(|i| i.seed).collect(),
            wall_seconds: res.wall_seconds,
            outputs,
            summary: json!({
                "focus_mass": res.iterations.iter().map(|i| i.focus_mass).collect::<Vec<_>>(),
            }),
        },
    )
}

/// Settings of the `fit` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// How the shared bandwidth is tuned by the global GPR fit.
    pub bandwidth_mode: BandwidthMode,
    pub saber: SaberSettings,
    /// Share of the data held out for validation when no file is given.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            bandwidth_mode: BandwidthMode::Isotropic,
            saber: SaberSettings::default(),
            validation_fraction: 0.25,
            seed: 1,
        }
    }
}

pub fn fit(mut cfg: FitConfig, seed: Option<u64>, data: &Path, validation: Option<&Path>, out: &Path) -> CliResult<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.saber.validate()?;
    let start = Instant::now();
    let full = Dataset::read_csv(data)?;
    let (train, val) = match validation {
        Some(p) => {
            let val = Dataset::read_csv(p)?;
            if val.dim() != full.dim() {
                return Err(saber::SaberError::DimensionMismatch("validation and training inputs differ in dimension".into()).into());
            }
            (full, val)
        }
        None => {
            if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
                return Err(CliError::Config("validation fraction must lie in (0, 1)".into()));
            }
            if full.len() < 3 {
                return Err(CliError::Config("need at least three rows to split off validation data".into()));
            }
            let mut idx: Vec<usize> = (0..full.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let n_val = ((full.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, full.len() - 2);
            (full.subset(&idx[n_val..]), full.subset(&idx[..n_val]))
        }
    };
    let shared = global_bandwidth(&train, cfg.bandwidth_mode)?;
    let model = fit_saber(&train, &val, &shared, &cfg.saber)?;
    ensure_dir(out)?;
    model.save(&out.join("model.json"))?;
    write_manifest(
        out,
        &Manifest {
            experiment: "fit",
            version: VERSION,
            config: &cfg,
            config_sha256: config_hash(&cfg),
            seeds: vec![cfg.seed],
            wall_seconds: start.elapsed().as_secs_f64(),
            outputs: vec!["model.json".into()],
            summary: json!({ "hyper": model.hyper, "shared_bandwidth": model.bank.shared_bandwidth }),
        },
    )
}

fn load_for_inputs(model: &Path, input: &Path) -> CliResult<(SaberModel, DMatrix<f64>)> {
    let model = SaberModel::load(model)?;
    let x = read_inputs(input)?;
    if x.ncols() != model.dim() {
        return Err(saber::SaberError::DimensionMismatch(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.dim()
        ))
        .into());
    }
    Ok((model, x))
}

pub fn predict(model: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let (model, x) = load_for_inputs(model, input)?;
    let pred = predict_saber(&x, &model)?;
    let mut header = input_header(x.ncols());
    header.push("prediction".into());
    let table = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, k| if k < x.ncols() { x[(i, k)] } else { pred[i] });
    ensure_dir(out)?;
    write_matrix(&out.join("predictions.csv"), &header, &table)
}

/// Writes `x`, the local bandwidth factor and the complexity; undefined
/// complexities (zero density) are left empty.
pub fn lfc(model: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let (model, x) = load_for_inputs(model, input)?;
    let density = estimate_density(&model.data.x)?;
    let c = lfc_saber(&x, &model, &density)?;
    let field = sigma_saber(&x, &model)?;
    ensure_dir(out)?;
    let path = out.join("lfc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Saber(e.into()))?;
    let mut header = input_header(x.ncols());
    header.extend(["bandwidth_factor".to_string(), "lfc".to_string()]);
    w.write_record(&header).map_err(|e| CliError::Saber(e.into()))?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:e}")).collect();
        rec.push(format!("{:e}", field.factors[i]));
        rec.push(c[i].map(|v| format!("{v:e}")).unwrap_or_default());
        w.write_record(&rec).map_err(|e| CliError::Saber(e.into()))?;
    }
    w.flush().map_err(crate::io::io_err(&path))
}
