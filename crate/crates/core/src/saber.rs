//! Mixture of GPR experts with shared hyperparameters, gated by MKLR and
//! trained by leave-one-out EM.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Result, SaberError};
use crate::gpr::{closed_form_update, descend_log_amplitude, DescentOptions, HelpVariables, SharedHyper};
use crate::kernels::{kernel_matrix, pseudo_eigendecompose, Bandwidth, EigenPair};
use crate::mklr::{mklr_predict, mklr_train_kernel, GateHyper, GateInit, GateKernel, GateModel, MklrOptions};

/// Expert bandwidths `σⱼ Σ` with cached kernel decompositions.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub shared_bandwidth: Bandwidth,
    pub scales: Vec<f64>,
    pub eigs: Vec<EigenPair>,
}

impl ExpertBank {
    /// Decomposes `Σε⁻¹ K^{σⱼΣ} Σε⁻¹` for every scale on the training inputs.
    pub fn build(data: &Dataset, shared_bandwidth: &Bandwidth, scales: &[f64]) -> Result<Self> {
        if scales.is_empty() {
            return Err(SaberError::invalid("at least one expert scale is required"));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(SaberError::invalid("expert scales must be positive"));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SaberError::invalid("expert scales must be strictly increasing"));
        }
        shared_bandwidth.validate()?;
        shared_bandwidth.check_dim(data.dim())?;
        let v = data.noise_var_or_ones();
        let eigs = scales
            .par_iter()
            .map(|s| {
                let k = kernel_matrix(&data.x, &data.x, &shared_bandwidth.scaled(*s))?;
                pseudo_eigendecompose(&k, &v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpertBank {
            shared_bandwidth: shared_bandwidth.clone(),
            scales: scales.to_vec(),
            eigs,
        })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn expert_bandwidth(&self, j: usize) -> Bandwidth {
        self.shared_bandwidth.scaled(self.scales[j])
    }
}

/// Scale grid `base · 10^{(j − center)/per_decade}` for `j = 1..=count`.
pub fn log_scale_grid(base: f64, count: usize, center: f64, per_decade: f64) -> Vec<f64> {
    (1..=count)
        .map(|j| base * 10f64.powf((j as f64 - center) / per_decade))
        .collect()
}

/// How the gate prior of the E-step is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One gate per held-out point, evaluated at that point.
    #[default]
    LeaveOneOut,
    /// A single gate on all points, evaluated in-sample.
    InSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaberConfig {
    /// Gate bandwidth relative to the shared bandwidth.
    pub gate_scale: f64,
    pub gate_reg: f64,
    pub gate_mode: GateMode,
    /// Start leave-one-out gate fits from the full-data gate.
    pub warm_start_gates: bool,
    pub max_em: usize,
    pub patience: usize,
    pub descent: DescentOptions,
    pub mklr: MklrOptions,
}

impl Default for SaberConfig {
    fn default() -> Self {
        SaberConfig {
            gate_scale: 5.0,
            gate_reg: 5e-4,
            gate_mode: GateMode::LeaveOneOut,
            warm_start_gates: false,
            max_em: 50,
            patience: 2,
            descent: DescentOptions::default(),
            mklr: MklrOptions::default(),
        }
    }
}

impl SaberConfig {
    pub fn gate_hyper(&self, bank: &ExpertBank) -> GateHyper {
        GateHyper {
            bandwidth: bank.shared_bandwidth.scaled(self.gate_scale),
            reg: self.gate_reg,
        }
    }
}

/// Trained mixture.
#[derive(Clone, Debug)]
pub struct SaberModel {
    pub hyper: SharedHyper,
    pub p: DMatrix<f64>,
    pub gate: GateModel,
    pub bank: ExpertBank,
    pub data: Dataset,
}

impl SaberModel {
    pub fn experts(&self) -> usize {
        self.bank.len()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }
}

fn check_bank(data: &Dataset, bank: &ExpertBank) -> Result<()> {
    if bank.eigs.iter().any(|e| e.len() != data.len()) {
        return Err(SaberError::dims("expert bank was built on a different training set"));
    }
    Ok(())
}

/// Tunes every expert alone (at `P ≡ 1`), takes the smallest `λ`, and sets
/// mean and noise in closed form at the uniform assignment.
pub fn init_saber(data: &Dataset, bank: &ExpertBank, gate_hyper: &GateHyper, cfg: &SaberConfig) -> Result<SaberModel> {
    check_bank(data, bank)?;
    if data.len() < 2 {
        return Err(SaberError::invalid("training needs at least two points"));
    }
    let n = data.len();
    let l = bank.len();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let start = SharedHyper {
        mean: data.y.mean(),
        log_amplitude: 0.0,
        noise_scale: 1.0,
    };
    let tuned = bank
        .eigs
        .par_iter()
        .map(|e| descend_log_amplitude(std::slice::from_ref(e), &data.y, &ones, start, &cfg.descent).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let lambda = tuned.iter().map(|h| h.log_amplitude).fold(f64::INFINITY, f64::min);
    let p = DMatrix::from_element(n, l, 1.0 / l as f64);
    let hv = HelpVariables::compute(&bank.eigs, &data.y, lambda)?;
    let hyper = closed_form_update(&hv, &p, lambda, start.mean);
    let kernel = GateKernel::new(&data.x, &gate_hyper.bandwidth)?;
    let (gate, _) = mklr_train_kernel(&kernel, &p, gate_hyper, None, &cfg.mklr)?;
    Ok(SaberModel {
        hyper,
        p,
        gate,
        bank: bank.clone(),
        data: data.clone(),
    })
}

/// Result of one E-step.
#[derive(Clone, Debug)]
pub struct EStep {
    pub p: DMatrix<f64>,
    /// Gate prior used for each point.
    pub q: DMatrix<f64>,
    /// Rows whose posterior vanished and kept their previous assignment.
    pub flagged_rows: Vec<usize>,
}

/// Caches that stay valid across EM iterations (fixed gate hyperparameters).
struct GateCache {
    full: GateKernel,
    loo: Option<Vec<GateKernel>>,
}

const LOO_CACHE_LIMIT: usize = 400;

impl GateCache {
    fn new(x: &DMatrix<f64>, hyper: &GateHyper, mode: GateMode) -> Result<Self> {
        let full = GateKernel::new(x, &hyper.bandwidth)?;
        let loo = if mode == GateMode::LeaveOneOut && x.nrows() <= LOO_CACHE_LIMIT {
            Some((0..full.n()).into_par_iter().map(|i| full.without(i)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(GateCache { full, loo })
    }
}

/// Leave-one-out gate prior: row `i` is the gate fitted on all other points,
/// evaluated at `xᵢ`.
fn loo_gate_prior(cache: &GateCache, p: &DMatrix<f64>, hyper: &GateHyper, cfg: &SaberConfig, warm: Option<&GateModel>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let l = p.ncols();
    if l == 1 {
        return Ok(DMatrix::from_element(n, 1, 1.0));
    }
    let rows = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let owned;
            let kernel = match &cache.loo {
                Some(v) => &v[i],
                None => {
                    owned = cache.full.without(i)?;
                    &owned
                }
            };
            let idx: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let p_rest = p.select_rows(&idx);
            let init = warm.map(|g| GateInit {
                alpha: g.alpha.select_rows(&idx),
                bias: g.bias.clone(),
            });
            let (gate, _) = mklr_train_kernel(kernel, &p_rest, hyper, init, &cfg.mklr)?;
            let xi = cache.full.x.rows(i, 1).into_owned();
            let q = mklr_predict(&xi, &gate)?;
            Ok(q.row(0).iter().copied().collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(n, l, |i, j| rows[i][j]))
}

/// Posterior `P ∝ Q ⊙ √W ⊙ exp(−looR² W / 2σε²)`, computed in log space.
pub fn posterior(q: &DMatrix<f64>, hv: &HelpVariables, hyper: &SharedHyper, previous: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (n, l) = q.shape();
    let resid = hv.loo_residuals(hyper.mean);
    let mut p = DMatrix::zeros(n, l);
    let mut flagged = Vec::new();
    for i in 0..n {
        let logs: Vec<f64> = (0..l)
            .map(|j| {
                let w = hv.w[(i, j)];
                q[(i, j)].ln() + 0.5 * w.ln() - resid[(i, j)] * resid[(i, j)] * w / (2.0 * hyper.noise_scale)
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            flagged.push(i);
            p.set_row(i, &previous.row(i));
            continue;
        }
        let e: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = e.iter().sum();
        for j in 0..l {
            p[(i, j)] = e[j] / total;
        }
    }
    (p, flagged)
}

fn e_step_cached(model: &SaberModel, cache: &GateCache, cfg: &SaberConfig) -> Result<EStep> {
    let gate_hyper = model.gate.hyper.clone();
    let q = match cfg.gate_mode {
        GateMode::LeaveOneOut => {
            let warm = cfg.warm_start_gates.then_some(&model.gate);
            loo_gate_prior(cache, &model.p, &gate_hyper, cfg, warm)?
        }
        GateMode::InSample => mklr_predict(&model.data.x, &model.gate)?,
    };
    let hv = HelpVariables::compute(&model.bank.eigs, &model.data.y, model.hyper.log_amplitude)?;
    let (p, flagged_rows) = posterior(&q, &hv, &model.hyper, &model.p);
    if !flagged_rows.is_empty() {
        log::warn!("{} rows kept their previous assignment", flagged_rows.len());
    }
    Ok(EStep { p, q, flagged_rows })
}

/// E-step at the model's current gate assignment and hyperparameters.
pub fn e_step(model: &SaberModel, cfg: &SaberConfig) -> Result<EStep> {
    let cache = GateCache::new(&model.data.x, &model.gate.hyper, cfg.gate_mode)?;
    e_step_cached(model, &cache, cfg)
}

/// M-step: descent on `λ` with closed-form mean and noise.
pub fn m_step(model: &SaberModel, p: &DMatrix<f64>, cfg: &SaberConfig) -> Result<SharedHyper> {
    descend_log_amplitude(&model.bank.eigs, &model.data.y, p, model.hyper, &cfg.descent).map(|r| r.0)
}

/// Per-iteration training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmRecord {
    pub iteration: usize,
    pub validation_sse: f64,
    pub objective: f64,
    pub hyper: SharedHyper,
    pub flagged_rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EmRecord>,
    /// Iteration whose state was returned (0 is the initialization).
    pub best_iteration: usize,
    pub initial_validation_sse: f64,
}

fn validation_sse(model: &SaberModel, val: &Dataset) -> Result<f64> {
    let pred = predict_saber(&val.x, model)?;
    Ok((pred - &val.y).norm_squared())
}

/// EM training with best-validation checkpointing.
pub fn train_saber(
    data: &Dataset,
    val: &Dataset,
    bank: &ExpertBank,
    gate_hyper: &GateHyper,
    cfg: &SaberConfig,
) -> Result<(SaberModel, TrainReport)> {
    if val.is_empty() {
        return Err(SaberError::invalid("validation set is empty"));
    }
    if val.dim() != data.dim() {
        return Err(SaberError::dims("validation inputs differ in dimension"));
    }
    let mut model = init_saber(data, bank, gate_hyper, cfg)?;
    let cache = GateCache::new(&data.x, gate_hyper, cfg.gate_mode)?;
    let initial_sse = validation_sse(&model, val)?;
    let mut best = (initial_sse, model.clone(), 0usize);
    let mut records = Vec::new();
    let mut stale = 0;
    for it in 1..=cfg.max_em {
        let es = e_step_cached(&model, &cache, cfg)?;
        let hyper = descend_log_amplitude(&bank.eigs, &data.y, &es.p, model.hyper, &cfg.descent)?;
        let init = (cfg.gate_mode == GateMode::InSample).then(|| GateInit {
            alpha: model.gate.alpha.clone(),
            bias: model.gate.bias.clone(),
        });
        let (gate, _) = mklr_train_kernel(&cache.full, &es.p, gate_hyper, init, &cfg.mklr)?;
        model.hyper = hyper.0;
        model.p = es.p;
        model.gate = gate;
        let sse = validation_sse(&model, val)?;
        let objective = hyper.1.objective(&model.p, &model.hyper);
        log::debug!("EM iteration {it}: validation SSE {sse:.6e}, objective {objective:.6e}");
        records.push(EmRecord {
            iteration: it,
            validation_sse: sse,
            objective,
            hyper: model.hyper,
            flagged_rows: es.flagged_rows.len(),
        });
        if sse < best.0 {
            best = (sse, model.clone(), it);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_model, best_iteration) = best;
    Ok((
        best_model,
        TrainReport {
            records,
            best_iteration,
            initial_validation_sse: initial_sse,
        },
    ))
}

/// Predictions of every expert at the test inputs (T×L), using the bank's
/// decompositions on `data`.
pub fn expert_predictions(xtest: &DMatrix<f64>, data: &Dataset, bank: &ExpertBank, hyper: &SharedHyper) -> Result<DMatrix<f64>> {
    check_bank(data, bank)?;
    if xtest.ncols() != data.dim() {
        return Err(SaberError::dims(format!(
            "test inputs have {} columns, model expects {}",
            xtest.ncols(),
            data.dim()
        )));
    }
    let amp = hyper.log_amplitude.exp();
    let resid = data.y.add_scalar(-hyper.mean);
    let cols = bank
        .eigs
        .par_iter()
        .enumerate()
        .map(|(j, e)| -> Result<DVector<f64>> {
            let g = e.values.map(|l| 1.0 / (amp * l + 1.0));
            let coef = &e.vectors * e.vectors.tr_mul(&resid).component_mul(&g);
            let ks = kernel_matrix(xtest, &data.x, &bank.expert_bandwidth(j))?;
            let mut out = ks * coef * amp;
            out.add_scalar_mut(hyper.mean);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Row-wise gate mixture `[Q ⊙ Ŷ] 𝟙`.
pub fn mix(q: &DMatrix<f64>, experts: &DMatrix<f64>) -> Result<DVector<f64>> {
    if q.shape() != experts.shape() {
        return Err(SaberError::dims("gate and expert predictions differ in shape"));
    }
    Ok(q.component_mul(experts).column_sum())
}

/// Mixture prediction with the model's trained gate.
pub fn predict_saber(xtest: &DMatrix<f64>, model: &SaberModel) -> Result<DVector<f64>> {
    let experts = expert_predictions(xtest, &model.data, &model.bank, &model.hyper)?;
    let q = mklr_predict(xtest, &model.gate)?;
    mix(&q, &experts)
}

/// Locally adapted bandwidth `s(x) Σ` at query points.
#[derive(Clone, Debug)]
pub struct SigmaField {
    pub factors: DVector<f64>,
    pub shared: Bandwidth,
}

impl SigmaField {
    pub fn bandwidth_at(&self, i: usize) -> Bandwidth {
        self.shared.scaled(self.factors[i])
    }

    /// Isotropic scalar bandwidth field `s(x)·σ_Σ` (None for diagonal Σ).
    pub fn scalar_field(&self) -> Option<DVector<f64>> {
        match &self.shared {
            Bandwidth::Isotropic { log_scale } => Some(self.factors.map(|s| s * log_scale.exp())),
            Bandwidth::Diagonal { .. } => None,
        }
    }
}

/// `exp(Σⱼ Qⱼ log σⱼ)` row-wise.
pub fn geometric_factors(q: &DMatrix<f64>, scales: &[f64]) -> Result<DVector<f64>> {
    if q.ncols() != scales.len() {
        return Err(SaberError::dims("gate columns differ from number of scales"));
    }
    let logs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    Ok(DVector::from_fn(q.nrows(), |i, _| {
        let row = q.row(i);
        // a one-hot row selects its scale without a log round trip
        if let Some(j) = row.iter().position(|v| *v == 1.0) {
            return scales[j];
        }
        row.iter().zip(&logs).map(|(a, b)| a * b).sum::<f64>().exp()
    }))
}

/// Bandwidth field from the gate responses at the query points.
pub fn sigma_saber(xquery: &DMatrix<f64>, model: &SaberModel) -> Result<SigmaField> {
    let q = mklr_predict(xquery, &model.gate)?;
    Ok(SigmaField {
        factors: geometric_factors(&q, &model.bank.scales)?,
        shared: model.bank.shared_bandwidth.clone(),
    })
}

pub const MODEL_FORMAT: &str = "saber-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrainingBlock {
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_var: Option<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    hyper: SharedHyper,
    shared_bandwidth: Bandwidth,
    scales: Vec<f64>,
    assignments: DMatrix<f64>,
    gate: GateModel,
    training: TrainingBlock,
    fingerprint: String,
}

/// SHA-256 over the training inputs, labels and noise variances.
pub fn training_fingerprint(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.len() as u64).to_le_bytes());
    h.update((data.dim() as u64).to_le_bytes());
    for v in data.x.iter().chain(data.y.iter()) {
        h.update(v.to_le_bytes());
    }
    if let Some(v) = &data.noise_var {
        for s in v.iter() {
            h.update(s.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl SaberModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            hyper: self.hyper,
            shared_bandwidth: self.bank.shared_bandwidth.clone(),
            scales: self.bank.scales.clone(),
            assignments: self.p.clone(),
            gate: self.gate.clone(),
            training: TrainingBlock {
                x: self.data.x.clone(),
                y: self.data.y.clone(),
                noise_var: self.data.noise_var.clone(),
            },
            fingerprint: training_fingerprint(&self.data),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Restores a model; expert decompositions are rebuilt from the stored
    /// training set.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
            return Err(SaberError::Format("not a saber model file".into()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(SaberError::UnsupportedVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(raw)?;
        let mut data = Dataset::new(file.training.x, file.training.y)?;
        data.noise_var = file.training.noise_var;
        data.validate()?;
        if training_fingerprint(&data) != file.fingerprint {
            return Err(SaberError::Format("training data fingerprint mismatch".into()));
        }
        let l = file.scales.len();
        if file.assignments.shape() != (data.len(), l) || file.gate.classes() != l {
            return Err(SaberError::dims("assignment or gate shape does not match the scales"));
        }
        let bank = ExpertBank::build(&data, &file.shared_bandwidth, &file.scales)?;
        Ok(SaberModel {
            hyper: file.hyper,
            p: file.assignments,
            gate: file.gate,
            bank,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::{gpr_predict, GprHyper};
    use approx::assert_relative_eq;

    fn wavy(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| 10.0 * i as f64 / n as f64);
        let y = DVector::from_fn(n, |i, _| {
            let t = x[(i, 0)];
            (6.0 / (t + 1.0)).sin() + 0.05 * (((i * 37) % 11) as f64 / 11.0 - 0.5)
        });
        Dataset::new(x, y).unwrap()
    }

    fn gate(bank: &ExpertBank) -> GateHyper {
        SaberConfig::default().gate_hyper(bank)
    }

    #[test]
    fn grid_matches_definition() {
        let g = log_scale_grid(0.45, 7, 3.0, 3.0);
        assert_relative_eq!(g[2], 0.45, epsilon = 1e-15);
        assert_relative_eq!(g[5], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn bank_rejects_unsorted_scales() {
        let d = wavy(10);
        assert!(ExpertBank::build(&d, &Bandwidth::isotropic(1.0), &[1.0, 0.5]).is_err());
    }

    #[test]
    fn single_expert_equals_tuned_gpr() {
        let d = wavy(30);
        let bank = ExpertBank::build(&d, &Bandwidth::isotropic(0.6), &[1.0]).unwrap();
        let cfg = SaberConfig::default();
        let (model, _) = train_saber(&d, &d, &bank, &gate(&bank), &cfg).unwrap();
        let h = GprHyper::new(model.hyper, bank.expert_bandwidth(0));
        let xt = DMatrix::from_fn(9, 1, |i, _| i as f64 * 1.1);
        let a = predict_saber(&xt, &model).unwrap();
        let b = gpr_predict(&xt, &d, &h).unwrap();
        assert!((a - b).amax() < 1e-8);
    }

    #[test]
    fn identical_experts_keep_uniform_assignment() {
        let d = wavy(15);
        let mut bank = ExpertBank::build(&d, &Bandwidth::isotropic(0.6), &[1.0]).unwrap();
        bank.scales = vec![1.0, 1.0 + 1e-300];
        bank.eigs.push(bank.eigs[0].clone());
        let cfg = SaberConfig::default();
        let model = init_saber(&d, &bank, &gate(&bank), &cfg).unwrap();
        let es = e_step(&model, &cfg).unwrap();
        assert!(es.p.iter().all(|v| (v - 0.5).abs() < 1e-9));
    }

    #[test]
    fn posterior_concentrates_on_exact_expert() {
        let n = 4;
        let hv = HelpVariables {
            w: DMatrix::from_element(n, 2, 1.0),
            loo_one: DMatrix::from_element(n, 2, 1.0),
            loo_y: DMatrix::from_fn(n, 2, |_, j| if j == 0 { 0.0 } else { 5.0 }),
            a_one: DMatrix::zeros(n, 2),
            a_y: DMatrix::zeros(n, 2),
            d_a: DMatrix::zeros(n, 2),
        };
        let h = SharedHyper {
            mean: 0.0,
            log_amplitude: 0.0,
            noise_scale: 0.1,
        };
        let q = DMatrix::from_element(n, 2, 0.5);
        let (p, flagged) = posterior(&q, &hv, &h, &q);
        assert!(flagged.is_empty());
        assert!(p.column(0).iter().all(|v| *v > 1.0 - 1e-12));
    }

    #[test]
    fn zero_gate_row_is_flagged() {
        let hv = HelpVariables {
            w: DMatrix::from_element(1, 2, 1.0),
            loo_one: DMatrix::from_element(1, 2, 1.0),
            loo_y: DMatrix::zeros(1, 2),
            a_one: DMatrix::zeros(1, 2),
            a_y: DMatrix::zeros(1, 2),
            d_a: DMatrix::zeros(1, 2),
        };
        let h = SharedHyper {
            mean: 0.0,
            log_amplitude: 0.0,
            noise_scale: 1.0,
        };
        let prev = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let (p, flagged) = posterior(&DMatrix::zeros(1, 2), &hv, &h, &prev);
        assert_eq!(flagged, vec![0]);
        assert_eq!(p, prev);
    }

    #[test]
    fn sigma_reductions() {
        let scales = [0.5, 2.0];
        let one_hot = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let f = geometric_factors(&one_hot, &scales).unwrap();
        assert_relative_eq!(f[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(f[1], 2.0, epsilon = 1e-15);
        let half = DMatrix::from_element(1, 2, 0.5);
        assert_relative_eq!(geometric_factors(&half, &scales).unwrap()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_gate_averages_experts() {
        let q = DMatrix::from_element(3, 2, 0.5);
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, -2.0, 2.0, 0.0, 1.0]);
        let m = mix(&q, &e).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 0.0, 0.5]);
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let d = wavy(25);
        let bank = ExpertBank::build(&d, &Bandwidth::isotropic(0.6), &[0.5, 1.0, 2.0]).unwrap();
        let cfg = SaberConfig {
            gate_mode: GateMode::InSample,
            max_em: 3,
            ..SaberConfig::default()
        };
        let (model, _) = train_saber(&d, &d, &bank, &gate(&bank), &cfg).unwrap();
        let back = SaberModel::from_json(&model.to_json().unwrap()).unwrap();
        let xt = DMatrix::from_fn(11, 1, |i, _| i as f64 * 0.9);
        let a = predict_saber(&xt, &model).unwrap();
        let b = predict_saber(&xt, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_other_versions() {
        let text = r#"{"format":"saber-model","version":9}"#;
        assert!(matches!(
            SaberModel::from_json(text),
            Err(SaberError::UnsupportedVersion { found: 9, .. })
        ));
    }
}
