//! Training-phase estimation of `C_η`, `C_ν` and the Gramian scale `γ`.
//!
//! A filter is run with provisional parameters over a training window. The
//! trend increments `q(t) = χ̂(t) − b χ̂(t−1)` give `C_η`, the innovations
//! `ι(t) = y_s(t) − b χ̂_s(t−1)` give the entries of `C_ν`, and `γ` is the
//! least-squares fit of `C_ν ≈ γ G`.
//!
//! Provisional parameters come from a multi-lag variogram of the raw trace
//! by default. Starting from `C_η = C_ν = G` also works but can settle on a
//! noticeably biased split between the two covariances.

use nalgebra::{DMatrix, DVector};

use crate::covmodel::{DelayTrace, ModelParams};
use crate::error::{Error, Result};
use crate::kkf::{kf_step, FilterState, KfStep};
use crate::linalg::{project_psd, symmetrize};
use crate::topology::Gramian;

/// Sample mean and covariance (`1/(n−1)`, around the final mean) of the
/// trend increments. Needs at least three samples.
pub fn q_statistics(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: n });
    }
    let p = samples[0].len();
    if samples.iter().any(|q| q.len() != p) {
        return Err(Error::Dimension("q samples have differing lengths".into()));
    }
    let mean = samples.iter().fold(DVector::zeros(p), |acc, q| acc + q) / n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for q in samples {
        let d = q - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n - 1) as f64;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// `Ĉ_q + (M_last − M_first)/(len − 1)`, symmetrized.
pub fn estimate_c_eta(c_q: &DMatrix<f64>, m_history: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if m_history.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: m_history.len(),
        });
    }
    let first = &m_history[0];
    let last = &m_history[m_history.len() - 1];
    if first.shape() != c_q.shape() || last.shape() != c_q.shape() {
        return Err(Error::Dimension("covariance history does not match Ĉ_q".into()));
    }
    let mut c_eta = c_q + (last - first) / (m_history.len() - 1) as f64;
    symmetrize(&mut c_eta);
    Ok(c_eta)
}

/// Least-squares scale `Σ G∘Ĉ_ν / ‖G‖_F²`, clamped below at zero.
pub fn fit_gamma(c_nu_hat: &DMatrix<f64>, gramian: &Gramian) -> Result<f64> {
    let g = gramian.to_f64();
    if g.shape() != c_nu_hat.shape() {
        return Err(Error::Dimension(format!(
            "gramian is {:?}, covariance is {:?}",
            g.shape(),
            c_nu_hat.shape()
        )));
    }
    let norm = gramian.frobenius_sq();
    if norm == 0.0 {
        return Err(Error::ZeroGramian);
    }
    Ok((g.component_mul(c_nu_hat).sum() / norm).max(0.0))
}

/// Online training statistics: Welford moments of `q(t)`, the filter
/// covariance at the window edges, and per-pair innovation co-moments.
#[derive(Debug, Clone)]
pub struct TrainingAccumulator {
    damping_b: f64,
    slots: usize,
    prev_chi: Option<DVector<f64>>,
    q_count: usize,
    q_mean: DVector<f64>,
    q_m2: DMatrix<f64>,
    m_first: Option<DMatrix<f64>>,
    m_last: Option<DMatrix<f64>>,
    m_prev_sum: DMatrix<f64>,
    innovation_sum: DMatrix<f64>,
    prior_sum: DMatrix<f64>,
    pair_count: DMatrix<usize>,
}

impl TrainingAccumulator {
    pub fn new(p: usize, damping_b: f64) -> Self {
        Self {
            damping_b,
            slots: 0,
            prev_chi: None,
            q_count: 0,
            q_mean: DVector::zeros(p),
            q_m2: DMatrix::zeros(p, p),
            m_first: None,
            m_last: None,
            m_prev_sum: DMatrix::zeros(p, p),
            innovation_sum: DMatrix::zeros(p, p),
            prior_sum: DMatrix::zeros(p, p),
            pair_count: DMatrix::zeros(p, p),
        }
    }

    pub fn dim(&self) -> usize {
        self.q_mean.len()
    }

    /// Number of slots observed.
    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Number of `q` samples (one fewer than the slots).
    pub fn q_count(&self) -> usize {
        self.q_count
    }

    /// How many slots measured both `p` and `q`.
    pub fn pair_count(&self, p: usize, q: usize) -> usize {
        self.pair_count[(p, q)]
    }

    /// Record slot `t` given the state before it and the resulting update.
    pub fn observe(&mut self, before: &FilterState, step: &KfStep, selection: &[usize]) -> Result<()> {
        let p = self.dim();
        if before.dim() != p || step.state.dim() != p || step.innovation.len() != selection.len() {
            return Err(Error::Dimension("training accumulator received mismatched slot data".into()));
        }
        self.update_innovation_cov(&before.m, selection, &step.innovation);

        let chi = &step.state.chi_hat;
        if let Some(prev) = &self.prev_chi {
            let q = chi - prev * self.damping_b;
            self.q_count += 1;
            let delta = &q - &self.q_mean;
            self.q_mean += &delta / self.q_count as f64;
            let delta2 = &q - &self.q_mean;
            self.q_m2.ger(1.0, &delta, &delta2, 1.0);
            self.m_prev_sum += &before.m;
        } else {
            self.m_first = Some(step.state.m.clone());
        }
        self.m_last = Some(step.state.m.clone());
        self.prev_chi = Some(chi.clone());
        self.slots += 1;
        Ok(())
    }

    /// Add `ι_p ι_q` and `b² M(t−1)_pq` for every measured pair.
    pub fn update_innovation_cov(&mut self, prev_m: &DMatrix<f64>, selection: &[usize], innovation: &DVector<f64>) {
        let b2 = self.damping_b * self.damping_b;
        for (i, &p) in selection.iter().enumerate() {
            for (j, &q) in selection.iter().enumerate() {
                self.innovation_sum[(p, q)] += innovation[i] * innovation[j];
                self.prior_sum[(p, q)] += b2 * prev_m[(p, q)];
                self.pair_count[(p, q)] += 1;
            }
        }
    }

    /// Mean and `1/(n−1)` covariance of the `q` samples seen so far.
    pub fn q_statistics(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if self.q_count < 3 {
            return Err(Error::InsufficientSamples {
                needed: 3,
                got: self.q_count,
            });
        }
        let mut cov = &self.q_m2 / (self.q_count - 1) as f64;
        symmetrize(&mut cov);
        Ok((self.q_mean.clone(), cov))
    }

    /// `Ĉ_q + (Σ M(t) − b² Σ M(t−1)) / n`. For `b = 1` the correction
    /// telescopes to `(M_last − M_first)/n`.
    pub fn estimate_c_eta(&self) -> Result<DMatrix<f64>> {
        let (_, c_q) = self.q_statistics()?;
        let (first, last) = match (&self.m_first, &self.m_last) {
            (Some(f), Some(l)) => (f, l),
            _ => unreachable!("q samples imply recorded covariances"),
        };
        let b2 = self.damping_b * self.damping_b;
        let mut correction = last - first;
        if b2 != 1.0 {
            correction += &self.m_prev_sum * (1.0 - b2);
        }
        let mut c_eta = c_q + correction / self.q_count as f64;
        symmetrize(&mut c_eta);
        Ok(c_eta)
    }
}

/// `[Ĉ_ν]_pq = mean ι_pι_q − σ² 1{p=q} − mean b²M(t−1)_pq − [Ĉ_η]_pq` over
/// the slots measuring both paths. Pairs never measured together keep the
/// value from `prior`.
pub fn finalize_c_nu(
    acc: &TrainingAccumulator,
    c_eta_hat: &DMatrix<f64>,
    sigma2: f64,
    prior: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = acc.dim();
    if c_eta_hat.shape() != (p, p) || prior.shape() != (p, p) {
        return Err(Error::Dimension("finalize_c_nu inputs must be PxP".into()));
    }
    let mut c_nu = prior.clone();
    for i in 0..p {
        for j in 0..p {
            let n = acc.pair_count[(i, j)];
            if n == 0 {
                continue;
            }
            let n = n as f64;
            let noise = if i == j { sigma2 } else { 0.0 };
            c_nu[(i, j)] =
                acc.innovation_sum[(i, j)] / n - noise - acc.prior_sum[(i, j)] / n - c_eta_hat[(i, j)];
        }
    }
    symmetrize(&mut c_nu);
    Ok(c_nu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedParams {
    pub c_eta_hat: DMatrix<f64>,
    pub c_nu_hat: DMatrix<f64>,
    pub gamma_hat: f64,
}

impl EstimatedParams {
    /// Filter parameters `C_ν = γ̂ G` and `C_η` projected onto the PSD cone.
    pub fn into_model_params(&self, gramian: &Gramian, sigma2: f64, damping_b: f64) -> Result<ModelParams> {
        let mut c_eta = project_psd(&self.c_eta_hat);
        symmetrize(&mut c_eta);
        ModelParams::from_gramian(self.gamma_hat.max(0.0), gramian, c_eta, sigma2, damping_b)
    }
}

/// Where the provisional training parameters come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TrainingInit {
    /// Fit `C_η` and `γ` to the lag-1..=`max_lag` variogram of the trace.
    #[default]
    Variogram,
    /// `C_ν = C_η = γ₀ G`.
    Gramian { gamma0: f64 },
    Given(ModelParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub t_l: usize,
    pub burn_in: usize,
    pub sigma2: f64,
    pub damping_b: f64,
    pub init: TrainingInit,
    pub max_lag: usize,
    /// Extra filter passes, each started from the previous estimate.
    pub refine_passes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            t_l: 1000,
            burn_in: 500,
            sigma2: 1e-3,
            damping_b: 1.0,
            init: TrainingInit::Variogram,
            max_lag: 20,
            refine_passes: 0,
        }
    }
}

/// Provisional parameters from the cross-variogram
/// `V_pq(L) = mean (y_p(t+L) − y_p(t))(y_q(t+L) − y_q(t))`.
///
/// Under the model `V(L) = 2(C_ν + σ²I) + 2 C_η/(1+b) · x_L` with
/// `x_L = (1 − b^L)/(1 − b)` (`= L` for `b = 1`), so a per-entry linear fit
/// in `x_L` gives `C_η` from the slope and `C_ν` from the intercept.
///
/// Only the diagonal of the slope is kept for `C_η`. The off-diagonal
/// slopes are noisy at short horizons and a filter started from them
/// drifts to a poor estimate.
pub fn variogram_init(
    gramian: &Gramian,
    trace: &DelayTrace,
    t_l: usize,
    max_lag: usize,
    sigma2: f64,
    damping_b: f64,
) -> Result<ModelParams> {
    let p = trace.path_count();
    if gramian.dim() != p {
        return Err(Error::Dimension(format!("gramian is {}x{0}, trace has {p} paths", gramian.dim())));
    }
    let t_l = t_l.min(trace.horizon());
    let max_lag = max_lag.min(t_l.saturating_sub(1));
    if max_lag < 2 {
        return Err(Error::InsufficientSamples { needed: 3, got: t_l });
    }

    let mut mask = vec![vec![false; p]; t_l];
    for (t, row) in mask.iter_mut().enumerate() {
        for &s in trace.selection(t) {
            row[s] = true;
        }
    }
    let values = trace.values();
    let lags: Vec<f64> = (1..=max_lag)
        .map(|l| {
            if damping_b == 1.0 {
                l as f64
            } else {
                (1.0 - damping_b.powi(l as i32)) / (1.0 - damping_b)
            }
        })
        .collect();

    // Per-entry weighted regression sums over lags with data.
    let mut sx = DMatrix::<f64>::zeros(p, p);
    let mut sy = DMatrix::<f64>::zeros(p, p);
    let mut sxx = DMatrix::<f64>::zeros(p, p);
    let mut sxy = DMatrix::<f64>::zeros(p, p);
    let mut nlags = DMatrix::<f64>::zeros(p, p);
    let mut diffs = vec![0.0; p];
    for (k, &x) in lags.iter().enumerate() {
        let lag = k + 1;
        let mut sum = DMatrix::<f64>::zeros(p, p);
        let mut count = DMatrix::<f64>::zeros(p, p);
        for t in 0..t_l - lag {
            let both: Vec<usize> = (0..p).filter(|&i| mask[t][i] && mask[t + lag][i]).collect();
            for &i in &both {
                diffs[i] = values[(t + lag, i)] - values[(t, i)];
            }
            for &i in &both {
                for &j in &both {
                    sum[(i, j)] += diffs[i] * diffs[j];
                    count[(i, j)] += 1.0;
                }
            }
        }
        for i in 0..p {
            for j in 0..p {
                if count[(i, j)] > 0.0 {
                    let v = sum[(i, j)] / count[(i, j)];
                    sx[(i, j)] += x;
                    sy[(i, j)] += v;
                    sxx[(i, j)] += x * x;
                    sxy[(i, j)] += x * v;
                    nlags[(i, j)] += 1.0;
                }
            }
        }
    }

    let mut slope = DMatrix::zeros(p, p);
    let mut intercept_nu = DMatrix::zeros(p, p);
    let mut fitted = DMatrix::from_element(p, p, false);
    for i in 0..p {
        for j in 0..p {
            let n = nlags[(i, j)];
            if n < 2.0 {
                continue;
            }
            let denom = n * sxx[(i, j)] - sx[(i, j)] * sx[(i, j)];
            if denom <= 0.0 {
                continue;
            }
            let s = (n * sxy[(i, j)] - sx[(i, j)] * sy[(i, j)]) / denom;
            let c = (sy[(i, j)] - s * sx[(i, j)]) / n;
            slope[(i, j)] = s;
            intercept_nu[(i, j)] = c / 2.0 - if i == j { sigma2 } else { 0.0 };
            fitted[(i, j)] = true;
        }
    }
    symmetrize(&mut slope);
    let c_eta = DMatrix::from_diagonal(&slope.diagonal().map(|v| (v * (1.0 + damping_b) / 2.0).max(0.0)));

    let g = gramian.to_f64();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p {
        for j in 0..p {
            if fitted[(i, j)] {
                num += g[(i, j)] * intercept_nu[(i, j)];
                den += g[(i, j)] * g[(i, j)];
            }
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroGramian);
    }
    let gamma = (num / den).max(0.0);
    ModelParams::from_gramian(gamma, gramian, c_eta, sigma2, damping_b)
}

fn initial_params(gramian: &Gramian, trace: &DelayTrace, config: &TrainingConfig) -> Result<ModelParams> {
    match &config.init {
        TrainingInit::Variogram => variogram_init(
            gramian,
            trace,
            config.t_l,
            config.max_lag,
            config.sigma2,
            config.damping_b,
        ),
        TrainingInit::Gramian { gamma0 } => {
            let c_nu = gramian.to_f64() * *gamma0;
            ModelParams::new(c_nu.clone(), c_nu, config.sigma2, config.damping_b, *gamma0)
        }
        TrainingInit::Given(params) => {
            if params.dim() != gramian.dim() {
                return Err(Error::Dimension("initial parameters do not match the gramian".into()));
            }
            Ok(params.clone())
        }
    }
}

/// One filter pass over `0..t_l`, accumulating from `burn_in` on.
fn training_pass(
    gramian: &Gramian,
    trace: &DelayTrace,
    params: &ModelParams,
    config: &TrainingConfig,
) -> Result<EstimatedParams> {
    let p = params.dim();
    let mut state = FilterState::diffuse(params, &trace.window(0, config.t_l)?);
    let mut acc = TrainingAccumulator::new(p, params.damping_b);
    for t in 0..config.t_l {
        let selection = trace.selection(t);
        let y_s = trace.measured_values(t);
        let step = kf_step(&state, params, selection, &y_s).map_err(|e| e.at_slot(t))?;
        if t >= config.burn_in {
            acc.observe(&state, &step, selection)?;
        }
        state = step.state;
    }
    let c_eta_hat = acc.estimate_c_eta()?;
    let c_nu_hat = finalize_c_nu(&acc, &c_eta_hat, params.sigma2, &params.c_nu)?;
    let gamma_hat = fit_gamma(&c_nu_hat, gramian)?;
    Ok(EstimatedParams {
        c_eta_hat,
        c_nu_hat,
        gamma_hat,
    })
}

/// Estimate the model covariances from the first `t_l` slots of `trace`,
/// using each slot's recorded selection as the training measurements.
pub fn training_phase(gramian: &Gramian, trace: &DelayTrace, config: &TrainingConfig) -> Result<EstimatedParams> {
    if gramian.dim() != trace.path_count() {
        return Err(Error::Dimension(format!(
            "gramian has {} paths, trace has {}",
            gramian.dim(),
            trace.path_count()
        )));
    }
    if config.t_l > trace.horizon() {
        return Err(Error::InsufficientSamples {
            needed: config.t_l,
            got: trace.horizon(),
        });
    }
    let window = config.t_l.saturating_sub(config.burn_in);
    if window < 4 {
        return Err(Error::InsufficientSamples {
            needed: config.burn_in + 4,
            got: config.t_l,
        });
    }
    let mut params = initial_params(gramian, trace, config)?;
    let mut estimate = training_pass(gramian, trace, &params, config)?;
    for _ in 0..config.refine_passes {
        params = estimate.into_model_params(gramian, config.sigma2, config.damping_b)?;
        estimate = training_pass(gramian, trace, &params, config)?;
    }
    Ok(estimate)
}
