//! Kriged Kalman filter.
//!
//! The trend `χ(t)` is tracked with a Kalman filter whose measurement noise
//! is the spatially correlated residual `ν` plus `ε`. The unmeasured paths
//! are then predicted by kriging the residual of the measured ones around
//! the tracked trend. With damping `b < 1` the prior is `b χ̂`, `b² M + C_η`;
//! `b = 1` is the plain random walk.

use nalgebra::{DMatrix, DVector};

use crate::covmodel::{DelayTrace, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{
    check_psd, complement, principal, select_cols, select_entries, select_rows, submatrix, symmetrize,
    SymmetricPsd,
};
use crate::topology::Network;

/// Relative eigenvalue tolerance for the filter error covariance.
pub const STATE_PSD_TOL: f64 = 1e-8;

/// Posterior of the trend after processing slot `slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub chi_hat: DVector<f64>,
    pub m: DMatrix<f64>,
    pub slot: usize,
}

impl FilterState {
    pub fn new(chi_hat: DVector<f64>, m: DMatrix<f64>) -> Result<Self> {
        if m.shape() != (chi_hat.len(), chi_hat.len()) {
            return Err(Error::Dimension(format!(
                "state has {} paths but covariance is {:?}",
                chi_hat.len(),
                m.shape()
            )));
        }
        check_psd(&m, STATE_PSD_TOL, "filter covariance")?;
        Ok(Self { chi_hat, m, slot: 0 })
    }

    pub fn dim(&self) -> usize {
        self.chi_hat.len()
    }

    /// Diffuse default: every path starts at the mean of the first
    /// non-empty slot's measurements, with `M(0) = 10·tr(C_ν)/P · I`
    /// (falling back to `C_η`, then to `1 ms²`, when the trace is zero).
    pub fn diffuse(params: &ModelParams, trace: &DelayTrace) -> Self {
        let p = params.dim();
        let level = (0..trace.horizon())
            .map(|t| trace.measured_values(t))
            .find(|v| !v.is_empty())
            .map(|v| v.mean())
            .unwrap_or(0.0);
        let scale = [params.c_nu.trace(), params.c_eta.trace()]
            .into_iter()
            .map(|tr| 10.0 * tr / p as f64)
            .find(|&s| s > 0.0)
            .unwrap_or(1.0);
        Self {
            chi_hat: DVector::from_element(p, level),
            m: DMatrix::identity(p, p) * scale,
            slot: 0,
        }
    }
}

/// Result of one measurement update.
#[derive(Debug, Clone)]
pub struct KfStep {
    pub state: FilterState,
    /// `P × |S|` Kalman gain, columns in selection order.
    pub gain: DMatrix<f64>,
    /// `y_s − S b χ̂(t−1)`.
    pub innovation: DVector<f64>,
    /// `b² M(t−1) + C_η`.
    pub prior_m: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Sorted ids of the paths not measured in this slot.
    pub unmeasured: Vec<usize>,
    /// `ŷ` for `unmeasured`, in the same order.
    pub predicted: DVector<f64>,
    /// `|S̄| × |S̄|` prediction error covariance.
    pub error_cov: DMatrix<f64>,
    pub kalman_gain: DMatrix<f64>,
}

fn check_inputs(state: &FilterState, params: &ModelParams, selection: &[usize], y_s: &DVector<f64>) -> Result<()> {
    let p = params.dim();
    if state.dim() != p {
        return Err(Error::Dimension(format!("state has {} paths, model has {p}", state.dim())));
    }
    if y_s.len() != selection.len() {
        return Err(Error::Dimension(format!(
            "{} measurements for {} selected paths",
            y_s.len(),
            selection.len()
        )));
    }
    let mut seen = vec![false; p];
    for &s in selection {
        if s >= p || seen[s] {
            return Err(Error::Dimension(format!("invalid or repeated path {s} in selection")));
        }
        seen[s] = true;
    }
    Ok(())
}

fn prior_covariance(m: &DMatrix<f64>, params: &ModelParams) -> DMatrix<f64> {
    let b = params.damping_b;
    let mut prior = m * (b * b) + &params.c_eta;
    symmetrize(&mut prior);
    prior
}

fn factor_noise_matrix(matrix: DMatrix<f64>, params: &ModelParams, role: &'static str) -> Result<SymmetricPsd> {
    SymmetricPsd::new(matrix, role).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } if params.sigma2 == 0.0 => Error::ZeroMeasurementNoise,
        other => other,
    })
}

/// Time update only, for a slot with no measurements:
/// `χ̂ ← b χ̂`, `M ← b² M + C_η`.
pub fn predict_only(state: &FilterState, params: &ModelParams) -> FilterState {
    FilterState {
        chi_hat: &state.chi_hat * params.damping_b,
        m: prior_covariance(&state.m, params),
        slot: state.slot + 1,
    }
}

/// Measurement update for the paths in `selection` with values `y_s`.
/// An empty selection falls back to [`predict_only`].
pub fn kf_step(state: &FilterState, params: &ModelParams, selection: &[usize], y_s: &DVector<f64>) -> Result<KfStep> {
    check_inputs(state, params, selection, y_s)?;
    let p = params.dim();
    let prior_m = prior_covariance(&state.m, params);
    if selection.is_empty() {
        return Ok(KfStep {
            state: predict_only(state, params),
            gain: DMatrix::zeros(p, 0),
            innovation: DVector::zeros(0),
            prior_m,
        });
    }
    let prior_chi = &state.chi_hat * params.damping_b;

    let mut innov_cov = principal(&(&prior_m + &params.c_nu), selection);
    for i in 0..selection.len() {
        innov_cov[(i, i)] += params.sigma2;
    }
    let innov_cov = factor_noise_matrix(innov_cov, params, "innovation covariance")?;

    // K = M⁻ Sᵀ Σ⁻¹, computed as (Σ⁻¹ S M⁻)ᵀ.
    let s_prior = select_rows(&prior_m, selection);
    let gain = innov_cov.solve(&s_prior).transpose();
    let innovation = y_s - select_entries(&prior_chi, selection);
    let chi_hat = prior_chi + &gain * &innovation;
    let mut m = &prior_m - &gain * s_prior;
    symmetrize(&mut m);
    check_psd(&m, STATE_PSD_TOL, "filter covariance")?;

    Ok(KfStep {
        state: FilterState {
            chi_hat,
            m,
            slot: state.slot + 1,
        },
        gain,
        innovation,
        prior_m,
    })
}

/// Kriging prediction of the unmeasured paths around the updated trend.
///
/// `updated` is the state after [`kf_step`] for this slot and `prev_m` is
/// `M(t−1)`, which the error covariance is expressed in.
pub fn kkf_predict(
    updated: &FilterState,
    prev_m: &DMatrix<f64>,
    params: &ModelParams,
    selection: &[usize],
    y_s: &DVector<f64>,
    kalman_gain: DMatrix<f64>,
) -> Result<PredictionResult> {
    let (unmeasured, predicted) = kriged_mean(updated, params, selection, y_s)?;
    let error_cov = error_covariance(prev_m, params, selection)?;
    Ok(PredictionResult {
        unmeasured,
        predicted,
        error_cov,
        kalman_gain,
    })
}

/// The point prediction of [`kkf_predict`] without the error covariance:
/// `S̄χ̂ + S̄C_νSᵀ(SC_νSᵀ + σ²I)⁻¹(y_s − Sχ̂)`.
pub fn kriged_mean(
    updated: &FilterState,
    params: &ModelParams,
    selection: &[usize],
    y_s: &DVector<f64>,
) -> Result<(Vec<usize>, DVector<f64>)> {
    check_inputs(updated, params, selection, y_s)?;
    let p = params.dim();
    let unmeasured = complement(p, selection);
    let mut predicted = select_entries(&updated.chi_hat, &unmeasured);
    if !selection.is_empty() && !unmeasured.is_empty() {
        let cross = submatrix(&params.c_nu, &unmeasured, selection);
        if cross.iter().any(|&v| v != 0.0) {
            let mut sigma = principal(&params.c_nu, selection);
            for i in 0..selection.len() {
                sigma[(i, i)] += params.sigma2;
            }
            let sigma = factor_noise_matrix(sigma, params, "kriging covariance")?;
            let residual = y_s - select_entries(&updated.chi_hat, selection);
            predicted += cross * sigma.solve_vec(&residual);
        }
    }
    Ok((unmeasured, predicted))
}

/// Prediction error covariance of the unmeasured paths,
/// `σ² I + S̄ [A⁻¹ + σ⁻² SᵀS]⁻¹ S̄ᵀ` with `A = b² M(t−1) + C_η + C_ν`.
///
/// When `A` is singular the equivalent form
/// `σ² I + S̄ (A − A Sᵀ (S A Sᵀ + σ² I)⁻¹ S A) S̄ᵀ` is used instead.
pub fn error_covariance(prev_m: &DMatrix<f64>, params: &ModelParams, selection: &[usize]) -> Result<DMatrix<f64>> {
    let p = params.dim();
    if prev_m.shape() != (p, p) {
        return Err(Error::Dimension(format!("M is {:?}, model has {p} paths", prev_m.shape())));
    }
    let unmeasured = complement(p, selection);
    let sigma2 = params.sigma2;
    let mut a = prior_covariance(prev_m, params) + &params.c_nu;
    symmetrize(&mut a);

    let posterior = if selection.is_empty() {
        a
    } else if let (true, Ok(a_fac)) = (sigma2 > 0.0, SymmetricPsd::new(a.clone(), "prior sum")) {
        let mut info = a_fac.inverse();
        for &s in selection {
            info[(s, s)] += 1.0 / sigma2;
        }
        SymmetricPsd::new(info, "information matrix")?.inverse()
    } else {
        let mut inner = principal(&a, selection);
        for i in 0..selection.len() {
            inner[(i, i)] += sigma2;
        }
        let inner = factor_noise_matrix(inner, params, "innovation covariance")?;
        let a_s = select_cols(&a, selection);
        &a - &a_s * inner.solve(&a_s.transpose())
    };

    let mut out = principal(&posterior, &unmeasured);
    for i in 0..unmeasured.len() {
        out[(i, i)] += sigma2;
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Kalman gain rebuilt from `V = (Φ_SS + I)⁻¹`, the inverse maintained by
/// greedy selection: `K = (b² M + C_η) Sᵀ V / σ²`, columns in the order
/// `selection` was chosen.
pub fn gain_from_selection_inverse(
    prev_m: &DMatrix<f64>,
    params: &ModelParams,
    selection: &[usize],
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::ZeroMeasurementNoise);
    }
    if v.shape() != (selection.len(), selection.len()) {
        return Err(Error::Dimension("V does not match the selection size".into()));
    }
    let prior = prior_covariance(prev_m, params);
    Ok(select_cols(&prior, selection) * v / params.sigma2)
}

/// One full slot: measurement update (or time update when nothing is
/// measured) followed by the kriging prediction.
pub fn kkf_slot(
    state: &FilterState,
    params: &ModelParams,
    selection: &[usize],
    y_s: &DVector<f64>,
) -> Result<(FilterState, PredictionResult)> {
    let step = kf_step(state, params, selection, y_s)?;
    let prediction = kkf_predict(&step.state, &state.m, params, selection, y_s, step.gain)?;
    Ok((step.state, prediction))
}

#[derive(Debug, Clone)]
pub struct SlotPrediction {
    /// Slot index within the trace.
    pub slot: usize,
    pub measured: Vec<usize>,
    pub prediction: PredictionResult,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub slots: Vec<SlotPrediction>,
    pub final_state: FilterState,
}

/// Runs the filter over every slot of `trace`, using the trace's own
/// selection masks.
pub fn run_filter(network: &Network, params: &ModelParams, trace: &DelayTrace, initial: FilterState) -> Result<FilterRun> {
    let p = network.path_count();
    if params.dim() != p || trace.path_count() != p || initial.dim() != p {
        return Err(Error::Dimension(format!(
            "network has {p} paths; params {}, trace {}, initial state {}",
            params.dim(),
            trace.path_count(),
            initial.dim()
        )));
    }
    let mut state = initial;
    let mut slots = Vec::with_capacity(trace.horizon());
    for t in 0..trace.horizon() {
        let selection = trace.selection(t);
        let y_s = trace.measured_values(t);
        let (next, prediction) = kkf_slot(&state, params, selection, &y_s).map_err(|e| e.at_slot(t))?;
        slots.push(SlotPrediction {
            slot: t,
            measured: selection.to_vec(),
            prediction,
        });
        state = next;
    }
    Ok(FilterRun {
        slots,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{simulate_trace, SimulationConfig, SlotSelector};
    use crate::linalg::{min_eigenvalue, selection_matrix};
    use crate::topology::Gramian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose()) * scale
    }

    fn random_params(rng: &mut ChaCha8Rng, p: usize, b: f64) -> ModelParams {
        let c_nu = random_psd(rng, p, 0.5);
        let c_eta = random_psd(rng, p, 0.3) + DMatrix::identity(p, p) * 0.05;
        ModelParams::new(c_nu, c_eta, rng.random_range(0.05..0.5), b, 0.0).unwrap()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn full_information_limit_tracks_measurements() {
        let p = 3;
        let params = ModelParams::new(DMatrix::zeros(p, p), DMatrix::zeros(p, p), 1e-6, 1.0, 0.0).unwrap();
        let state = FilterState::new(DVector::zeros(p), DMatrix::identity(p, p) * 1e2).unwrap();
        let y = DVector::from_vec(vec![3.0, -1.5, 12.25]);
        let step = kf_step(&state, &params, &[0, 1, 2], &y).unwrap();
        assert!((step.state.chi_hat - y).amax() < 1e-6);
    }

    #[test]
    fn scalar_filter_matches_hand_formulas() {
        let (c_nu, c_eta, s2) = (0.7, 0.2, 0.1);
        let params = ModelParams::new(
            DMatrix::from_element(1, 1, c_nu),
            DMatrix::from_element(1, 1, c_eta),
            s2,
            1.0,
            0.0,
        )
        .unwrap();
        let mut state = FilterState::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let (mut chi, mut m) = (1.0_f64, 2.0_f64);
        for y in [1.3, 0.4, 2.2, 1.9] {
            let prior = m + c_eta;
            let k = prior / (prior + c_nu + s2);
            chi += k * (y - chi);
            m = (1.0 - k) * prior;
            state = kf_step(&state, &params, &[0], &DVector::from_element(1, y)).unwrap().state;
            assert!((state.chi_hat[0] - chi).abs() < 1e-14);
            assert!((state.m[(0, 0)] - m).abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_matches_information_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let p = 2 + trial % 5;
            let b = if trial % 2 == 0 { 1.0 } else { 0.85 };
            let params = random_params(&mut rng, p, b);
            let m0 = random_psd(&mut rng, p, 0.4);
            let state = FilterState::new(DVector::zeros(p), m0.clone()).unwrap();
            let selection: Vec<usize> = (0..p).filter(|_| rng.random_bool(0.6)).collect();
            if selection.is_empty() {
                continue;
            }
            let y = DVector::from_fn(selection.len(), |_, _| rng.random_range(-1.0..1.0));
            let step = kf_step(&state, &params, &selection, &y).unwrap();

            let prior = &m0 * (b * b) + &params.c_eta;
            let s = selection_matrix(p, &selection);
            let r = &s * &params.c_nu * s.transpose() + DMatrix::identity(selection.len(), selection.len()) * params.sigma2;
            let info = prior.clone().try_inverse().unwrap() + s.transpose() * r.try_inverse().unwrap() * &s;
            let m_info = info.try_inverse().unwrap();
            assert!(rel_err(&step.state.m, &m_info) < 1e-8, "trial {trial}");
        }
    }

    #[test]
    fn predict_only_examples() {
        let p = 2;
        let params = ModelParams::new(DMatrix::zeros(p, p), DMatrix::zeros(p, p), 0.1, 1.0, 0.0).unwrap();
        let state = FilterState::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(p, p)).unwrap();
        let next = predict_only(&state, &params);
        assert_eq!(next.chi_hat, state.chi_hat);
        assert_eq!(next.m, state.m);
        assert_eq!(next.slot, 1);

        let damped = ModelParams::new(DMatrix::zeros(p, p), DMatrix::identity(p, p), 0.1, 0.5, 0.0).unwrap();
        let zero = FilterState::new(DVector::from_vec(vec![4.0, -2.0]), DMatrix::zeros(p, p)).unwrap();
        let next = predict_only(&zero, &damped);
        assert_eq!(next.m, DMatrix::identity(p, p));
        assert_eq!(next.chi_hat, DVector::from_vec(vec![2.0, -1.0]));
    }

    #[test]
    fn multi_step_prediction_is_the_trend() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 4, 1.0);
        let state = FilterState::new(DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), DMatrix::identity(4, 4)).unwrap();
        let mut s = state.clone();
        for _ in 0..5 {
            s = predict_only(&s, &params);
        }
        assert_eq!(s.chi_hat, state.chi_hat);
        let expected_m = &state.m + &params.c_eta * 5.0;
        assert!(rel_err(&s.m, &expected_m) < 1e-12);
    }

    #[test]
    fn zero_spatial_covariance_predicts_trend() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = random_params(&mut rng, 4, 1.0);
        params.c_nu = DMatrix::zeros(4, 4);
        let state = FilterState::new(DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), DMatrix::identity(4, 4)).unwrap();
        let y = DVector::from_vec(vec![5.0, -3.0]);
        let (next, pred) = kkf_slot(&state, &params, &[1, 3], &y).unwrap();
        assert_eq!(pred.unmeasured, vec![0, 2]);
        assert_eq!(pred.predicted, DVector::from_vec(vec![next.chi_hat[0], next.chi_hat[2]]));
    }

    #[test]
    fn all_measured_predicts_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&mut rng, 3, 1.0);
        let state = FilterState::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let (_, pred) = kkf_slot(&state, &params, &[0, 1, 2], &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(pred.unmeasured.is_empty());
        assert_eq!(pred.predicted.len(), 0);
        assert_eq!(pred.error_cov.shape(), (0, 0));
    }

    #[test]
    fn error_covariance_with_nothing_measured() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = random_params(&mut rng, 4, 1.0);
        let m = random_psd(&mut rng, 4, 0.2);
        let got = error_covariance(&m, &params, &[]).unwrap();
        let expected = DMatrix::identity(4, 4) * params.sigma2 + &m + &params.c_eta + &params.c_nu;
        assert!(rel_err(&got, &expected) < 1e-14);
    }

    #[test]
    fn error_covariance_singular_prior_uses_woodbury_form() {
        // A = 0 except one path: rank-deficient but σ² > 0.
        let p = 3;
        let mut c_nu = DMatrix::zeros(p, p);
        c_nu[(0, 0)] = 1.0;
        let params = ModelParams::new(c_nu, DMatrix::zeros(p, p), 0.5, 1.0, 0.0).unwrap();
        let got = error_covariance(&DMatrix::zeros(p, p), &params, &[0]).unwrap();
        assert!(rel_err(&got, &(DMatrix::identity(2, 2) * 0.5)) < 1e-14);
    }

    #[test]
    fn zero_noise_with_degenerate_covariance_is_reported() {
        let p = 2;
        let params = ModelParams::new(DMatrix::zeros(p, p), DMatrix::zeros(p, p), 0.0, 1.0, 0.0).unwrap();
        let state = FilterState::new(DVector::zeros(p), DMatrix::zeros(p, p)).unwrap();
        let err = kf_step(&state, &params, &[0], &DVector::from_element(1, 1.0)).unwrap_err();
        assert!(matches!(err, Error::ZeroMeasurementNoise));
    }

    #[test]
    fn gain_from_inverse_matches_filter_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_params(&mut rng, 5, 1.0);
        let m = random_psd(&mut rng, 5, 0.2);
        let state = FilterState::new(DVector::zeros(5), m.clone()).unwrap();
        let selection = [3usize, 0, 4];
        let step = kf_step(&state, &params, &selection, &DVector::zeros(3)).unwrap();
        let phi = (&m + &params.c_eta + &params.c_nu) / params.sigma2;
        let v = (principal(&phi, &selection) + DMatrix::identity(3, 3)).try_inverse().unwrap();
        let k = gain_from_selection_inverse(&m, &params, &selection, &v).unwrap();
        assert!(rel_err(&k, &step.gain) < 1e-10);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = random_params(&mut rng, 3, 1.0);
        let state = FilterState::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(kf_step(&state, &params, &[0, 1], &DVector::zeros(1)).is_err());
        assert!(kf_step(&state, &params, &[0, 0], &DVector::zeros(2)).is_err());
        assert!(kf_step(&state, &params, &[7], &DVector::zeros(1)).is_err());
    }

    fn two_path_network() -> Network {
        Network::from_json_str(
            r#"{"nodes": ["a", "b", "c"],
                "links": [{"id": "ab", "from": "a", "to": "b"}, {"id": "bc", "from": "b", "to": "c"},
                          {"id": "ac", "from": "a", "to": "c"}],
                "end_nodes": ["a"],
                "paths": [{"id": "p0", "origin": "a", "links": ["ab", "bc"]},
                          {"id": "p1", "origin": "a", "links": ["ab"]},
                          {"id": "p2", "origin": "a", "links": ["ac"]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn constant_trace_converges() {
        let net = two_path_network();
        let g = net.gramian();
        let params = ModelParams::from_gramian(1e-6, &g, DMatrix::zeros(3, 3), 1e-6, 1.0).unwrap();
        let values = DMatrix::from_element(60, 3, 25.0);
        let selection = (0..60).map(|t| vec![t % 3]).collect();
        let trace = DelayTrace::new(values, selection, (0..60).collect()).unwrap();
        let initial = FilterState::new(DVector::zeros(3), DMatrix::identity(3, 3) * 100.0).unwrap();
        let run = run_filter(&net, &params, &trace, initial).unwrap();
        let err = run.slots[50].prediction.predicted.iter().map(|v| (v - 25.0).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max abs error at slot 50: {err}");
    }

    #[test]
    fn empty_selection_decays_initial_trend() {
        let net = two_path_network();
        let g = net.gramian();
        let params = ModelParams::from_gramian(0.2, &g, DMatrix::identity(3, 3) * 0.1, 0.01, 0.9).unwrap();
        let trace = DelayTrace::new(DMatrix::from_element(6, 3, 1.0), vec![vec![]; 6], (0..6).collect()).unwrap();
        let chi0 = DVector::from_vec(vec![10.0, 20.0, 30.0]);
        let run = run_filter(&net, &params, &trace, FilterState::new(chi0.clone(), DMatrix::identity(3, 3)).unwrap())
            .unwrap();
        for (t, slot) in run.slots.iter().enumerate() {
            let expected = &chi0 * 0.9f64.powi(t as i32 + 1);
            assert!((&slot.prediction.predicted - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn run_is_reproducible_and_psd() {
        let net = two_path_network();
        let g = net.gramian();
        let params = ModelParams::from_gramian(0.5, &g, DMatrix::identity(3, 3) * 0.2, 0.05, 1.0).unwrap();
        let cfg = SimulationConfig::new(200, 4).selector(SlotSelector::Random { count: 1 });
        let trace = simulate_trace(&params, &cfg).unwrap();
        let init = FilterState::diffuse(&params, &trace);
        let a = run_filter(&net, &params, &trace, init.clone()).unwrap();
        let b = run_filter(&net, &params, &trace, init).unwrap();
        assert_eq!(a.final_state, b.final_state);
        for (x, y) in a.slots.iter().zip(&b.slots) {
            assert_eq!(x.prediction, y.prediction);
            let e = &x.prediction.error_cov;
            assert!(min_eigenvalue(e) >= -1e-10 * e.trace());
            for i in 0..e.nrows() {
                assert!(e[(i, i)] >= params.sigma2 - 1e-12);
            }
        }
    }

    #[test]
    fn damped_covariance_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = random_params(&mut rng, 5, 0.9);
        let mut state = FilterState::new(DVector::zeros(5), DMatrix::identity(5, 5) * 50.0).unwrap();
        let selection = [0usize, 2];
        let mut converged_at = None;
        for t in 1..500 {
            let next = kf_step(&state, &params, &selection, &DVector::zeros(2)).unwrap().state;
            let diff = (&next.m - &state.m).norm();
            state = next;
            if diff < 1e-10 {
                converged_at = Some(t);
                break;
            }
        }
        assert!(converged_at.is_some());
    }

    #[test]
    fn diffuse_initialisation() {
        let g = Gramian::from_counts(DMatrix::from_row_slice(2, 2, &[2, 1, 1, 2])).unwrap();
        let params = ModelParams::from_gramian(1.0, &g, DMatrix::identity(2, 2), 0.1, 1.0).unwrap();
        let trace = DelayTrace::new(
            DMatrix::from_row_slice(2, 2, &[4.0, 8.0, 0.0, 0.0]),
            vec![vec![0, 1], vec![]],
            vec![1, 2],
        )
        .unwrap();
        let s = FilterState::diffuse(&params, &trace);
        assert_eq!(s.chi_hat, DVector::from_vec(vec![6.0, 6.0]));
        assert_eq!(s.m, DMatrix::identity(2, 2) * 20.0);
    }
}
