use nalgebra::{DMatrix, DVector};
use netcart::covmodel::{simulate_trace, DelayTrace, ModelParams, SimulationConfig, SlotSelector};
use netcart::estimation::{finalize_c_nu, training_phase, TrainingAccumulator, TrainingConfig, TrainingInit};
use netcart::kkf::{kf_step, FilterState};
use netcart::topology::{random_network, Gramian};

const P: usize = 10;

fn setup() -> (Gramian, ModelParams) {
    let g = random_network(5, 6, P, 1).unwrap().gramian();
    let params = ModelParams::from_gramian(2.0, &g, DMatrix::identity(P, P) * 0.5, 1e-3, 1.0).unwrap();
    (g, params)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c_eta_diag_error(c_eta: &DMatrix<f64>) -> f64 {
    (0..P).map(|i| (c_eta[(i, i)] - 0.5).abs() / 0.5).sum::<f64>() / P as f64
}

#[test]
fn recovers_c_eta_with_full_selection() {
    let (g, params) = setup();
    let errs: Vec<f64> = (0..5)
        .map(|seed| {
            let trace = simulate_trace(&params, &SimulationConfig::new(5000, seed)).unwrap();
            let est = training_phase(&g, &trace, &TrainingConfig { t_l: 5000, ..Default::default() }).unwrap();
            c_eta_diag_error(&est.c_eta_hat)
        })
        .collect();
    assert!(median(errs.clone()) < 0.15, "{errs:?}");
}

#[test]
fn recovers_gramian_covariance_entries() {
    let (g, params) = setup();
    let trace = simulate_trace(
        &params,
        &SimulationConfig::new(5000, 4).selector(SlotSelector::Random { count: 6 }),
    )
    .unwrap();
    let est = training_phase(&g, &trace, &TrainingConfig { t_l: 5000, ..Default::default() }).unwrap();
    let truth = &params.c_nu;
    let mut checked = 0;
    for i in 0..P {
        for j in 0..P {
            // Diagonal and strongly shared pairs; every pair here is co-measured
            // far more than 500 times.
            if truth[(i, j)] >= 4.0 {
                let rel = (est.c_nu_hat[(i, j)] - truth[(i, j)]).abs() / truth[(i, j)];
                assert!(rel < 0.2, "entry ({i},{j}): {} vs {}", est.c_nu_hat[(i, j)], truth[(i, j)]);
                checked += 1;
            }
        }
    }
    assert!(checked >= P);
}

#[test]
fn error_shrinks_with_training_length() {
    let (g, params) = setup();
    let lengths = [500usize, 2000, 8000];
    let medians: Vec<f64> = lengths
        .iter()
        .map(|&t_l| {
            median(
                (0..20u64)
                    .map(|seed| {
                        let trace = simulate_trace(&params, &SimulationConfig::new(t_l, 100 + seed)).unwrap();
                        let cfg = TrainingConfig {
                            t_l,
                            burn_in: (t_l / 10).min(500),
                            ..Default::default()
                        };
                        let est = training_phase(&g, &trace, &cfg).unwrap();
                        (est.gamma_hat - 2.0).abs() / 2.0 + c_eta_diag_error(&est.c_eta_hat)
                    })
                    .collect(),
            )
        })
        .collect();
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

/// Runs the filter with the true parameters over a fully measured trace.
fn innovations(params: &ModelParams, trace: &DelayTrace) -> (Vec<DVector<f64>>, TrainingAccumulator) {
    let mut state = FilterState::new(DVector::zeros(P), DMatrix::identity(P, P)).unwrap();
    let mut acc = TrainingAccumulator::new(P, 1.0);
    let mut out = Vec::new();
    for t in 0..trace.horizon() {
        let step = kf_step(&state, params, trace.selection(t), &trace.measured_values(t)).unwrap();
        if t >= 100 {
            acc.observe(&state, &step, trace.selection(t)).unwrap();
            out.push(step.innovation.clone());
        }
        state = step.state;
    }
    (out, acc)
}

#[test]
fn innovations_are_white() {
    let (_, params) = setup();
    let trace = simulate_trace(&params, &SimulationConfig::new(5100, 21)).unwrap();
    let (innov, _) = innovations(&params, &trace);
    for p in 0..P {
        let x: Vec<f64> = innov.iter().map(|v| v[p]).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let lag1: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((lag1 / var).abs() < 0.05, "path {p}: {}", lag1 / var);
    }
}

#[test]
fn innovation_moment_identity() {
    // With the true C_η, the innovation co-moments minus the filter terms
    // return the true C_ν.
    let (_, params) = setup();
    let trace = simulate_trace(&params, &SimulationConfig::new(20_100, 22)).unwrap();
    let (_, acc) = innovations(&params, &trace);
    let c_nu = finalize_c_nu(&acc, &params.c_eta, params.sigma2, &DMatrix::zeros(P, P)).unwrap();
    let scale = params.c_nu.diagonal().max();
    assert!((&c_nu - &params.c_nu).amax() < 0.1 * scale, "{}", (&c_nu - &params.c_nu).amax());
}

#[test]
fn gramian_start_runs() {
    let (g, params) = setup();
    let trace = simulate_trace(&params, &SimulationConfig::new(1000, 5)).unwrap();
    let cfg = TrainingConfig {
        init: TrainingInit::Gramian { gamma0: 1.0 },
        refine_passes: 2,
        ..Default::default()
    };
    let est = training_phase(&g, &trace, &cfg).unwrap();
    assert!(est.gamma_hat.is_finite() && est.gamma_hat >= 0.0);
    assert_eq!(est.c_eta_hat, est.c_eta_hat.transpose());
}

#[test]
fn short_trace_is_rejected() {
    let (g, params) = setup();
    let trace = simulate_trace(&params, &SimulationConfig::new(600, 5)).unwrap();
    assert!(training_phase(&g, &trace, &TrainingConfig::default()).is_err());
    let cfg = TrainingConfig { t_l: 502, ..Default::default() };
    assert!(training_phase(&g, &trace, &cfg).is_err());
}
