//! Experiment pipeline: training, per-slot selection and prediction, and
//! the normalized mean-square prediction error.
//!
//! Slots `0..t_l` of the trace are training slots; slots `t_l..T` are
//! evaluation slots. Random selections are drawn from the seed up front, so
//! two runs that differ only in the predictor see the same measured paths.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{network_kriging_predict, KrigingConfig};
use crate::covmodel::{DelayTrace, ModelParams, SlotSelector};
use crate::error::{Error, Result};
use crate::estimation::{training_phase, EstimatedParams, TrainingConfig, TrainingInit};
use crate::kkf::{kf_step, kriged_mean, FilterState};
use crate::linalg::select_entries;
use crate::selection::{greedy_select, Constraint, GreedyOptions, SelectionProblem};
use crate::topology::Network;

const TRAINING_STREAM: u64 = 2;
const EVALUATION_STREAM: u64 = 3;
const RETRAINING_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    Kkf,
    NetworkKriging,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Kkf => "kkf",
            Predictor::NetworkKriging => "network-kriging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Policy {
    /// `s` uniformly random paths per slot.
    Random,
    /// Greedy D-optimal choice of `s` paths per slot.
    Greedy,
    /// Every path of `nodes` greedily chosen end nodes.
    NodeBudget { nodes: usize },
    /// At most `cap` paths per end node, greedily.
    Matroid { cap: usize },
    /// The same paths every slot.
    Fixed { paths: Vec<usize> },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Greedy => "greedy",
            Policy::NodeBudget { .. } => "node-budget",
            Policy::Matroid { .. } => "matroid",
            Policy::Fixed { .. } => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub predictor: Predictor,
    pub policy: Policy,
    /// Paths measured per evaluation slot (random and greedy policies).
    pub s: usize,
    pub t_l: usize,
    pub burn_in: usize,
    /// Paths measured per training slot; `min(50, ⌈0.7 P⌉)` when unset.
    pub train_paths: Option<usize>,
    pub seed: u64,
    pub sigma2: f64,
    pub damping_b: f64,
    /// Skip training and use these parameters.
    pub known_params: Option<ModelParams>,
    /// Re-estimate parameters every this many evaluation slots from the
    /// preceding `t_l` slots.
    pub retrain_every: Option<usize>,
    pub training_init: TrainingInit,
    pub lazy: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            predictor: Predictor::Kkf,
            policy: Policy::Random,
            s: 10,
            t_l: 1000,
            burn_in: 500,
            train_paths: None,
            seed: 0,
            sigma2: 1e-3,
            damping_b: 1.0,
            known_params: None,
            retrain_every: None,
            training_init: TrainingInit::Variogram,
            lazy: false,
        }
    }
}

impl ExperimentConfig {
    fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            t_l: self.t_l,
            burn_in: self.burn_in.min(self.t_l.saturating_sub(4)),
            sigma2: self.sigma2,
            damping_b: self.damping_b,
            init: self.training_init.clone(),
            ..TrainingConfig::default()
        }
    }
}

/// Default training selection size.
pub fn default_train_paths(p: usize) -> usize {
    50.min((7 * p).div_ceil(10)).max(1)
}

/// One (slot, path) outcome. Measured rows carry the observed value as
/// `predicted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub t: i64,
    pub path_id: usize,
    pub predicted: f64,
    #[serde(rename = "true")]
    pub true_value: f64,
    pub measured_flag: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub predictor: String,
    pub policy: String,
    pub seed: u64,
    pub paths: usize,
    pub s: usize,
    pub t_l: usize,
    pub t_p: usize,
    pub nmspe: f64,
    pub total_squared_error: f64,
    pub predicted_entries: usize,
    /// Squared error summed over the unmeasured paths of each evaluation slot.
    pub slot_squared_errors: Vec<f64>,
    /// `(true, predicted)` for every unmeasured (slot, path).
    pub scatter: Vec<(f64, f64)>,
    pub gamma: f64,
    pub retrainings: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvaluationReport,
    pub rows: Vec<PredictionRow>,
    pub params: ModelParams,
    pub estimate: Option<EstimatedParams>,
}

/// `total / ((t_p − t_l)(P − S))`.
pub fn nmspe(total_squared_error: f64, t_p: usize, t_l: usize, p: usize, s: usize) -> Result<f64> {
    let slots = t_p.saturating_sub(t_l);
    let unmeasured = p.saturating_sub(s);
    if slots == 0 || unmeasured == 0 {
        return Err(Error::Degenerate(format!(
            "no unmeasured predictions ({slots} evaluation slots, {unmeasured} unmeasured paths)"
        )));
    }
    Ok(total_squared_error / (slots * unmeasured) as f64)
}

/// Mean squared error over the unmeasured rows.
pub fn nmspe_from_rows(rows: &[PredictionRow]) -> Result<f64> {
    let (sum, n) = rows
        .iter()
        .filter(|r| r.measured_flag == 0)
        .fold((0.0, 0usize), |(s, n), r| (s + (r.predicted - r.true_value).powi(2), n + 1));
    if n == 0 {
        return Err(Error::Degenerate("no unmeasured predictions".into()));
    }
    Ok(sum / n as f64)
}

fn random_selections(p: usize, count: usize, slots: usize, seed: u64, stream: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let selector = SlotSelector::Random { count };
    (0..slots).map(|_| selector.pick(p, &mut rng)).collect()
}

/// Per-path mean of the measured training values, used to centre a damped
/// model. Paths never measured get the overall mean.
fn training_means(trace: &DelayTrace) -> DVector<f64> {
    let p = trace.path_count();
    let mut sum = DVector::<f64>::zeros(p);
    let mut count = vec![0usize; p];
    for t in 0..trace.horizon() {
        for (i, v) in trace.measurements(t) {
            sum[i] += v;
            count[i] += 1;
        }
    }
    let total: usize = count.iter().sum();
    let overall = if total > 0 { sum.sum() / total as f64 } else { 0.0 };
    DVector::from_fn(p, |i, _| if count[i] > 0 { sum[i] / count[i] as f64 } else { overall })
}

fn centre(trace: &DelayTrace, offset: &DVector<f64>) -> Result<DelayTrace> {
    let mut values = trace.values().clone();
    for mut row in values.row_iter_mut() {
        row -= offset.transpose();
    }
    DelayTrace::new(values, trace.selections().to_vec(), trace.timestamps().to_vec())
}

/// Estimates from a training window whose selections are already set.
fn estimate_params(
    network: &Network,
    training: &DelayTrace,
    config: &ExperimentConfig,
) -> Result<(ModelParams, EstimatedParams)> {
    let gramian = network.gramian();
    let estimate = training_phase(&gramian, training, &config.training_config())?;
    let params = estimate.into_model_params(&gramian, config.sigma2, config.damping_b)?;
    Ok((params, estimate))
}

/// Stateful per-slot predictor.
enum Engine {
    Kkf { state: FilterState, offset: DVector<f64> },
    Kriging(KrigingConfig),
}

impl Engine {
    fn predict(&mut self, params: &ModelParams, selection: &[usize], y_s: &DVector<f64>) -> Result<(Vec<usize>, DVector<f64>)> {
        match self {
            Engine::Kkf { state, offset } => {
                let centred = y_s - select_entries(offset, selection);
                let step = kf_step(state, params, selection, &centred)?;
                let (unmeasured, predicted) = kriged_mean(&step.state, params, selection, &centred)?;
                *state = step.state;
                let predicted = predicted + select_entries(offset, &unmeasured);
                Ok((unmeasured, predicted))
            }
            Engine::Kriging(config) => {
                let out = network_kriging_predict(config, selection, y_s)?;
                Ok((out.unmeasured, out.predicted))
            }
        }
    }

    /// `Φ` for greedy selection in the coming slot.
    fn phi(&self, params: &ModelParams) -> Result<DMatrix<f64>> {
        if !(params.sigma2 > 0.0) {
            return Err(Error::ZeroMeasurementNoise);
        }
        Ok(match self {
            Engine::Kkf { state, .. } => {
                let b2 = params.damping_b * params.damping_b;
                (&state.m * b2 + params.noise_sum()) / params.sigma2
            }
            Engine::Kriging(config) => &config.c_nu / params.sigma2,
        })
    }

    fn refresh(&mut self, params: &ModelParams) -> Result<()> {
        if let Engine::Kriging(config) = self {
            *config = KrigingConfig::from_params(params)?;
        }
        Ok(())
    }
}

fn choose(
    policy: &Policy,
    engine: &Engine,
    params: &ModelParams,
    network: &Network,
    s: usize,
    lazy: bool,
) -> Result<Vec<usize>> {
    let constraint = match policy {
        Policy::Greedy => Constraint::Cardinality(s),
        Policy::NodeBudget { nodes } => Constraint::NodeBudget {
            nodes: *nodes,
            groups: network.origin_groups(),
        },
        Policy::Matroid { cap } => {
            let groups = network.origin_groups();
            let caps = vec![*cap; groups.len()];
            Constraint::PartitionMatroid { groups, caps }
        }
        Policy::Random | Policy::Fixed { .. } => unreachable!("not a greedy policy"),
    };
    let problem = SelectionProblem::new(engine.phi(params)?, constraint)?;
    Ok(greedy_select(&problem, GreedyOptions { lazy })?.sorted())
}

/// Train (unless parameters are given), warm the predictor up on the
/// training slots, then predict every evaluation slot.
pub fn run_experiment(network: &Network, trace: &DelayTrace, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let p = network.path_count();
    let t_p = trace.horizon();
    if trace.path_count() != p {
        return Err(Error::Dimension(format!(
            "topology has {p} paths, trace has {}",
            trace.path_count()
        )));
    }
    if config.t_l >= t_p {
        return Err(Error::InsufficientSamples {
            needed: config.t_l + 1,
            got: t_p,
        });
    }
    let nominal_s = match &config.policy {
        Policy::Random | Policy::Greedy => config.s,
        Policy::Fixed { paths } => paths.len(),
        Policy::NodeBudget { .. } | Policy::Matroid { .. } => 0,
    };
    if nominal_s >= p {
        return Err(Error::Degenerate(format!("measuring {nominal_s} of {p} paths leaves nothing to predict")));
    }
    if let Policy::Fixed { paths } = &config.policy {
        if let Some(&bad) = paths.iter().find(|&&i| i >= p) {
            return Err(Error::InvalidParameter(format!("fixed path {bad} out of range")));
        }
    }

    let train_paths = config.train_paths.unwrap_or_else(|| default_train_paths(p)).min(p);
    let train_sel = random_selections(p, train_paths, config.t_l, config.seed, TRAINING_STREAM)?;
    let training = trace.window(0, config.t_l)?.with_selection(train_sel)?;
    let damping_b = config.known_params.as_ref().map_or(config.damping_b, |k| k.damping_b);
    let offset = if damping_b < 1.0 {
        training_means(&training)
    } else {
        DVector::zeros(p)
    };
    let centred = centre(&training, &offset)?;
    let (mut params, estimate) = match &config.known_params {
        Some(params) => {
            if params.dim() != p {
                return Err(Error::Dimension("known parameters do not match the topology".into()));
            }
            (params.clone(), None)
        }
        None => {
            let (params, estimate) = estimate_params(network, &centred, config)?;
            (params, Some(estimate))
        }
    };

    let eval_slots = t_p - config.t_l;
    let random_eval = match config.policy {
        Policy::Random => Some(random_selections(p, config.s, eval_slots, config.seed, EVALUATION_STREAM)?),
        _ => None,
    };

    let mut engine = match config.predictor {
        Predictor::Kkf => {
            let mut state = FilterState::diffuse(&params, &centred);
            for t in 0..config.t_l {
                let selection = centred.selection(t);
                let y_s = centred.measured_values(t);
                state = kf_step(&state, &params, selection, &y_s).map_err(|e| e.at_slot(t))?.state;
            }
            Engine::Kkf {
                state,
                offset: offset.clone(),
            }
        }
        Predictor::NetworkKriging => Engine::Kriging(KrigingConfig::from_params(&params)?),
    };

    let static_choice = match (&config.policy, &engine) {
        (Policy::Fixed { paths }, _) => {
            let mut paths = paths.clone();
            paths.sort_unstable();
            paths.dedup();
            Some(paths)
        }
        (Policy::Greedy | Policy::NodeBudget { .. } | Policy::Matroid { .. }, Engine::Kriging(_))
            if config.retrain_every.is_none() =>
        {
            Some(choose(&config.policy, &engine, &params, network, config.s, config.lazy)?)
        }
        _ => None,
    };

    let mut rows = Vec::with_capacity(eval_slots * p);
    let mut slot_errors = Vec::with_capacity(eval_slots);
    let mut scatter = Vec::new();
    let mut predicted_entries = 0usize;
    let mut retrainings = 0usize;
    for (k, t) in (config.t_l..t_p).enumerate() {
        if let (Some(every), None) = (config.retrain_every, &config.known_params) {
            if every > 0 && k > 0 && k % every == 0 {
                let start = t - config.t_l;
                let seed = config.seed.wrapping_add(k as u64);
                let sel = random_selections(p, train_paths, config.t_l, seed, RETRAINING_STREAM)?;
                let window = centre(&trace.window(start, config.t_l)?.with_selection(sel)?, &offset)?;
                let (fresh, _) = estimate_params(network, &window, config).map_err(|e| e.at_slot(t))?;
                params = fresh;
                engine.refresh(&params)?;
                retrainings += 1;
            }
        }

        let selection = match (&random_eval, &static_choice) {
            (Some(sel), _) => sel[k].clone(),
            (None, Some(sel)) => sel.clone(),
            (None, None) => choose(&config.policy, &engine, &params, network, config.s, config.lazy)
                .map_err(|e| e.at_slot(t))?,
        };
        let truth = trace.delays(t);
        let y_s = select_entries(&truth, &selection);
        let (unmeasured, predicted) = engine.predict(&params, &selection, &y_s).map_err(|e| e.at_slot(t))?;

        let mut out = truth.clone();
        let mut measured = vec![1u8; p];
        let mut slot_error = 0.0;
        for (i, &path) in unmeasured.iter().enumerate() {
            out[path] = predicted[i];
            measured[path] = 0;
            slot_error += (predicted[i] - truth[path]).powi(2);
            scatter.push((truth[path], predicted[i]));
        }
        predicted_entries += unmeasured.len();
        slot_errors.push(slot_error);
        let stamp = trace.timestamps()[t];
        for path in 0..p {
            rows.push(PredictionRow {
                t: stamp,
                path_id: path,
                predicted: out[path],
                true_value: truth[path],
                measured_flag: measured[path],
            });
        }
    }

    let total: f64 = slot_errors.iter().sum();
    if predicted_entries == 0 {
        return Err(Error::Degenerate("every path was measured in every evaluation slot".into()));
    }
    // Equals (t_P − t_L)(P − S) whenever the per-slot count is fixed.
    let nmspe = total / predicted_entries as f64;
    let s_reported = match &config.policy {
        Policy::Random | Policy::Greedy => config.s,
        _ => p - predicted_entries / eval_slots,
    };
    let report = EvaluationReport {
        predictor: config.predictor.name().to_string(),
        policy: config.policy.name().to_string(),
        seed: config.seed,
        paths: p,
        s: s_reported,
        t_l: config.t_l,
        t_p,
        nmspe,
        total_squared_error: total,
        predicted_entries,
        slot_squared_errors: slot_errors,
        scatter,
        gamma: params.gamma,
        retrainings,
    };
    Ok(ExperimentOutcome {
        report,
        rows,
        params,
        estimate,
    })
}

pub fn write_rows<W: Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(reader: R) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One entry of an S sweep. Failed runs keep their error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub s: usize,
    pub nmspe: Option<f64>,
    pub error: Option<String>,
}

/// Runs the experiment once per value of `s`, all with the same seed.
pub fn sweep_s(network: &Network, trace: &DelayTrace, config: &ExperimentConfig, s_values: &[usize]) -> Vec<SweepEntry> {
    s_values
        .iter()
        .map(|&s| {
            let cfg = ExperimentConfig { s, ..config.clone() };
            match run_experiment(network, trace, &cfg) {
                Ok(out) => SweepEntry {
                    s,
                    nmspe: Some(out.report.nmspe),
                    error: None,
                },
                Err(e) => SweepEntry {
                    s,
                    nmspe: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Paths × slots delay map with rows ordered by true delay in the first
/// slot (ties by path id).
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMap {
    pub path_ids: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub true_values: DMatrix<f64>,
    pub predicted: DMatrix<f64>,
}

/// Builds the map from prediction rows. With `unmeasured_only`, keeps the
/// paths that were never measured in the window.
pub fn export_delay_map(rows: &[PredictionRow], unmeasured_only: bool) -> Result<DelayMap> {
    let mut timestamps: Vec<i64> = Vec::new();
    for r in rows {
        if timestamps.last() != Some(&r.t) {
            if timestamps.contains(&r.t) {
                return Err(Error::Trace(format!("rows for t={} are not contiguous", r.t)));
            }
            timestamps.push(r.t);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Trace("no prediction rows".into()));
    }
    let p = rows.iter().map(|r| r.path_id + 1).max().unwrap_or(0);
    let n = timestamps.len();
    if rows.len() != n * p {
        return Err(Error::Trace(format!("expected {} rows for {n} slots and {p} paths, got {}", n * p, rows.len())));
    }
    let mut true_values = DMatrix::zeros(p, n);
    let mut predicted = DMatrix::zeros(p, n);
    let mut ever_measured = vec![false; p];
    let mut slot = 0;
    for r in rows {
        if r.t != timestamps[slot] {
            slot += 1;
        }
        true_values[(r.path_id, slot)] = r.true_value;
        predicted[(r.path_id, slot)] = r.predicted;
        ever_measured[r.path_id] |= r.measured_flag == 1;
    }
    let mut path_ids: Vec<usize> = (0..p).filter(|&i| !unmeasured_only || !ever_measured[i]).collect();
    path_ids.sort_by(|&a, &b| true_values[(a, 0)].total_cmp(&true_values[(b, 0)]).then(a.cmp(&b)));
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(path_ids.len(), n, |i, j| m[(path_ids[i], j)]);
    Ok(DelayMap {
        true_values: pick(&true_values),
        predicted: pick(&predicted),
        path_ids,
        timestamps,
    })
}

impl DelayMap {
    /// Wide CSV: `path_id` then one column per slot timestamp.
    pub fn write_csv<W: Write>(&self, matrix: &DMatrix<f64>, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["path_id".to_string()];
        header.extend(self.timestamps.iter().map(|t| t.to_string()));
        w.write_record(&header)?;
        for (i, id) in self.path_ids.iter().enumerate() {
            let mut record = vec![id.to_string()];
            record.extend(matrix.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmspe_examples() {
        assert_eq!(nmspe(0.0, 10, 5, 4, 2).unwrap(), 0.0);
        assert_eq!(nmspe(4.0, 2, 1, 2, 1).unwrap(), 4.0);
        assert!(matches!(nmspe(1.0, 10, 5, 4, 4), Err(Error::Degenerate(_))));
        assert!(matches!(nmspe(1.0, 5, 5, 4, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn default_training_size() {
        assert_eq!(default_train_paths(72), 50);
        assert_eq!(default_train_paths(10), 7);
        assert_eq!(default_train_paths(1), 1);
    }

    fn row(t: i64, path_id: usize, value: f64, measured: bool) -> PredictionRow {
        PredictionRow {
            t,
            path_id,
            predicted: value,
            true_value: value,
            measured_flag: u8::from(measured),
        }
    }

    #[test]
    fn constant_rows_give_constant_map() {
        let rows: Vec<_> = (0..4).flat_map(|t| (0..3).map(move |p| row(t, p, 5.0, p == 0))).collect();
        let map = export_delay_map(&rows, true).unwrap();
        assert_eq!(map.path_ids, vec![1, 2]);
        assert!(map.predicted.iter().all(|&v| v == 5.0));
        assert_eq!(map.timestamps, vec![0, 1, 2, 3]);
    }

    #[test]
    fn map_orders_by_first_true_delay() {
        let values = [3.0, 1.0, 3.0, 0.5];
        let rows: Vec<_> = (0..2)
            .flat_map(|t| (0..4).map(move |p| row(t, p, values[p] + t as f64, false)))
            .collect();
        let map = export_delay_map(&rows, false).unwrap();
        assert_eq!(map.path_ids, vec![3, 1, 0, 2]);
        assert_eq!(map.true_values[(0, 1)], 1.5);
        let mut out = Vec::new();
        map.write_csv(&map.true_values, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "path_id,0,1");
        assert_eq!(text.lines().nth(1).unwrap(), "3,0.5,1.5");
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let rows = vec![row(1, 0, 2.5, true), row(1, 1, -0.125, false)];
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,path_id,predicted,true,measured_flag\n"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }
}
