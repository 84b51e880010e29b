//! Network kriging: a per-slot GLS trend fit followed by kriging of the
//! residual, with no state carried between slots.

use nalgebra::{DMatrix, DVector};

use crate::covmodel::{DelayTrace, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{check_psd, complement, principal, select_entries, select_rows, submatrix, SymmetricPsd};

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingConfig {
    pub c_nu: DMatrix<f64>,
    pub sigma2: f64,
    /// `P × K` trend design; one all-ones column by default.
    pub trend_basis: DMatrix<f64>,
}

impl KrigingConfig {
    pub fn new(c_nu: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let p = c_nu.nrows();
        Self::with_basis(c_nu, sigma2, DMatrix::from_element(p, 1, 1.0))
    }

    pub fn with_basis(c_nu: DMatrix<f64>, sigma2: f64, trend_basis: DMatrix<f64>) -> Result<Self> {
        let p = c_nu.nrows();
        if !c_nu.is_square() || trend_basis.nrows() != p || trend_basis.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "c_nu is {:?}, trend basis is {:?}",
                c_nu.shape(),
                trend_basis.shape()
            )));
        }
        check_psd(&c_nu, 1e-10, "c_nu")?;
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        Ok(Self {
            c_nu,
            sigma2,
            trend_basis,
        })
    }

    pub fn from_params(params: &ModelParams) -> Result<Self> {
        Self::new(params.c_nu.clone(), params.sigma2)
    }

    pub fn dim(&self) -> usize {
        self.c_nu.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingPrediction {
    /// Sorted ids of the unmeasured paths.
    pub unmeasured: Vec<usize>,
    pub predicted: DVector<f64>,
    /// GLS trend coefficients.
    pub beta: DVector<f64>,
}

/// Predict the unmeasured paths of one slot from `y_s` measured on
/// `selection`.
pub fn network_kriging_predict(config: &KrigingConfig, selection: &[usize], y_s: &DVector<f64>) -> Result<KrigingPrediction> {
    let p = config.dim();
    let k = config.trend_basis.ncols();
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
    let unmeasured = complement(p, selection);
    if selection.len() < k {
        return Err(Error::RankDeficient);
    }

    let n = selection.len();
    let sigma = principal(&config.c_nu, selection) + DMatrix::identity(n, n) * config.sigma2;
    let sigma = SymmetricPsd::new(sigma, "measured covariance").map_err(|e| match e {
        Error::NotPositiveDefinite { .. } if config.sigma2 == 0.0 => Error::ZeroMeasurementNoise,
        other => other,
    })?;
    let basis = select_rows(&config.trend_basis, selection);
    let whitened = sigma.solve(&basis);
    let normal = basis.transpose() * &whitened;
    let normal = SymmetricPsd::new(normal, "trend normal matrix").map_err(|_| Error::RankDeficient)?;
    let beta = normal.solve_vec(&(whitened.transpose() * y_s));

    let residual = y_s - &basis * &beta;
    let trend = select_rows(&config.trend_basis, &unmeasured) * &beta;
    let cross = submatrix(&config.c_nu, &unmeasured, selection);
    let predicted = trend + cross * sigma.solve_vec(&residual);
    Ok(KrigingPrediction {
        unmeasured,
        predicted,
        beta,
    })
}

/// Runs the predictor over every slot of a trace.
pub fn run_network_kriging(config: &KrigingConfig, trace: &DelayTrace) -> Result<Vec<KrigingPrediction>> {
    if trace.path_count() != config.dim() {
        return Err(Error::Dimension(format!(
            "trace has {} paths, config has {}",
            trace.path_count(),
            config.dim()
        )));
    }
    (0..trace.horizon())
        .map(|t| {
            let selection = trace.selection(t);
            let y_s = select_entries(&trace.delays(t), selection);
            network_kriging_predict(config, selection, &y_s).map_err(|e| e.at_slot(t))
        })
        .collect()
}
