//! Binary Gaussian hypothesis model and the statistics derived from it.
//!
//! Under `H_l` sensor `i` observes `y_i(k) = [m_l]_i + zeta_i(k)` with
//! `Cov(zeta) = S_zeta`. Whitening by `S_zeta^{-1}(m1 - m0)` gives the
//! innovations `eta(k)`, whose mean and covariance drive every detector.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::LaplacianSpectrum;
use crate::schedule::{self, WeightSchedule};

const SYMMETRY_TOL: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{name} is not symmetric (max asymmetry {asym:e})")]
    NotSymmetric { name: &'static str, asym: f64 },
    #[error("{name} is not positive definite (smallest eigenvalue {min_eig:e})")]
    NotPositiveDefinite { name: &'static str, min_eig: f64 },
    #[error("{name} has a negative eigenvalue {min_eig:e}")]
    NotPositiveSemidefinite { name: &'static str, min_eig: f64 },
    #[error("S_zeta is numerically singular (condition estimate {0:e})")]
    IllConditioned(f64),
    #[error("signal is globally undetectable (SSNR = 0); c_mu and c_sigma are undefined")]
    GloballyUndetectable,
    #[error("matrix spec: {0}")]
    BadMatrixSpec(String),
}

/// Covariance given either as a scaled identity or full row-major rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    ScaledIdentity { scaled_identity: f64 },
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>, ModelError> {
        match self {
            MatrixSpec::ScaledIdentity { scaled_identity } => {
                Ok(DMatrix::identity(n, n) * *scaled_identity)
            }
            MatrixSpec::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(ModelError::BadMatrixSpec(format!("expected {n}x{n} rows")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
    }
}

/// Model file contents: hypothesis means plus both noise covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub s_zeta: MatrixSpec,
    pub s_v: MatrixSpec,
}

impl ModelSpec {
    pub fn build(&self) -> Result<(SensingModel, CommModel), ModelError> {
        let n = self.m0.len();
        let sensing = SensingModel::new(
            DVector::from_vec(self.m0.clone()),
            DVector::from_vec(self.m1.clone()),
            self.s_zeta.to_matrix(n)?,
        )?;
        let comm = CommModel::new(self.s_v.to_matrix(n)?)?;
        Ok((sensing, comm))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingModel {
    m0: DVector<f64>,
    m1: DVector<f64>,
    s_zeta: DMatrix<f64>,
}

impl SensingModel {
    pub fn new(m0: DVector<f64>, m1: DVector<f64>, s_zeta: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = m0.len();
        if m1.len() != n || s_zeta.nrows() != n || s_zeta.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "m0 has {n} entries, m1 {}, S_zeta is {}x{}",
                m1.len(),
                s_zeta.nrows(),
                s_zeta.ncols()
            )));
        }
        check_symmetric("S_zeta", &s_zeta)?;
        let min_eig = min_eigenvalue(&s_zeta);
        if min_eig <= 0.0 {
            return Err(ModelError::NotPositiveDefinite { name: "S_zeta", min_eig });
        }
        Ok(Self { m0, m1, s_zeta })
    }

    pub fn n(&self) -> usize {
        self.m0.len()
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }

    pub fn m1(&self) -> &DVector<f64> {
        &self.m1
    }

    pub fn s_zeta(&self) -> &DMatrix<f64> {
        &self.s_zeta
    }

    pub fn signal(&self) -> DVector<f64> {
        &self.m1 - &self.m0
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.m1 + &self.m0) * 0.5
    }

    /// `S_zeta^{-1} (m1 - m0)`, the per-sensor whitening gains.
    pub fn whitening_gains(&self) -> Result<DVector<f64>, ModelError> {
        let cond = condition_number(&self.s_zeta);
        if cond > MAX_CONDITION {
            return Err(ModelError::IllConditioned(cond));
        }
        let chol = Cholesky::new(self.s_zeta.clone()).ok_or(ModelError::NotPositiveDefinite {
            name: "S_zeta",
            min_eig: min_eigenvalue(&self.s_zeta),
        })?;
        Ok(chol.solve(&self.signal()))
    }

    pub fn is_diagonal_noise(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| i == j || self.s_zeta[(i, j)] == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommModel {
    s_v: DMatrix<f64>,
}

impl CommModel {
    pub fn new(s_v: DMatrix<f64>) -> Result<Self, ModelError> {
        if s_v.nrows() != s_v.ncols() {
            return Err(ModelError::Dimension("S_v must be square".into()));
        }
        check_symmetric("S_v", &s_v)?;
        let min_eig = min_eigenvalue(&s_v);
        if min_eig < -SYMMETRY_TOL {
            return Err(ModelError::NotPositiveSemidefinite { name: "S_v", min_eig });
        }
        Ok(Self { s_v })
    }

    pub fn s_v(&self) -> &DMatrix<f64> {
        &self.s_v
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm_sym(&self.s_v)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.s_v)
    }
}

/// Everything downstream needs from a (sensing, communication) model pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedStats {
    pub n: usize,
    /// Innovation mean under `H1`; under `H0` it is the negation.
    pub m_eta1: DVector<f64>,
    pub s_eta: DMatrix<f64>,
    pub ssnr: f64,
    pub ssnr_i: Vec<f64>,
    /// `+inf` when `S_v = 0`.
    pub csnr: f64,
    /// `+inf` when `S_v = 0`.
    pub g_c: f64,
    /// `None` when `SSNR = 0`.
    pub c_mu: Option<f64>,
    pub c_sigma: Option<f64>,
    pub chernoff_total: f64,
    pub chernoff_i: Vec<f64>,
    pub s_v_norm: f64,
    pub s_v_min_eig: f64,
}

impl DerivedStats {
    pub fn c_mu(&self) -> Result<f64, ModelError> {
        self.c_mu.ok_or(ModelError::GloballyUndetectable)
    }

    pub fn c_sigma(&self) -> Result<f64, ModelError> {
        self.c_sigma.ok_or(ModelError::GloballyUndetectable)
    }

    /// Innovation mean under `H0`.
    pub fn m_eta0(&self) -> DVector<f64> {
        -&self.m_eta1
    }

    /// Whether all local SSNRs agree (within `1e-9` relative) and are positive.
    pub fn identical_sensors(&self) -> bool {
        let max = self.ssnr_i.iter().copied().fold(f64::MIN, f64::max);
        let min = self.ssnr_i.iter().copied().fold(f64::MAX, f64::min);
        min > 0.0 && (max - min) <= 1e-9 * max
    }

    /// The `c_mu` entering the gain condition of the weight assumption.
    ///
    /// With identical sensors the condition reduces to `b0 > 0`, which is the
    /// same as using `c_mu = 1`; otherwise the value computed from its
    /// definition is used. For identical sensors that definition evaluates
    /// to `N`, see [`DerivedStats::c_mu`].
    pub fn c_mu_for_gain_condition(&self) -> Result<f64, ModelError> {
        if self.identical_sensors() {
            Ok(1.0)
        } else {
            self.c_mu()
        }
    }

    pub fn best_isolated_chernoff(&self) -> f64 {
        self.chernoff_i.iter().copied().fold(0.0, f64::max)
    }
}

/// Innovation mean under `H1` and innovation covariance.
pub fn innovation_stats(m: &SensingModel) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    let g = m.whitening_gains()?;
    let d = m.signal();
    let m_eta1 = g.component_mul(&d) * 0.5;
    let dg = DMatrix::from_diagonal(&g);
    let s_eta = &dg * m.s_zeta() * &dg;
    Ok((m_eta1, symmetrize(&s_eta)))
}

pub fn snr_stats(m: &SensingModel, c: &CommModel) -> Result<DerivedStats, ModelError> {
    let n = m.n();
    if c.s_v().nrows() != n {
        return Err(ModelError::Dimension(format!(
            "S_v is {}x{} but the model has {n} sensors",
            c.s_v().nrows(),
            c.s_v().ncols()
        )));
    }
    let (m_eta1, s_eta) = innovation_stats(m)?;
    let d = m.signal();
    let g = m.whitening_gains()?;
    let ssnr = d.dot(&g).max(0.0);
    let ssnr_i: Vec<f64> = (0..n).map(|i| d[i] * d[i] / m.s_zeta()[(i, i)]).collect();
    let nf = n as f64;
    let per_sensor = ssnr / nf;
    let s_v_norm = c.spectral_norm();
    let (csnr, g_c) = if s_v_norm > 0.0 {
        (per_sensor * per_sensor / s_v_norm, per_sensor / s_v_norm)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let (c_mu, c_sigma) = if ssnr > 0.0 {
        (
            Some(2.0 * nf.sqrt() * m_eta1.norm() / per_sensor),
            Some(spectral_norm_sym(&s_eta) / per_sensor),
        )
    } else {
        (None, None)
    };
    Ok(DerivedStats {
        n,
        chernoff_total: ssnr / 8.0,
        chernoff_i: ssnr_i.iter().map(|s| s / 8.0).collect(),
        m_eta1,
        s_eta,
        ssnr,
        ssnr_i,
        csnr,
        g_c,
        c_mu,
        c_sigma,
        s_v_norm,
        s_v_min_eig: c.min_eigenvalue(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Detectability {
    pub global: bool,
    pub local: Vec<bool>,
}

pub fn detectability(d: &DerivedStats) -> Detectability {
    let tol = 1e-12 * d.ssnr.max(1.0);
    Detectability {
        global: d.ssnr > tol,
        local: d.ssnr_i.iter().map(|&s| s > tol).collect(),
    }
}

/// One line of the assumption checklist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub id: u8,
    pub name: String,
    /// `None` when the check was not requested.
    pub passed: Option<bool>,
    pub quantity: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn get(&self, id: u8) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn passed(&self, id: u8) -> bool {
        self.get(id).and_then(|c| c.passed).unwrap_or(false)
    }

    /// All of the listed assumptions were checked and passed.
    pub fn all_passed(&self, ids: &[u8]) -> bool {
        ids.iter().all(|&id| self.passed(id))
    }

    pub fn failures(&self, ids: &[u8]) -> Vec<&AssumptionCheck> {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .filter(|c| c.passed != Some(true))
            .collect()
    }
}

/// Evaluates the five modeling assumptions. The weight assumption (3) is only
/// checked when a schedule is supplied.
pub fn validate_assumptions(
    m: &SensingModel,
    c: &CommModel,
    s: &LaplacianSpectrum,
    sched: Option<&WeightSchedule>,
) -> Result<AssumptionReport, ModelError> {
    let d = snr_stats(m, c)?;
    let mut checks = Vec::with_capacity(5);

    let zeta_min = min_eigenvalue(m.s_zeta());
    let v_min = d.s_v_min_eig;
    let a1 = zeta_min > 0.0 && v_min > 0.0;
    checks.push(AssumptionCheck {
        id: 1,
        name: "Gaussian noises with positive definite covariances".into(),
        passed: Some(a1),
        quantity: v_min.min(zeta_min),
        detail: format!("lambda_1(S_zeta) = {}, lambda_1(S_v) = {}", crate::io::fmt_sig(zeta_min), crate::io::fmt_sig(v_min)),
    });

    checks.push(AssumptionCheck {
        id: 2,
        name: "network connected".into(),
        passed: Some(s.is_connected()),
        quantity: s.lambda2(),
        detail: if s.is_connected() {
            format!("lambda_2 = {}", crate::io::fmt_sig(s.lambda2()))
        } else {
            "lambda_2 = 0 (disconnected)".into()
        },
    });

    let a3 = match sched {
        None => AssumptionCheck {
            id: 3,
            name: "weight sequence".into(),
            passed: None,
            quantity: f64::NAN,
            detail: "not checked (no schedule supplied)".into(),
        },
        Some(WeightSchedule::Constant { .. }) => AssumptionCheck {
            id: 3,
            name: "weight sequence".into(),
            passed: Some(false),
            quantity: f64::NAN,
            detail: "constant weights are not a decaying b0/(a+k) sequence".into(),
        },
        Some(sched) => {
            let (a, b0) = sched.offset_and_gain().expect("non-constant schedule");
            match (d.c_mu_for_gain_condition(), s.is_connected()) {
                (Ok(c_mu), true) => {
                    let chk = schedule::validate_alpha(a, b0, s, c_mu)
                        .expect("connected spectrum");
                    AssumptionCheck {
                        id: 3,
                        name: "weight sequence".into(),
                        passed: Some(chk.passed()),
                        quantity: chk.offset_margin.min(chk.gain_margin),
                        detail: format!(
                            "a - b0*lambda_N = {}, b0 - max(0,(c_mu-1)/lambda_2) = {}",
                            crate::io::fmt_sig(chk.offset_margin),
                            crate::io::fmt_sig(chk.gain_margin)
                        ),
                    }
                }
                (Err(_), _) => AssumptionCheck {
                    id: 3,
                    name: "weight sequence".into(),
                    passed: Some(false),
                    quantity: f64::NAN,
                    detail: "c_mu undefined (SSNR = 0)".into(),
                },
                (_, false) => AssumptionCheck {
                    id: 3,
                    name: "weight sequence".into(),
                    passed: Some(false),
                    quantity: f64::NAN,
                    detail: "lambda_2 = 0 (disconnected)".into(),
                },
            }
        }
    };
    checks.push(a3);

    let det = detectability(&d);
    checks.push(AssumptionCheck {
        id: 4,
        name: "global detectability".into(),
        passed: Some(det.global),
        quantity: d.ssnr,
        detail: format!("SSNR = {}", crate::io::fmt_sig(d.ssnr)),
    });

    checks.push(AssumptionCheck {
        id: 5,
        name: "equal local SSNRs".into(),
        passed: Some(d.identical_sensors()),
        quantity: d.ssnr_i.iter().copied().fold(f64::MAX, f64::min),
        detail: format!("SSNR_i = {:?}", d.ssnr_i),
    });

    Ok(AssumptionReport { checks })
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_symmetric(name: &'static str, a: &DMatrix<f64>) -> Result<(), ModelError> {
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * a.amax().max(1.0) {
        return Err(ModelError::NotSymmetric { name, asym });
    }
    Ok(())
}

pub(crate) fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// Spectral norm of a symmetric matrix: largest absolute eigenvalue.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.amax()
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let (lo, hi) = (ev.min(), ev.amax());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
