//! Exact first and second moments of the detector states.
//!
//! Everything is computed under `H1`. Under `H0` the means flip sign and the
//! covariances are unchanged.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::fmt_sig;
use crate::model::{symmetrize, DerivedStats};
use crate::schedule::WeightSchedule;

#[derive(Debug, Error)]
pub enum MomentsError {
    #[error("alpha_k * lambda_N = {product} > 2 at k = {k}: the consensus step is not a contraction")]
    Contraction { k: usize, product: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tau = {0} outside (0.5, 1); pass the override flag to allow it")]
    TauOutOfRange(f64),
    #[error("{name} = {value} must be positive")]
    NonPositive { name: &'static str, value: f64 },
    #[error("K must be at least 1")]
    EmptyHorizon,
    #[error("covariance lost positive semidefiniteness at k = {k} (min eigenvalue {min_eig})")]
    Indefinite { k: usize, min_eig: f64 },
    #[error("sensor index {i} out of range for N = {n}")]
    SensorOutOfRange { i: usize, n: usize },
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed moments table: {0}")]
    Parse(String),
}

/// `(k, mu(k), Sigma(k))` of one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub k: usize,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl MomentState {
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn variances(&self) -> DVector<f64> {
        self.sigma.diagonal()
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }
}

/// Snapshot of the per-sensor marginals at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub k: usize,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub trace: f64,
}

impl MomentRecord {
    fn of(st: &MomentState) -> Self {
        MomentRecord {
            k: st.k,
            mu: st.mu.iter().copied().collect(),
            sigma2: st.sigma.diagonal().iter().copied().collect(),
            trace: st.sigma.trace(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTrajectory {
    pub records: Vec<MomentRecord>,
    pub final_state: MomentState,
}

impl MomentTrajectory {
    pub fn at(&self, k: usize) -> Option<&MomentRecord> {
        self.records
            .binary_search_by_key(&k, |r| r.k)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Records with `k` in `[lo, hi]`.
    pub fn window(&self, lo: usize, hi: usize) -> impl Iterator<Item = &MomentRecord> {
        self.records.iter().filter(move |r| r.k >= lo && r.k <= hi)
    }

    /// CSV with columns `k, sensor, mu, sigma2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MomentsError> {
        write_moments_csv(&self.records, w)
    }

    /// JSON sidecar holding the full final state.
    pub fn write_final_json<W: Write>(&self, w: W) -> Result<(), MomentsError> {
        let st = &self.final_state;
        let rows: Vec<Vec<f64>> = (0..st.n()).map(|i| st.sigma.row(i).iter().copied().collect()).collect();
        let v = serde_json::json!({
            "k": st.k,
            "mu": st.mu.iter().copied().collect::<Vec<_>>(),
            "sigma": rows,
        });
        serde_json::to_writer_pretty(w, &v)?;
        Ok(())
    }
}

pub fn write_moments_csv<W: Write>(records: &[MomentRecord], w: W) -> Result<(), MomentsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MOMENTS_HEADER)?;
    for r in records {
        for i in 0..r.mu.len() {
            out.write_record([r.k.to_string(), i.to_string(), fmt_sig(r.mu[i]), fmt_sig(r.sigma2[i])])?;
        }
    }
    out.flush()?;
    Ok(())
}

const MOMENTS_HEADER: [&str; 4] = ["k", "sensor", "mu", "sigma2"];

/// Reads a table written by [`write_moments_csv`]; `trace` is the sum of the variances.
pub fn read_moments_csv<R: Read>(r: R) -> Result<Vec<MomentRecord>, MomentsError> {
    let rows = crate::io::read_sensor_table(r, MOMENTS_HEADER).map_err(MomentsError::Parse)?;
    Ok(rows
        .into_iter()
        .map(|(k, mu, sigma2)| MomentRecord { k, trace: sigma2.iter().sum(), mu, sigma2 })
        .collect())
}

/// Which iterations to keep in a trajectory.
///
/// Every `every`-th step is kept up to `log_after`; beyond that roughly
/// `per_decade` log-spaced points per decade. `k = 1`, the final step and all
/// `checkpoints` are always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub every: usize,
    pub log_after: usize,
    pub per_decade: usize,
    pub checkpoints: BTreeSet<usize>,
}

impl Default for Recording {
    fn default() -> Self {
        Recording { every: 10, log_after: 1000, per_decade: 100, checkpoints: BTreeSet::new() }
    }
}

impl Recording {
    /// Keep every step.
    pub fn dense() -> Self {
        Recording { every: 1, log_after: usize::MAX, per_decade: 1, checkpoints: BTreeSet::new() }
    }

    pub fn with_checkpoints(mut self, ks: impl IntoIterator<Item = usize>) -> Self {
        self.checkpoints.extend(ks);
        self
    }

    fn recorder(&self) -> Recorder<'_> {
        Recorder { rec: self, next_log: self.log_after as f64 }
    }
}

struct Recorder<'a> {
    rec: &'a Recording,
    next_log: f64,
}

impl Recorder<'_> {
    fn keep(&mut self, k: usize, k_max: usize) -> bool {
        if k == 1 || k == k_max || self.rec.checkpoints.contains(&k) {
            return true;
        }
        let every = self.rec.every.max(1);
        if k <= self.rec.log_after {
            return k % every == 0;
        }
        if (k as f64) >= self.next_log {
            let step = 10f64.powf(1.0 / self.rec.per_decade.max(1) as f64);
            while self.next_log <= k as f64 {
                self.next_log *= step;
            }
            return true;
        }
        false
    }
}

/// How often the covariance is checked for loss of semidefiniteness.
const PSD_CHECK_EVERY: usize = 1000;

fn check_psd(st: &MomentState) -> Result<(), MomentsError> {
    let tr = st.sigma.trace();
    if st.n() == 0 || tr == 0.0 {
        return Ok(());
    }
    let min_eig = crate::model::min_eigenvalue(&st.sigma);
    if min_eig < -1e-10 * tr.abs() {
        return Err(MomentsError::Indefinite { k: st.k, min_eig });
    }
    Ok(())
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<(), MomentsError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(MomentsError::Dimension(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn lambda_max(laplacian: &DMatrix<f64>) -> f64 {
    if laplacian.is_empty() {
        0.0
    } else {
        crate::model::spectral_norm_sym(laplacian)
    }
}

/// `dst += t * src` for matrices.
fn add_scaled(dst: &mut DMatrix<f64>, t: f64, src: &DMatrix<f64>) {
    dst.zip_apply(src, |a, b| *a += t * b);
}

/// Scratch buffers so long runs do not allocate per step.
struct Scratch {
    w: DMatrix<f64>,
    tmp: DMatrix<f64>,
    sig: DMatrix<f64>,
    mu: DVector<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            w: DMatrix::zeros(n, n),
            tmp: DMatrix::zeros(n, n),
            sig: DMatrix::zeros(n, n),
            mu: DVector::zeros(n),
        }
    }
}

/// `sigma <- W sigma W^T`, symmetrized, using the scratch buffers.
fn congruence(w: &DMatrix<f64>, sigma: &mut DMatrix<f64>, tmp: &mut DMatrix<f64>, out: &mut DMatrix<f64>) {
    w.mul_to(sigma, tmp);
    tmp.mul_to(&w.transpose(), out);
    let n = out.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    std::mem::swap(sigma, out);
}

/// Consensus+innovations detector:
/// `x(k+1) = (k/(k+1)) W(k) x(k) + (k/(k+1)) alpha_k v(k) + eta(k+1)/(k+1)`,
/// `W(k) = I - alpha_k L`, `x(1) = eta(1)`.
#[derive(Debug, Clone)]
pub struct CiDynamics {
    laplacian: DMatrix<f64>,
    lambda_max: f64,
    sched: WeightSchedule,
    s_v: DMatrix<f64>,
    s_eta: DMatrix<f64>,
    m_eta: DVector<f64>,
}

impl CiDynamics {
    pub fn new(
        d: &DerivedStats,
        s_v: &DMatrix<f64>,
        laplacian: &DMatrix<f64>,
        sched: WeightSchedule,
    ) -> Result<Self, MomentsError> {
        Self::from_parts(laplacian, sched, s_v, &d.s_eta, &d.m_eta1)
    }

    pub fn from_parts(
        laplacian: &DMatrix<f64>,
        sched: WeightSchedule,
        s_v: &DMatrix<f64>,
        s_eta: &DMatrix<f64>,
        m_eta: &DVector<f64>,
    ) -> Result<Self, MomentsError> {
        let n = m_eta.len();
        check_square("L", laplacian, n)?;
        check_square("S_v", s_v, n)?;
        check_square("S_eta", s_eta, n)?;
        sched.validate()?;
        Ok(CiDynamics {
            laplacian: laplacian.clone(),
            lambda_max: lambda_max(laplacian),
            sched,
            s_v: s_v.clone(),
            s_eta: s_eta.clone(),
            m_eta: m_eta.clone(),
        })
    }

    /// Same dynamics driven by the `H0` innovation mean.
    pub fn under_h0(&self) -> Self {
        let mut h0 = self.clone();
        h0.m_eta = -&self.m_eta;
        h0
    }

    /// Same dynamics with both noise covariances multiplied by `t`.
    pub fn scaled_noise(&self, t: f64) -> Self {
        let mut s = self.clone();
        s.s_v *= t;
        s.s_eta *= t;
        s
    }

    pub fn schedule(&self) -> &WeightSchedule {
        &self.sched
    }

    pub fn init(&self) -> MomentState {
        MomentState { k: 1, mu: self.m_eta.clone(), sigma: self.s_eta.clone() }
    }

    pub fn step(&self, st: &MomentState) -> Result<MomentState, MomentsError> {
        let mut next = st.clone();
        self.step_into(&mut next, &mut Scratch::new(st.n()))?;
        Ok(next)
    }

    fn step_into(&self, st: &mut MomentState, s: &mut Scratch) -> Result<(), MomentsError> {
        let k = st.k;
        let alpha = self.sched.weight_at(k);
        let product = alpha * self.lambda_max;
        if product > 2.0 {
            return Err(MomentsError::Contraction { k, product });
        }
        let kf = k as f64;
        let c = kf / (kf + 1.0);
        let inv = 1.0 / (kf + 1.0);

        s.w.fill_with_identity();
        add_scaled(&mut s.w, -alpha, &self.laplacian);

        s.w.mul_to(&st.mu, &mut s.mu);
        st.mu.copy_from(&s.mu);
        st.mu.scale_mut(c);
        st.mu.axpy(inv, &self.m_eta, 1.0);

        congruence(&s.w, &mut st.sigma, &mut s.tmp, &mut s.sig);
        add_scaled(&mut st.sigma, alpha * alpha, &self.s_v);
        st.sigma.scale_mut(c * c);
        add_scaled(&mut st.sigma, inv * inv, &self.s_eta);

        st.k = k + 1;
        Ok(())
    }

    /// Final state at `k_max` without recording.
    pub fn state_at(&self, k_max: usize) -> Result<MomentState, MomentsError> {
        Ok(self.run_with(k_max, &Recording::default(), |_| {})?.final_state)
    }

    pub fn run(&self, k_max: usize, rec: &Recording) -> Result<MomentTrajectory, MomentsError> {
        self.run_with(k_max, rec, |_| {})
    }

    /// Runs to `k_max`, calling `visit` on every state (including `k = 1`).
    pub fn run_with(
        &self,
        k_max: usize,
        rec: &Recording,
        mut visit: impl FnMut(&MomentState),
    ) -> Result<MomentTrajectory, MomentsError> {
        if k_max == 0 {
            return Err(MomentsError::EmptyHorizon);
        }
        let mut st = self.init();
        let mut s = Scratch::new(st.n());
        let mut recorder = rec.recorder();
        let mut records = vec![MomentRecord::of(&st)];
        visit(&st);
        while st.k < k_max {
            self.step_into(&mut st, &mut s)?;
            visit(&st);
            if st.k % PSD_CHECK_EVERY == 0 {
                check_psd(&st)?;
            }
            if recorder.keep(st.k, k_max) {
                records.push(MomentRecord::of(&st));
            }
        }
        check_psd(&st)?;
        Ok(MomentTrajectory { records, final_state: st })
    }

    /// Moments at `k` from the explicit solution
    /// `k x(k) = sum_j Phi(k,j) eta(j) + sum_{j<k} j alpha_j Phi(k,j+1) v(j)`,
    /// with `Phi(k,j) = W(k-1) ... W(j)`. Cost is quadratic in `k`; meant as a
    /// cross-check of the recursion for small `k`.
    pub fn closed_form(&self, k: usize) -> Result<MomentState, MomentsError> {
        if k == 0 {
            return Err(MomentsError::EmptyHorizon);
        }
        let n = self.m_eta.len();
        let w = |j: usize| crate::graph::averaging_matrix(&self.laplacian, self.sched.weight_at(j));
        // phi[j] = Phi(k, j) for j = 1..=k
        let mut phi = vec![DMatrix::identity(n, n); k + 1];
        for j in (1..k).rev() {
            phi[j] = &phi[j + 1] * w(j);
        }
        let mut mu = DVector::zeros(n);
        let mut sigma = DMatrix::zeros(n, n);
        for j in 1..=k {
            mu += &phi[j] * &self.m_eta;
            sigma += &phi[j] * &self.s_eta * phi[j].transpose();
        }
        for j in 1..k {
            let ja = j as f64 * self.sched.weight_at(j);
            sigma += (&phi[j + 1] * &self.s_v * phi[j + 1].transpose()) * (ja * ja);
        }
        let kf = k as f64;
        Ok(MomentState { k, mu: mu / kf, sigma: symmetrize(&(sigma / (kf * kf))) })
    }
}

pub fn ci_init(d: &DerivedStats) -> MomentState {
    MomentState { k: 1, mu: d.m_eta1.clone(), sigma: d.s_eta.clone() }
}

pub fn ci_run(
    d: &DerivedStats,
    s_v: &DMatrix<f64>,
    laplacian: &DMatrix<f64>,
    sched: WeightSchedule,
    k_max: usize,
    rec: &Recording,
) -> Result<MomentTrajectory, MomentsError> {
    CiDynamics::new(d, s_v, laplacian, sched)?.run(k_max, rec)
}

/// `(I + b0 L)^{-1} m_eta1`.
pub fn mu_limit(d: &DerivedStats, b0: f64, laplacian: &DMatrix<f64>) -> Result<DVector<f64>, MomentsError> {
    let n = d.n;
    check_square("L", laplacian, n)?;
    if !(b0 >= 0.0) {
        return Err(MomentsError::NonPositive { name: "b0", value: b0 });
    }
    let a = DMatrix::identity(n, n) + laplacian * b0;
    let chol = Cholesky::new(a).ok_or_else(|| MomentsError::Dimension("I + b0 L is not positive definite".into()))?;
    Ok(chol.solve(&d.m_eta1))
}

/// Running-consensus detector with vanishing `k^{-tau}` weights:
/// `x(k+1) = W_md(k) x(k) + alpha_k eta(k+1) + beta_k v(k)`,
/// `W_md(k) = I - beta_k L - alpha_k I`, `alpha_k = a/(k+1)^tau`,
/// `beta_k = b/(k+1)^tau`, `x(1) = eta(1)`.
#[derive(Debug, Clone)]
pub struct MdDynamics {
    laplacian: DMatrix<f64>,
    lambda_max: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    s_v: DMatrix<f64>,
    s_eta: DMatrix<f64>,
    m_eta: DVector<f64>,
}

impl MdDynamics {
    /// `allow_any_tau` lifts the `tau in (0.5, 1)` restriction.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        laplacian: &DMatrix<f64>,
        a: f64,
        b: f64,
        tau: f64,
        s_v: &DMatrix<f64>,
        s_eta: &DMatrix<f64>,
        m_eta: &DVector<f64>,
        allow_any_tau: bool,
    ) -> Result<Self, MomentsError> {
        let n = m_eta.len();
        check_square("L", laplacian, n)?;
        check_square("S_v", s_v, n)?;
        check_square("S_eta", s_eta, n)?;
        for (name, value) in [("a", a), ("b", b)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MomentsError::NonPositive { name, value });
            }
        }
        let in_range = tau > 0.5 && tau < 1.0;
        if !in_range && !(allow_any_tau && tau >= 0.0 && tau.is_finite()) {
            return Err(MomentsError::TauOutOfRange(tau));
        }
        Ok(MdDynamics {
            laplacian: laplacian.clone(),
            lambda_max: lambda_max(laplacian),
            a,
            b,
            tau,
            s_v: s_v.clone(),
            s_eta: s_eta.clone(),
            m_eta: m_eta.clone(),
        })
    }

    pub fn from_stats(
        d: &DerivedStats,
        s_v: &DMatrix<f64>,
        laplacian: &DMatrix<f64>,
        a: f64,
        b: f64,
        tau: f64,
        allow_any_tau: bool,
    ) -> Result<Self, MomentsError> {
        Self::new(laplacian, a, b, tau, s_v, &d.s_eta, &d.m_eta1, allow_any_tau)
    }

    /// `(alpha_k, beta_k)`.
    pub fn weights(&self, k: usize) -> (f64, f64) {
        let p = ((k + 1) as f64).powf(self.tau);
        (self.a / p, self.b / p)
    }

    pub fn init(&self) -> MomentState {
        MomentState { k: 1, mu: self.m_eta.clone(), sigma: self.s_eta.clone() }
    }

    pub fn step(&self, st: &MomentState) -> Result<MomentState, MomentsError> {
        let mut next = st.clone();
        self.step_into(&mut next, &mut Scratch::new(st.n()))?;
        Ok(next)
    }

    fn step_into(&self, st: &mut MomentState, s: &mut Scratch) -> Result<(), MomentsError> {
        let k = st.k;
        let (alpha, beta) = self.weights(k);
        let product = beta * self.lambda_max + alpha;
        if product > 2.0 {
            return Err(MomentsError::Contraction { k, product });
        }
        s.w.fill_with_identity();
        add_scaled(&mut s.w, -beta, &self.laplacian);
        for i in 0..s.w.nrows() {
            s.w[(i, i)] -= alpha;
        }
        s.w.mul_to(&st.mu, &mut s.mu);
        st.mu.copy_from(&s.mu);
        st.mu.axpy(alpha, &self.m_eta, 1.0);

        congruence(&s.w, &mut st.sigma, &mut s.tmp, &mut s.sig);
        add_scaled(&mut st.sigma, alpha * alpha, &self.s_eta);
        add_scaled(&mut st.sigma, beta * beta, &self.s_v);
        st.k = k + 1;
        Ok(())
    }

    pub fn run(&self, k_max: usize, rec: &Recording) -> Result<MomentTrajectory, MomentsError> {
        self.run_with(k_max, rec, |_| {})
    }

    pub fn run_with(
        &self,
        k_max: usize,
        rec: &Recording,
        mut visit: impl FnMut(&MomentState),
    ) -> Result<MomentTrajectory, MomentsError> {
        if k_max == 0 {
            return Err(MomentsError::EmptyHorizon);
        }
        let mut st = self.init();
        let mut s = Scratch::new(st.n());
        let mut recorder = rec.recorder();
        let mut records = vec![MomentRecord::of(&st)];
        visit(&st);
        while st.k < k_max {
            self.step_into(&mut st, &mut s)?;
            visit(&st);
            if st.k % PSD_CHECK_EVERY == 0 {
                check_psd(&st)?;
            }
            if recorder.keep(st.k, k_max) {
                records.push(MomentRecord::of(&st));
            }
        }
        check_psd(&st)?;
        Ok(MomentTrajectory { records, final_state: st })
    }
}

/// Mean, variance and DSNR of a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarMoments {
    pub mean: f64,
    pub variance: f64,
    pub dsnr: f64,
    /// Zero signal: mean and variance both vanish.
    pub undetectable: bool,
}

impl ScalarMoments {
    fn new(ssnr: f64, k: usize) -> Self {
        let kf = k as f64;
        ScalarMoments {
            mean: ssnr / 2.0,
            variance: ssnr / kf,
            dsnr: kf * ssnr / 4.0,
            undetectable: ssnr <= 0.0,
        }
    }
}

/// Time-averaged centralized log-likelihood ratio.
pub fn centralized_moments(d: &DerivedStats, k: usize) -> Result<ScalarMoments, MomentsError> {
    if k == 0 {
        return Err(MomentsError::EmptyHorizon);
    }
    Ok(ScalarMoments::new(d.ssnr, k))
}

/// Time-averaged local log-likelihood ratio of sensor `i` working alone.
pub fn isolated_moments(d: &DerivedStats, i: usize, k: usize) -> Result<ScalarMoments, MomentsError> {
    if k == 0 {
        return Err(MomentsError::EmptyHorizon);
    }
    let s = *d.ssnr_i.get(i).ok_or(MomentsError::SensorOutOfRange { i, n: d.n })?;
    Ok(ScalarMoments::new(s, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, spectrum, GraphSpec, NetworkGraph};
    use crate::model::{snr_stats, CommModel, SensingModel};
    use rand::{Rng, SeedableRng};

    fn stats(m1: &[f64], m0: &[f64], s_zeta: DMatrix<f64>, s_v: DMatrix<f64>) -> (DerivedStats, DMatrix<f64>) {
        let m = SensingModel::new(DVector::from_row_slice(m0), DVector::from_row_slice(m1), s_zeta).unwrap();
        let c = CommModel::new(s_v.clone()).unwrap();
        (snr_stats(&m, &c).unwrap(), s_v)
    }

    fn standard() -> (DerivedStats, DMatrix<f64>, NetworkGraph) {
        let (d, sv) = stats(&[1.0, 1.0], &[-1.0, -1.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.25);
        (d, sv, build_graph(&GraphSpec::Path { n: 2 }).unwrap())
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn init_examples() {
        let (d, _, _) = standard();
        let st = ci_init(&d);
        assert_eq!(st.mu.as_slice(), &[2.0, 2.0]);
        assert_eq!(st.sigma, DMatrix::identity(2, 2) * 4.0);

        let (z, _) = stats(&[0.0, 0.0], &[0.0, 0.0], DMatrix::identity(2, 2), DMatrix::zeros(2, 2));
        let st = ci_init(&z);
        assert!(st.mu.iter().all(|&x| x == 0.0) && st.sigma.iter().all(|&x| x == 0.0));

        let (nd, _) = stats(&[1.0, 0.0], &[-1.0, 0.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.25);
        let st = ci_init(&nd);
        assert_eq!(st.mu.as_slice(), &[2.0, 0.0]);
        assert_eq!(st.sigma, DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 0.0])));
    }

    #[test]
    fn one_step_by_hand() {
        let (d, sv, g) = standard();
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), WeightSchedule::Constant { alpha: 0.5 }).unwrap();
        let s2 = dy.step(&dy.init()).unwrap();
        assert_eq!(s2.k, 2);
        assert_eq!(s2.mu.as_slice(), &[2.0, 2.0]);
        assert!((s2.sigma[(0, 0)] - 1.515625).abs() < 1e-15);
        assert!((s2.sigma[(1, 1)] - 1.515625).abs() < 1e-15);
        assert!((s2.sigma[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn contraction_violation_is_rejected() {
        let (d, sv, g) = standard();
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), WeightSchedule::Constant { alpha: 1.01 }).unwrap();
        assert!(matches!(dy.step(&dy.init()), Err(MomentsError::Contraction { k: 1, .. })));
    }

    #[test]
    fn noiseless_identical_mean_is_constant() {
        let (d, _, g) = standard();
        let zero = DMatrix::zeros(2, 2);
        let dy = CiDynamics::from_parts(
            g.laplacian(),
            WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 },
            &zero,
            &zero,
            &d.m_eta1,
        )
        .unwrap();
        let tr = dy.run(200, &Recording::dense()).unwrap();
        for r in &tr.records {
            assert_eq!(r.mu, vec![2.0, 2.0]);
            assert_eq!(r.sigma2, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_sensor_matches_isolated() {
        let (d, sv) = stats(&[1.0], &[-1.0], DMatrix::identity(1, 1) * 2.0, DMatrix::zeros(1, 1));
        let dy = CiDynamics::new(&d, &sv, &DMatrix::zeros(1, 1), WeightSchedule::AlphaHarmonic { a: 1.0, b0: 1.0 }).unwrap();
        let tr = dy.run(1000, &Recording::dense()).unwrap();
        for r in &tr.records {
            let iso = isolated_moments(&d, 0, r.k).unwrap();
            assert!(close(r.mu[0], iso.mean, 1e-12));
            assert!(close(r.sigma2[0], iso.variance, 1e-12));
        }
    }

    #[test]
    fn closed_form_agrees_with_recursion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = build_graph(&GraphSpec::Path { n: 3 }).unwrap();
        for _ in 0..20 {
            let mut a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let s_zeta = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
            a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.5..0.5));
            let s_v = &a * a.transpose();
            let m1: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (d, sv) = stats(&m1, &[0.0; 3], s_zeta, s_v);
            let b0 = rng.gen_range(0.1..1.0);
            let sched = WeightSchedule::AlphaHarmonic { a: b0 * 3.0, b0 };
            let dy = CiDynamics::new(&d, &sv, g.laplacian(), sched).unwrap();
            let tr = dy.run(6, &Recording::dense()).unwrap();
            for k in 1..=6 {
                let cf = dy.closed_form(k).unwrap();
                let r = tr.at(k).unwrap();
                for i in 0..3 {
                    assert!((cf.mu[i] - r.mu[i]).abs() < 1e-12);
                    assert!((cf.sigma[(i, i)] - r.sigma2[i]).abs() < 1e-12);
                }
            }
            let cf = dy.closed_form(6).unwrap();
            assert!((cf.sigma - &tr.final_state.sigma).amax() < 1e-12);
        }
    }

    #[test]
    fn sign_symmetry_and_consensus_sum() {
        let (d, sv) = stats(&[1.5, 0.2, -0.3], &[0.0; 3], DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 0.3);
        let g = build_graph(&GraphSpec::Complete { n: 3 }).unwrap();
        let sched = WeightSchedule::AlphaHarmonic { a: 3.0, b0: 0.9 };
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), sched).unwrap();
        let mut h1 = Vec::new();
        dy.run_with(300, &Recording::default(), |s| h1.push(s.clone())).unwrap();
        let mut h0 = Vec::new();
        dy.under_h0().run_with(300, &Recording::default(), |s| h0.push(s.clone())).unwrap();
        let total: f64 = d.m_eta1.sum();
        for (p, q) in h1.iter().zip(&h0) {
            assert_eq!(p.mu, -&q.mu);
            assert_eq!(p.sigma, q.sigma);
            assert!((p.mu.sum() - total).abs() <= 1e-13 * total.abs().max(1.0));
        }
    }

    #[test]
    fn covariance_is_linear_in_noise() {
        let (d, sv, g) = standard();
        let sched = WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 };
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), sched).unwrap();
        let base = dy.run(500, &Recording::default()).unwrap();
        let scaled = dy.scaled_noise(3.5).run(500, &Recording::default()).unwrap();
        for (p, q) in base.records.iter().zip(&scaled.records) {
            for i in 0..2 {
                assert!(close(q.sigma2[i], 3.5 * p.sigma2[i], 1e-12));
            }
        }
    }

    #[test]
    fn mu_limit_examples() {
        let (d, _, g) = standard();
        let l = mu_limit(&d, 2f64.cbrt(), g.laplacian()).unwrap();
        assert!((l - DVector::from_element(2, 2.0)).amax() < 1e-14);

        let (nd, _) = stats(&[1.0, 0.0], &[-1.0, 0.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.25);
        let l = mu_limit(&nd, 1.0, g.laplacian()).unwrap();
        assert!((l[0] - 4.0 / 3.0).abs() < 1e-14 && (l[1] - 2.0 / 3.0).abs() < 1e-14);
        assert_eq!(mu_limit(&nd, 0.0, g.laplacian()).unwrap(), nd.m_eta1);
    }

    #[test]
    fn mean_converges_to_limit() {
        let (nd, sv) = stats(&[1.0, 0.0], &[-1.0, 0.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.25);
        let g = build_graph(&GraphSpec::Path { n: 2 }).unwrap();
        let dy = CiDynamics::new(&nd, &sv, g.laplacian(), WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 }).unwrap();
        let st = dy.state_at(100_000).unwrap();
        let lim = mu_limit(&nd, 1.0, g.laplacian()).unwrap();
        assert!((st.mu - &lim).amax() <= 1e-3 * lim.amax());
    }

    #[test]
    fn md_examples() {
        let (d, sv, g) = standard();
        let zero = DMatrix::zeros(2, 2);
        let md = MdDynamics::new(g.laplacian(), 1.0, 1.0, 0.75, &zero, &zero, &d.m_eta1, false).unwrap();
        let tr = md.run(100, &Recording::dense()).unwrap();
        assert!(tr.records.iter().all(|r| r.trace == 0.0));

        let one = DMatrix::zeros(1, 1);
        let m = DVector::from_element(1, 3.0);
        let md = MdDynamics::new(&one, 0.5, 1.0, 0.75, &one, &one, &DVector::zeros(1), false).unwrap();
        let mut st = md.init();
        st.mu = m.clone() * 10.0;
        let md = MdDynamics::new(&one, 0.5, 1.0, 0.75, &one, &one, &m, false).unwrap();
        for _ in 0..20_000 {
            st = md.step(&st).unwrap();
        }
        assert!((st.mu[0] - 3.0).abs() < 1e-6);

        assert!(matches!(
            MdDynamics::from_stats(&d, &sv, g.laplacian(), 1.0, 1.0, 1.2, false),
            Err(MomentsError::TauOutOfRange(_))
        ));
        assert!(MdDynamics::from_stats(&d, &sv, g.laplacian(), 1.0, 1.0, 1.2, true).is_ok());
    }

    #[test]
    fn md_trace_decays_like_power() {
        let (d, sv, g) = standard();
        let md = MdDynamics::from_stats(&d, &sv, g.laplacian(), 1.0, 1.0, 0.75, false).unwrap();
        let tr = md.run(100_000, &Recording::default()).unwrap();
        let scaled: Vec<f64> = tr.window(10_000, 100_000).map(|r| r.trace * (r.k as f64).powf(0.75)).collect();
        let lo = scaled.iter().copied().fold(f64::MAX, f64::min);
        let hi = scaled.iter().copied().fold(0.0, f64::max);
        assert!(lo > 2.0 && hi < 4.0, "{lo} {hi}");
    }

    #[test]
    fn scalar_detectors() {
        let (d, _, _) = standard();
        let c = centralized_moments(&d, 2).unwrap();
        assert_eq!((c.mean, c.variance, c.dsnr), (4.0, 4.0, 4.0));
        assert_eq!(centralized_moments(&d, 1).unwrap().dsnr, d.ssnr / 4.0);
        let iso = isolated_moments(&d, 0, 4).unwrap();
        assert_eq!((iso.mean, iso.variance, iso.dsnr), (2.0, 1.0, 4.0));
        for k in [1, 10, 1000] {
            let c = centralized_moments(&d, k).unwrap();
            assert_eq!(c.dsnr / (2.0 * k as f64), d.chernoff_total);
        }
        let (nd, _) = stats(&[1.0, 0.0], &[-1.0, 0.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.25);
        let blind = isolated_moments(&nd, 1, 3).unwrap();
        assert!(blind.undetectable && blind.mean == 0.0 && blind.variance == 0.0);
        assert!(isolated_moments(&nd, 2, 3).is_err());
    }

    #[test]
    fn recording_policy() {
        let (d, sv, g) = standard();
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 }).unwrap();
        let rec = Recording::default().with_checkpoints([777, 12_345]);
        let tr = dy.run(100_000, &rec).unwrap();
        let ks: Vec<usize> = tr.records.iter().map(|r| r.k).collect();
        assert_eq!(ks[0], 1);
        assert_eq!(*ks.last().unwrap(), 100_000);
        assert!(ks.contains(&777) && ks.contains(&12_345) && ks.contains(&1000));
        assert!(ks.windows(2).all(|w| w[0] < w[1]));
        assert!(ks.len() < 100 + 2 * 100 + 10);
        assert_eq!(tr.final_state.k, 100_000);
    }

    #[test]
    fn csv_and_json_export() {
        let (d, sv, g) = standard();
        let dy = CiDynamics::new(&d, &sv, g.laplacian(), WeightSchedule::Constant { alpha: 0.5 }).unwrap();
        let tr = dy.run(2, &Recording::dense()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "k,sensor,mu,sigma2\n1,0,2,4\n1,1,2,4\n2,0,2,1.515625\n2,1,2,1.515625\n");
        let mut buf = Vec::new();
        tr.write_final_json(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["sigma"][0][1], 0.5);
    }

    #[test]
    fn spectrum_helpers_agree() {
        let g = build_graph(&GraphSpec::Star { n: 5 }).unwrap();
        assert!((lambda_max(g.laplacian()) - spectrum(&g).unwrap().lambda_max()).abs() < 1e-12);
    }
}
