//! Sample-path simulation of the detectors.
//!
//! Trials are split into fixed-size chunks that run in parallel; partial
//! statistics are merged in chunk order, so results do not depend on the
//! number of worker threads.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::fmt_sig;
use crate::model::{DerivedStats, SensingModel};
use crate::moments::{CiDynamics, MdDynamics, MomentsError};
use crate::schedule::WeightSchedule;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("need at least one trial and one iteration (M = {trials}, K = {k_max})")]
    Empty { trials: usize, k_max: usize },
    #[error("covariance is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("noise covariance does not match the model: {0}")]
    CovarianceMismatch(String),
    #[error("non-Gaussian sensing noise requires a diagonal sensing covariance")]
    NonDiagonalSensing,
    #[error("inadmissible schedule: {0}")]
    Schedule(String),
    #[error("sensor index {i} out of range for N = {n}")]
    SensorOutOfRange { i: usize, n: usize },
    #[error("checkpoint {k} outside 1..={k_max}")]
    BadCheckpoint { k: usize, k_max: usize },
    #[error("degenerate variance estimate {var} for sensor {sensor} at k = {k}")]
    DegenerateVariance { k: usize, sensor: usize, var: f64 },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("malformed results file: {0}")]
    Parse(String),
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Laplace,
    Uniform,
}

impl NoiseFamily {
    /// Zero-mean, unit-variance scalar draw.
    pub fn standard<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Laplace => {
                let u: f64 = rng.gen::<f64>() - 0.5;
                -std::f64::consts::FRAC_1_SQRT_2 * u.signum() * (-2.0 * u.abs()).ln_1p()
            }
            NoiseFamily::Uniform => {
                let s = 3f64.sqrt();
                rng.gen_range(-s..s)
            }
        }
    }
}

/// Zero-mean noise `A w` with iid standardized `w` and `A A^T = covariance`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub covariance: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    zero: bool,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, covariance: DMatrix<f64>) -> Result<Self, SimError> {
        let n = covariance.nrows();
        if covariance.ncols() != n {
            return Err(SimError::CovarianceMismatch("covariance is not square".into()));
        }
        let zero = covariance.iter().all(|&x| x == 0.0);
        let mixing = if zero {
            DMatrix::zeros(n, n)
        } else if let Some(ch) = Cholesky::new(covariance.clone()) {
            ch.l()
        } else {
            let eig = SymmetricEigen::new((&covariance + covariance.transpose()) * 0.5);
            let min = eig.eigenvalues.min();
            if min < -1e-12 * eig.eigenvalues.amax().max(1.0) {
                return Err(SimError::NotPsd(min));
            }
            let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root)
        };
        Ok(NoiseSpec { family, covariance, mixing, zero })
    }

    pub fn n(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Writes one draw scaled by `sign` into `out`; `w` is scratch of length `n`.
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, sign: f64, w: &mut [f64], out: &mut [f64]) {
        if self.zero {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        for wi in w.iter_mut() {
            *wi = self.family.standard(rng);
        }
        let n = self.n();
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                s += self.mixing[(i, j)] * w[j];
            }
            *o = sign * s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    H0,
    H1,
}

impl Hypothesis {
    pub fn sign(self) -> f64 {
        match self {
            Hypothesis::H0 => -1.0,
            Hypothesis::H1 => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Hypothesis::H0 => "H0",
            Hypothesis::H1 => "H1",
        }
    }

    /// Zero-threshold decision error. Ties count as errors under `H1`.
    pub fn is_error(self, x: f64) -> bool {
        match self {
            Hypothesis::H1 => x <= 0.0,
            Hypothesis::H0 => x > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    Ci { schedule: WeightSchedule },
    Md { a: f64, b: f64, tau: f64 },
    Centralized,
    Isolated { sensor: usize },
}

impl Dynamics {
    pub fn label(&self) -> String {
        match self {
            Dynamics::Ci { .. } => "ci".into(),
            Dynamics::Md { .. } => "md".into(),
            Dynamics::Centralized => "centralized".into(),
            Dynamics::Isolated { sensor } => format!("isolated_{sensor}"),
        }
    }
}

/// Everything a trial needs, flattened for the inner loop.
#[derive(Debug, Clone)]
pub struct Simulator {
    n: usize,
    dynamics: Dynamics,
    m_eta1: Vec<f64>,
    eta: NoiseSpec,
    comm: NoiseSpec,
    /// Row-major Laplacian.
    laplacian: Vec<f64>,
    /// Mean and standard deviation of the isolated local statistic.
    local: Option<(f64, f64)>,
    local_family: NoiseFamily,
}

impl Simulator {
    /// Builds a simulator whose noises have the model's covariances
    /// (`S_eta` for innovations, `S_v` for links).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &SensingModel,
        d: &DerivedStats,
        s_v: &DMatrix<f64>,
        laplacian: &DMatrix<f64>,
        dynamics: Dynamics,
        sensing: NoiseFamily,
        comm: NoiseFamily,
        allow_any_tau: bool,
    ) -> Result<Self, SimError> {
        if sensing != NoiseFamily::Gaussian && !model.is_diagonal_noise() {
            return Err(SimError::NonDiagonalSensing);
        }
        let eta = NoiseSpec::new(sensing, d.s_eta.clone())?;
        let comm = NoiseSpec::new(comm, s_v.clone())?;
        Self::with_noise(d, laplacian, dynamics, eta, comm, allow_any_tau)
    }

    /// Explicit noise specs; their covariances must match `S_eta` and the
    /// link covariance implied by `comm`.
    pub fn with_noise(
        d: &DerivedStats,
        laplacian: &DMatrix<f64>,
        dynamics: Dynamics,
        eta: NoiseSpec,
        comm: NoiseSpec,
        allow_any_tau: bool,
    ) -> Result<Self, SimError> {
        let n = d.n;
        let tol = 1e-12 * d.s_eta.amax().max(1.0);
        if eta.n() != n || (&eta.covariance - &d.s_eta).amax() > tol {
            return Err(SimError::CovarianceMismatch("innovation noise must have covariance S_eta".into()));
        }
        if comm.n() != n {
            return Err(SimError::CovarianceMismatch(format!("link noise is {0}x{0}, expected {n}x{n}", comm.n())));
        }
        let mut local = None;
        match dynamics {
            Dynamics::Ci { schedule } => {
                let ci = CiDynamics::new(d, &comm.covariance, laplacian, schedule)?;
                let lmax = if n == 0 { 0.0 } else { crate::model::spectral_norm_sym(laplacian) };
                let first = ci.schedule().max_weight() * lmax;
                if first > 2.0 {
                    return Err(SimError::Schedule(format!("alpha_1 lambda_N = {first} > 2")));
                }
            }
            Dynamics::Md { a, b, tau } => {
                MdDynamics::from_stats(d, &comm.covariance, laplacian, a, b, tau, allow_any_tau)?;
            }
            Dynamics::Centralized => {}
            Dynamics::Isolated { sensor } => {
                let s = *d.ssnr_i.get(sensor).ok_or(SimError::SensorOutOfRange { i: sensor, n })?;
                local = Some((s / 2.0, s.sqrt()));
            }
        }
        Ok(Simulator {
            n,
            dynamics,
            m_eta1: d.m_eta1.iter().copied().collect(),
            local_family: eta.family,
            eta,
            comm,
            laplacian: laplacian.transpose().iter().copied().collect(),
            local,
        })
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    /// Length of the decision vector.
    pub fn outputs(&self) -> usize {
        match self.dynamics {
            Dynamics::Ci { .. } | Dynamics::Md { .. } => self.n,
            _ => 1,
        }
    }

    /// Runs one trial, calling `visit(k, x)` for `k = 1..=k_max`.
    fn trial(&self, hyp: Hypothesis, rngs: &mut TrialRngs, noise_sign: f64, k_max: usize, mut visit: impl FnMut(usize, &[f64])) {
        let n = self.n;
        let s = hyp.sign();
        let mut w = vec![0.0; n];
        let mut eta = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut lx = vec![0.0; n];
        let draw_eta = |rng: &mut ChaCha8Rng, w: &mut [f64], eta: &mut [f64]| {
            self.eta.fill(rng, noise_sign, w, eta);
            for (e, m) in eta.iter_mut().zip(&self.m_eta1) {
                *e += s * m;
            }
        };
        match self.dynamics {
            Dynamics::Ci { schedule } => {
                draw_eta(&mut rngs.sensing, &mut w, &mut eta);
                let mut x = eta.clone();
                visit(1, &x);
                for k in 1..k_max {
                    let kf = k as f64;
                    let alpha = schedule.weight_at(k);
                    let c = kf / (kf + 1.0);
                    self.comm.fill(&mut rngs.comm, noise_sign, &mut w, &mut v);
                    draw_eta(&mut rngs.sensing, &mut w, &mut eta);
                    self.apply_laplacian(&x, &mut lx);
                    for i in 0..n {
                        x[i] = c * (x[i] - alpha * lx[i]) + c * alpha * v[i] + eta[i] / (kf + 1.0);
                    }
                    visit(k + 1, &x);
                }
            }
            Dynamics::Md { a, b, tau } => {
                draw_eta(&mut rngs.sensing, &mut w, &mut eta);
                let mut x = eta.clone();
                visit(1, &x);
                for k in 1..k_max {
                    let p = ((k + 1) as f64).powf(tau);
                    let (alpha, beta) = (a / p, b / p);
                    self.comm.fill(&mut rngs.comm, noise_sign, &mut w, &mut v);
                    draw_eta(&mut rngs.sensing, &mut w, &mut eta);
                    self.apply_laplacian(&x, &mut lx);
                    for i in 0..n {
                        x[i] = x[i] - beta * lx[i] - alpha * x[i] + alpha * eta[i] + beta * v[i];
                    }
                    visit(k + 1, &x);
                }
            }
            Dynamics::Centralized => {
                let mut sum = 0.0;
                for k in 1..=k_max {
                    draw_eta(&mut rngs.sensing, &mut w, &mut eta);
                    sum += eta.iter().sum::<f64>();
                    visit(k, &[sum / k as f64]);
                }
            }
            Dynamics::Isolated { .. } => {
                let (mean, sd) = self.local.unwrap_or((0.0, 0.0));
                let mut sum = 0.0;
                for k in 1..=k_max {
                    let z = if sd > 0.0 { self.local_family.standard(&mut rngs.sensing) } else { 0.0 };
                    sum += s * mean + noise_sign * sd * z;
                    visit(k, &[sum / k as f64]);
                }
            }
        }
    }

    fn apply_laplacian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.laplacian[i * n..(i + 1) * n];
            out[i] = row.iter().zip(x).map(|(l, xi)| l * xi).sum();
        }
    }

    /// One full trajectory, for plotting.
    pub fn sample_path(&self, hyp: Hypothesis, master_seed: u64, trial: u64, k_max: usize) -> Vec<Vec<f64>> {
        let mut rngs = TrialRngs::new(master_seed, trial, hyp, false);
        let mut out = Vec::with_capacity(k_max);
        self.trial(hyp, &mut rngs, 1.0, k_max, |_, x| out.push(x.to_vec()));
        out
    }

    pub fn simulate(&self, hyp: Hypothesis, opts: &SimOptions) -> Result<EmpiricalStats, SimError> {
        if opts.trials == 0 || opts.k_max == 0 {
            return Err(SimError::Empty { trials: opts.trials, k_max: opts.k_max });
        }
        let mut cps = opts.checkpoints.clone();
        cps.sort_unstable();
        cps.dedup();
        if let Some(&k) = cps.iter().find(|&&k| k == 0 || k > opts.k_max) {
            return Err(SimError::BadCheckpoint { k, k_max: opts.k_max });
        }
        let dim = self.outputs();
        let chunks: Vec<(usize, usize)> = (0..opts.trials)
            .step_by(CHUNK)
            .map(|lo| (lo, (lo + CHUNK).min(opts.trials)))
            .collect();
        let noise_sign = if opts.mirror_h0 && hyp == Hypothesis::H0 { -1.0 } else { 1.0 };
        let run_chunk = |&(lo, hi): &(usize, usize)| {
            let mut acc: Vec<Welford> = cps.iter().map(|_| Welford::new(dim)).collect();
            for t in lo..hi {
                let mut rngs = TrialRngs::new(opts.master_seed, t as u64, hyp, opts.mirror_h0);
                let mut next = 0;
                self.trial(hyp, &mut rngs, noise_sign, opts.k_max, |k, x| {
                    if next < cps.len() && cps[next] == k {
                        acc[next].push(x, hyp);
                        next += 1;
                    }
                });
            }
            acc
        };
        let parts: Vec<Vec<Welford>> = match opts.threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| SimError::Pool(e.to_string()))?
                .install(|| chunks.par_iter().map(run_chunk).collect()),
            None => chunks.par_iter().map(run_chunk).collect(),
        };
        let mut total: Vec<Welford> = cps.iter().map(|_| Welford::new(dim)).collect();
        for part in &parts {
            for (t, p) in total.iter_mut().zip(part) {
                t.merge(p);
            }
        }
        Ok(EmpiricalStats {
            dynamics: self.dynamics.label(),
            hypothesis: hyp,
            trials: opts.trials,
            checkpoints: cps.iter().zip(&total).map(|(&k, w)| w.finish(k)).collect(),
        })
    }
}

/// Trials per work unit. Fixed so that the merge order never changes.
const CHUNK: usize = 256;

const STREAM_SENSING: u64 = 0;
const STREAM_COMM: u64 = 1;

struct TrialRngs {
    sensing: ChaCha8Rng,
    comm: ChaCha8Rng,
}

impl TrialRngs {
    /// Independent streams per trial and role. With `mirror`, both hypotheses
    /// share the same draws.
    fn new(master_seed: u64, trial: u64, hyp: Hypothesis, mirror: bool) -> Self {
        let tag = if mirror || hyp == Hypothesis::H1 { 0 } else { 1 };
        let seed = splitmix64(splitmix64(master_seed) ^ splitmix64(trial.wrapping_mul(2).wrapping_add(tag)));
        let mut sensing = ChaCha8Rng::seed_from_u64(seed);
        sensing.set_stream(STREAM_SENSING);
        let mut comm = ChaCha8Rng::seed_from_u64(seed);
        comm.set_stream(STREAM_COMM);
        TrialRngs { sensing, comm }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub trials: usize,
    pub k_max: usize,
    pub checkpoints: Vec<usize>,
    pub master_seed: u64,
    /// Under `H0`, reuse the `H1` draws with flipped sign.
    pub mirror_h0: bool,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// Streaming mean/covariance with error counts.
#[derive(Debug, Clone)]
struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    errors: Vec<u64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim], errors: vec![0; dim] }
    }

    fn push(&mut self, x: &[f64], hyp: Hypothesis) {
        let dim = self.mean.len();
        self.count += 1;
        let c = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for i in 0..dim {
            self.mean[i] += delta[i] / c;
        }
        for i in 0..dim {
            let di = x[i] - self.mean[i];
            for j in 0..dim {
                self.m2[i * dim + j] += delta[j] * di;
            }
            if hyp.is_error(x[i]) {
                self.errors[i] += 1;
            }
        }
    }

    fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let dim = self.mean.len();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..dim {
            self.mean[i] += delta[i] * nb / n;
            self.errors[i] += other.errors[i];
            for j in 0..dim {
                self.m2[i * dim + j] += other.m2[i * dim + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        self.count += other.count;
    }

    fn finish(&self, k: usize) -> CheckpointStats {
        let dim = self.mean.len();
        let denom = (self.count.max(2) - 1) as f64;
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| 0.5 * (self.m2[i * dim + j] + self.m2[j * dim + i]) / denom).collect())
            .collect();
        CheckpointStats { k, errors: self.errors.clone(), mean: self.mean.clone(), cov }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub k: usize,
    pub errors: Vec<u64>,
    pub mean: Vec<f64>,
    /// Unbiased sample covariance.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalStats {
    pub dynamics: String,
    pub hypothesis: Hypothesis,
    pub trials: usize,
    pub checkpoints: Vec<CheckpointStats>,
}

impl EmpiricalStats {
    pub fn at(&self, k: usize) -> Option<&CheckpointStats> {
        self.checkpoints.iter().find(|c| c.k == k)
    }

    /// Error frequency and 95% Wilson interval at checkpoint `k` for each output.
    pub fn error_rates(&self, k: usize) -> Option<Vec<(f64, f64, f64)>> {
        let cp = self.at(k)?;
        Some(cp.errors.iter().map(|&e| wilson(e, self.trials as u64)).collect())
    }

    /// Standard error of the mean estimate, per output.
    pub fn mean_se(&self, k: usize) -> Option<Vec<f64>> {
        let cp = self.at(k)?;
        let m = self.trials as f64;
        Some((0..cp.mean.len()).map(|i| (cp.cov[i][i] / m).sqrt()).collect())
    }

    /// Standard error of each covariance entry under Gaussian sampling,
    /// `sqrt((S_ii S_jj + S_ij^2) / M)`.
    pub fn cov_se(&self, k: usize) -> Option<Vec<Vec<f64>>> {
        let cp = self.at(k)?;
        let m = self.trials as f64;
        let n = cp.mean.len();
        Some(
            (0..n)
                .map(|i| (0..n).map(|j| ((cp.cov[i][i] * cp.cov[j][j] + cp.cov[i][j].powi(2)) / m).sqrt()).collect())
                .collect(),
        )
    }

    /// CSV with columns `k, sensor, hypothesis, errors, trials, p_hat, ci_lo, ci_hi`.
    pub fn write_results_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        write_results_header(&mut out)?;
        self.append_results(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn append_results<W: Write>(&self, out: &mut csv::Writer<W>) -> Result<(), SimError> {
        for cp in &self.checkpoints {
            for (i, &e) in cp.errors.iter().enumerate() {
                let (p, lo, hi) = wilson(e, self.trials as u64);
                out.write_record([
                    cp.k.to_string(),
                    i.to_string(),
                    self.hypothesis.label().to_string(),
                    e.to_string(),
                    self.trials.to_string(),
                    fmt_sig(p),
                    fmt_sig(lo),
                    fmt_sig(hi),
                ])?;
            }
        }
        Ok(())
    }

    /// Empirical moments in the `k, sensor, mu, sigma2` layout.
    pub fn write_moments_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "sensor", "mu", "sigma2"])?;
        for cp in &self.checkpoints {
            for i in 0..cp.mean.len() {
                out.write_record([cp.k.to_string(), i.to_string(), fmt_sig(cp.mean[i]), fmt_sig(cp.cov[i][i])])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn write_results_header<W: Write>(out: &mut csv::Writer<W>) -> Result<(), SimError> {
    out.write_record(["k", "sensor", "hypothesis", "errors", "trials", "p_hat", "ci_lo", "ci_hi"])?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub k: usize,
    pub sensor: usize,
    pub hypothesis: String,
    pub errors: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>, SimError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let expect = ["k", "sensor", "hypothesis", "errors", "trials", "p_hat", "ci_lo", "ci_hi"];
    if header.iter().ne(expect.iter().copied()) {
        return Err(SimError::Parse(format!("unexpected header {header:?}")));
    }
    Ok(rd.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

/// `(p_hat, lo, hi)` with a 95% Wilson score interval.
pub fn wilson(errors: u64, trials: u64) -> (f64, f64, f64) {
    if trials == 0 {
        return (f64::NAN, 0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let m = trials as f64;
    let p = errors as f64 / m;
    let z2 = Z * Z;
    let den = 1.0 + z2 / m;
    let center = (p + z2 / (2.0 * m)) / den;
    let half = Z / den * (p * (1.0 - p) / m + z2 / (4.0 * m * m)).sqrt();
    let lo = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if errors == trials { 1.0 } else { (center + half).min(1.0) };
    (p, lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RateEstimate {
    Estimate { rate: f64, lo: f64, hi: f64 },
    /// No errors observed: the error probability is below `1/M`.
    BelowResolution { rate_at_least: f64 },
}

impl RateEstimate {
    pub fn rate(&self) -> Option<f64> {
        match self {
            RateEstimate::Estimate { rate, .. } => Some(*rate),
            RateEstimate::BelowResolution { .. } => None,
        }
    }
}

/// `-ln(P_hat)/k` per output, with the Wilson interval mapped through the log.
pub fn empirical_rate(stats: &EmpiricalStats, k: usize) -> Option<Vec<RateEstimate>> {
    let cp = stats.at(k)?;
    let m = stats.trials as u64;
    let kf = k as f64;
    Some(
        cp.errors
            .iter()
            .map(|&e| {
                let (p, lo, hi) = wilson(e, m);
                if e == 0 {
                    RateEstimate::BelowResolution { rate_at_least: (m as f64).ln() / kf }
                } else {
                    RateEstimate::Estimate { rate: -p.ln() / kf, lo: -hi.ln() / kf, hi: -lo.ln() / kf }
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DsnrGrowth {
    pub checkpoints: Vec<usize>,
    /// `dsnr[c][i]` is sensor `i`'s empirical DSNR at `checkpoints[c]`.
    pub dsnr: Vec<Vec<f64>>,
    /// Least-squares slope of `DSNR_i(k) = s k` through the origin over the last decade.
    pub slope: Vec<f64>,
    /// Ratio of the largest to the smallest `DSNR_i(k)/k` over all checkpoints.
    pub band: Vec<f64>,
}

impl DsnrGrowth {
    pub fn over_k(&self) -> Vec<Vec<f64>> {
        self.dsnr
            .iter()
            .zip(&self.checkpoints)
            .map(|(row, &k)| row.iter().map(|d| d / k as f64).collect())
            .collect()
    }
}

/// Empirical `DSNR_i(k) = mean^2 / var` under `H1` at every checkpoint.
pub fn dsnr_growth(stats: &EmpiricalStats) -> Result<DsnrGrowth, SimError> {
    let mut dsnr = Vec::new();
    let mut ks = Vec::new();
    for cp in &stats.checkpoints {
        let mut row = Vec::new();
        for i in 0..cp.mean.len() {
            let var = cp.cov[i][i];
            if !(var > 0.0) {
                return Err(SimError::DegenerateVariance { k: cp.k, sensor: i, var });
            }
            row.push(cp.mean[i] * cp.mean[i] / var);
        }
        ks.push(cp.k);
        dsnr.push(row);
    }
    let n = dsnr.first().map_or(0, Vec::len);
    let k_last = ks.last().copied().unwrap_or(0);
    let mut slope = vec![0.0; n];
    let mut band = vec![1.0; n];
    for i in 0..n {
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (c, &k) in ks.iter().enumerate() {
            if k * 10 >= k_last {
                sxy += k as f64 * dsnr[c][i];
                sxx += (k as f64).powi(2);
            }
        }
        slope[i] = sxy / sxx;
        let ratios: Vec<f64> = ks.iter().enumerate().map(|(c, &k)| dsnr[c][i] / k as f64).collect();
        let hi = ratios.iter().copied().fold(f64::MIN, f64::max);
        let lo = ratios.iter().copied().fold(f64::MAX, f64::min);
        band[i] = hi / lo;
    }
    Ok(DsnrGrowth { checkpoints: ks, dsnr, slope, band })
}
