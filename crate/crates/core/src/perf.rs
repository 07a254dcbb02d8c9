//! Error probabilities, error exponents, and the analytic rate bounds.
//!
//! All probabilities are carried in the log domain.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::fmt_sig;
use crate::model::{DerivedStats, ModelError};
use crate::moments::{MomentRecord, MomentTrajectory};
use crate::schedule::{self, PayoffVerdict};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("communication gain G_c = {0} must be positive")]
    NonPositiveGain(f64),
    #[error("initial Z(1) = 1 - b/(a+1) = {0} is not positive; parameters inadmissible")]
    InadmissibleZ(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("trajectory too short: K = {0} < 1000")]
    TooShort(usize),
    #[error("empty b0 grid")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Switch point between the erfc evaluation and the asymptotic series.
const ASYMPTOTIC_FROM: f64 = 8.0;

/// `ln Q(t)`, `Q` the standard normal tail.
pub fn log_q(t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return (-q_upper(-t)).ln_1p();
    }
    if t < ASYMPTOTIC_FROM {
        return q_upper(t).ln();
    }
    if t.is_infinite() {
        return f64::NEG_INFINITY;
    }
    // ln Q(t) = -t^2/2 - ln(t sqrt(2 pi)) + ln(1 - 1/t^2 + 3/t^4 - 15/t^6 + ...)
    let inv2 = 1.0 / (t * t);
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 1.0;
    loop {
        let next = -term * (2.0 * n - 1.0) * inv2;
        if next.abs() >= term.abs() || next.abs() < 1e-18 {
            break;
        }
        sum += next;
        term = next;
        n += 1.0;
    }
    -0.5 * t * t - t.ln() - LN_SQRT_2PI + sum.ln()
}

/// `Q(t)` for `t >= 0` via erfc.
fn q_upper(t: f64) -> f64 {
    0.5 * libm::erfc(t / std::f64::consts::SQRT_2)
}

/// `Q(t)` on the linear scale; underflows to 0 for large `t`.
pub fn q(t: f64) -> f64 {
    log_q(t).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorProb {
    pub p: f64,
    pub log_p: f64,
    pub dsnr: f64,
}

/// Error probability `Q(mu/sigma)` of a zero-threshold Gaussian detector.
pub fn error_prob(mu: f64, sigma: f64) -> Result<ErrorProb, PerfError> {
    if !(sigma > 0.0) {
        return Err(PerfError::NonPositiveSigma(sigma));
    }
    let t = mu / sigma;
    let log_p = log_q(t);
    Ok(ErrorProb { p: log_p.exp(), log_p, dsnr: t * t })
}

/// Rate `-ln P/k` of a scalar Gaussian statistic, also defined at zero variance.
///
/// A statistic that is identically zero carries no information and gets rate 0.
/// A deterministic positive statistic never errs and gets `+inf`.
pub fn scalar_rate(mean: f64, variance: f64, k: usize) -> (f64, f64) {
    let kf = k as f64;
    if variance > 0.0 {
        let t = mean / variance.sqrt();
        (-log_q(t) / kf, t * t / (2.0 * kf))
    } else if mean > 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (0.0, 0.0)
    }
}

/// Enclosure of `-ln Q(sqrt(dsnr))/k` from the elementary Gaussian tail bounds
/// `t/(1+t^2) phi(t) <= Q(t) <= phi(t)/t`.
pub fn rate_enclosure(dsnr: f64, k: usize) -> (f64, f64) {
    let t = dsnr.sqrt();
    let kf = k as f64;
    let lo = (0.5 * dsnr + t.ln() + LN_SQRT_2PI) / kf;
    let hi = (0.5 * dsnr + ((1.0 + dsnr) / t).ln() + LN_SQRT_2PI) / kf;
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub k: usize,
    pub rate: Vec<f64>,
    pub log_p: Vec<f64>,
    pub dsnr_over_2k: Vec<f64>,
    /// Rate of the sensor with the largest error probability.
    pub worst_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RateTrajectory {
    pub records: Vec<RateRecord>,
}

impl RateTrajectory {
    pub fn at(&self, k: usize) -> Option<&RateRecord> {
        self.records
            .binary_search_by_key(&k, |r| r.k)
            .ok()
            .map(|i| &self.records[i])
    }

    /// CSV with columns `k, sensor, rate, dsnr_over_2k`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PerfError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RATES_HEADER)?;
        for r in &self.records {
            for i in 0..r.rate.len() {
                out.write_record([r.k.to_string(), i.to_string(), fmt_sig(r.rate[i]), fmt_sig(r.dsnr_over_2k[i])])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

const RATES_HEADER: [&str; 4] = ["k", "sensor", "rate", "dsnr_over_2k"];

/// Reads a table written by [`RateTrajectory::write_csv`]; `log_p` and the
/// worst rate are re-derived from the rates.
pub fn read_rates_csv<R: std::io::Read>(r: R) -> Result<RateTrajectory, PerfError> {
    let rows = crate::io::read_sensor_table(r, RATES_HEADER).map_err(PerfError::Invalid)?;
    Ok(RateTrajectory {
        records: rows
            .into_iter()
            .map(|(k, rate, d2k)| RateRecord {
                k,
                log_p: rate.iter().map(|r| -r * k as f64).collect(),
                worst_rate: rate.iter().copied().fold(f64::INFINITY, f64::min),
                rate,
                dsnr_over_2k: d2k,
            })
            .collect(),
    })
}

pub fn rate_record(r: &MomentRecord) -> RateRecord {
    let kf = r.k as f64;
    let mut rate = Vec::with_capacity(r.mu.len());
    let mut log_p = Vec::with_capacity(r.mu.len());
    let mut d2k = Vec::with_capacity(r.mu.len());
    for (&m, &v) in r.mu.iter().zip(&r.sigma2) {
        let (ri, di) = scalar_rate(m, v, r.k);
        rate.push(ri);
        log_p.push(-ri * kf);
        d2k.push(di);
    }
    let worst_rate = rate.iter().copied().fold(f64::INFINITY, f64::min);
    RateRecord { k: r.k, rate, log_p, dsnr_over_2k: d2k, worst_rate }
}

pub fn rate_trajectory(traj: &MomentTrajectory) -> RateTrajectory {
    RateTrajectory { records: traj.records.iter().map(rate_record).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1 {
    pub value: f64,
    /// The numerator base `1 - sqrt(N) c_mu/(1 + b0 lambda_2)` was negative.
    pub clamped: bool,
}

/// Lower bound on every sensor's rate for general (possibly non-identical) sensors.
pub fn theorem1_bound(d: &DerivedStats, b0: f64, lambda2: f64) -> Result<Theorem1, PerfError> {
    if !(d.g_c > 0.0) {
        return Err(PerfError::NonPositiveGain(d.g_c));
    }
    let n = d.n as f64;
    let s = 1.0 + b0 * lambda2;
    let base = 1.0 - n.sqrt() * d.c_mu()? / s;
    let den = 1.0 + 3.0 * n * d.c_sigma()? / s + comm_term(n, b0, d.g_c);
    Ok(Theorem1 { value: d.chernoff_total * base.max(0.0).powi(2) / den, clamped: base < 0.0 })
}

/// `N b0^2 / G_c`, zero for noiseless links.
fn comm_term(n: f64, b0: f64, g_c: f64) -> f64 {
    if g_c.is_infinite() {
        0.0
    } else {
        n * b0 * b0 / g_c
    }
}

/// Identical-sensor bounds `(tight, loose)`.
pub fn theorem2_bounds(ssnr: f64, n: usize, b0: f64, lambda2: f64, g_c: f64) -> (f64, f64) {
    let nf = n as f64;
    let c = ssnr / 8.0;
    let comm = comm_term(nf, b0, g_c);
    let tight = c / (1.0 + nf / (1.0 + b0 * lambda2) + comm);
    let loose = c / (1.0 + nf / (b0 * lambda2) + comm);
    (tight, loose)
}

/// Upper bound on sensor `i`'s rate under `beta_k = b0/(a + k^tau)` weights.
pub fn theorem3_upper(tau: f64, d: &DerivedStats, b0: f64, lambda_max: f64, i: usize) -> Result<f64, PerfError> {
    let ssnr_i = *d
        .ssnr_i
        .get(i)
        .ok_or_else(|| PerfError::Invalid(format!("sensor {i} out of range for N = {}", d.n)))?;
    if tau < 1.0 {
        return Ok(0.0);
    }
    if tau > 1.0 {
        return Ok(ssnr_i / 8.0);
    }
    let n = d.n as f64;
    let noise = if d.s_v_min_eig == 0.0 { 0.0 } else { b0 * b0 * d.s_v_min_eig / (n * ssnr_i) };
    Ok(d.chernoff_total / (1.0 + n / (1.0 + 2.0 * b0 * lambda_max) + noise))
}

/// Closed-form bound at the optimal gain: `(SSNR/8)/(1 + N c0/(lambda_2^{2/3} G_c^{1/3}))`.
pub fn lemma6_bound(ssnr: f64, n: usize, lambda2: f64, g_c: f64) -> f64 {
    ssnr / 8.0 / (1.0 + n as f64 * schedule::c0() / (lambda2.powf(2.0 / 3.0) * g_c.cbrt()))
}

/// Lower bound on `liminf DSNR_i(k)/k`, reported in the form of [`theorem1_bound`]
/// (twice its value). The non-Gaussian extension prints `b0 lambda_2` where
/// the Gaussian result has `1 + b0 lambda_2`; the latter is used.
pub fn dsnr_growth_lower(d: &DerivedStats, b0: f64, lambda2: f64) -> Result<f64, PerfError> {
    Ok(2.0 * theorem1_bound(d, b0, lambda2)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm3Entry {
    pub tau: f64,
    pub per_sensor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub b0: f64,
    pub a: f64,
    pub lambda2: f64,
    pub lambda_max: f64,
    pub identical_sensors: bool,
    pub thm1_lower: f64,
    pub thm1_numerator_clamped: bool,
    pub dsnr_growth_lower: f64,
    pub thm2_tight: f64,
    pub thm2_loose: f64,
    pub thm3_upper: Vec<Thm3Entry>,
    pub b0_star: f64,
    pub lemma6_bound: f64,
    pub chernoff_total: f64,
    pub chernoff_i: Vec<f64>,
    pub chernoff_best_isolated: f64,
    pub g_c: f64,
    pub payoff: Option<PayoffVerdict>,
}

impl BoundReport {
    pub fn compute(
        d: &DerivedStats,
        b0: f64,
        a: f64,
        lambda2: f64,
        lambda_max: f64,
        taus: &[f64],
    ) -> Result<Self, PerfError> {
        let t1 = theorem1_bound(d, b0, lambda2)?;
        let (tight, loose) = theorem2_bounds(d.ssnr, d.n, b0, lambda2, d.g_c);
        let thm3_upper = taus
            .iter()
            .map(|&tau| {
                let per_sensor = (0..d.n)
                    .map(|i| theorem3_upper(tau, d, b0, lambda_max, i))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Thm3Entry { tau, per_sensor })
            })
            .collect::<Result<Vec<_>, PerfError>>()?;
        let payoff = if d.n >= 2 && lambda2 > 0.0 {
            Some(schedule::payoff_achieved(d.g_c, d.n, lambda2)?)
        } else {
            None
        };
        Ok(BoundReport {
            b0,
            a,
            lambda2,
            lambda_max,
            identical_sensors: d.identical_sensors(),
            thm1_lower: t1.value,
            thm1_numerator_clamped: t1.clamped,
            dsnr_growth_lower: 2.0 * t1.value,
            thm2_tight: tight,
            thm2_loose: loose,
            thm3_upper,
            b0_star: schedule::optimal_b0(d.g_c, lambda2),
            lemma6_bound: lemma6_bound(d.ssnr, d.n, lambda2, d.g_c),
            chernoff_total: d.chernoff_total,
            chernoff_i: d.chernoff_i.clone(),
            chernoff_best_isolated: d.best_isolated_chernoff(),
            g_c: d.g_c,
            payoff,
        })
    }
}

/// Auxiliary sequences, index `k - 1` holds the value at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZChiSequences {
    pub z: Vec<f64>,
    pub chi: Vec<f64>,
    pub z_beta: Vec<f64>,
    pub chi_beta: Vec<f64>,
}

/// Max and min over the last decade `[K/10, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailStats {
    pub max: f64,
    pub min: f64,
    pub last: f64,
}

pub fn tail_stats(seq: &[f64]) -> TailStats {
    let k = seq.len();
    let from = (k / 10).max(1) - 1;
    let tail = &seq[from..];
    TailStats {
        max: tail.iter().copied().fold(f64::MIN, f64::max),
        min: tail.iter().copied().fold(f64::MAX, f64::min),
        last: *seq.last().unwrap_or(&f64::NAN),
    }
}

impl ZChiSequences {
    pub fn at(seq: &[f64], k: usize) -> f64 {
        seq[k - 1]
    }

    pub fn z_tail(&self) -> TailStats {
        tail_stats(&self.z)
    }

    pub fn z_beta_tail(&self) -> TailStats {
        tail_stats(&self.z_beta)
    }
}

/// `Z(k)` with `b = b0 lambda_2`, `chi(k) = (1/k) sum_{j<k} (j alpha_j)^2` for
/// `alpha_j = b0/(a+j)`, and the `beta`-family versions: `Z_beta` with the
/// squared factor `(1 - b'/(a+(k+1)^tau))^2`, `b' = b0 lambda_N`, and `chi_beta`
/// with `beta_j = b0/(a + j^tau)`.
pub fn z_chi_sequences(
    a: f64,
    b0: f64,
    lambda2: f64,
    lambda_max: f64,
    tau: f64,
    k_max: usize,
) -> Result<ZChiSequences, PerfError> {
    if k_max < 2 {
        return Err(PerfError::Invalid(format!("K = {k_max} must be at least 2")));
    }
    if !(a > 0.0 && b0 > 0.0 && lambda2 > 0.0 && lambda_max >= lambda2 && tau >= 0.0) {
        return Err(PerfError::Invalid("a, b0, lambda_2 must be positive and lambda_N >= lambda_2".into()));
    }
    let b = b0 * lambda2;
    let bp = b0 * lambda_max;
    let z1 = 1.0 - b / (a + 1.0);
    if z1 <= 0.0 {
        return Err(PerfError::InadmissibleZ(z1));
    }
    let zb1 = 1.0 - bp / (a + 1.0);
    if zb1 <= 0.0 {
        return Err(PerfError::InadmissibleZ(zb1));
    }
    let mut z = Vec::with_capacity(k_max);
    let mut zb = Vec::with_capacity(k_max);
    let mut chi = Vec::with_capacity(k_max);
    let mut chib = Vec::with_capacity(k_max);
    let (mut zc, mut zbc) = (z1, zb1 * zb1);
    let (mut s, mut sb) = (0.0, 0.0);
    for k in 1..=k_max {
        let kf = k as f64;
        z.push(zc);
        zb.push(zbc);
        chi.push(s / kf);
        chib.push(sb / kf);
        let ja = kf * b0 / (a + kf);
        let jb = kf * b0 / (a + kf.powf(tau));
        s += ja * ja;
        sb += jb * jb;
        let c = kf / (kf + 1.0);
        let inv = 1.0 / (kf + 1.0);
        zc *= c;
        zc += inv;
        zc *= 1.0 - b / (a + kf + 1.0);
        let fb = 1.0 - bp / (a + (kf + 1.0).powf(tau));
        zbc = fb * fb * (c * zbc + inv);
    }
    Ok(ZChiSequences { z, chi, z_beta: zb, chi_beta: chib })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MdCertificate {
    pub tau: f64,
    pub k_max: usize,
    /// All traces vanish, nothing to certify.
    pub degenerate: bool,
    /// `min tr(Sigma(k)) k^tau` over recorded `k` in `[K/10, K]`.
    pub min_scaled_trace: f64,
    pub max_scaled_trace: f64,
    /// `tr(Sigma(k)) k^tau` at the first recorded `k >= K/10`.
    pub scaled_trace_at_start: f64,
    pub worst_rate_start: f64,
    pub worst_rate_end: f64,
    pub worst_rate_decreasing: bool,
}

impl MdCertificate {
    /// Trace bounded away from zero on the `k^{-tau}` scale.
    pub fn holds(&self) -> bool {
        !self.degenerate && self.min_scaled_trace > 0.0 && self.worst_rate_decreasing
    }
}

pub fn md_trace_growth(traj: &MomentTrajectory, tau: f64) -> Result<MdCertificate, PerfError> {
    let k_max = traj.final_state.k;
    if k_max < 1000 {
        return Err(PerfError::TooShort(k_max));
    }
    let window: Vec<&MomentRecord> = traj.window(k_max / 10, k_max).collect();
    let scaled: Vec<f64> = window.iter().map(|r| r.trace * (r.k as f64).powf(tau)).collect();
    let degenerate = traj.records.iter().all(|r| r.trace == 0.0);
    let first = window.first().ok_or(PerfError::TooShort(k_max))?;
    let last = window.last().ok_or(PerfError::TooShort(k_max))?;
    let (ws, we) = (rate_record(first).worst_rate, rate_record(last).worst_rate);
    Ok(MdCertificate {
        tau,
        k_max,
        degenerate,
        min_scaled_trace: scaled.iter().copied().fold(f64::INFINITY, f64::min),
        max_scaled_trace: scaled.iter().copied().fold(0.0, f64::max),
        scaled_trace_at_start: scaled[0],
        worst_rate_start: ws,
        worst_rate_end: we,
        worst_rate_decreasing: we < ws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub b0: f64,
    pub thm2_tight: f64,
    pub thm2_loose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub argmax_loose: usize,
    pub argmax_tight: usize,
    pub b0_star: f64,
    /// The loose-bound argmax sits on the first or last grid point.
    pub argmax_on_boundary: bool,
}

impl Sweep {
    /// Grid index closest to `b0` in log distance.
    pub fn nearest(&self, b0: f64) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if (r.b0 / b0).ln().abs() < (self.rows[best].b0 / b0).ln().abs() {
                best = i;
            }
        }
        best
    }
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi / lo).ln() / (points - 1) as f64;
            (0..points).map(|i| lo * (step * i as f64).exp()).collect()
        }
    }
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Identical-sensor bounds over a `b0` grid.
pub fn sweep_b0(ssnr: f64, n: usize, lambda2: f64, g_c: f64, grid: &[f64]) -> Result<Sweep, PerfError> {
    if grid.is_empty() {
        return Err(PerfError::EmptyGrid);
    }
    let rows: Vec<SweepRow> = grid
        .iter()
        .map(|&b0| {
            let (thm2_tight, thm2_loose) = theorem2_bounds(ssnr, n, b0, lambda2, g_c);
            SweepRow { b0, thm2_tight, thm2_loose }
        })
        .collect();
    let argmax_loose = argmax(rows.iter().map(|r| r.thm2_loose));
    let argmax_tight = argmax(rows.iter().map(|r| r.thm2_tight));
    Ok(Sweep {
        argmax_on_boundary: rows.len() > 1 && (argmax_loose == 0 || argmax_loose == rows.len() - 1),
        rows,
        argmax_loose,
        argmax_tight,
        b0_star: schedule::optimal_b0(g_c, lambda2),
    })
}
