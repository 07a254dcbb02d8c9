//! Configuration-driven experiment commands behind the `cidetect` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{build_graph, spectrum, GraphError, GraphSpec, LaplacianSpectrum, NetworkGraph};
use crate::io::fmt_sig;
use crate::model::{snr_stats, validate_assumptions, AssumptionReport, CommModel, DerivedStats, ModelError, ModelSpec, SensingModel};
use crate::moments::{
    centralized_moments, isolated_moments, CiDynamics, MdDynamics, MomentRecord, MomentState, MomentTrajectory,
    MomentsError, Recording,
};
use crate::montecarlo::{dsnr_growth, write_results_header, Dynamics, Hypothesis, NoiseFamily, SimError, SimOptions, Simulator};
use crate::perf::{self, rate_record, rate_trajectory, BoundReport, PerfError};
use crate::schedule::{self, ScheduleError, ScheduleSpec, WeightSchedule};

/// Environment variable capping the Monte Carlo worker count.
pub const THREADS_ENV: &str = "CIDETECT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("assumption validation failed:\n{}", .0.join("\n"))]
    Assumptions(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Assumptions(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::EigenNoConvergence(_) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dimension(_) | ModelError::BadMatrixSpec(_) => CliError::Config(e.to_string()),
            other => CliError::Assumptions(vec![other.to_string()]),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Disconnected => CliError::Assumptions(vec!["network connected: lambda_2 = 0".into()]),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<MomentsError> for CliError {
    fn from(e: MomentsError) -> Self {
        match e {
            MomentsError::Contraction { .. } | MomentsError::Indefinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PerfError> for CliError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Model(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Moments(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsSel {
    #[default]
    Ci,
    Md,
    Centralized,
    Isolated {
        sensor: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub sensing: NoiseFamily,
    #[serde(default)]
    pub comm: NoiseFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdConfig {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    #[serde(default)]
    pub allow_any_tau: bool,
}

impl Default for MdConfig {
    fn default() -> Self {
        MdConfig { a: 1.0, b: 1.0, tau: 0.75, allow_any_tau: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

fn default_k() -> usize {
    1000
}

fn default_taus() -> Vec<f64> {
    vec![0.7, 1.0, 1.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub dynamics: DynamicsSel,
    /// Horizon `K`.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Monte Carlo trials `M`; 0 means analytic only.
    #[serde(default)]
    pub trials: usize,
    /// Empty means powers of ten up to `K`, plus `K`.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub md: MdConfig,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub mirror_h0: bool,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative edge-file paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let GraphSpec::EdgeFile { path: p } = &mut cfg.graph {
            let rel = PathBuf::from(&*p);
            if rel.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(rel).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    /// Compact JSON with sorted keys; the basis of the config hash.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        let mut cps: Vec<usize> = if self.checkpoints.is_empty() {
            std::iter::successors(Some(1usize), |&k| k.checked_mul(10)).take_while(|&k| k <= self.k).collect()
        } else {
            self.checkpoints.clone()
        };
        if self.checkpoints.is_empty() {
            cps.push(self.k);
        }
        cps.retain(|&k| k >= 1 && k <= self.k);
        cps.sort_unstable();
        cps.dedup();
        cps
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Validated inputs shared by all commands.
pub struct Prepared {
    pub graph: NetworkGraph,
    pub spectrum: LaplacianSpectrum,
    pub sensing: SensingModel,
    pub comm: CommModel,
    pub stats: DerivedStats,
    pub schedule: WeightSchedule,
    pub assumptions: AssumptionReport,
}

impl Prepared {
    pub fn laplacian(&self) -> &DMatrix<f64> {
        self.graph.laplacian()
    }

    pub fn gain(&self) -> (f64, f64) {
        self.schedule.offset_and_gain().unwrap_or((0.0, 0.0))
    }
}

/// Builds everything and checks assumptions 1 to 4 (and 5 when `identical`).
pub fn prepare(cfg: &ExperimentConfig, identical: bool) -> Result<Prepared, CliError> {
    if cfg.k == 0 {
        return Err(CliError::Config("K must be at least 1".into()));
    }
    let graph = build_graph(&cfg.graph)?;
    let spectrum = spectrum(&graph)?;
    let (sensing, comm) = cfg.model.build()?;
    if sensing.n() != graph.n() {
        return Err(CliError::Config(format!("model has {} sensors, graph has {}", sensing.n(), graph.n())));
    }
    let stats = snr_stats(&sensing, &comm)?;
    let pre = validate_assumptions(&sensing, &comm, &spectrum, None)?;
    let mut ids = vec![1u8, 2, 4];
    if identical {
        ids.push(5);
    }
    check(&pre, &ids)?;
    let schedule = cfg.schedule.resolve(stats.g_c, &spectrum)?;
    let assumptions = validate_assumptions(&sensing, &comm, &spectrum, Some(&schedule))?;
    if matches!(schedule, WeightSchedule::AlphaHarmonic { .. }) {
        check(&assumptions, &[3])?;
    }
    Ok(Prepared { graph, spectrum, sensing, comm, stats, schedule, assumptions })
}

fn check(report: &AssumptionReport, ids: &[u8]) -> Result<(), CliError> {
    let fails = report.failures(ids);
    if fails.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assumptions(
            fails.iter().map(|c| format!("assumption {} ({}): {}", c.id, c.name, c.detail)).collect(),
        ))
    }
}

/// Result of a command: written files and a short human summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub summary: String,
}

struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(OutDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<(), CliError> {
        self.write(name, canonical_pretty(v).as_bytes())
    }

    fn finish(mut self, cmd: &str, cfg: &ExperimentConfig, report: Option<&AssumptionReport>, start: Instant, summary: String) -> Result<Outcome, CliError> {
        self.write("config.json", cfg.canonical_json().as_bytes())?;
        let artifacts: Vec<Value> = self
            .files
            .iter()
            .map(|f| {
                let bytes = fs::read(self.dir.join(f)).map_err(io_err(&self.dir.join(f)))?;
                Ok(json!({"file": f, "sha256": hex(&Sha256::digest(&bytes))}))
            })
            .collect::<Result<_, CliError>>()?;
        let manifest = json!({
            "command": cmd,
            "config_file": "config.json",
            "config_hash": cfg.hash(),
            "artifacts": artifacts,
            "library_version": env!("CARGO_PKG_VERSION"),
            "wall_clock_seconds": start.elapsed().as_secs_f64(),
            "assumptions": report,
        });
        let text = canonical_pretty(&manifest);
        let p = self.dir.join(MANIFEST);
        fs::write(&p, text).map_err(io_err(&p))?;
        let mut files = self.files;
        files.push(MANIFEST.into());
        Ok(Outcome { artifacts: files, summary })
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Pretty JSON with keys in sorted order.
pub fn canonical_pretty(v: &Value) -> String {
    let sorted: Value = serde_json::from_str(&v.to_string()).expect("round trip");
    let mut s = serde_json::to_string_pretty(&sorted).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestCheck {
    pub config_ok: bool,
    /// Artifacts whose current hash differs from the recorded one.
    pub modified: Vec<String>,
}

impl ManifestCheck {
    pub fn ok(&self) -> bool {
        self.config_ok && self.modified.is_empty()
    }
}

/// Re-derives the config hash and artifact hashes of an output directory.
pub fn verify_manifest(dir: &Path) -> Result<ManifestCheck, CliError> {
    let mp = dir.join(MANIFEST);
    let m: Value = serde_json::from_str(&fs::read_to_string(&mp).map_err(io_err(&mp))?)
        .map_err(|e| CliError::Config(format!("manifest: {e}")))?;
    let cp = dir.join("config.json");
    let cfg_text = fs::read_to_string(&cp).map_err(io_err(&cp))?;
    let config_ok = match serde_json::from_str::<ExperimentConfig>(&cfg_text) {
        Ok(cfg) => Some(cfg.hash().as_str()) == m["config_hash"].as_str(),
        Err(_) => false,
    };
    let mut modified = Vec::new();
    for a in m["artifacts"].as_array().into_iter().flatten() {
        let name = a["file"].as_str().unwrap_or_default();
        let bytes = fs::read(dir.join(name)).unwrap_or_default();
        if Some(hex(&Sha256::digest(&bytes)).as_str()) != a["sha256"].as_str() {
            modified.push(name.to_string());
        }
    }
    Ok(ManifestCheck { config_ok, modified })
}

fn recording(cfg: &ExperimentConfig) -> Recording {
    Recording::default().with_checkpoints(cfg.checkpoints())
}

/// Exact-moment trajectory of the configured detector.
pub fn exact_trajectory(cfg: &ExperimentConfig, p: &Prepared) -> Result<MomentTrajectory, CliError> {
    let rec = recording(cfg);
    let s_v = p.comm.s_v();
    Ok(match cfg.dynamics {
        DynamicsSel::Ci => CiDynamics::new(&p.stats, s_v, p.laplacian(), p.schedule)?.run(cfg.k, &rec)?,
        DynamicsSel::Md => md_dynamics(cfg, p)?.run(cfg.k, &rec)?,
        DynamicsSel::Centralized | DynamicsSel::Isolated { .. } => {
            let ks = scalar_ks(cfg.k, &rec);
            let mut records = Vec::with_capacity(ks.len());
            for &k in &ks {
                let m = match cfg.dynamics {
                    DynamicsSel::Isolated { sensor } => isolated_moments(&p.stats, sensor, k)?,
                    _ => centralized_moments(&p.stats, k)?,
                };
                records.push(MomentRecord { k, mu: vec![m.mean], sigma2: vec![m.variance], trace: m.variance });
            }
            let last = records.last().expect("K >= 1");
            let final_state = MomentState {
                k: last.k,
                mu: nalgebra::DVector::from_vec(last.mu.clone()),
                sigma: DMatrix::from_element(1, 1, last.sigma2[0]),
            };
            MomentTrajectory { records, final_state }
        }
    })
}

fn md_dynamics(cfg: &ExperimentConfig, p: &Prepared) -> Result<MdDynamics, CliError> {
    Ok(MdDynamics::from_stats(
        &p.stats,
        p.comm.s_v(),
        p.laplacian(),
        cfg.md.a,
        cfg.md.b,
        cfg.md.tau,
        cfg.md.allow_any_tau,
    )?)
}

/// The `k` values a recursive run would have recorded.
fn scalar_ks(k_max: usize, rec: &Recording) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut next_log = rec.log_after as f64;
    let step = 10f64.powf(1.0 / rec.per_decade.max(1) as f64);
    for k in 1..=k_max {
        let keep = k == 1
            || k == k_max
            || rec.checkpoints.contains(&k)
            || (k <= rec.log_after && k % rec.every.max(1) == 0)
            || (k > rec.log_after && k as f64 >= next_log);
        if k > rec.log_after && k as f64 >= next_log {
            while next_log <= k as f64 {
                next_log *= step;
            }
        }
        if keep {
            ks.push(k);
        }
    }
    ks
}

fn derived_json(d: &DerivedStats) -> Value {
    json!({
        "n": d.n,
        "m_eta1": d.m_eta1.iter().copied().collect::<Vec<_>>(),
        "ssnr": d.ssnr,
        "ssnr_i": d.ssnr_i,
        "csnr": d.csnr,
        "g_c": d.g_c,
        "c_mu": d.c_mu,
        "c_sigma": d.c_sigma,
        "chernoff_total": d.chernoff_total,
        "chernoff_i": d.chernoff_i,
        "s_v_norm": d.s_v_norm,
        "identical_sensors": d.identical_sensors(),
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("csv: {e}"))
}

/// Bound report plus exact-moment rate and moment files.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let p = prepare(cfg, false)?;
    let (a, b0) = p.gain();
    let (l2, ln) = (p.spectrum.lambda2(), p.spectrum.lambda_max());
    let bounds = BoundReport::compute(&p.stats, b0, a, l2, ln, &cfg.taus)?;
    let traj = exact_trajectory(cfg, &p)?;
    let rates = rate_trajectory(&traj);

    let mut o = OutDir::new(out)?;
    let notes = [
        "dsnr_growth_lower uses the 1 + b0*lambda_2 denominators of the Gaussian rate bound",
        "thm2 bounds presume equal local SSNRs; see identical_sensors",
    ];
    o.json(
        "bounds.json",
        &json!({
            "assumptions": p.assumptions,
            "bounds": bounds,
            "derived": derived_json(&p.stats),
            "dynamics": cfg.dynamics,
            "schedule": p.schedule,
            "notes": notes,
        }),
    )?;
    o.write("rates.csv", &csv_bytes(|b| rates.write_csv(b).map_err(csv_err))?)?;
    o.write("moments.csv", &csv_bytes(|b| traj.write_csv(b).map_err(csv_err))?)?;
    o.write("moments_final.json", &csv_bytes(|b| traj.write_final_json(b).map_err(csv_err))?)?;
    let last = rates.records.last().expect("K >= 1");
    let summary = format!(
        "C = {}, thm1 = {}, thm2 tight/loose = {}/{}, worst exact rate at k = {}: {}",
        fmt_sig(bounds.chernoff_total),
        fmt_sig(bounds.thm1_lower),
        fmt_sig(bounds.thm2_tight),
        fmt_sig(bounds.thm2_loose),
        last.k,
        fmt_sig(last.worst_rate)
    );
    o.finish("analyze", cfg, Some(&p.assumptions), start, summary)
}

fn sim_dynamics(cfg: &ExperimentConfig, p: &Prepared) -> Dynamics {
    match cfg.dynamics {
        DynamicsSel::Ci => Dynamics::Ci { schedule: p.schedule },
        DynamicsSel::Md => Dynamics::Md { a: cfg.md.a, b: cfg.md.b, tau: cfg.md.tau },
        DynamicsSel::Centralized => Dynamics::Centralized,
        DynamicsSel::Isolated { sensor } => Dynamics::Isolated { sensor },
    }
}

/// Reads the worker cap from the environment.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse().ok()).filter(|&t| t > 0)
}

/// Monte Carlo run under both hypotheses. `threads` overrides the config cap.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Outcome, CliError> {
    let start = Instant::now();
    if cfg.trials == 0 {
        return Err(CliError::Config("M = 0 trials requested; use `analyze` for analytic-only runs".into()));
    }
    let p = prepare(cfg, false)?;
    let sim = Simulator::new(
        &p.sensing,
        &p.stats,
        p.comm.s_v(),
        p.laplacian(),
        sim_dynamics(cfg, &p),
        cfg.noise.sensing,
        cfg.noise.comm,
        cfg.md.allow_any_tau,
    )?;
    let cps = cfg.checkpoints();
    let opts = SimOptions {
        trials: cfg.trials,
        k_max: cfg.k,
        checkpoints: cps.clone(),
        master_seed: cfg.seed,
        mirror_h0: cfg.mirror_h0,
        threads: threads.or(cfg.threads),
    };
    let h1 = sim.simulate(Hypothesis::H1, &opts)?;
    let h0 = sim.simulate(Hypothesis::H0, &opts)?;

    let mut o = OutDir::new(out)?;
    let results = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        write_results_header(&mut w)?;
        h1.append_results(&mut w)?;
        h0.append_results(&mut w)?;
        w.flush().map_err(csv_err)?;
        Ok(())
    })?;
    o.write("results.csv", &results)?;
    o.write("empirical_moments.csv", &csv_bytes(|b| h1.write_moments_csv(b).map_err(csv_err))?)?;

    let exact = exact_trajectory(&ExperimentConfig { checkpoints: cps.clone(), ..cfg.clone() }, &p)?;
    let gaussian = cfg.noise.sensing == NoiseFamily::Gaussian && cfg.noise.comm == NoiseFamily::Gaussian;
    let cmp = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["k", "sensor", "exact_mu", "empirical_mu", "exact_sigma2", "empirical_sigma2", "exact_p", "p_hat"])
            .map_err(csv_err)?;
        for cp in &h1.checkpoints {
            let r = exact.at(cp.k).ok_or_else(|| CliError::Numerical(format!("no exact record at k = {}", cp.k)))?;
            let rr = rate_record(r);
            for i in 0..cp.mean.len() {
                let exact_p = if gaussian { fmt_sig(rr.log_p[i].exp()) } else { String::new() };
                w.write_record([
                    cp.k.to_string(),
                    i.to_string(),
                    fmt_sig(r.mu[i]),
                    fmt_sig(cp.mean[i]),
                    fmt_sig(r.sigma2[i]),
                    fmt_sig(cp.cov[i][i]),
                    exact_p,
                    fmt_sig(cp.errors[i] as f64 / h1.trials as f64),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(csv_err)?;
        Ok(())
    })?;
    o.write("comparison.csv", &cmp)?;

    if !gaussian {
        let g = dsnr_growth(&h1)?;
        let lower = match cfg.dynamics {
            DynamicsSel::Ci => {
                let (_, b0) = p.gain();
                perf::dsnr_growth_lower(&p.stats, b0, p.spectrum.lambda2()).ok()
            }
            _ => None,
        };
        o.json(
            "dsnr_growth.json",
            &json!({
                "checkpoints": g.checkpoints,
                "dsnr": g.dsnr,
                "dsnr_over_k": g.over_k(),
                "slope": g.slope,
                "band": g.band,
                "lower_bound_on_slope": lower,
                "centralized_slope": p.stats.ssnr / 4.0,
            }),
        )?;
    }
    let summary = format!("{} trials x {} iterations, {} checkpoints", cfg.trials, cfg.k, cps.len());
    o.finish("simulate", cfg, Some(&p.assumptions), start, summary)
}

/// Bounds and exact worst-sensor rate over a grid of gains `b0`.
pub fn cmd_sweep_b0(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let p = prepare(cfg, true)?;
    let (l2, ln) = (p.spectrum.lambda2(), p.spectrum.lambda_max());
    let d = &p.stats;
    let b_star = schedule::optimal_b0(d.g_c, l2);
    let sc = cfg.sweep.unwrap_or(SweepConfig { lo: b_star / 20.0, hi: 20.0 * b_star, points: 200 });
    if sc.points == 0 {
        return Err(PerfError::EmptyGrid.into());
    }
    if !(sc.lo > 0.0 && sc.hi >= sc.lo) {
        return Err(CliError::Config(format!("sweep range [{}, {}] must be positive and ordered", sc.lo, sc.hi)));
    }
    let grid = perf::log_grid(sc.lo, sc.hi, sc.points);
    let sweep = perf::sweep_b0(d.ssnr, d.n, l2, d.g_c, &grid)?;
    let exact: Vec<f64> = grid
        .par_iter()
        .map(|&b0| -> Result<f64, CliError> {
            let a = cfg.schedule.a.unwrap_or(b0 * ln);
            let dy = CiDynamics::new(d, p.comm.s_v(), p.laplacian(), WeightSchedule::AlphaHarmonic { a, b0 })?;
            let st = dy.state_at(cfg.k)?;
            let r = rate_record(&MomentRecord {
                k: st.k,
                mu: st.mu.iter().copied().collect(),
                sigma2: st.sigma.diagonal().iter().copied().collect(),
                trace: st.sigma.trace(),
            });
            Ok(r.worst_rate)
        })
        .collect::<Result<_, _>>()?;
    let nearest = sweep.nearest(b_star);
    let table = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["b0", "thm2_tight", "thm2_loose", "exact_rate_at_K", "argmax_loose", "nearest_b0_star"])
            .map_err(csv_err)?;
        for (i, r) in sweep.rows.iter().enumerate() {
            w.write_record([
                fmt_sig(r.b0),
                fmt_sig(r.thm2_tight),
                fmt_sig(r.thm2_loose),
                fmt_sig(exact[i]),
                u8::from(i == sweep.argmax_loose).to_string(),
                u8::from(i == nearest).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(csv_err)?;
        Ok(())
    })?;
    let exact_arg = exact
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0;
    let mut o = OutDir::new(out)?;
    o.write("sweep.csv", &table)?;
    let steps = sweep.argmax_loose as i64 - nearest as i64;
    o.json(
        "sweep.json",
        &json!({
            "b0_star": b_star,
            "lemma6_bound": perf::lemma6_bound(d.ssnr, d.n, l2, d.g_c),
            "argmax_loose_b0": sweep.rows[sweep.argmax_loose].b0,
            "argmax_tight_b0": sweep.rows[sweep.argmax_tight].b0,
            "argmax_exact_b0": grid[exact_arg],
            "grid_steps_from_b0_star": steps,
            "argmax_on_boundary": sweep.argmax_on_boundary,
            "k": cfg.k,
        }),
    )?;
    let summary = format!(
        "b0* = {}, loose-bound argmax at {} ({} grid steps){}",
        fmt_sig(b_star),
        fmt_sig(sweep.rows[sweep.argmax_loose].b0),
        steps,
        if sweep.argmax_on_boundary { ", on the grid boundary" } else { "" }
    );
    o.finish("sweep-b0", cfg, Some(&p.assumptions), start, summary)
}

/// Exact worst-sensor rates of the configured schedule against the MD detector.
pub fn cmd_compare_md(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    if !(cfg.md.tau > 0.5 && cfg.md.tau < 1.0) {
        return Err(CliError::Config(format!("MD needs tau in (0.5, 1), got {}", cfg.md.tau)));
    }
    let p = prepare(cfg, false)?;
    let rec = recording(cfg);
    let ci = CiDynamics::new(&p.stats, p.comm.s_v(), p.laplacian(), p.schedule)?.run(cfg.k, &rec)?;
    let md_traj = MdDynamics::from_stats(&p.stats, p.comm.s_v(), p.laplacian(), cfg.md.a, cfg.md.b, cfg.md.tau, false)?
        .run(cfg.k, &rec)?;
    let (ci_r, md_r) = (rate_trajectory(&ci), rate_trajectory(&md_traj));
    let table = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["k", "ci_worst_rate", "md_worst_rate", "md_scaled_trace"]).map_err(csv_err)?;
        for ((c, m), r) in ci_r.records.iter().zip(&md_r.records).zip(&md_traj.records) {
            w.write_record([
                c.k.to_string(),
                fmt_sig(c.worst_rate),
                fmt_sig(m.worst_rate),
                fmt_sig(r.trace * (r.k as f64).powf(cfg.md.tau)),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(csv_err)?;
        Ok(())
    })?;
    let cert = perf::md_trace_growth(&md_traj, cfg.md.tau).ok();
    let ci_end = ci_r.records.last().expect("K >= 1").worst_rate;
    let md_end = md_r.records.last().expect("K >= 1").worst_rate;
    let mut o = OutDir::new(out)?;
    o.write("compare_md.csv", &table)?;
    o.json(
        "md_certificate.json",
        &json!({
            "certificate": cert,
            "ci_worst_rate_at_k": ci_end,
            "md_worst_rate_at_k": md_end,
            "ci_beats_md": ci_end > md_end,
            "k": cfg.k,
        }),
    )?;
    let summary = format!("worst rate at k = {}: CI {} vs MD {}", cfg.k, fmt_sig(ci_end), fmt_sig(md_end));
    o.finish("compare-md", cfg, Some(&p.assumptions), start, summary)
}

/// Communication-payoff verdict with an exact-rate cross-check at the optimal gain.
pub fn cmd_payoff(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let p = prepare(cfg, true)?;
    let d = &p.stats;
    if d.n < 2 {
        return Err(CliError::Config("payoff needs N >= 2".into()));
    }
    let (l2, ln) = (p.spectrum.lambda2(), p.spectrum.lambda_max());
    let verdict = schedule::payoff_achieved(d.g_c, d.n, l2)?;
    let b0 = verdict.b0_used;
    let st = CiDynamics::new(d, p.comm.s_v(), p.laplacian(), WeightSchedule::AlphaHarmonic { a: b0 * ln, b0 })?
        .state_at(cfg.k)?;
    let min_rate = rate_record(&MomentRecord {
        k: st.k,
        mu: st.mu.iter().copied().collect(),
        sigma2: st.sigma.diagonal().iter().copied().collect(),
        trace: st.sigma.trace(),
    })
    .worst_rate;
    let best_iso = d.best_isolated_chernoff();
    let exact_payoff = min_rate >= best_iso - 0.02 * d.chernoff_total;
    let mut o = OutDir::new(out)?;
    o.json(
        "payoff.json",
        &json!({
            "threshold": verdict.threshold,
            "g_c": verdict.g_c,
            "achieved": verdict.achieved,
            "b0_used": b0,
            "k": cfg.k,
            "min_sensor_rate_at_k": min_rate,
            "best_isolated_chernoff": best_iso,
            "exact_payoff_within_2pct": exact_payoff,
            "consistent": !verdict.achieved || exact_payoff,
        }),
    )?;
    let summary = format!(
        "threshold {}, G_c {}, achieved {}, min CI rate {} vs best isolated {}",
        fmt_sig(verdict.threshold),
        fmt_sig(d.g_c),
        verdict.achieved,
        fmt_sig(min_rate),
        fmt_sig(best_iso)
    );
    o.finish("payoff", cfg, Some(&p.assumptions), start, summary)
}
