use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use cidetect::cli::{self, ExperimentConfig};
use cidetect::graph::build_graph;
use cidetect::io::{fmt_sig, NumericTable};
use cidetect::model::{snr_stats, CommModel, SensingModel};
use cidetect::moments::{read_moments_csv, write_moments_csv};
use cidetect::montecarlo::{read_results_csv, Dynamics, Hypothesis, NoiseFamily, NoiseSpec, SimOptions, Simulator};
use cidetect::perf::read_rates_csv;
use cidetect::schedule::WeightSchedule;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cidetect")).args(args).output().unwrap()
}

fn standard() -> Value {
    json!({
        "graph": {"kind": "path", "n": 2},
        "model": {"m0": [-1.0, -1.0], "m1": [1.0, 1.0], "s_zeta": {"scaled_identity": 1.0}, "s_v": {"scaled_identity": 0.25}},
        "schedule": {"kind": "alpha"},
        "k": 2000,
    })
}

fn cfg(v: Value) -> ExperimentConfig {
    serde_json::from_value(v).unwrap()
}

fn write_cfg(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("in.json");
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_single_trial_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = bin(&["simulate", "--config", golden("sim_m1_k5.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (got, want) in [("empirical_moments.csv", "sim_m1_k5_moments.csv"), ("results.csv", "sim_m1_k5_results.csv")] {
        assert_eq!(fs::read_to_string(out.join(got)).unwrap(), fs::read_to_string(golden(want)).unwrap(), "{got}");
    }

    // the frozen means are the single sample path
    let c = ExperimentConfig::load(&golden("sim_m1_k5.json")).unwrap();
    let (sensing, comm) = c.model.build().unwrap();
    let d = snr_stats(&sensing, &comm).unwrap();
    let g = build_graph(&c.graph).unwrap();
    let sim = Simulator::new(
        &sensing,
        &d,
        comm.s_v(),
        g.laplacian(),
        Dynamics::Ci { schedule: WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 } },
        NoiseFamily::Gaussian,
        NoiseFamily::Gaussian,
        false,
    )
    .unwrap();
    let path = sim.sample_path(Hypothesis::H1, 42, 0, 5);
    let recs = read_moments_csv(fs::File::open(golden("sim_m1_k5_moments.csv")).unwrap()).unwrap();
    for r in &recs {
        for i in 0..2 {
            assert_eq!(fmt_sig(path[r.k - 1][i]), fmt_sig(r.mu[i]));
            assert_eq!(r.sigma2[i], 0.0);
        }
    }
}

#[test]
fn noiseless_trial_follows_hand_stepped_recursion() {
    let sensing = SensingModel::new(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0), DMatrix::identity(2, 2))
        .unwrap();
    let comm = CommModel::new(DMatrix::identity(2, 2) * 0.25).unwrap();
    let mut d = snr_stats(&sensing, &comm).unwrap();
    d.s_eta = DMatrix::zeros(2, 2);
    let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
    let zero = || NoiseSpec::new(NoiseFamily::Gaussian, DMatrix::zeros(2, 2)).unwrap();
    let sched = WeightSchedule::AlphaHarmonic { a: 2.0, b0: 1.0 };
    let sim = Simulator::with_noise(&d, &l, Dynamics::Ci { schedule: sched }, zero(), zero(), false).unwrap();
    let stats = sim
        .simulate(
            Hypothesis::H1,
            &SimOptions { trials: 1, k_max: 5, checkpoints: vec![1, 2, 3, 4, 5], master_seed: 42, mirror_h0: false, threads: None },
        )
        .unwrap();

    // x(1) = m; x(k+1) = k/(k+1) (I - L/(2+k)) x(k) + m/(k+1)
    let m = [2.0, 2.0];
    let mut x = m;
    for k in 1..=5usize {
        let cp = stats.at(k).unwrap();
        assert!((cp.mean[0] - x[0]).abs() < 1e-14 && (cp.mean[1] - x[1]).abs() < 1e-14);
        let al = 1.0 / (2.0 + k as f64);
        let c = k as f64 / (k as f64 + 1.0);
        let lx = [x[0] - x[1], x[1] - x[0]];
        x = [c * (x[0] - al * lx[0]) + m[0] / (k as f64 + 1.0), c * (x[1] - al * lx[1]) + m[1] / (k as f64 + 1.0)];
    }
}

#[test]
fn analyze_reports_bounds_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(standard());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli::cmd_analyze(&c, &a).unwrap();
    cli::cmd_analyze(&c, &b).unwrap();
    for f in ["bounds.json", "rates.csv", "moments.csv", "moments_final.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v = read_json(&a.join("bounds.json"));
    let bounds = &v["bounds"];
    assert_eq!(bounds["chernoff_total"], json!(1.0));
    assert_eq!(v["derived"]["ssnr"], json!(8.0));
    let (tight, loose) = (bounds["thm2_tight"].as_f64().unwrap(), bounds["thm2_loose"].as_f64().unwrap());
    assert!(0.0 < loose && loose < tight && tight < 1.0);
}

#[test]
fn assumption_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let mut disc = standard();
    disc["graph"] = json!({"kind": "edges", "n": 3, "edges": [[0, 1]]});
    disc["model"]["m0"] = json!([0.0, 0.0, 0.0]);
    disc["model"]["m1"] = json!([1.0, 1.0, 1.0]);
    let p = write_cfg(tmp.path(), &disc);
    let o = bin(&["analyze", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_2 = 0"));

    let mut flat = standard();
    flat["model"]["m1"] = json!([-1.0, -1.0]);
    let p = write_cfg(tmp.path(), &flat);
    let o = bin(&["analyze", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("assumption 4"));
}

#[test]
fn refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let p = write_cfg(tmp.path(), &standard());
    let o = bin(&["simulate", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("analyze"));

    let mut md = standard();
    md["md"] = json!({"a": 1.0, "b": 1.0, "tau": 1.5});
    assert!(cli::cmd_compare_md(&cfg(md), &out).is_err());

    let mut single = standard();
    single["graph"] = json!({"kind": "edges", "n": 1, "edges": []});
    single["model"]["m0"] = json!([-1.0]);
    single["model"]["m1"] = json!([1.0]);
    assert!(cli::cmd_payoff(&cfg(single), &out).is_err());

    let o = bin(&["analyze", "--config", "/nonexistent.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let p = write_cfg(tmp.path(), &standard());
    let o = bin(&["simulate", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "--trials", "50", "--iters", "30", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stored: ExperimentConfig = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!((stored.trials, stored.k, stored.seed), (50, 30, 5));
}

#[test]
fn manifest_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    cli::cmd_analyze(&cfg(standard()), &out).unwrap();
    assert!(cli::verify_manifest(&out).unwrap().ok());
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["command"], "analyze");
    assert_eq!(m["config_hash"].as_str().unwrap(), cfg(standard()).hash());

    let mut rates = fs::read_to_string(out.join("rates.csv")).unwrap();
    rates.push_str("9,0,1,1\n");
    fs::write(out.join("rates.csv"), rates).unwrap();
    let c = cli::verify_manifest(&out).unwrap();
    assert_eq!(c.modified, vec!["rates.csv".to_string()]);

    let mut stored = read_json(&out.join("config.json"));
    stored["seed"] = json!(99);
    fs::write(out.join("config.json"), stored.to_string()).unwrap();
    assert!(!cli::verify_manifest(&out).unwrap().config_ok);
    let o = bin(&["verify-manifest", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn csv_artifacts_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = standard();
    v["k"] = json!(1500);
    v["trials"] = json!(400);
    v["sweep"] = json!({"lo": 0.1, "hi": 10.0, "points": 25});
    let c = cfg(v);
    let dirs: Vec<PathBuf> = ["an", "sim", "sw", "md"].iter().map(|d| tmp.path().join(d)).collect();
    cli::cmd_analyze(&c, &dirs[0]).unwrap();
    cli::cmd_simulate(&c, &dirs[1], None).unwrap();
    cli::cmd_sweep_b0(&c, &dirs[2]).unwrap();
    cli::cmd_compare_md(&c, &dirs[3]).unwrap();

    let mut checked = 0;
    for d in &dirs {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "csv") && !p.ends_with("results.csv") {
                let bytes = fs::read(&p).unwrap();
                let t = NumericTable::read(&bytes[..]).unwrap();
                let mut again = Vec::new();
                t.write(&mut again).unwrap();
                assert_eq!(String::from_utf8(again).unwrap(), String::from_utf8(bytes).unwrap(), "{}", p.display());
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 6);

    let moments = fs::read(dirs[0].join("moments.csv")).unwrap();
    let recs = read_moments_csv(&moments[..]).unwrap();
    let mut again = Vec::new();
    write_moments_csv(&recs, &mut again).unwrap();
    assert_eq!(again, moments);

    let rates = fs::read(dirs[0].join("rates.csv")).unwrap();
    let traj = read_rates_csv(&rates[..]).unwrap();
    let mut again = Vec::new();
    traj.write_csv(&mut again).unwrap();
    assert_eq!(again, rates);
    assert_eq!(traj.records.len(), recs.len());

    let rows = read_results_csv(fs::File::open(dirs[1].join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * c.checkpoints().len());
    assert!(rows.iter().all(|r| r.trials == 400 && r.ci_lo <= r.p_hat && r.p_hat <= r.ci_hi));
}

#[test]
fn sweep_grid_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let mut one = standard();
    one["sweep"] = json!({"lo": 0.7, "hi": 0.7, "points": 1});
    cli::cmd_sweep_b0(&cfg(one), &tmp.path().join("one")).unwrap();
    let s = read_json(&tmp.path().join("one/sweep.json"));
    assert_eq!(s["argmax_loose_b0"], json!(0.7));

    let mut high = standard();
    high["sweep"] = json!({"lo": 5.0, "hi": 50.0, "points": 20});
    cli::cmd_sweep_b0(&cfg(high), &tmp.path().join("high")).unwrap();
    let s = read_json(&tmp.path().join("high/sweep.json"));
    assert_eq!(s["argmax_on_boundary"], json!(true));
    assert_eq!(s["argmax_loose_b0"], json!(5.0));

    let mut empty = standard();
    empty["sweep"] = json!({"lo": 1.0, "hi": 2.0, "points": 0});
    assert!(cli::cmd_sweep_b0(&cfg(empty), &tmp.path().join("e")).is_err());
}

#[test]
fn payoff_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = standard();
    v["k"] = json!(10_000);
    cli::cmd_payoff(&cfg(v.clone()), &tmp.path().join("yes")).unwrap();
    let p = read_json(&tmp.path().join("yes/payoff.json"));
    assert_eq!((p["achieved"].clone(), p["consistent"].clone()), (json!(true), json!(true)));
    assert!((p["threshold"].as_f64().unwrap() - 3.375).abs() < 1e-12);

    // ||S_v|| = 4 gives G_c = 1
    v["model"]["s_v"] = json!({"scaled_identity": 4.0});
    cli::cmd_payoff(&cfg(v), &tmp.path().join("no")).unwrap();
    let p = read_json(&tmp.path().join("no/payoff.json"));
    assert_eq!(p["achieved"], json!(false));
    assert_eq!(p["g_c"], json!(1.0));
}

#[test]
fn compare_md_favours_consensus_innovations() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = standard();
    v["k"] = json!(100_000);
    cli::cmd_compare_md(&cfg(v), tmp.path()).unwrap();
    let r = read_json(&tmp.path().join("md_certificate.json"));
    assert_eq!(r["ci_beats_md"], json!(true));
    assert!(r["certificate"]["min_scaled_trace"].as_f64().unwrap() > 0.0);
}

#[test]
fn laplace_run_reports_dsnr_growth() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = standard();
    v["k"] = json!(1000);
    v["trials"] = json!(2000);
    v["noise"] = json!({"sensing": "laplace", "comm": "uniform"});
    let o = cli::cmd_simulate(&cfg(v), tmp.path(), None).unwrap();
    assert!(o.artifacts.iter().any(|a| a == "dsnr_growth.json"));
    let g = read_json(&tmp.path().join("dsnr_growth.json"));
    assert!(g["band"].as_array().unwrap().iter().all(|b| b.as_f64().unwrap() < 2.0));
    let cmp = NumericTable::read(fs::File::open(tmp.path().join("comparison.csv")).unwrap()).unwrap();
    assert!(cmp.column("exact_p").unwrap().iter().all(Option::is_none));
}

#[test]
fn relative_edge_file_resolves_next_to_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("ring.txt"), "n=3\n0 1\n1 2\n2 0\n").unwrap();
    let mut v = standard();
    v["graph"] = json!({"kind": "edge_file", "path": "ring.txt"});
    v["model"]["m0"] = json!([-1.0, -1.0, -1.0]);
    v["model"]["m1"] = json!([1.0, 1.0, 1.0]);
    let p = write_cfg(tmp.path(), &v);
    let c = ExperimentConfig::load(&p).unwrap();
    assert_eq!(build_graph(&c.graph).unwrap().n(), 3);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let c = ExperimentConfig::load(&p).unwrap();
        cli::prepare(&c, false).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 3);
}
