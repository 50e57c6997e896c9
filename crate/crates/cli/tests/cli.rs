use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};

fn config(name: &str) -> String {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.push("../../configs");
    p.push(name);
    p.to_str().unwrap().to_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minvar")).args(args).env_remove("MINVAR_SEED").output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn estimate<'a>(report: &'a Value, method: &str) -> &'a Value {
    report["estimates"].as_array().unwrap().iter().find(|e| e["method"] == method).unwrap()
}

#[test]
fn closed_form_merton_linear() {
    let m = config("merton.json");
    let c = config("linear.json");
    let out = run(&["price", "--market", &m, "--claim", &c, "--method", "closed-form"]);
    assert!(out.status.success());
    let r = json(&out);
    let e = estimate(&r, "closed_form");
    assert!((e["value"].as_f64().unwrap() - 10.870370).abs() < 5e-7);
    assert_eq!(e["std_error"].as_f64().unwrap(), 0.0);
    assert!(r["meta"]["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(r["meta"]["seed"].as_u64().unwrap(), 20_240_601);
}

#[test]
fn direct_and_emm_star_agree() {
    let m = config("merton.json");
    let c = config("linear.json");
    let out = run(&["price", "--market", &m, "--claim", &c, "--paths", "20000", "--steps", "50"]);
    assert!(out.status.success());
    let r = json(&out);
    let z = r["z_scores"][0]["z"].as_f64().unwrap();
    assert!(z.abs() < 3.0, "z = {z}");
}

#[test]
fn invalid_market_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"S0\": 1.0, ").unwrap();
    let c = config("linear.json");
    let out = run(&["price", "--market", bad.to_str().unwrap(), "--claim", &c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let missing = dir.path().join("missing.json");
    let out = run(&["verify", "--market", missing.to_str().unwrap(), "--claim", &c]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn constant_claim_hedge_is_zero() {
    let m = config("merton.json");
    let c = config("constant.json");
    let out = run(&["hedge", "--market", &m, "--claim", &c, "--paths", "3", "--steps", "20"]);
    assert!(out.status.success());
    let mut rows = csv::Reader::from_reader(out.stdout.as_slice());
    let headers = rows.headers().unwrap().clone();
    let pi = headers.iter().position(|h| h == "pi_hat").unwrap();
    let x = headers.iter().position(|h| h == "X_hat").unwrap();
    let mut n = 0;
    for row in rows.records() {
        let row = row.unwrap();
        assert_eq!(row[pi].parse::<f64>().unwrap(), 0.0);
        assert!((row[x].parse::<f64>().unwrap() - 5.0).abs() < 1e-12);
        n += 1;
    }
    assert_eq!(n, 3 * 21);
}

#[test]
fn black_scholes_exposure_is_delta_hedge() {
    let m = config("black_scholes.json");
    let c = config("call.json");
    let out = run(&["hedge", "--market", &m, "--claim", &c, "--paths", "2", "--steps", "50"]);
    assert!(out.status.success());
    let (sigma, strike, horizon) = (0.2f64, 1.0f64, 1.0f64);
    let n = Normal::standard();
    let mut rows = csv::Reader::from_reader(out.stdout.as_slice());
    let mut worst = 0.0f64;
    for row in rows.records() {
        let row = row.unwrap();
        let t: f64 = row[1].parse().unwrap();
        let s: f64 = row[2].parse().unwrap();
        let exposure: f64 = row[5].parse().unwrap();
        if t >= horizon {
            continue;
        }
        let tau = horizon - t;
        let d1 = ((s / strike).ln() + 0.5 * sigma * sigma * tau) / (sigma * tau.sqrt());
        let delta_exposure = s * n.cdf(d1);
        worst = worst.max((exposure - delta_exposure).abs());
    }
    // the wealth tracking error feeds back through G (X - V)
    assert!(worst < 0.05, "worst exposure gap {worst}");
    let first = csv::Reader::from_reader(out.stdout.as_slice()).records().next().unwrap().unwrap();
    let exposure0: f64 = first[5].parse().unwrap();
    assert!((exposure0 - n.cdf(0.1)).abs() < 1e-9);
}

#[test]
fn reruns_are_byte_identical() {
    let m = config("pure_jump.json");
    let c = config("call.json");
    let args = ["hedge", "--market", &m, "--claim", &c, "--paths", "4", "--steps", "30", "--seed", "7"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let price = |threads: &str| {
        let o = run(&["--threads", threads, "price", "--market", &m, "--claim", &c, "--paths", "3000", "--steps", "20", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(&out).unwrap()
    };
    assert_eq!(price("1"), price("3"));
}

#[test]
fn seed_env_override() {
    let m = config("merton.json");
    let c = config("linear.json");
    let out = Command::new(env!("CARGO_BIN_EXE_minvar"))
        .args(["price", "--market", &m, "--claim", &c, "--paths", "100", "--steps", "5"])
        .env("MINVAR_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(json(&out)["meta"]["seed"].as_u64().unwrap(), 99);
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn verify_merton_passes() {
    let m = config("merton.json");
    let c = config("linear.json");
    let out = run(&["verify", "--market", &m, "--claim", &c, "--paths", "5000", "--steps", "50"]);
    let r = json(&out);
    assert!(out.status.success(), "{r:#}");
    assert_eq!(r["passed"], true);
    for name in ["emm_residual", "wealth_affinity", "direct_vs_closed_form", "adjoint_p0", "adjoint_first_order"] {
        assert_eq!(check(&r, name)["passed"], true, "{name}");
    }
}

#[test]
fn verify_flags_bad_density() {
    let m = config("bad_density.json");
    let c = config("call.json");
    let out = run(&["verify", "--market", &m, "--claim", &c, "--paths", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(check(&json(&out), "q_star_density")["passed"], false);
}

#[test]
fn verify_flags_degenerate_market() {
    let m = config("degenerate.json");
    let c = config("linear.json");
    let out = run(&["verify", "--market", &m, "--claim", &c, "--paths", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(check(&json(&out), "nondegeneracy")["passed"], false);
}
