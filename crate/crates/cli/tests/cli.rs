use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const ONE_TYPE: &str = r#"
horizon = 1.0
grid_points = 11
replications = 2
seed = 5
n = 50

[model]
c = [1.0]
lambda = [1.0]
eta = [1.0]
beta = 1.0
delta = 1.0
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.in.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_pairlim"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Data rows of a stamped CSV, header line included.
fn table(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let k = rows[0].iter().position(|c| c == name).unwrap();
    rows[1..].iter().map(|r| r[k].parse().unwrap()).collect()
}

fn verdict(dir: &Path, claim: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("out").join(format!("verdict_{claim}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn simulate_writes_one_row_per_grid_point() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{ONE_TYPE}\n[init]\nkind = \"fractions\"\nf0 = [0.3]\n");
    let o = run(dir.path(), &cfg, &["simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["traj_0000.csv", "traj_0001.csv", "manifest.toml", "config.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = table(&out.join("traj_0000.csv"));
    assert_eq!(rows[0], ["time", "f_1", "z"]);
    assert_eq!(rows.len() - 1, 11);
    assert_eq!(column(&rows, "f_1")[0], 15.0);
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        assert_eq!(code(&run(d.path(), ONE_TYPE, &["simulate"])), 0);
    }
    for f in ["traj_0000.csv", "traj_0001.csv"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn different_seeds_give_different_paths() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    run(a.path(), ONE_TYPE, &["simulate"]);
    run(b.path(), ONE_TYPE, &["simulate", "--seed", "6"]);
    let x = fs::read(a.path().join("out/traj_0000.csv")).unwrap();
    let y = fs::read(b.path().join("out/traj_0000.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn zero_horizon_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = ONE_TYPE.replace("horizon = 1.0", "horizon = 0.0");
    let o = run(dir.path(), &cfg, &["simulate"]);
    assert_eq!(code(&o), 2);
    let err: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/error.json")).unwrap()).unwrap();
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &format!("horizn = 2.0\n{ONE_TYPE}"), &["simulate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_claim_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), ONE_TYPE, &["verify", "--claim", "no-such-claim"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("detailed-balance"));
}

#[test]
fn detailed_balance_on_a_small_critical_model() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"
n = 2
[model]
c = [1.0]
lambda = [1.5]
eta = [0.5]
beta = 1.0
delta = 2.0
[regime]
kind = "critical"
"#;
    let o = run(dir.path(), cfg, &["verify", "--claim", "detailed-balance"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = verdict(dir.path(), "detailed-balance");
    assert_eq!(v["pass"], true);
    assert!(v["observed"].as_f64().unwrap() <= 1e-12);
    assert!(v["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn mminf_hitting_time_is_exponential() {
    let dir = TempDir::new().unwrap();
    let cfg = "replications = 2000\nseed = 3\n[queue]\ngamma = 2.0\nmu = 1.0\nlevel = 8\n";
    let o = run(dir.path(), cfg, &["verify", "--claim", "queues-mminf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = verdict(dir.path(), "queues-mminf");
    assert!(v["observed"].as_f64().unwrap() <= 0.04);
}

#[test]
fn queue_claim_without_queue_section_fails() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), ONE_TYPE, &["verify", "--claim", "queues-mm1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn equilibria_of_a_symmetric_instance() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), ONE_TYPE, &["equilibria"])), 0);
    let text = fs::read_to_string(dir.path().join("out/equilibria.toml")).unwrap();
    let doc: toml::Table = toml::from_str(&text).unwrap();
    // one type with rho = rho0 = 1: H = 1 / (1 + 1)
    assert!((doc["h_infinity"].as_float().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn h_started_at_equilibrium_stays_there() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), ONE_TYPE, &["limit", "--which", "h"])), 0);
    let h = column(&table(&dir.path().join("out/limit_h.csv")), "H");
    assert_eq!(h.len(), 11);
    for x in h {
        assert!((x - 0.5).abs() < 1e-12, "{x}");
    }
}

#[test]
fn profile_columns_sum_to_h() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"
horizon = 2.0
grid_points = 21
[init]
kind = "fractions"
f0 = [0.05, 0.3]
"#;
    assert_eq!(code(&run(dir.path(), cfg, &["limit", "--which", "profile"])), 0);
    let rows = table(&dir.path().join("out/limit_profile.csv"));
    let h = column(&rows, "H");
    let f1 = column(&rows, "f_1");
    let f2 = column(&rows, "f_2");
    for i in 1..h.len() {
        assert!((f1[i] + f2[i] - h[i]).abs() <= 1e-9, "row {i}");
    }
}

#[test]
fn sweep_needs_a_list() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("n_list = []\n{ONE_TYPE}");
    assert_eq!(code(&run(dir.path(), &cfg, &["sweep", "--claim", "mass-lln"])), 2);
    let cfg = ONE_TYPE.replace("n = 50", "");
    assert_eq!(code(&run(dir.path(), &cfg, &["sweep", "--claim", "mass-lln"])), 2);
}

#[test]
fn sweep_with_one_size_gives_one_row() {
    let dir = TempDir::new().unwrap();
    let cfg = ONE_TYPE.replace("n = 50", "n_list = [400]");
    let o = run(dir.path(), &cfg, &["sweep", "--claim", "mass-lln"]);
    assert!(matches!(code(&o), 0 | 4), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = table(&dir.path().join("out/sweep_mass-lln.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][0], "400");
}

#[test]
fn saved_config_reproduces_the_hash() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), ONE_TYPE, &["simulate"])), 0);
    let out = dir.path().join("out");
    let header = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .find(|l| l.starts_with("# config_sha256"))
            .unwrap()
            .to_string()
    };
    let first = header(&out.join("traj_0000.csv"));
    // simulating again from the written config yields the same stamp
    let again = TempDir::new().unwrap();
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(code(&run(again.path(), &saved, &["simulate"])), 0);
    assert_eq!(header(&again.path().join("out/traj_0000.csv")), first);
}
