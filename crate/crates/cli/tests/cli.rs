use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn firerisk<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_firerisk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Simulated city in `dir`; returns the generated config path.
fn simulate(dir: &Path, seed: u64) -> PathBuf {
    let o = firerisk(["--out".as_ref(), dir.as_os_str(), "--seed".as_ref(), seed.to_string().as_ref(), "simulate".as_ref()]);
    ok(&o);
    dir.join("config.json")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Rewrites a config, applying `edit` to its JSON.
fn edit_config(path: &Path, edit: impl FnOnce(&mut Value)) {
    let mut v = read_json(path);
    edit(&mut v);
    std::fs::write(path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

const SUBCOMMANDS: [&str; 11] = [
    "describe",
    "correlate",
    "importance",
    "voronoi",
    "fit",
    "predict",
    "evaluate",
    "classify",
    "compare-periods",
    "simulate",
    "fetch",
];

#[test]
fn help_for_every_subcommand() {
    ok(&firerisk(["--help"]));
    for c in SUBCOMMANDS {
        let o = firerisk([c, "--help"]);
        ok(&o);
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{c}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(firerisk(["no-such-command"]).status.code(), Some(2));
    assert_eq!(firerisk(["compare-periods"]).status.code(), Some(2));
    assert_eq!(firerisk(["--period", "fortnightly", "describe"]).status.code(), Some(2));
    assert_eq!(firerisk(["--types", "FR,ZZ", "describe"]).status.code(), Some(2));
    assert_eq!(firerisk(["--seed", "minus-one", "fit"]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"events": "missing.csv"}"#).unwrap();
    let o = firerisk(["--config".as_ref(), cfg.as_os_str(), "describe".as_ref()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.csv"));
    std::fs::write(&cfg, r#"{"sede": 3}"#).unwrap();
    assert_eq!(firerisk(["--config".as_ref(), cfg.as_os_str(), "describe".as_ref()]).status.code(), Some(1));
}

#[test]
fn describe_one_row_per_type_and_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path(), 1);
    edit_config(&cfg, |v| v["period_kind"] = Value::Null);
    ok(&firerisk(["--config".as_ref(), cfg.as_os_str(), "describe".as_ref()]));
    let text = std::fs::read_to_string(dir.path().join("results/descriptive_city.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("event_type,interval,mean,stddev,cv"));
    let mut seen: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 5, "{l}");
        let mean: f64 = f[2].parse().unwrap();
        assert!(mean > 0.0);
        seen.entry(f[1].into()).or_default().push(f[0].into());
    }
    // two simulated years starting on a Monday: no complete calendar year
    for kind in ["hourly", "daily", "weekly", "monthly"] {
        assert_eq!(seen.get(kind), Some(&vec!["FR".to_string(), "MD".to_string()]), "{kind}");
    }
    assert!(!seen.contains_key("yearly"));
    let meta = read_json(&dir.path().join("results/descriptive_city.csv.meta.json"));
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["command"], "describe");
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn fit_recovers_planted_dispersion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path(), 21);
    ok(&firerisk(["--config".as_ref(), cfg.as_os_str(), "fit".as_ref()]));
    let truth = read_json(&dir.path().join("truth.json"));
    for t in truth["types"].as_array().unwrap() {
        let code = t["event_type"].as_str().unwrap();
        let model = read_json(&dir.path().join(format!("results/model_{code}_weekly.json")));
        let (a, a0) = (model["alpha"].as_f64().unwrap(), t["alpha"].as_f64().unwrap());
        assert!((a - a0).abs() <= 0.1, "{code}: α = {a}, truth {a0}");
        let names: Vec<&str> = model["feature_names"].as_array().unwrap().iter().map(|n| n.as_str().unwrap()).collect();
        assert_eq!(names, ["population", "poi_density", "noise"]);
    }
}

#[test]
fn unknown_feature_named_in_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path(), 2);
    let o = firerisk(["--config".as_ref(), cfg.as_os_str(), "--features".as_ref(), "population,floor_area".as_ref(), "fit".as_ref()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`floor_area`"));
    assert!(!dir.path().join("results/model_FR_weekly.json").exists());
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn full_run(dir: &Path) {
    let cfg = simulate(dir, 8);
    edit_config(&cfg, |v| {
        v["forest"]["n_trees"] = 8.into();
        v["forest"]["n_permutations"] = 19.into();
    });
    let c = cfg.as_os_str();
    for args in [
        vec!["describe"],
        vec!["correlate"],
        vec!["--types", "FR", "--features", "auto", "fit"],
        vec!["--types", "FR", "predict"],
        vec!["--types", "FR", "classify"],
        vec!["--types", "FR", "evaluate", "--models", "results"],
        vec!["--types", "FR", "compare-periods", "--cutoff", "2012-01-02"],
        vec!["voronoi"],
        vec!["--granularity", "station", "--out", "stations", "--features", "all", "evaluate"],
    ] {
        let mut argv: Vec<&std::ffi::OsStr> = vec!["--config".as_ref(), c];
        argv.extend(args.iter().map(std::ffi::OsStr::new));
        let o = Command::new(env!("CARGO_BIN_EXE_firerisk"))
            .args(&argv)
            .current_dir(dir)
            .output()
            .unwrap();
        ok(&o);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path());
    full_run(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(bytes == &tb[name], "{} differs", name.display());
    }
    for expected in [
        "results/descriptive_region.csv",
        "results/correlation.csv",
        "results/model_FR_weekly.json",
        "results/predictions_FR_weekly.geojson",
        "results/classes_FR_weekly.geojson",
        "results/metrics_weekly.csv",
        "results/ecdf_FR_weekly.csv",
        "results/errors_FR_weekly.geojson",
        "results/compare_weekly.csv",
        "results/voronoi.geojson",
        "results/overlap.csv",
        "stations/metrics_weekly.csv",
        "stations/errors_MD_weekly.geojson",
    ] {
        assert!(ta.contains_key(Path::new(expected)), "missing {expected}");
        assert!(ta.contains_key(&PathBuf::from(format!("{expected}.meta.json"))), "missing sidecar of {expected}");
    }
}

#[test]
fn classify_assigns_every_region() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path(), 4);
    let c = cfg.as_os_str();
    ok(&firerisk(["--config".as_ref(), c, "fit".as_ref()]));
    ok(&firerisk(["--config".as_ref(), c, "classify".as_ref()]));
    let text = std::fs::read_to_string(dir.path().join("results/classes_MD_weekly.csv")).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(labels.len(), 60);
    for l in ["Low", "Medium", "High", "Severe"] {
        assert!(labels.contains(&l), "{l}");
    }
    let gj = read_json(&dir.path().join("results/classes_MD_weekly.geojson"));
    assert_eq!(gj["features"].as_array().unwrap().len(), 60);
}

#[test]
fn fetch_requires_network_flag() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("x.csv");
    let o = firerisk(["fetch".as_ref(), "--url".as_ref(), "http://127.0.0.1:9/x".as_ref(), "--dest".as_ref(), dest.as_os_str()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network"));
    assert!(!dest.exists());
}

#[test]
fn fetch_downloads_with_flag() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 1024];
        let _ = s.read(&mut buf).unwrap();
        s.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 10\r\nConnection: close\r\n\r\n0123456789").unwrap();
    });
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("x.csv");
    let url = format!("http://{addr}/x.csv");
    let o = firerisk([
        "--allow-network".as_ref(),
        "--out".as_ref(),
        dir.path().as_os_str(),
        "fetch".as_ref(),
        "--url".as_ref(),
        url.as_ref(),
        "--dest".as_ref(),
        dest.as_os_str(),
    ]);
    ok(&o);
    server.join().unwrap();
    assert_eq!(std::fs::read(&dest).unwrap(), b"0123456789");
    assert_eq!(read_json(&dir.path().join("x.csv.meta.json"))["command"], "fetch");
}
