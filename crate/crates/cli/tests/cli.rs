use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tomolab::experiments::{validate, Config, EXPERIMENTS};

fn tomolab(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomolab"))
        .args(args)
        .env("TOMOLAB_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped_configs() -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["examples", "acceptance"] {
        for e in std::fs::read_dir(configs_dir().join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "conf") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_shows_eight_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tomolab(&["list"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let table = Config::parse(&stdout(&o)).unwrap();
    let names: BTreeSet<&str> = table.entries().iter().filter_map(|(k, _)| k.strip_suffix(".summary")).collect();
    assert_eq!(names.len(), 8);
    for e in &EXPERIMENTS {
        assert!(names.contains(e.name));
    }
}

#[test]
fn listed_keys_appear_in_shipped_configs() {
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in shipped_configs() {
        let c = Config::from_file(&p).unwrap();
        let info = validate(&c).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        seen.entry(info.name.to_string()).or_default().extend(c.entries().iter().map(|(k, _)| k.clone()));
    }
    for e in &EXPERIMENTS {
        let keys = seen.get(e.name).unwrap_or_else(|| panic!("no shipped config for {}", e.name));
        for k in e.required.iter().chain(e.optional) {
            assert!(keys.contains(*k), "{}: key {k} missing from shipped configs", e.name);
        }
    }
}

#[test]
fn one_acceptance_config_per_criterion() {
    let dir = configs_dir().join("acceptance");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let c = Config::from_file(&e.unwrap().path()).unwrap();
        validate(&c).unwrap();
        n += 1;
    }
    assert_eq!(n, 10);
}

#[test]
fn exact_pauli_frame_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "f.conf", "experiment = frame-verify\nensemble = pauli\ndims = 2\nmode = exact\noutput = pauli\n");
    let o = tomolab(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let dir = tmp.path().join("pauli");
    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    let digest = Config::from_file(&cfg).unwrap().digest().to_string();
    assert!(report.contains(&format!("config_sha256 = {digest}")));
    assert!(report.contains("metric.d2.defect = "));
    let csv = std::fs::read_to_string(dir.join("frame_defects.csv")).unwrap();
    assert!(csv.starts_with("d,mode,samples,defect,stderr\n"));
}

#[test]
fn clifford_design_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.conf", "experiment = design-epsilon\nensemble = clifford\nmax_epsilon = 1e-9\n");
    let o = tomolab(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS epsilon"));
}

#[test]
fn single_record_recovery_is_a_metric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "cs.conf",
        "experiment = cs-recover\nsites = 2\nrecords = 1\nrepeats = 2\nshots = exact\nmin_fidelity = 0.99\nmin_successes = 2\n",
    );
    let o = tomolab(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let dir = std::fs::read_dir(tmp.path()).unwrap().filter_map(|e| e.ok()).find(|e| e.path().is_dir()).unwrap().path();
    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(report.contains("status = FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write(tmp.path(), "u.conf", "experiment = nothing\n");
    let malformed = write(tmp.path(), "m.conf", "experiment frame-verify\n");
    let bad_key = write(tmp.path(), "k.conf", "experiment = mixing-check\nsites = 4\nblock_sizes = 1\ncolour = red\n");
    let blocker = write(tmp.path(), "blocker", "");
    let unwritable = write(
        tmp.path(),
        "w.conf",
        &format!("experiment = design-epsilon\nensemble = clifford\noutput = {}\n", blocker.join("sub").display()),
    );
    for cfg in [&unknown, &malformed, &bad_key, &unwritable] {
        let o = tomolab(&["run", cfg.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(1), "{}", cfg.display());
    }
    assert_eq!(tomolab(&["run", "/nonexistent.conf"], tmp.path()).status.code(), Some(1));
    assert_eq!(tomolab(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(tomolab(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn csv_outputs_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("examples/rdm-tomography.conf");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        let o = tomolab(&["run", cfg.to_str().unwrap()], root);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    }
    let dir_of = |root: &Path| std::fs::read_dir(root).unwrap().next().unwrap().unwrap().path();
    let (da, db) = (dir_of(&a), dir_of(&b));
    let mut compared = 0;
    for e in std::fs::read_dir(&da).unwrap() {
        let name = e.unwrap().file_name();
        if name == "report.txt" {
            let strip = |p: PathBuf| {
                std::fs::read_to_string(p).unwrap().lines().skip(1).collect::<Vec<_>>().join("\n")
            };
            assert_eq!(strip(da.join(&name)), strip(db.join(&name)));
        } else {
            assert_eq!(std::fs::read(da.join(&name)).unwrap(), std::fs::read(db.join(&name)).unwrap(), "{name:?}");
            compared += 1;
        }
    }
    assert!(compared >= 4);
}

#[test]
fn replay_reproduces_recorded_schedules() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("examples/rdm-tomography.conf");
    assert_eq!(tomolab(&["run", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(0));
    let dir = std::fs::read_dir(tmp.path()).unwrap().next().unwrap().unwrap().path();
    let schedules = dir.join("schedules.txt");
    let first = tomolab(&["replay", schedules.to_str().unwrap()], tmp.path());
    let second = tomolab(&["replay", schedules.to_str().unwrap()], tmp.path());
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
    let text = stdout(&first);
    let recorded = std::fs::read_to_string(&schedules).unwrap();
    assert_eq!(text.lines().count(), recorded.lines().count());
    for (out, rec) in text.lines().zip(recorded.lines()) {
        assert!(out.starts_with(rec));
        let dev: f64 = out.split("unitarity=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!(dev < 1e-12);
    }
    let bad = write(tmp.path(), "bad.txt", "k=4 dl=2 depth=oops\n");
    assert_eq!(tomolab(&["replay", bad.to_str().unwrap()], tmp.path()).status.code(), Some(1));
}
