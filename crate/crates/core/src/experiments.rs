//! Configuration-driven experiment pipelines with reproducible text and CSV artifacts.

use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::circuits::{
    circuit_ensemble, circuit_twirl, fit_depth_constant, parity_twirls, Boundary, CircuitSchedule, GateEnsemble,
    GateSpec, Scheduler,
};
use crate::designs::{
    design_epsilon, frame_from_twirl, lambda2, moment_operator, monte_carlo_design_epsilon, verify_mixing_inequality,
    MomentMode, PairTwirl, PowerOptions, TwirlOp,
};
use crate::error::{Error, Result};
use crate::frames::{
    induced_measure, sampling_operator, single_qubit_cliffords, tight_frame_defect, FiniteEnsemble, HaarEnsemble,
    ObservableMeasure, SamplingMode, UnitaryEnsemble,
};
use crate::hilbert::{
    eigh, embed_local, hermitian_part, paulis, random_density_matrix, random_hermitian, random_pure_vector, CMat,
    DensityMatrix, Observable, SystemShape, C64,
};
use crate::lattice::{
    correlation_matrix, correlator_from_s, direct_correlator, distribution_from_correlations, momentum_grid,
    number_operator, tof_observable, FockShape, SpeckleParams, TofReading, DEFAULT_GRID_POINTS,
};
use crate::recon::{
    certify_candidate, cs_reconstruct, depolarize_site, estimate_rdms, evolved_local_observable,
    evolved_local_observable_dense, incoherence_check, random_translation_invariant_mps, reduced_defect,
    sample_records, CsOptions, LocalSum, RdmEstimate, RdmOptions, Shots,
};
use crate::rng::{derive_seed, rng_for};

/// Flat `key = value` configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    entries: Vec<(String, String)>,
    digest: String,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Config {
    /// One `key = value` per line; `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: n + 1, message: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::Parse { line: n + 1, message: format!("invalid key `{k}`") });
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Parse { line: n + 1, message: format!("duplicate key `{k}`") });
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries, digest: hex::encode(Sha256::digest(text.as_bytes())) })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// SHA-256 of the source text.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn experiment(&self) -> Result<&str> {
        self.get("experiment").ok_or_else(|| Error::invalid("missing key `experiment`"))
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| Error::invalid(format!("missing key `{key}`")))?;
        v.parse().map_err(|e| Error::invalid(format!("`{key} = {v}`: {e}")))
    }

    pub fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.required(key),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::invalid(format!("`{key}` entry `{s}`: {e}"))))
                .collect(),
        }
    }

    /// Comma-separated integers; `a..b` is the inclusive range.
    pub fn usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        let Some(v) = self.get(key) else { return Ok(default.to_vec()) };
        let bad = |s: &str| Error::invalid(format!("`{key}` entry `{s}` is not an integer or range"));
        let mut out = Vec::new();
        for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some((a, b)) = item.split_once("..") {
                let a: usize = a.trim().parse().map_err(|_| bad(item))?;
                let b: usize = b.trim().parse().map_err(|_| bad(item))?;
                if b < a {
                    return Err(bad(item));
                }
                out.extend(a..=b);
            } else {
                out.push(item.parse().map_err(|_| bad(item))?);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid(format!("`{key}` is empty")));
        }
        Ok(out)
    }

    /// Canonical text: one `key = value` line per entry, in input order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Name, keys and artifacts of one pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
    pub artifacts: &'static [&'static str],
}

/// Keys every experiment accepts.
pub const COMMON_KEYS: &[&str] = &["experiment", "seed", "workers", "output"];

pub const EXPERIMENTS: [ExperimentInfo; 8] = [
    ExperimentInfo {
        name: "frame-verify",
        summary: "tight-frame defect of an observable measure, exact or Monte-Carlo",
        required: &["ensemble", "dims"],
        optional: &["mode", "samples", "observable", "max_defect"],
        artifacts: &["report.txt", "frame_defects.csv"],
    },
    ExperimentInfo {
        name: "design-epsilon",
        summary: "2-design distance of a gate set or circuit ensemble, with the frame bound for circuits",
        required: &["ensemble"],
        optional: &["dim", "samples", "sites", "depths", "frame_samples", "max_epsilon", "sigma_factor"],
        artifacts: &["report.txt", "design_epsilon.csv"],
    },
    ExperimentInfo {
        name: "depth-scaling",
        summary: "design distance of brickwork circuits versus depth and the fitted contraction",
        required: &["sites", "depths"],
        optional: &["local_dim", "direct_max_sites", "min_r2", "max_contraction", "fit_target"],
        artifacts: &["report.txt", "depth_scaling.csv", "depth_fits.csv"],
    },
    ExperimentInfo {
        name: "mixing-check",
        summary: "second-eigenvalue comparison between coin-flip and blocked layer scheduling",
        required: &["sites", "block_sizes"],
        optional: &["local_dim", "boundary", "tolerance"],
        artifacts: &["report.txt", "mixing.csv"],
    },
    ExperimentInfo {
        name: "cs-recover",
        summary: "trace-norm reconstruction of random low-rank states from induced-frame records",
        required: &["sites", "records", "repeats", "shots"],
        optional: &[
            "rank", "observable", "ensemble", "depth", "min_fidelity", "min_successes", "tolerance", "max_iter", "step",
            "lambda",
        ],
        artifacts: &["report.txt", "cs_recover.csv"],
    },
    ExperimentInfo {
        name: "bose-hubbard-design",
        summary: "number conservation and restricted frame defect of speckle-driven Bose-Hubbard circuits",
        required: &["sites", "n_max", "total", "depths", "samples"],
        optional: &[
            "hopping", "interaction", "delta_mean", "delta_sigma", "t_min", "t_max", "inversion_closed", "offset",
            "reading", "conservation_samples", "conservation_tol", "sigma_factor",
        ],
        artifacts: &["report.txt", "restricted_defect.csv", "conservation.csv"],
    },
    ExperimentInfo {
        name: "tof-spectrum",
        summary: "positivity, normalization and Fourier round trip of quasi-momentum distributions",
        required: &["sites", "n_max", "states"],
        optional: &["total", "rank", "grid_points", "positivity_tol", "norm_tol", "roundtrip_tol"],
        artifacts: &["report.txt", "tof_checks.csv", "spectrum.csv"],
    },
    ExperimentInfo {
        name: "rdm-tomography",
        summary: "block-local tomography of reduced density matrices, certification, and reduced frame defects",
        required: &["task"],
        optional: &[
            "sites", "local_dim", "block", "depth", "depths", "samples", "shots", "repeats", "bond", "exact_tol",
            "slope_target", "slope_tol", "certify_tol", "depolarize_site", "depolarize_p", "observable",
            "sigma_factor", "oracle_sites", "oracle_depth", "oracle_checks", "oracle_tol",
        ],
        artifacts: &["report.txt", "rdm_errors.csv", "certification.csv", "records.csv", "schedules.txt", "reduced_defect.csv"],
    },
];

pub fn experiment_info(name: &str) -> Option<&'static ExperimentInfo> {
    EXPERIMENTS.iter().find(|e| e.name == name)
}

/// The descriptor table in config syntax, so it can be read back with [`Config::parse`].
pub fn descriptor_table() -> String {
    let mut out = String::from("# experiment descriptors\n");
    for e in &EXPERIMENTS {
        out += &format!("{}.summary = {}\n", e.name, e.summary);
        out += &format!("{}.required = {}\n", e.name, e.required.join(", "));
        out += &format!("{}.optional = {}\n", e.name, e.optional.join(", "));
        out += &format!("{}.artifacts = {}\n", e.name, e.artifacts.join(", "));
    }
    out
}

/// One pass/fail comparison against a configured threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// CSV table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &str, header: &[&str]) -> Self {
        Self { file: file.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &String| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        };
        let mut out = self.header.iter().map(quote).collect::<Vec<_>>().join(",") + "\n";
        for r in &self.rows {
            out += &(r.iter().map(quote).collect::<Vec<_>>().join(",") + "\n");
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub experiment: String,
    pub metrics: Vec<(String, String)>,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    /// Additional plain-text files.
    pub files: Vec<(String, String)>,
}

impl Outcome {
    fn new(name: &str) -> Self {
        Self { experiment: name.into(), ..Self::default() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn metric(&mut self, key: impl Into<String>, value: impl Display) {
        self.metrics.push((key.into(), value.to_string()));
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    /// Plain-text report; the first line carries the timestamp.
    pub fn report(&self, config: &Config, generated_unix: u64) -> String {
        let mut out = format!("generated_unix = {generated_unix}\n");
        out += &format!("experiment = {}\nconfig_sha256 = {}\n", self.experiment, config.digest());
        for (k, v) in config.entries() {
            out += &format!("input.{k} = {v}\n");
        }
        for (k, v) in &self.metrics {
            out += &format!("metric.{k} = {v}\n");
        }
        for c in &self.checks {
            out += &format!("check.{} = {} ({})\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
        }
        out += &format!("status = {}\n", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

fn validate_keys(config: &Config, info: &ExperimentInfo) -> Result<()> {
    for (k, _) in config.entries() {
        if !COMMON_KEYS.contains(&k.as_str()) && !info.required.contains(&k.as_str()) && !info.optional.contains(&k.as_str()) {
            return Err(Error::invalid(format!("unknown key `{k}` for experiment {}", info.name)));
        }
    }
    for k in info.required {
        if config.get(k).is_none() {
            return Err(Error::invalid(format!("experiment {} needs key `{k}`", info.name)));
        }
    }
    Ok(())
}

/// Checks the experiment name and keys without running anything.
pub fn validate(config: &Config) -> Result<&'static ExperimentInfo> {
    let name = config.experiment()?;
    let info = experiment_info(name).ok_or_else(|| Error::invalid(format!("unknown experiment `{name}`")))?;
    validate_keys(config, info)?;
    Ok(info)
}

/// Runs the configured experiment on a pool of `workers` threads (all cores when absent).
pub fn run(config: &Config) -> Result<Outcome> {
    let name = validate(config)?.name;
    let workers: usize = config.value("workers", 0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| match name {
        "frame-verify" => frame_verify(config),
        "design-epsilon" => design_epsilon_experiment(config),
        "depth-scaling" => depth_scaling(config),
        "mixing-check" => mixing_check(config),
        "cs-recover" => cs_recover(config),
        "bose-hubbard-design" => bose_hubbard_design(config),
        "tof-spectrum" => tof_spectrum(config),
        "rdm-tomography" => rdm_tomography(config),
        _ => unreachable!("validated above"),
    })
}

/// `output` from the config (relative to `root`), else `root/<experiment>-<digest prefix>`.
pub fn output_dir(config: &Config, root: &Path) -> Result<PathBuf> {
    let name = config.experiment()?;
    Ok(match config.get("output") {
        Some(p) if Path::new(p).is_absolute() => PathBuf::from(p),
        Some(p) => root.join(p),
        None => root.join(format!("{name}-{}", &config.digest()[..12])),
    })
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes the report and every table into `dir`; returns the report path.
pub fn write_artifacts(outcome: &Outcome, config: &Config, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for t in &outcome.tables {
        write_atomic(dir, &t.file, &t.to_csv())?;
    }
    for (name, text) in &outcome.files {
        write_atomic(dir, name, text)?;
    }
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_atomic(dir, "report.txt", &outcome.report(config, now))?;
    Ok(dir.join("report.txt"))
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn seed_of(config: &Config) -> Result<u64> {
    config.value("seed", 0u64)
}

fn traceless_normalized(shape: SystemShape, m: CMat) -> Result<Observable> {
    let d = shape.dim();
    let t = &m - CMat::identity(d, d).scale(m.trace().re / d as f64);
    Observable::new(shape, hermitian_part(&t))?.into_normalized()
}

/// Seed observable: `z1` (Pauli Z on site 1 of a qubit chain), `diagonal` (`|0⟩⟨0|` made traceless) or `random`.
fn seed_observable(kind: &str, shape: SystemShape, seed: u64) -> Result<Observable> {
    match kind {
        "z1" => {
            if shape.local_dim() != 2 {
                return Err(Error::invalid("observable z1 needs qubits"));
            }
            let z = Observable::new(SystemShape::new(1, 2)?, paulis()[3].unscale(2f64.sqrt()))?.into_normalized()?;
            embed_local(&z, 1, &shape)
        }
        "diagonal" => {
            let d = shape.dim();
            let mut p = CMat::zeros(d, d);
            p[(0, 0)] = C64::new(1.0, 0.0);
            traceless_normalized(shape, p)
        }
        "random" => traceless_normalized(shape, random_hermitian(shape.dim(), &mut rng_for(seed, &[0xb0]))),
        other => Err(Error::invalid(format!("unknown observable `{other}`"))),
    }
}

fn qubit_shape(d: usize) -> Result<SystemShape> {
    if !d.is_power_of_two() || d < 2 {
        return Err(Error::invalid(format!("dimension {d} is not a power of two")));
    }
    SystemShape::new(d.trailing_zeros() as usize, 2)
}

fn frame_verify(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("frame-verify");
    let seed = seed_of(config)?;
    let ensemble: String = config.required("ensemble")?;
    let dims = config.usize_list("dims", &[2])?;
    let mode: String = config.value("mode", "monte-carlo".to_string())?;
    let exact = match mode.as_str() {
        "exact" => true,
        "monte-carlo" => false,
        other => return Err(Error::invalid(format!("unknown mode `{other}`"))),
    };
    let ladder = config.usize_list("samples", &[12_500, 50_000, 200_000])?;
    let max_defect: f64 = config.value("max_defect", if exact { 1e-10 } else { 0.1 })?;
    let observable: String = config.value("observable", "random".to_string())?;
    let mut table = Table::new("frame_defects.csv", &["d", "mode", "samples", "defect", "stderr"]);
    for &d in &dims {
        let measure = match ensemble.as_str() {
            "pauli" => ObservableMeasure::pauli(qubit_shape(d)?.sites())?,
            "haar" => {
                let shape = SystemShape::flat(d)?;
                let w0 = seed_observable(&observable, shape, derive_seed(seed, &[d as u64]))?;
                induced_measure(Arc::new(HaarEnsemble::new(shape)), w0)?
            }
            "clifford" => {
                let shape = qubit_shape(d)?;
                if shape.sites() != 1 {
                    return Err(Error::invalid("the clifford ensemble is single-qubit (d = 2)"));
                }
                let w0 = seed_observable(&observable, shape, derive_seed(seed, &[d as u64]))?;
                induced_measure(Arc::new(FiniteEnsemble::uniform(shape, single_qubit_cliffords())?), w0)?
            }
            other => return Err(Error::invalid(format!("unknown ensemble `{other}`"))),
        };
        if exact {
            let est = sampling_operator(&measure, SamplingMode::Exact)?;
            table.push(vec![d.to_string(), mode.clone(), "exact".into(), f(est.defect), f(0.0)]);
            out.metric(format!("d{d}.defect"), est.defect);
            out.check(format!("d{d}.defect"), est.defect <= max_defect, format!("{:.3e} <= {max_defect:e}", est.defect));
            continue;
        }
        let mut defects = Vec::new();
        for &m in &ladder {
            let est = sampling_operator(&measure, SamplingMode::MonteCarlo { samples: m, seed })?;
            table.push(vec![d.to_string(), mode.clone(), m.to_string(), f(est.defect), f(est.defect_stderr)]);
            defects.push(est.defect);
        }
        let last = *defects.last().expect("non-empty ladder");
        out.metric(format!("d{d}.defect"), last);
        out.check(format!("d{d}.defect"), last <= max_defect, format!("{last:.4} <= {max_defect}"));
        if defects.len() > 1 {
            let decreasing = defects.windows(2).all(|w| w[1] < w[0]);
            out.check(format!("d{d}.decreasing"), decreasing, format!("{defects:.4?}"));
        }
    }
    out.tables.push(table);
    Ok(out)
}

fn design_epsilon_experiment(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("design-epsilon");
    let seed = seed_of(config)?;
    let ensemble: String = config.required("ensemble")?;
    let mut table = Table::new("design_epsilon.csv", &["ensemble", "d", "depth", "epsilon", "stderr", "frame_defect", "frame_stderr", "exact_frame_defect", "bound"]);
    if ensemble == "circuit" {
        return circuit_frame_bound(config, out, table);
    }
    let max_epsilon: f64 = config.value("max_epsilon", 1e-9)?;
    let report = match ensemble.as_str() {
        "clifford" | "pauli" | "clifford-t" => {
            let ens: Arc<dyn UnitaryEnsemble> = match ensemble.as_str() {
                "clifford" => Arc::new(FiniteEnsemble::uniform(SystemShape::new(1, 2)?, single_qubit_cliffords())?),
                "pauli" => Arc::new(FiniteEnsemble::uniform(SystemShape::new(1, 2)?, paulis().to_vec())?),
                _ => GateEnsemble::new(GateSpec::CliffordT)?.ensemble(),
            };
            let g = moment_operator(ens.as_ref(), MomentMode::ExactFinite)?;
            let r = design_epsilon(&g, &TwirlOp::haar(g.layout())?, &PowerOptions::default())?;
            (ens.dim(), r)
        }
        "haar-mc" => {
            let d: usize = config.value("dim", 2)?;
            let samples: usize = config.value("samples", 20_000)?;
            let r = monte_carlo_design_epsilon(&HaarEnsemble::new(SystemShape::flat(d)?), samples, seed)?;
            (d, r)
        }
        other => return Err(Error::invalid(format!("unknown ensemble `{other}`"))),
    };
    let (d, r) = report;
    let se = r.stderr.unwrap_or(0.0);
    table.push(vec![ensemble.clone(), d.to_string(), String::new(), f(r.epsilon), f(se), String::new(), String::new(), String::new(), String::new()]);
    out.metric("epsilon", r.epsilon);
    out.metric("method", format!("{:?}", r.method));
    out.check("epsilon", r.epsilon <= max_epsilon, format!("{:.3e} <= {max_epsilon:e}", r.epsilon));
    out.tables.push(table);
    Ok(out)
}

/// Measured frame defect against `√d(d²−1)·ε` for local-Haar brickwork circuits.
fn circuit_frame_bound(config: &Config, mut out: Outcome, mut table: Table) -> Result<Outcome> {
    let seed = seed_of(config)?;
    let k: usize = config.value("sites", 4)?;
    let depths = config.usize_list("depths", &[2, 4, 8])?;
    let samples: usize = config.value("frame_samples", 20_000)?;
    let sigma: f64 = config.value("sigma_factor", 3.0)?;
    let shape = SystemShape::new(k, 2)?;
    let d = shape.dim() as f64;
    let w0 = seed_observable("z1", shape, seed)?;
    let haar = TwirlOp::<f64>::haar(crate::designs::TwirlLayout::new(k, 2))?;
    let gates = GateEnsemble::new(GateSpec::LocalHaar { local_dim: 2 })?;
    for &n in &depths {
        let g = circuit_twirl(k, 2, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(2)?, n)?;
        let eps = design_epsilon(&g, &haar, &PowerOptions::default())?.epsilon;
        let bound = d.sqrt() * (d * d - 1.0) * eps;
        let exact_defect = tight_frame_defect(&frame_from_twirl(&g, w0.matrix())?)?;
        let template = CircuitSchedule::new(shape, n, seed, gates.clone())?;
        let measure = induced_measure(Arc::new(circuit_ensemble(template)), w0.clone())?;
        let est = sampling_operator(&measure, SamplingMode::MonteCarlo { samples, seed: derive_seed(seed, &[n as u64]) })?;
        table.push(vec![
            "circuit".into(),
            shape.dim().to_string(),
            n.to_string(),
            f(eps),
            f(0.0),
            f(est.defect),
            f(est.defect_stderr),
            f(exact_defect),
            f(bound),
        ]);
        out.metric(format!("n{n}.epsilon"), eps);
        out.metric(format!("n{n}.frame_defect"), est.defect);
        out.metric(format!("n{n}.exact_frame_defect"), exact_defect);
        out.check(
            format!("n{n}.bound"),
            est.defect <= bound + sigma * est.defect_stderr,
            format!("{:.4} <= {bound:.4} + {sigma}·{:.4}", est.defect, est.defect_stderr),
        );
        out.check(format!("n{n}.exact_bound"), exact_defect <= bound, format!("{exact_defect:.4e} <= {bound:.4e}"));
    }
    out.tables.push(table);
    Ok(out)
}

/// Least-squares line `y = a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (a, b, r2)
}

fn depth_scaling(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("depth-scaling");
    let seed = seed_of(config)?;
    let sites = config.usize_list("sites", &[2, 4, 6])?;
    let depths = config.usize_list("depths", &[2])?;
    let dl: usize = config.value("local_dim", 2)?;
    let direct_max: usize = config.value("direct_max_sites", 4)?;
    let min_r2: f64 = config.value("min_r2", 0.98)?;
    let max_contraction: f64 = config.value("max_contraction", 0.95)?;
    let target: f64 = config.value("fit_target", 1e-2)?;
    if depths.len() < 2 {
        return Err(Error::invalid("depth-scaling needs at least two depths"));
    }
    let opts = PowerOptions { seed, rel_tol: 1e-10, max_iter: 5000, ..PowerOptions::default() };
    let mut curve_table = Table::new("depth_scaling.csv", &["sites", "depth", "epsilon", "method"]);
    let mut fit_table = Table::new("depth_fits.csv", &["sites", "lambda2", "slope", "contraction", "r2", "c_fit"]);
    for &k in &sites {
        let layout = crate::designs::TwirlLayout::new(k, dl);
        let step = circuit_twirl(k, dl, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(dl)?, 1)?;
        let gap = lambda2(&step, &opts)?;
        let direct = k <= direct_max;
        let haar = if direct { Some(TwirlOp::<f64>::haar(layout)?) } else { None };
        let mut curve = Vec::new();
        for &n in &depths {
            let eps = match &haar {
                Some(h) => {
                    let g = circuit_twirl(k, dl, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(dl)?, n)?;
                    design_epsilon(&g, h, &opts)?.epsilon
                }
                None => gap.value.powi(n as i32),
            };
            curve_table.push(vec![k.to_string(), n.to_string(), f(eps), if direct { "direct" } else { "lambda2" }.into()]);
            curve.push((n, eps));
        }
        let xs: Vec<f64> = curve.iter().map(|c| c.0 as f64).collect();
        let ys: Vec<f64> = curve.iter().map(|c| c.1.max(f64::MIN_POSITIVE).ln()).collect();
        let (_, slope, r2) = linear_fit(&xs, &ys);
        let contraction = slope.exp();
        let c_fit = fit_depth_constant(k, target, &curve);
        fit_table.push(vec![
            k.to_string(),
            f(gap.value),
            f(slope),
            f(contraction),
            f(r2),
            c_fit.map(f).unwrap_or_default(),
        ]);
        out.metric(format!("k{k}.lambda2"), gap.value);
        out.metric(format!("k{k}.contraction"), contraction);
        out.metric(format!("k{k}.r2"), r2);
        if let Some(c) = c_fit {
            out.metric(format!("k{k}.c_fit"), c);
        }
        out.check(format!("k{k}.linear"), r2 >= min_r2, format!("R² {r2:.5} >= {min_r2}"));
        out.check(format!("k{k}.contraction"), contraction <= max_contraction, format!("{contraction:.4} <= {max_contraction}"));
    }
    out.tables.push(curve_table);
    out.tables.push(fit_table);
    Ok(out)
}

fn parse_boundary(s: &str) -> Result<Boundary> {
    match s {
        "open" => Ok(Boundary::Open),
        "periodic" => Ok(Boundary::Periodic),
        other => Err(Error::invalid(format!("unknown boundary `{other}`"))),
    }
}

fn mixing_check(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("mixing-check");
    let seed = seed_of(config)?;
    let k: usize = config.required("sites")?;
    let blocks = config.usize_list("block_sizes", &[1, 2, 4])?;
    let dl: usize = config.value("local_dim", 2)?;
    let boundary = parse_boundary(&config.value("boundary", "open".to_string())?)?;
    let tol: f64 = config.value("tolerance", 1e-8)?;
    let (m_e, m_o) = parity_twirls(k, dl, boundary, PairTwirl::<f64>::haar(dl)?)?;
    let opts = PowerOptions { seed, rel_tol: 1e-12, max_iter: 20_000, ..PowerOptions::default() };
    let mut table = Table::new("mixing.csv", &["s", "lhs", "rhs", "holds"]);
    for &s in &blocks {
        let r = verify_mixing_inequality(&m_e, &m_o, s, &opts)?;
        let holds = r.lhs <= r.rhs + tol;
        table.push(vec![s.to_string(), f(r.lhs), f(r.rhs), holds.to_string()]);
        out.metric(format!("s{s}.lhs"), r.lhs);
        out.metric(format!("s{s}.rhs"), r.rhs);
        out.check(format!("s{s}"), holds, format!("{:.10} <= {:.10} + {tol:e}", r.lhs, r.rhs));
    }
    out.tables.push(table);
    Ok(out)
}

/// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`.
pub fn state_fidelity(rho: &CMat, sigma: &CMat) -> f64 {
    // Eigenvalues below this fraction of the largest are rounding noise.
    const FLOOR: f64 = 1e-12;
    let clip = |vals: &DVector<f64>| {
        let top = vals.amax();
        vals.map(|v| if v > FLOOR * top { v.sqrt() } else { 0.0 })
    };
    let (vals, vecs) = eigh(&hermitian_part(rho));
    let roots = clip(&vals);
    let d = rho.nrows();
    let s = CMat::from_fn(d, d, |i, j| (0..d).map(|a| vecs[(i, a)] * roots[a] * vecs[(j, a)].conj()).sum());
    let inner = &s * sigma * &s;
    let (vals, _) = eigh(&hermitian_part(&inner));
    clip(&vals).sum().powi(2)
}

fn parse_shots(s: &str) -> Result<Shots> {
    if s == "exact" {
        return Ok(Shots::Exact);
    }
    s.parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .map(Shots::Finite)
        .ok_or_else(|| Error::invalid(format!("shots entry `{s}` is neither `exact` nor a positive integer")))
}

fn shots_label(s: Shots) -> String {
    match s {
        Shots::Exact => "exact".into(),
        Shots::Finite(n) => n.to_string(),
    }
}

fn cs_recover(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("cs-recover");
    let seed = seed_of(config)?;
    let k: usize = config.required("sites")?;
    let shape = SystemShape::new(k, 2)?;
    let d = shape.dim();
    let rank: usize = config.value("rank", 1)?;
    let m: usize = match config.required::<String>("records")?.as_str() {
        "auto" => (8.0 * rank as f64 * d as f64 * (d as f64).log2().powi(2)).ceil() as usize,
        v => v.parse().map_err(|_| Error::invalid(format!("records `{v}` is neither `auto` nor an integer")))?,
    };
    let repeats: usize = config.required("repeats")?;
    let shots: Vec<Shots> = config.list::<String>("shots", &[])?.iter().map(|s| parse_shots(s)).collect::<Result<_>>()?;
    let min_fid = config.list::<f64>("min_fidelity", &vec![0.99; shots.len()])?;
    let min_succ = config.list::<usize>("min_successes", &vec![repeats; shots.len()])?;
    if shots.is_empty() || min_fid.len() != shots.len() || min_succ.len() != shots.len() {
        return Err(Error::invalid("shots, min_fidelity and min_successes need matching lengths"));
    }
    let observable: String = config.value("observable", "z1".to_string())?;
    let w0 = seed_observable(&observable, shape, seed)?;
    let ensemble: Arc<dyn UnitaryEnsemble> = match config.value("ensemble", "haar".to_string())?.as_str() {
        "haar" => Arc::new(HaarEnsemble::new(shape)),
        "circuit" => {
            let depth: usize = config.required("depth")?;
            let gates = GateEnsemble::new(GateSpec::LocalHaar { local_dim: 2 })?;
            Arc::new(circuit_ensemble(CircuitSchedule::new(shape, depth, seed, gates)?))
        }
        other => return Err(Error::invalid(format!("unknown ensemble `{other}`"))),
    };
    let lambda: f64 = config.value("lambda", 1.0)?;
    let inc = incoherence_check(&w0, lambda);
    out.metric("d", d);
    out.metric("records", m);
    out.metric("incoherence.norm_sq", inc.norm_sq);
    out.metric("incoherence.bound", inc.bound);
    out.metric("incoherence.passes", inc.passes);
    let opts = CsOptions {
        tol: config.value("tolerance", 1e-6)?,
        max_iter: config.value("max_iter", 20_000)?,
        step: config.value("step", CsOptions::default().step)?,
        rank_hint: rank,
        ..CsOptions::default()
    };
    out.metric("feasibility_bound", 1.0 / (8.0 * (rank as f64).sqrt()));
    let measure = induced_measure(ensemble, w0)?;
    let mut table = Table::new("cs_recover.csv", &["shots", "repeat", "fidelity", "objective", "residual", "iterations", "converged"]);
    for (si, &s) in shots.iter().enumerate() {
        let rows: Vec<(f64, Vec<String>)> = (0..repeats)
            .into_par_iter()
            .map(|r| -> Result<(f64, Vec<String>)> {
                let mut rng = rng_for(seed, &[0x51, r as u64]);
                let rho = if rank == 1 {
                    DensityMatrix::pure(shape, &random_pure_vector(d, &mut rng))?
                } else {
                    DensityMatrix::new(shape, random_density_matrix(d, rank, &mut rng))?
                };
                let records = sample_records(&rho, &measure, m, s, derive_seed(seed, &[0x52, r as u64]))?;
                let res = cs_reconstruct(&records, shape, &opts)?;
                let fid = state_fidelity(rho.matrix(), res.estimate.matrix());
                Ok((
                    fid,
                    vec![
                        shots_label(s),
                        r.to_string(),
                        f(fid),
                        f(res.objective),
                        f(res.residual),
                        res.iterations.to_string(),
                        res.converged.to_string(),
                    ],
                ))
            })
            .collect::<Result<_>>()?;
        let successes = rows.iter().filter(|(fid, _)| *fid >= min_fid[si]).count();
        let label = shots_label(s);
        out.metric(format!("shots_{label}.successes"), successes);
        out.metric(format!("shots_{label}.min_fidelity_seen"), rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min));
        out.check(
            format!("shots_{label}"),
            successes >= min_succ[si],
            format!("{successes}/{repeats} with fidelity >= {} (need {})", min_fid[si], min_succ[si]),
        );
        for (_, row) in rows {
            table.push(row);
        }
    }
    out.tables.push(table);
    Ok(out)
}

fn parse_reading(s: &str) -> Result<TofReading> {
    match s {
        "fixed-separation" => Ok(TofReading::FixedSeparation),
        "fixed-site" => Ok(TofReading::FixedSite),
        other => Err(Error::invalid(format!("unknown reading `{other}`"))),
    }
}

fn bose_hubbard_design(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("bose-hubbard-design");
    let seed = seed_of(config)?;
    let k: usize = config.required("sites")?;
    let n_max: usize = config.required("n_max")?;
    let total: usize = config.required("total")?;
    let depths = config.usize_list("depths", &[4])?;
    let samples: usize = config.required("samples")?;
    let defaults = SpeckleParams::default();
    let params = SpeckleParams {
        j: config.value("hopping", defaults.j)?,
        u: config.value("interaction", defaults.u)?,
        delta_mean: config.value("delta_mean", defaults.delta_mean)?,
        delta_sigma: config.value("delta_sigma", defaults.delta_sigma)?,
        t_min: config.value("t_min", defaults.t_min)?,
        t_max: config.value("t_max", defaults.t_max)?,
        inversion_closed: config.value("inversion_closed", defaults.inversion_closed)?,
    };
    let offset: usize = config.value("offset", 1)?;
    let reading = parse_reading(&config.value("reading", "fixed-separation".to_string())?)?;
    let cons_samples: usize = config.value("conservation_samples", 20)?;
    let cons_tol: f64 = config.value("conservation_tol", 1e-8)?;
    let sigma: f64 = config.value("sigma_factor", 2.0)?;

    let fock = FockShape::new(k, n_max, Some(total))?;
    for (i, w) in fock.warnings().iter().enumerate() {
        out.metric(format!("warning{i}"), w);
    }
    let basis = fock.sector_basis()?;
    let dn = basis.len();
    out.metric("sector_dim", dn);
    let w_full = tof_observable(offset, &fock, reading)?;
    let block = CMat::from_fn(dn, dn, |i, j| w_full.matrix()[(basis[i], basis[j])]);
    let w_block = traceless_normalized(SystemShape::flat(dn)?, block)?;
    let gates = GateEnsemble::new(GateSpec::Speckle { n_max, params })?;
    let max_depth = *depths.iter().max().expect("non-empty");
    let template = CircuitSchedule::new(fock.system(), max_depth, seed, gates)?;

    let n_op = number_operator(&fock);
    let mut cons = Table::new("conservation.csv", &["sample", "depth", "commutator_norm"]);
    let norms: Vec<f64> = (0..cons_samples)
        .into_par_iter()
        .map(|c| -> Result<f64> {
            let u = template.with_seed(derive_seed(seed, &[0xc0, c as u64])).run_circuit()?;
            let um = u.matrix();
            Ok((um * &n_op - &n_op * um).norm())
        })
        .collect::<Result<_>>()?;
    for (c, v) in norms.iter().enumerate() {
        cons.push(vec![c.to_string(), max_depth.to_string(), f(*v)]);
    }
    let worst = norms.iter().copied().fold(0.0, f64::max);
    out.metric("max_commutator_norm", worst);
    out.check("number_conservation", worst <= cons_tol, format!("{worst:.3e} <= {cons_tol:e}"));

    let mut table = Table::new("restricted_defect.csv", &["depth", "defect", "stderr"]);
    let mut curve = Vec::new();
    for &n in &depths {
        let ens = circuit_ensemble(template.with_depth(n)).in_sector(basis.clone())?;
        let measure = induced_measure(Arc::new(ens), w_block.clone())?;
        let est = sampling_operator(&measure, SamplingMode::MonteCarlo { samples, seed: derive_seed(seed, &[0xd0, n as u64]) })?;
        table.push(vec![n.to_string(), f(est.defect), f(est.defect_stderr)]);
        out.metric(format!("n{n}.defect"), est.defect);
        out.metric(format!("n{n}.stderr"), est.defect_stderr);
        curve.push((n, est.defect, est.defect_stderr));
    }
    let violations: Vec<String> = curve
        .windows(2)
        .filter(|w| w[1].1 > w[0].1 + sigma * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt())
        .map(|w| format!("{}→{}", w[0].0, w[1].0))
        .collect();
    out.check(
        "monotone_defect",
        violations.is_empty(),
        if violations.is_empty() { format!("non-increasing within {sigma} combined standard errors") } else { format!("increases at {}", violations.join(", ")) },
    );
    out.tables.push(table);
    out.tables.push(cons);
    Ok(out)
}

fn tof_spectrum(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("tof-spectrum");
    let seed = seed_of(config)?;
    let sites = config.usize_list("sites", &[2, 3, 4])?;
    let n_max: usize = config.required("n_max")?;
    let states: usize = config.required("states")?;
    let total: usize = config.value("total", 1)?;
    let rank: usize = config.value("rank", 2)?;
    let grid = momentum_grid(config.value("grid_points", DEFAULT_GRID_POINTS)?)?;
    let pos_tol: f64 = config.value("positivity_tol", 1e-10)?;
    let norm_tol: f64 = config.value("norm_tol", 1e-6)?;
    let rt_tol: f64 = config.value("roundtrip_tol", 1e-6)?;
    let mut checks = Table::new("tof_checks.csv", &["sites", "state", "kind", "min_s", "integral", "mean_n", "roundtrip_error"]);
    let mut spectrum = Table::new("spectrum.csv", &["sites", "p", "s"]);
    let (mut worst_min, mut worst_norm, mut worst_rt) = (f64::INFINITY, 0.0f64, 0.0f64);
    for &k in &sites {
        let fock = FockShape::new(k, n_max, None)?;
        let shape = fock.system();
        let n_diag = fock.number_diagonal();
        let sector = fock.basis_with_total(total.min(k * n_max));
        for st in 0..2 * states {
            let mut rng = rng_for(seed, &[k as u64, st as u64]);
            let (kind, rho) = if st < states {
                ("mixed", DensityMatrix::new(shape, random_density_matrix(shape.dim(), rank, &mut rng))?)
            } else {
                let amp = random_pure_vector(sector.len(), &mut rng);
                let mut psi = DVector::<C64>::zeros(shape.dim());
                for (a, &i) in sector.iter().enumerate() {
                    psi[i] = amp[a];
                }
                ("sector", DensityMatrix::pure(shape, &psi)?)
            };
            let c = correlation_matrix(&rho, &fock)?;
            let s = distribution_from_correlations(&c, &grid);
            let min_s = s.iter().copied().fold(f64::INFINITY, f64::min);
            let mean_n: f64 = (0..shape.dim()).map(|i| rho.matrix()[(i, i)].re * n_diag[i]).sum();
            let integral = correlator_from_s(&s, &grid, 0, rt_tol)?.re;
            let mut rt = 0.0f64;
            for l in -(k as i64 - 1)..=(k as i64 - 1) {
                let back = correlator_from_s(&s, &grid, l, rt_tol)?;
                rt = rt.max((back - direct_correlator(&c, l)).norm());
            }
            worst_min = worst_min.min(min_s);
            worst_norm = worst_norm.max((integral - mean_n).abs());
            worst_rt = worst_rt.max(rt);
            checks.push(vec![k.to_string(), st.to_string(), kind.into(), f(min_s), f(integral), f(mean_n), f(rt)]);
            if st == 0 {
                for (p, v) in grid.iter().zip(&s) {
                    spectrum.push(vec![k.to_string(), f(*p), f(*v)]);
                }
            }
        }
    }
    out.metric("min_s", worst_min);
    out.metric("max_normalization_error", worst_norm);
    out.metric("max_roundtrip_error", worst_rt);
    out.check("positivity", worst_min >= -pos_tol, format!("{worst_min:.3e} >= -{pos_tol:e}"));
    out.check("normalization", worst_norm <= norm_tol, format!("{worst_norm:.3e} <= {norm_tol:e}"));
    out.check("roundtrip", worst_rt <= rt_tol, format!("{worst_rt:.3e} <= {rt_tol:e}"));
    out.tables.push(checks);
    out.tables.push(spectrum);
    Ok(out)
}

fn rdm_tomography(config: &Config) -> Result<Outcome> {
    match config.required::<String>("task")?.as_str() {
        "tomography" => rdm_tomography_task(config),
        "reduced-defect" => reduced_defect_task(config),
        other => Err(Error::invalid(format!("unknown task `{other}`"))),
    }
}

fn block_errors(rho: &DensityMatrix, est: &[RdmEstimate]) -> Result<Vec<f64>> {
    est.iter()
        .map(|e| {
            let keep: Vec<usize> = (e.start..e.start + e.len).collect();
            Ok((rho.reduce(&keep)?.matrix() - &e.estimate).norm())
        })
        .collect()
}

fn rdm_tomography_task(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("rdm-tomography");
    let seed = seed_of(config)?;
    let k: usize = config.value("sites", 4)?;
    let dl: usize = config.value("local_dim", 2)?;
    let l: usize = config.value("block", 2)?;
    let depth: usize = config.value("depth", 4)?;
    let samples: usize = config.value("samples", 48)?;
    let ladder: Vec<usize> = config.usize_list("shots", &[100, 1000, 10_000])?;
    let repeats: usize = config.value("repeats", 8)?;
    let bond: usize = config.value("bond", 2)?;
    let exact_tol: f64 = config.value("exact_tol", 1e-6)?;
    let slope_target: f64 = config.value("slope_target", -0.5)?;
    let slope_tol: f64 = config.value("slope_tol", 0.1)?;
    let cert_tol: f64 = config.value("certify_tol", 1e-6)?;
    let dep_site: usize = config.value("depolarize_site", k)?;
    let dep_p: f64 = config.value("depolarize_p", 1.0)?;
    let shape = SystemShape::new(k, dl)?;
    let gates = GateEnsemble::new(GateSpec::LocalHaar { local_dim: dl })?;
    let seed_shape = SystemShape::new(1, dl)?;
    let seed_term = seed_observable("diagonal", seed_shape, seed)?;
    let opts = |shots: Shots, s: u64| RdmOptions {
        block_len: l,
        depth,
        samples,
        shots,
        seed: s,
        gates: gates.clone(),
        seed_term: seed_term.clone(),
    };

    // Product state, exact expectations.
    let mut rng = rng_for(seed, &[0x70]);
    let mut psi = DVector::from_element(1, C64::new(1.0, 0.0));
    for _ in 0..k {
        let v = random_pure_vector(dl, &mut rng);
        psi = psi.kronecker(&v);
    }
    let product = DensityMatrix::pure(shape, &psi)?;
    let est = estimate_rdms(&product, &opts(Shots::Exact, derive_seed(seed, &[0x71])))?;
    let exact_err = block_errors(&product, &est)?.into_iter().fold(0.0, f64::max);
    out.metric("product.max_error", exact_err);
    out.check("product_exact", exact_err <= exact_tol, format!("{exact_err:.3e} <= {exact_tol:e}"));

    // Matrix product state: shot-noise scaling.
    let mps = random_translation_invariant_mps(shape, bond, &mut rng_for(seed, &[0x72]))?;
    let mut errors = Table::new("rdm_errors.csv", &["shots", "repeat", "mean_error", "max_error", "mean_stderr"]);
    let mut means = Vec::new();
    for &n in &ladder {
        let runs: Vec<(f64, f64, f64)> = (0..repeats)
            .into_par_iter()
            .map(|r| -> Result<(f64, f64, f64)> {
                let e = estimate_rdms(&mps, &opts(Shots::Finite(n), derive_seed(seed, &[0x73, n as u64, r as u64])))?;
                let errs = block_errors(&mps, &e)?;
                let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                let se = e.iter().map(|x| x.stderr).sum::<f64>() / e.len() as f64;
                Ok((mean, errs.iter().copied().fold(0.0, f64::max), se))
            })
            .collect::<Result<_>>()?;
        for (r, (mean, max, se)) in runs.iter().enumerate() {
            errors.push(vec![n.to_string(), r.to_string(), f(*mean), f(*max), f(*se)]);
        }
        let avg = runs.iter().map(|x| x.0).sum::<f64>() / runs.len() as f64;
        out.metric(format!("shots_{n}.mean_error"), avg);
        means.push((n as f64, avg));
    }
    if means.len() >= 2 {
        let xs: Vec<f64> = means.iter().map(|m| m.0.ln()).collect();
        let ys: Vec<f64> = means.iter().map(|m| m.1.ln()).collect();
        let (_, slope, _) = linear_fit(&xs, &ys);
        out.metric("shot_slope", slope);
        out.check(
            "shot_scaling",
            (slope - slope_target).abs() <= slope_tol,
            format!("slope {slope:.4} within {slope_target} ± {slope_tol}"),
        );
    }

    // Certification against exact estimates of the matrix product state.
    let exact = estimate_rdms(&mps, &opts(Shots::Exact, derive_seed(seed, &[0x74])))?;
    let honest = certify_candidate(&mps, &exact, cert_tol, false)?;
    let bad = certify_candidate(&depolarize_site(&mps, dep_site, dep_p)?, &exact, cert_tol, false)?;
    let mut cert = Table::new("certification.csv", &["candidate", "block", "defect", "passes"]);
    for (name, rep) in [("state", &honest), ("depolarized", &bad)] {
        for (q, d) in &rep.blocks {
            cert.push(vec![name.into(), q.to_string(), f(*d), rep.passes.to_string()]);
        }
    }
    out.metric("certify.state_max_defect", honest.max_defect);
    out.metric("certify.depolarized_max_defect", bad.max_defect);
    if let Some(c) = honest.caveat {
        out.metric("certify.caveat", c);
    }
    out.check("certify_accepts_state", honest.passes, format!("{:.3e} <= {cert_tol:e}", honest.max_defect));
    out.check("certify_flags_depolarization", !bad.passes, format!("{:.3e} > {cert_tol:e}", bad.max_defect));

    let mut records = Table::new("records.csv", &["block", "index", "offset", "value", "shots", "stderr", "descriptor"]);
    let mut schedules = String::new();
    for e in &exact {
        for (i, r) in e.records.iter().enumerate() {
            records.push(vec![
                e.start.to_string(),
                i.to_string(),
                r.offset.map(|o| o.to_string()).unwrap_or_default(),
                f(r.value),
                r.shots.map(|s| s.to_string()).unwrap_or_else(|| "exact".into()),
                f(r.stderr),
                r.source.clone().unwrap_or_default(),
            ]);
            if let Some(s) = &r.source {
                schedules += s;
                schedules.push('\n');
            }
        }
    }
    out.tables.push(errors);
    out.tables.push(cert);
    out.tables.push(records);
    out.files.push(("schedules.txt".into(), schedules));
    Ok(out)
}

/// Seed observable for reduced defects: `single` (Z on the block's first site) or `sum` (normalized `Σ_i Z_i`).
fn reduced_seed(kind: &str, shape: SystemShape, q: usize) -> Result<LocalSum> {
    let z = paulis()[3].unscale(2f64.sqrt());
    match kind {
        "single" => LocalSum::new(shape, vec![(q, z)]),
        "sum" => {
            let k = shape.sites();
            LocalSum::new(shape, (1..=k).map(|i| (i, z.unscale((k as f64).sqrt()))).collect())
        }
        other => Err(Error::invalid(format!("unknown observable `{other}`"))),
    }
}

fn reduced_defect_task(config: &Config) -> Result<Outcome> {
    let mut out = Outcome::new("rdm-tomography");
    let seed = seed_of(config)?;
    let sites = config.usize_list("sites", &[4, 6])?;
    let l: usize = config.value("block", 2)?;
    let depths = config.usize_list("depths", &[2, 4, 8, 16])?;
    let samples: usize = config.value("samples", 4000)?;
    let kind: String = config.value("observable", "single".to_string())?;
    let sigma: f64 = config.value("sigma_factor", 2.0)?;
    let oracle_k: usize = config.value("oracle_sites", 6)?;
    let oracle_depth: usize = config.value("oracle_depth", 3)?;
    let oracle_checks: usize = config.value("oracle_checks", 5)?;
    let oracle_tol: f64 = config.value("oracle_tol", 1e-10)?;
    let gates = GateEnsemble::new(GateSpec::LocalHaar { local_dim: 2 })?;
    let mut table = Table::new("reduced_defect.csv", &["sites", "block_start", "depth", "defect", "stderr", "raw_defect", "raw_stderr"]);
    let mut by_depth: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); depths.len()];
    for &k in &sites {
        let shape = SystemShape::new(k, 2)?;
        let q = (k - l) / 2 + 1;
        let w0 = reduced_seed(&kind, shape, q)?;
        for (di, &n) in depths.iter().enumerate() {
            let template = CircuitSchedule::new(shape, n, seed, gates.clone())?;
            let r = reduced_defect(&template, &w0, q, l, samples, derive_seed(seed, &[k as u64, n as u64]))?;
            table.push(vec![k.to_string(), q.to_string(), n.to_string(), f(r.defect), f(r.stderr), f(r.raw_defect), f(r.raw_stderr)]);
            out.metric(format!("k{k}.n{n}.defect"), r.defect);
            out.metric(format!("k{k}.n{n}.stderr"), r.stderr);
            by_depth[di].push((k, r.defect, r.stderr));
        }
    }
    for (di, &n) in depths.iter().enumerate() {
        let row = &by_depth[di];
        let mut worst = 0.0f64;
        let mut agree = true;
        for a in 0..row.len() {
            for b in a + 1..row.len() {
                let z = (row[a].1 - row[b].1).abs() / (row[a].2.powi(2) + row[b].2.powi(2)).sqrt().max(f64::MIN_POSITIVE);
                worst = worst.max(z);
                agree &= z <= sigma;
            }
        }
        out.check(format!("n{n}.k_independent"), agree, format!("largest separation {worst:.2} combined standard errors (limit {sigma})"));
    }

    let shape = SystemShape::new(oracle_k, 2)?;
    let mut rng = rng_for(seed, &[0x0a]);
    let mut worst = 0.0f64;
    for c in 0..oracle_checks {
        let terms: Vec<(usize, CMat)> = (1..oracle_k)
            .step_by(2)
            .map(|p| {
                let h = random_hermitian(4, &mut rng);
                (p, &h - CMat::identity(4, 4).scale(h.trace().re / 4.0))
            })
            .collect();
        let w0 = LocalSum::new(shape, terms)?;
        let s = CircuitSchedule::new(shape, oracle_depth, derive_seed(seed, &[0x0b, c as u64]), gates.clone())?;
        let q = 1 + rng.random_range(0..=oracle_k - l);
        let fast = evolved_local_observable(&w0, &s, q, l)?;
        let slow = evolved_local_observable_dense(&w0, &s, q, l)?;
        worst = worst.max((fast - slow).norm());
    }
    out.metric("light_cone_max_deviation", worst);
    out.check("light_cone_oracle", worst <= oracle_tol, format!("{worst:.3e} <= {oracle_tol:e}"));
    out.tables.push(table);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Config {
        Config::parse(text).unwrap()
    }

    #[test]
    fn parser_examples() {
        let c = cfg("# comment\nexperiment = frame-verify\n\ndims = 2, 4 # trailing\nx.y-z = a b\n");
        assert_eq!(c.get("experiment"), Some("frame-verify"));
        assert_eq!(c.usize_list("dims", &[]).unwrap(), vec![2, 4]);
        assert_eq!(c.get("x.y-z"), Some("a b"));
        assert_eq!(c.digest().len(), 64);
        assert!(matches!(Config::parse("a = 1\na = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Config::parse("just text"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Config::parse("bad key = 1"), Err(Error::Parse { .. })));
        assert_eq!(cfg("d = 2..5, 8").usize_list("d", &[]).unwrap(), vec![2, 3, 4, 5, 8]);
        assert!(cfg("d = 5..2").usize_list("d", &[]).is_err());
        assert!(cfg("d = x").value::<usize>("d", 0).is_err());
        assert_eq!(cfg("").value::<f64>("t", 0.5).unwrap(), 0.5);
        let again = Config::parse(&c.to_text()).unwrap();
        assert_eq!(again.entries(), c.entries());
    }

    #[test]
    fn descriptor_table_round_trips() {
        let table = Config::parse(&descriptor_table()).unwrap();
        let split = |v: &str| -> Vec<String> { v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect() };
        assert_eq!(EXPERIMENTS.len(), 8);
        for e in &EXPERIMENTS {
            assert_eq!(table.get(&format!("{}.summary", e.name)), Some(e.summary));
            assert_eq!(split(table.get(&format!("{}.required", e.name)).unwrap()), e.required.to_vec());
            assert_eq!(split(table.get(&format!("{}.optional", e.name)).unwrap()), e.optional.to_vec());
            assert_eq!(split(table.get(&format!("{}.artifacts", e.name)).unwrap()), e.artifacts.to_vec());
        }
    }

    #[test]
    fn unknown_inputs_are_rejected() {
        assert!(run(&cfg("experiment = nope")).is_err());
        assert!(run(&cfg("seed = 1")).is_err());
        assert!(run(&cfg("experiment = frame-verify\nensemble = pauli\ndims = 2\ntypo = 1")).is_err());
        assert!(run(&cfg("experiment = frame-verify\nensemble = pauli")).is_err());
    }

    #[test]
    fn exact_pauli_frame_passes() {
        let out = run(&cfg("experiment = frame-verify\nensemble = pauli\ndims = 2, 4\nmode = exact\nworkers = 1")).unwrap();
        assert!(out.passed(), "{:?}", out.checks);
        assert_eq!(out.tables[0].rows.len(), 2);
    }

    #[test]
    fn clifford_design_passes() {
        let out = run(&cfg("experiment = design-epsilon\nensemble = clifford")).unwrap();
        assert!(out.passed());
        let pauli = run(&cfg("experiment = design-epsilon\nensemble = pauli")).unwrap();
        assert!(!pauli.passed());
    }

    #[test]
    fn underdetermined_recovery_fails_honestly() {
        let out = run(&cfg("experiment = cs-recover\nsites = 2\nrecords = 1\nrepeats = 3\nshots = exact\nmin_fidelity = 0.99\nmin_successes = 3")).unwrap();
        assert!(!out.passed());
        assert_eq!(out.tables[0].rows.len(), 3);
    }

    #[test]
    fn csv_quoting_and_linear_fit() {
        let mut t = Table::new("x.csv", &["a", "b"]);
        t.push(vec!["1".into(), "k=2 gates=x,y".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,\"k=2 gates=x,y\"\n");
        let (a, b, r2) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_examples() {
        let mut r = rng_for(1, &[]);
        let rho = random_density_matrix(4, 2, &mut r);
        assert!((state_fidelity(&rho, &rho) - 1.0).abs() < 1e-8);
        let psi = random_pure_vector(3, &mut r);
        let p = &psi * psi.adjoint();
        let m = CMat::identity(3, 3).unscale(3.0);
        assert!((state_fidelity(&p, &m) - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn artifacts_are_reproducible() {
        let text = "experiment = tof-spectrum\nsites = 2\nn_max = 1\nstates = 1\ngrid_points = 65\nseed = 4\n";
        let c = cfg(text);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for p in [&a, &b] {
            let out = run(&c).unwrap();
            assert!(out.passed(), "{:?}", out.checks);
            write_artifacts(&out, &c, p).unwrap();
        }
        for name in ["tof_checks.csv", "spectrum.csv"] {
            assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        }
        let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
        assert!(report.contains(&format!("config_sha256 = {}", c.digest())));
        assert!(report.contains("status = PASS"));
        assert_eq!(output_dir(&c, Path::new("/r")).unwrap(), Path::new("/r").join(format!("tof-spectrum-{}", &c.digest()[..12])));
    }
}
