//! Parallel random circuits on an even chain: brickwork layers of independent
//! two-site gates, chosen by a fair coin per step (or per block of steps).
//!
//! Gates on bond `(s, s+1)` in step `t` are drawn from `rng_for(seed, [1, t, s])`
//! and the layer parity from `coin(seed, [0, t])`, so replay is bit-exact and
//! independent of evaluation order.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::designs::{lambda2, moment_operator, Bond, Field, MomentMode, PairTwirl, PowerOptions, TwirlLayout, TwirlOp};
use crate::error::{Error, Result};
use crate::frames::{BlockHaarEnsemble, FiniteEnsemble, HaarEnsemble, UnitaryEnsemble};
use crate::hilbert::{kron, product_in_basis, product_on_sites, CMat, SystemShape, Unitary, C64};
use crate::lattice::{FockShape, SpeckleEnsemble, SpeckleParams};
use crate::rng::{coin, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Open,
    /// Adds the bond `(k, 1)` to odd layers.
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scheduler {
    /// Independent fair coin per step.
    #[default]
    FairCoin,
    /// One coin per block of `s` consecutive steps.
    Blocked(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `U ρ U†`.
    Schrodinger,
    /// `U† w U`.
    Heisenberg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    LocalHaar,
    FiniteSet,
    BoseHubbard,
    NumberConserving,
}

/// Serializable description of a two-site gate distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum GateSpec {
    LocalHaar { local_dim: usize },
    Identity { local_dim: usize },
    /// Qubit gates `{H⊗𝟙, 𝟙⊗H, T⊗𝟙, 𝟙⊗T, CNOT}` closed under inversion.
    CliffordT,
    /// Haar on each fixed-`N` block of two sites with cutoff `n_max`.
    NumberConserving { n_max: usize },
    Speckle { n_max: usize, params: SpeckleParams },
}

impl GateSpec {
    pub fn local_dim(&self) -> usize {
        match self {
            Self::LocalHaar { local_dim } | Self::Identity { local_dim } => *local_dim,
            Self::CliffordT => 2,
            Self::NumberConserving { n_max } | Self::Speckle { n_max, .. } => n_max + 1,
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Self::LocalHaar { .. } => GateKind::LocalHaar,
            Self::Identity { .. } | Self::CliffordT => GateKind::FiniteSet,
            Self::NumberConserving { .. } => GateKind::NumberConserving,
            Self::Speckle { .. } => GateKind::BoseHubbard,
        }
    }

    /// Whether every gate commutes with the two-site number operator.
    pub fn conserves_number(&self) -> bool {
        matches!(self, Self::Identity { .. } | Self::NumberConserving { .. } | Self::Speckle { .. })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, ':');
        let name = parts.next().unwrap_or_default();
        let num = |p: Option<&str>| -> Result<usize> {
            p.ok_or_else(|| Error::invalid(format!("gate spec {s:?} needs a dimension")))?
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("gate spec {s:?}: {e}")))
        };
        match name {
            "local-haar" => Ok(Self::LocalHaar { local_dim: num(parts.next())? }),
            "identity" => Ok(Self::Identity { local_dim: num(parts.next())? }),
            "clifford-t" => Ok(Self::CliffordT),
            "number-conserving" => Ok(Self::NumberConserving { n_max: num(parts.next())? }),
            "speckle" => {
                let n_max = num(parts.next())?;
                let mut params = SpeckleParams::default();
                for kv in parts.next().unwrap_or_default().split(',').filter(|x| !x.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::invalid(format!("bad speckle parameter {kv:?}")))?;
                    let f = || v.parse::<f64>().map_err(|e| Error::invalid(format!("{k}: {e}")));
                    match k {
                        "J" => params.j = f()?,
                        "U" => params.u = f()?,
                        "mean" => params.delta_mean = f()?,
                        "sigma" => params.delta_sigma = f()?,
                        "tmin" => params.t_min = f()?,
                        "tmax" => params.t_max = f()?,
                        "inv" => {
                            params.inversion_closed =
                                v.parse::<bool>().map_err(|e| Error::invalid(format!("inv: {e}")))?
                        }
                        _ => return Err(Error::invalid(format!("unknown speckle parameter {k:?}"))),
                    }
                }
                Ok(Self::Speckle { n_max, params })
            }
            _ => Err(Error::invalid(format!("unknown gate ensemble {name:?}"))),
        }
    }
}

impl fmt::Display for GateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LocalHaar { local_dim } => write!(f, "local-haar:{local_dim}"),
            Self::Identity { local_dim } => write!(f, "identity:{local_dim}"),
            Self::CliffordT => write!(f, "clifford-t"),
            Self::NumberConserving { n_max } => write!(f, "number-conserving:{n_max}"),
            Self::Speckle { n_max, params: p } => write!(
                f,
                "speckle:{n_max}:J={:?},U={:?},mean={:?},sigma={:?},tmin={:?},tmax={:?},inv={}",
                p.j, p.u, p.delta_mean, p.delta_sigma, p.t_min, p.t_max, p.inversion_closed
            ),
        }
    }
}

fn clifford_t_gates() -> Vec<CMat> {
    let id = CMat::identity(2, 2);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let h = CMat::from_row_slice(2, 2, &[C64::new(s, 0.0), C64::new(s, 0.0), C64::new(s, 0.0), C64::new(-s, 0.0)]);
    let t = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![
        C64::new(1.0, 0.0),
        C64::from_polar(1.0, std::f64::consts::FRAC_PI_4),
    ]));
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    let cnot = CMat::from_row_slice(4, 4, &[l, o, o, o, o, l, o, o, o, o, o, l, o, o, l, o]);
    vec![kron(&h, &id), kron(&id, &h), kron(&t, &id), kron(&id, &t), cnot]
}

/// A two-site gate distribution together with its sampler.
#[derive(Clone)]
pub struct GateEnsemble {
    spec: GateSpec,
    inner: Arc<dyn UnitaryEnsemble>,
}

impl fmt::Debug for GateEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GateEnsemble({})", self.spec)
    }
}

impl GateEnsemble {
    pub fn new(spec: GateSpec) -> Result<Self> {
        let d = spec.local_dim();
        if d < 2 {
            return Err(Error::invalid("local dimension must be at least 2"));
        }
        let shape = SystemShape::new(2, d)?;
        let inner: Arc<dyn UnitaryEnsemble> = match &spec {
            GateSpec::LocalHaar { .. } => Arc::new(HaarEnsemble::new(shape)),
            GateSpec::Identity { .. } => Arc::new(FiniteEnsemble::uniform(shape, vec![CMat::identity(d * d, d * d)])?),
            GateSpec::CliffordT => Arc::new(FiniteEnsemble::uniform(shape, clifford_t_gates())?.inversion_closed()?),
            GateSpec::NumberConserving { n_max } => {
                let fock = FockShape::new(2, *n_max, None)?;
                Arc::new(BlockHaarEnsemble::conserving(shape, &fock.number_diagonal())?)
            }
            GateSpec::Speckle { n_max, params } => Arc::new(SpeckleEnsemble::new(*n_max, *params)?),
        };
        Ok(Self { spec, inner })
    }

    pub fn spec(&self) -> &GateSpec {
        &self.spec
    }

    pub fn kind(&self) -> GateKind {
        self.spec.kind()
    }

    pub fn local_dim(&self) -> usize {
        self.spec.local_dim()
    }

    pub fn ensemble(&self) -> Arc<dyn UnitaryEnsemble> {
        Arc::clone(&self.inner)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        self.inner.sample(rng)
    }

    pub fn is_inversion_closed(&self) -> bool {
        match &self.spec {
            GateSpec::Speckle { params, .. } => params.inversion_closed,
            _ => true,
        }
    }

    /// Two-site twirl; Monte-Carlo estimates of ensembles that are not
    /// inversion-closed are replaced by `(T + T†)/2`.
    pub fn pair_twirl(&self, mode: MomentMode) -> Result<PairTwirl<C64>> {
        if self.kind() == GateKind::LocalHaar {
            return PairTwirl::haar(self.local_dim());
        }
        let mode = if self.inner.finite_support().is_some() { MomentMode::ExactFinite } else { mode };
        let m = match moment_operator(self.inner.as_ref(), mode)? {
            TwirlOp::Dense { matrix, .. } => (*matrix).clone(),
            other => other.to_dense()?,
        };
        let m = if self.is_inversion_closed() { m } else { (&m + m.adjoint()).unscale(2.0) };
        Ok(PairTwirl::Dense { tt: m.transpose() })
    }
}

/// Everything needed to replay one circuit.
#[derive(Clone, Debug)]
pub struct CircuitSchedule {
    shape: SystemShape,
    depth: usize,
    seed: u64,
    boundary: Boundary,
    scheduler: Scheduler,
    gates: GateEnsemble,
}

fn check_chain(sites: usize) -> Result<()> {
    if sites < 2 || sites % 2 == 1 {
        return Err(Error::OddSites(sites));
    }
    Ok(())
}

/// Bonds of one layer.
pub fn layer_bonds(sites: usize, parity: Parity, boundary: Boundary) -> Vec<Bond> {
    let start = match parity {
        Parity::Even => 1,
        Parity::Odd => 2,
    };
    let mut bonds: Vec<Bond> = (start..sites).step_by(2).map(|s| Bond { first: s, second: s + 1 }).collect();
    if parity == Parity::Odd && boundary == Boundary::Periodic {
        bonds.push(Bond { first: sites, second: 1 });
    }
    bonds
}

impl CircuitSchedule {
    /// Open boundary and a fair coin per step.
    pub fn new(shape: SystemShape, depth: usize, seed: u64, gates: GateEnsemble) -> Result<Self> {
        check_chain(shape.sites())?;
        if gates.local_dim() != shape.local_dim() {
            return Err(Error::DimensionMismatch { expected: shape.local_dim(), got: gates.local_dim() });
        }
        Ok(Self { shape, depth, seed, boundary: Boundary::Open, scheduler: Scheduler::FairCoin, gates })
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_scheduler(mut self, scheduler: Scheduler) -> Result<Self> {
        if scheduler == Scheduler::Blocked(0) {
            return Err(Error::invalid("block size must be positive"));
        }
        self.scheduler = scheduler;
        Ok(self)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        Self { depth, ..self.clone() }
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    pub fn gates(&self) -> &GateEnsemble {
        &self.gates
    }

    pub fn parity(&self, step: usize) -> Parity {
        let slot = match self.scheduler {
            Scheduler::FairCoin => step,
            Scheduler::Blocked(s) => step / s,
        };
        if coin(self.seed, &[0, slot as u64]) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn bonds(&self, parity: Parity) -> Vec<Bond> {
        layer_bonds(self.shape.sites(), parity, self.boundary)
    }

    /// Gates of one step, keyed by bond.
    pub fn layer_gates(&self, step: usize) -> Vec<(Bond, CMat)> {
        self.bonds(self.parity(step))
            .into_iter()
            .map(|b| {
                let mut rng = rng_for(self.seed, &[1, step as u64, b.first as u64]);
                (b, self.gates.sample(&mut rng))
            })
            .collect()
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.depth {
            return Err(Error::invalid(format!("step {step} outside depth {}", self.depth)));
        }
        Ok(())
    }

    fn layer_matrix(&self, step: usize, basis: Option<&[usize]>) -> Result<CMat> {
        let gates = self.layer_gates(step);
        let sites: Vec<[usize; 2]> = gates.iter().map(|(b, _)| [b.first, b.second]).collect();
        let factors: Vec<(&[usize], &CMat)> = sites.iter().zip(&gates).map(|(s, (_, g))| (&s[..], g)).collect();
        match basis {
            Some(bs) => product_in_basis(&self.shape, &factors, bs),
            None => product_on_sites(&self.shape, &factors),
        }
    }

    pub fn sample_layer(&self, step: usize) -> Result<Unitary> {
        self.check_step(step)?;
        Unitary::new(self.shape, self.layer_matrix(step, None)?)
    }

    /// `L_{n−1} ⋯ L_0`.
    pub fn run_circuit(&self) -> Result<Unitary> {
        let mut u = CMat::identity(self.shape.dim(), self.shape.dim());
        for step in 0..self.depth {
            u = self.layer_matrix(step, None)? * u;
        }
        Unitary::new(self.shape, u)
    }

    /// The circuit compressed onto a set of basis states it leaves invariant.
    pub fn run_in_basis(&self, basis: &[usize]) -> Result<CMat> {
        if !self.gates.spec().conserves_number() {
            return Err(Error::invalid("sector evolution needs number-conserving gates"));
        }
        let mut u = CMat::identity(basis.len(), basis.len());
        for step in 0..self.depth {
            u = self.layer_matrix(step, Some(basis))? * u;
        }
        Ok(u)
    }

    pub fn apply_circuit(&self, x: &CMat, direction: Direction) -> Result<CMat> {
        let d = self.shape.dim();
        if x.nrows() != d || x.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.nrows() });
        }
        let u = self.run_circuit()?.into_matrix();
        Ok(match direction {
            Direction::Schrodinger => &u * x * u.adjoint(),
            Direction::Heisenberg => u.adjoint() * x * &u,
        })
    }

    /// Flat `key=value` record sufficient for bit-exact replay.
    pub fn descriptor(&self) -> String {
        let boundary = match self.boundary {
            Boundary::Open => "open",
            Boundary::Periodic => "periodic",
        };
        let scheduler = match self.scheduler {
            Scheduler::FairCoin => "coin".to_string(),
            Scheduler::Blocked(s) => format!("blocked:{s}"),
        };
        format!(
            "k={} dl={} boundary={boundary} depth={} seed={} scheduler={scheduler} gates={}",
            self.shape.sites(),
            self.shape.local_dim(),
            self.depth,
            self.seed,
            self.gates.spec()
        )
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::invalid(format!("bad field {tok:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(Error::invalid(format!("duplicate field {k:?}")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::invalid(format!("missing field {k:?}")));
        let int = |k: &str| -> Result<u64> {
            get(k)?.parse::<u64>().map_err(|e| Error::invalid(format!("{k}: {e}")))
        };
        let sites = int("k")? as usize;
        let local_dim = int("dl")? as usize;
        let boundary = match get("boundary")? {
            "open" => Boundary::Open,
            "periodic" => Boundary::Periodic,
            b => return Err(Error::invalid(format!("unknown boundary {b:?}"))),
        };
        let scheduler = match get("scheduler")? {
            "coin" => Scheduler::FairCoin,
            other => match other.strip_prefix("blocked:") {
                Some(n) => Scheduler::Blocked(n.parse().map_err(|e| Error::invalid(format!("scheduler: {e}")))?),
                None => return Err(Error::invalid(format!("unknown scheduler {other:?}"))),
            },
        };
        let gates = GateEnsemble::new(GateSpec::parse(get("gates")?)?)?;
        let shape = SystemShape::new(sites, local_dim)?;
        Self::new(shape, int("depth")? as usize, int("seed")?, gates)?
            .with_boundary(boundary)
            .with_scheduler(scheduler)
    }
}

/// Depth-`n` circuits with fresh seeds, optionally compressed onto an invariant basis subset.
#[derive(Clone, Debug)]
pub struct CircuitEnsemble {
    template: CircuitSchedule,
    sector: Option<Vec<usize>>,
    shape: SystemShape,
}

pub fn circuit_ensemble(template: CircuitSchedule) -> CircuitEnsemble {
    let shape = template.shape;
    CircuitEnsemble { template, sector: None, shape }
}

impl CircuitEnsemble {
    pub fn in_sector(self, basis: Vec<usize>) -> Result<Self> {
        if !self.template.gates.spec().conserves_number() {
            return Err(Error::invalid("sector restriction needs number-conserving gates"));
        }
        let shape = SystemShape::flat(basis.len())?;
        Ok(Self { sector: Some(basis), shape, ..self })
    }

    pub fn template(&self) -> &CircuitSchedule {
        &self.template
    }

    pub fn schedule_for(&self, rng: &mut ChaCha8Rng) -> CircuitSchedule {
        self.template.with_seed(rng.random())
    }
}

impl UnitaryEnsemble for CircuitEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        let schedule = self.schedule_for(rng);
        let out = match &self.sector {
            Some(basis) => schedule.run_in_basis(basis),
            None => schedule.run_circuit().map(Unitary::into_matrix),
        };
        out.expect("schedule validated on construction")
    }

    fn describe(&self) -> String {
        let t = &self.template;
        format!(
            "circuit(k={}, depth={}, {:?}, {:?}, gates={}{})",
            t.shape.sites(),
            t.depth,
            t.boundary,
            t.scheduler,
            t.gates.spec(),
            self.sector.as_ref().map_or(String::new(), |b| format!(", sector dim {}", b.len()))
        )
    }
}

/// Twirl of one layer of a given parity; the identity when the layer has no bonds.
pub fn layer_twirl<T: Field>(
    sites: usize,
    local_dim: usize,
    parity: Parity,
    boundary: Boundary,
    pair: &Arc<PairTwirl<T>>,
) -> TwirlOp<T> {
    let layout = TwirlLayout::new(sites, local_dim);
    let bonds = layer_bonds(sites, parity, boundary);
    if bonds.is_empty() {
        return TwirlOp::Identity(layout);
    }
    TwirlOp::Layer { layout, pairs: bonds.into_iter().map(|b| (b, Arc::clone(pair))).collect() }
}

/// `(M_e, M_o)`.
pub fn parity_twirls<T: Field>(
    sites: usize,
    local_dim: usize,
    boundary: Boundary,
    pair: PairTwirl<T>,
) -> Result<(TwirlOp<T>, TwirlOp<T>)> {
    check_chain(sites)?;
    let pair = Arc::new(pair);
    Ok((
        layer_twirl(sites, local_dim, Parity::Even, boundary, &pair),
        layer_twirl(sites, local_dim, Parity::Odd, boundary, &pair),
    ))
}

/// Twirl of a depth-`depth` circuit: `((M_e + M_o)/2)^n` for the fair coin and
/// `((M_e^s + M_o^s)/2)^{n/s}` for blocks of `s`.
pub fn circuit_twirl<T: Field>(
    sites: usize,
    local_dim: usize,
    boundary: Boundary,
    scheduler: Scheduler,
    pair: PairTwirl<T>,
    depth: usize,
) -> Result<TwirlOp<T>> {
    let (m_e, m_o) = parity_twirls(sites, local_dim, boundary, pair)?;
    let (block, reps) = match scheduler {
        Scheduler::FairCoin => (1, depth),
        Scheduler::Blocked(s) => {
            if s == 0 || depth % s != 0 {
                return Err(Error::invalid(format!("depth {depth} is not a multiple of the block size {s}")));
            }
            (s, depth / s)
        }
    };
    let step = TwirlOp::combination(vec![(0.5, m_e.power(block)), (0.5, m_o.power(block))])?;
    Ok(step.power(reps))
}

/// `⌈C · ln(1/ε) · k · ln k⌉`, at least 1.
pub fn depth_for_epsilon(sites: usize, epsilon: f64, c: f64) -> Result<usize> {
    if sites < 2 {
        return Err(Error::invalid(format!("need k ≥ 2, got {sites}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("need 0 < ε < 1, got {epsilon}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("need C > 0, got {c}")));
    }
    let k = sites as f64;
    let n = (c * (1.0 / epsilon).ln() * k * k.ln()).ceil();
    Ok((n as usize).max(1))
}

/// Depth at `ε = d^{−5/2}` with `d = d_l^k`, which scales as `k² log k`.
pub fn compressed_sensing_depth(sites: usize, local_dim: usize, c: f64) -> Result<usize> {
    if local_dim < 2 {
        return Err(Error::invalid("local dimension must be at least 2"));
    }
    if sites < 2 {
        return Err(Error::invalid(format!("need k ≥ 2, got {sites}")));
    }
    let log_inv_eps = 2.5 * sites as f64 * (local_dim as f64).ln();
    depth_for_epsilon(sites, (-log_inv_eps).exp().max(f64::MIN_POSITIVE), c)
}

/// Smallest `C` for which `depth_for_epsilon(k, target, C)` reaches a depth
/// with measured `ε(n) ≤ target`; `None` when no measured depth does.
pub fn fit_depth_constant(sites: usize, target: f64, curve: &[(usize, f64)]) -> Option<f64> {
    let n_star = curve.iter().filter(|(_, e)| *e <= target).map(|(n, _)| *n).min()?;
    let k = sites as f64;
    Some(n_star as f64 / ((1.0 / target).ln() * k * k.ln()))
}

#[derive(Clone, Debug)]
pub struct UniversalityReport {
    /// `λ₂` of the `j`-fold convolution for `j = 1..=moments`.
    pub curve: Vec<f64>,
    pub delta: f64,
    /// First `j` with `λ₂ < 1 − δ`.
    pub first_below: Option<usize>,
    pub universal: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct UniversalityOptions {
    pub moments: usize,
    pub delta: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for UniversalityOptions {
    fn default() -> Self {
        Self { moments: 16, delta: 1e-2, samples: 20_000, seed: 0x5eed }
    }
}

/// Heuristic certificate: the `j`-fold convolution of the ensemble twirl leaves the fixed space gapped.
pub fn universality_probe(ens: &dyn UnitaryEnsemble, opts: &UniversalityOptions) -> Result<UniversalityReport> {
    let mode = if ens.is_exact_haar() || ens.finite_support().is_some() {
        MomentMode::ExactFinite
    } else {
        MomentMode::MonteCarlo { samples: opts.samples, seed: opts.seed }
    };
    let g = moment_operator(ens, mode)?;
    let g = match g {
        TwirlOp::Dense { layout, matrix } => {
            let m: DMatrix<C64> = (&*matrix + matrix.adjoint()).unscale(2.0);
            TwirlOp::Dense { layout, matrix: Arc::new(m) }
        }
        other => other,
    };
    let power = PowerOptions { seed: opts.seed, ..PowerOptions::default() };
    let mut curve = Vec::with_capacity(opts.moments);
    for j in 1..=opts.moments {
        curve.push(lambda2(&g.clone().power(j), &power)?.value);
    }
    let first_below = curve.iter().position(|&l| l < 1.0 - opts.delta).map(|i| i + 1);
    Ok(UniversalityReport { curve, delta: opts.delta, first_below, universal: first_below.is_some() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{design_epsilon, FixedSpace};
    use crate::frames::RestrictedEnsemble;
    use crate::hilbert::{hermitian_operator_norm, partial_trace, paulis, random_density_matrix, random_hermitian, unitarity_deviation};
    use crate::lattice::number_operator;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn haar_gates(d: usize) -> GateEnsemble {
        GateEnsemble::new(GateSpec::LocalHaar { local_dim: d }).unwrap()
    }

    fn schedule(k: usize, depth: usize, seed: u64) -> CircuitSchedule {
        CircuitSchedule::new(SystemShape::new(k, 2).unwrap(), depth, seed, haar_gates(2)).unwrap()
    }

    fn first_step_with(s: &CircuitSchedule, parity: Parity) -> usize {
        (0..s.depth()).find(|&t| s.parity(t) == parity).unwrap()
    }

    #[test]
    fn layer_examples() {
        let s2 = schedule(2, 64, 3);
        let odd = s2.sample_layer(first_step_with(&s2, Parity::Odd)).unwrap();
        assert_abs_diff_eq!((odd.matrix() - CMat::identity(4, 4)).norm(), 0.0, epsilon = 1e-15);

        let s4 = schedule(4, 64, 5);
        let t = first_step_with(&s4, Parity::Even);
        let gates = s4.layer_gates(t);
        assert_eq!(gates.iter().map(|(b, _)| (b.first, b.second)).collect::<Vec<_>>(), vec![(1, 2), (3, 4)]);
        let expect = kron(&gates[0].1, &gates[1].1);
        assert_abs_diff_eq!((s4.sample_layer(t).unwrap().matrix() - expect).norm(), 0.0, epsilon = 1e-13);

        let t = first_step_with(&s4, Parity::Odd);
        let gates = s4.layer_gates(t);
        assert_eq!(gates.len(), 1);
        let expect = kron(&kron(&CMat::identity(2, 2), &gates[0].1), &CMat::identity(2, 2));
        assert_abs_diff_eq!((s4.sample_layer(t).unwrap().matrix() - expect).norm(), 0.0, epsilon = 1e-13);

        let a = s4.sample_layer(7).unwrap();
        let b = s4.clone().sample_layer(7).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert!(s4.sample_layer(64).is_err());
    }

    #[test]
    fn odd_chains_are_rejected() {
        let err = CircuitSchedule::new(SystemShape::new(3, 2).unwrap(), 1, 0, haar_gates(2)).unwrap_err();
        assert!(matches!(err, Error::OddSites(3)));
        assert!(err.to_string().contains('3'));
        assert!(CircuitSchedule::new(SystemShape::new(4, 3).unwrap(), 1, 0, haar_gates(2)).is_err());
    }

    #[test]
    fn periodic_odd_layer_includes_wrap_bond() {
        let bonds = layer_bonds(4, Parity::Odd, Boundary::Periodic);
        assert_eq!(bonds, vec![Bond { first: 2, second: 3 }, Bond { first: 4, second: 1 }]);
        let s = schedule(4, 32, 9).with_boundary(Boundary::Periodic);
        let t = first_step_with(&s, Parity::Odd);
        let u = s.sample_layer(t).unwrap();
        assert!(unitarity_deviation(u.matrix()) < 1e-10);
    }

    #[test]
    fn run_and_apply_examples() {
        let s = schedule(4, 0, 1);
        assert_abs_diff_eq!((s.run_circuit().unwrap().matrix() - CMat::identity(16, 16)).norm(), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let w = random_hermitian(16, &mut r);
        assert_eq!(s.apply_circuit(&w, Direction::Heisenberg).unwrap(), w);

        let s = schedule(4, 12, 77);
        let u = s.run_circuit().unwrap();
        assert!(unitarity_deviation(u.matrix()) < 1e-10);
        let ev = s.apply_circuit(&w, Direction::Heisenberg).unwrap();
        assert_abs_diff_eq!((ev.trace() - w.trace()).norm(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ev.norm(), w.norm(), epsilon = 1e-10);

        let rho = random_density_matrix(16, 3, &mut r);
        let lhs = (&w * s.apply_circuit(&rho, Direction::Schrodinger).unwrap()).trace();
        let rhs = (&ev * &rho).trace();
        assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
        assert!(s.apply_circuit(&CMat::identity(4, 4), Direction::Heisenberg).is_err());
    }

    #[test]
    fn descriptor_round_trip_is_bit_exact() {
        let spec = GateSpec::Speckle { n_max: 1, params: SpeckleParams { delta_sigma: 0.3141592653589793, ..SpeckleParams::default() } };
        let s = CircuitSchedule::new(SystemShape::new(4, 2).unwrap(), 9, 12345, GateEnsemble::new(spec).unwrap())
            .unwrap()
            .with_boundary(Boundary::Periodic)
            .with_scheduler(Scheduler::Blocked(3))
            .unwrap();
        let text = s.descriptor();
        let back = CircuitSchedule::from_descriptor(&text).unwrap();
        assert_eq!(back.descriptor(), text);
        assert_eq!(back.run_circuit().unwrap().matrix(), s.run_circuit().unwrap().matrix());
        assert!(CircuitSchedule::from_descriptor("k=4 dl=2").is_err());
        for spec in ["local-haar:3", "identity:2", "clifford-t", "number-conserving:2"] {
            assert_eq!(GateSpec::parse(spec).unwrap().to_string(), spec);
        }
    }

    #[test]
    fn parity_is_fair() {
        let s = schedule(4, 10_000, 2024);
        let n = 10_000.0;
        let even = (0..10_000).filter(|&t| s.parity(t) == Parity::Even).count() as f64;
        assert!((even - n / 2.0).abs() <= 5.0 * (n * 0.25f64).sqrt());
    }

    #[test]
    fn blocked_scheduler_holds_parity_within_blocks() {
        let s = schedule(4, 40, 8).with_scheduler(Scheduler::Blocked(4)).unwrap();
        for b in 0..10 {
            let p = s.parity(4 * b);
            assert!((4 * b..4 * b + 4).all(|t| s.parity(t) == p));
        }
    }

    fn random_vector(n: usize, seed: u64) -> DVector<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| r.random::<f64>() - 0.5)
    }

    #[test]
    fn circuit_twirl_equals_average_over_parity_sequences() {
        let n = 3;
        let g = circuit_twirl(4, 2, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(2).unwrap(), n).unwrap();
        let (m_e, m_o) = parity_twirls(4, 2, Boundary::Open, PairTwirl::<f64>::haar(2).unwrap()).unwrap();
        for seed in 0..3 {
            let x = random_vector(g.layout().len(), seed);
            let mut avg = DVector::zeros(x.len());
            for bits in 0..(1 << n) {
                let mut y = x.clone();
                for step in 0..n {
                    let m = if bits >> step & 1 == 1 { &m_e } else { &m_o };
                    y = m.apply(&y).unwrap();
                }
                avg += y / (1 << n) as f64;
            }
            let direct = g.apply(&x).unwrap();
            assert!((direct - avg).norm() < 1e-12 * x.norm());
        }
    }

    #[test]
    fn two_site_even_layer_is_full_haar() {
        let (m_e, _) = parity_twirls(2, 2, Boundary::Open, PairTwirl::<f64>::haar(2).unwrap()).unwrap();
        let haar = TwirlOp::<f64>::haar(TwirlLayout::new(2, 2)).unwrap();
        let eps = design_epsilon(&m_e, &haar, &PowerOptions::default()).unwrap();
        assert!(eps.epsilon < 1e-12);
        assert!(lambda2(&m_e, &PowerOptions::default()).unwrap().value < 1e-12);
    }

    #[test]
    fn two_site_circuit_twirl_matches_sampled_circuits() {
        // G = (P_H + id)/2 on k = 2, so ε = 1/2 exactly.
        let g = circuit_twirl(2, 2, Boundary::Open, Scheduler::FairCoin, PairTwirl::<C64>::haar(2).unwrap(), 1).unwrap();
        let haar = TwirlOp::<C64>::haar(TwirlLayout::new(2, 2)).unwrap();
        assert_abs_diff_eq!(design_epsilon(&g, &haar, &PowerOptions::default()).unwrap().epsilon, 0.5, epsilon = 1e-12);
        let ens = circuit_ensemble(schedule(2, 1, 0));
        let mc = moment_operator(&ens, MomentMode::MonteCarlo { samples: 20_000, seed: 4 }).unwrap();
        let dist = design_epsilon(&mc, &g, &PowerOptions::default()).unwrap().epsilon;
        assert!(dist < 0.05, "{dist}");
    }

    #[test]
    fn circuit_twirl_fixes_identity_and_swap() {
        let fixed = FixedSpace::new(TwirlLayout::new(4, 2)).unwrap();
        for boundary in [Boundary::Open, Boundary::Periodic] {
            let g = circuit_twirl(4, 2, boundary, Scheduler::FairCoin, PairTwirl::<f64>::haar(2).unwrap(), 2).unwrap();
            for v in [fixed.identity_vector::<f64>(), fixed.swap_vector::<f64>()] {
                assert!((g.apply(&v).unwrap() - &v).norm() < 1e-9);
            }
        }
        let clifford_t = GateEnsemble::new(GateSpec::CliffordT).unwrap();
        let pair = clifford_t.pair_twirl(MomentMode::ExactFinite).unwrap();
        let g = circuit_twirl(4, 2, Boundary::Open, Scheduler::Blocked(2), pair, 4).unwrap();
        for v in [fixed.identity_vector::<C64>(), fixed.swap_vector::<C64>()] {
            assert!((g.apply(&v).unwrap() - &v).norm() < 1e-9);
        }
    }

    #[test]
    fn design_error_decays_geometrically() {
        let haar = TwirlOp::<f64>::haar(TwirlLayout::new(4, 2)).unwrap();
        let opts = PowerOptions::default();
        let g1 = circuit_twirl(4, 2, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(2).unwrap(), 1).unwrap();
        let lam = lambda2(&g1, &opts).unwrap().value;
        assert!(lam > 0.5 && lam < 1.0, "{lam}");
        let mut prev = f64::INFINITY;
        for n in [1, 2, 4, 8] {
            let g = circuit_twirl(4, 2, Boundary::Open, Scheduler::FairCoin, PairTwirl::<f64>::haar(2).unwrap(), n).unwrap();
            let eps = design_epsilon(&g, &haar, &opts).unwrap().epsilon;
            assert!(eps < prev);
            assert_abs_diff_eq!(eps, lam.powi(n as i32), epsilon = 1e-6);
            prev = eps;
        }
    }

    #[test]
    fn depth_examples() {
        assert_eq!(depth_for_epsilon(4, 1.0 - 1e-12, 1.0).unwrap(), 1);
        let a = depth_for_epsilon(6, 1e-3, 1.0).unwrap();
        let b = depth_for_epsilon(6, 1e-3, 2.0).unwrap();
        assert!((b as i64 - 2 * a as i64).abs() <= 1);
        assert!(depth_for_epsilon(1, 0.1, 1.0).is_err());
        assert!(depth_for_epsilon(4, 1.0, 1.0).is_err());
        assert!(depth_for_epsilon(4, 0.1, 0.0).is_err());
        let n4 = compressed_sensing_depth(4, 2, 1.0).unwrap() as f64;
        let n8 = compressed_sensing_depth(8, 2, 1.0).unwrap() as f64;
        let ratio = (64.0 * 8f64.ln()) / (16.0 * 4f64.ln());
        assert!((n8 / n4 - ratio).abs() < 0.1 * ratio);
        assert_abs_diff_eq!(fit_depth_constant(4, 0.1, &[(1, 0.5), (5, 0.09), (9, 0.01)]).unwrap(), 5.0 / (10f64.ln() * 4.0 * 4f64.ln()));
        assert!(fit_depth_constant(4, 1e-3, &[(1, 0.5)]).is_none());
    }

    #[test]
    fn universality_examples() {
        let opts = UniversalityOptions { moments: 4, ..UniversalityOptions::default() };
        let haar = universality_probe(haar_gates(2).ensemble().as_ref(), &opts).unwrap();
        assert!(haar.curve[0] < 1e-10 && haar.first_below == Some(1));
        let id = GateEnsemble::new(GateSpec::Identity { local_dim: 2 }).unwrap();
        let rep = universality_probe(id.ensemble().as_ref(), &opts).unwrap();
        assert!(!rep.universal);
        assert!(rep.curve.iter().all(|&l| (l - 1.0).abs() < 1e-9));
    }

    #[test]
    fn speckle_gates_are_universal_in_single_particle_sector() {
        let spec = GateSpec::Speckle { n_max: 1, params: SpeckleParams::default() };
        let gates = GateEnsemble::new(spec).unwrap();
        let fock = FockShape::new(2, 1, Some(1)).unwrap();
        let restriction = crate::frames::restricted_projector(&number_operator(&fock), 1.0).unwrap();
        let ens = RestrictedEnsemble::new(gates.ensemble(), restriction).unwrap();
        let opts = UniversalityOptions { moments: 16, samples: 5_000, ..UniversalityOptions::default() };
        let rep = universality_probe(&ens, &opts).unwrap();
        assert!(rep.universal, "{:?}", rep.curve);
        assert!(rep.curve[0] < 1.0);
    }

    #[test]
    fn light_cone() {
        let k = 6;
        let shape = SystemShape::new(k, 2).unwrap();
        let z = &paulis()[3];
        for (q, depth, seed) in [(3, 1, 1), (3, 2, 2), (1, 2, 3), (6, 1, 4)] {
            let s = CircuitSchedule::new(shape, depth, seed, haar_gates(2)).unwrap();
            let w = product_on_sites(&shape, &[(&[q], z)]).unwrap();
            let ev = s.apply_circuit(&w, Direction::Heisenberg).unwrap();
            let lo = q.saturating_sub(depth).max(1);
            let hi = (q + depth).min(k);
            let cone: Vec<usize> = (lo..=hi).collect();
            let reduced = partial_trace(&ev, &shape, &cone).unwrap();
            let outside = (k - cone.len()) as u32;
            let rebuilt = product_on_sites(&shape, &[(&cone, &reduced.unscale(2f64.powi(outside as i32)))]).unwrap();
            assert!((rebuilt - &ev).norm() < 1e-10, "q={q} depth={depth}");
        }
    }

    #[test]
    fn number_conserving_circuits_commute_with_total_number() {
        let fock = FockShape::new(4, 2, None).unwrap();
        let n = number_operator(&fock);
        for spec in [GateSpec::NumberConserving { n_max: 2 }, GateSpec::Speckle { n_max: 2, params: SpeckleParams::default() }] {
            let s = CircuitSchedule::new(fock.system(), 6, 11, GateEnsemble::new(spec).unwrap()).unwrap();
            let u = s.run_circuit().unwrap().into_matrix();
            let c = &u * &n - &n * &u;
            assert!(c.singular_values().max() <= 1e-8);
            let basis = FockShape::new(4, 2, Some(2)).unwrap().sector_basis().unwrap();
            let block = s.run_in_basis(&basis).unwrap();
            let direct = CMat::from_fn(basis.len(), basis.len(), |i, j| u[(basis[i], basis[j])]);
            assert!((block - direct).norm() < 1e-10);
        }
        assert!(schedule(4, 1, 0).run_in_basis(&[0, 1]).is_err());
    }

    #[test]
    fn sector_ensemble_samples_are_unitary() {
        let fock = FockShape::new(4, 2, Some(2)).unwrap();
        let gates = GateEnsemble::new(GateSpec::Speckle { n_max: 2, params: SpeckleParams::default() }).unwrap();
        let s = CircuitSchedule::new(fock.system(), 4, 0, gates).unwrap();
        let ens = circuit_ensemble(s).in_sector(fock.sector_basis().unwrap()).unwrap();
        assert_eq!(ens.dim(), 10);
        let u = ens.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(unitarity_deviation(&u) < 1e-10);
        let v = ens.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(u, v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn replay_is_deterministic(seed in any::<u64>(), depth in 0usize..6) {
            let a = schedule(4, depth, seed).run_circuit().unwrap();
            let b = schedule(4, depth, seed).run_circuit().unwrap();
            prop_assert_eq!(a.matrix(), b.matrix());
        }

        #[test]
        fn heisenberg_preserves_trace_and_norm(seed in any::<u64>(), depth in 1usize..5) {
            let s = schedule(4, depth, seed);
            let w = random_hermitian(16, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let ev = s.apply_circuit(&w, Direction::Heisenberg).unwrap();
            prop_assert!((ev.trace() - w.trace()).norm() < 1e-10);
            prop_assert!((ev.norm() - w.norm()).abs() < 1e-10);
            prop_assert!((hermitian_operator_norm(&ev) - hermitian_operator_norm(&w)).abs() < 1e-10);
        }
    }
}
