//! Observable measures, sampling operators and tight-frame defects.
//!
//! Superoperators act on the real vector space of Hermitian matrices. A
//! Hermitian `d×d` matrix is stored as `d²` real coordinates: the diagonal
//! entries, then `√2·Re X_ij, √2·Im X_ij` for `i < j` in lexicographic order.
//! The basis is orthonormal for the Hilbert-Schmidt product, so the 2→2 norm
//! of a superoperator is the spectral norm of its coordinate matrix.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{
    eigh, ginibre, hermitian_part, hs_inner, paulis, product_on_sites, unitarity_deviation, CMat,
    Observable, SystemShape, Tolerances, C64,
};
use crate::rng::rng_for;

/// Largest `d` for which superoperators are kept as dense coordinate matrices.
pub const DENSE_MAX_DIM: usize = 64;

/// Largest `d` accepted by the Monte-Carlo frame estimator (jackknife groups are dense).
pub const MONTE_CARLO_MAX_DIM: usize = 32;

/// Number of jackknife groups for Monte-Carlo error bars.
pub const JACKKNIFE_GROUPS: usize = 20;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Real coordinates of the Hermitian part of `m`.
pub fn herm_coords(m: &CMat) -> DVector<f64> {
    let d = m.nrows();
    let mut v = DVector::zeros(d * d);
    for i in 0..d {
        v[i] = m[(i, i)].re;
    }
    let mut p = d;
    for i in 0..d {
        for j in i + 1..d {
            let z = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            v[p] = SQRT2 * z.re;
            v[p + 1] = SQRT2 * z.im;
            p += 2;
        }
    }
    v
}

/// Hermitian matrix with the given coordinates.
pub fn herm_from_coords(v: &DVector<f64>, d: usize) -> CMat {
    assert_eq!(v.len(), d * d, "coordinate length must be d²");
    let mut m = CMat::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = C64::new(v[i], 0.0);
    }
    let mut p = d;
    for i in 0..d {
        for j in i + 1..d {
            let z = C64::new(v[p], v[p + 1]) / SQRT2;
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
            p += 2;
        }
    }
    m
}

fn integer_sqrt(n: usize) -> usize {
    let r = (n as f64).sqrt().round() as usize;
    assert_eq!(r * r, n, "{n} is not a square");
    r
}

type MapFn = Arc<dyn Fn(&CMat) -> CMat + Send + Sync>;

#[derive(Clone)]
enum Repr {
    /// Coordinate matrix of size `d_out² × d_in²`.
    Dense(DMatrix<f64>),
    MatrixFree { apply: MapFn, adjoint: Option<MapFn> },
}

/// Real-linear map between spaces of Hermitian matrices.
#[derive(Clone)]
pub struct SuperOperator {
    d_in: usize,
    d_out: usize,
    repr: Repr,
}

impl std::fmt::Debug for SuperOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.repr {
            Repr::Dense(_) => "dense",
            Repr::MatrixFree { .. } => "matrix-free",
        };
        write!(f, "SuperOperator({} -> {}, {kind})", self.d_in, self.d_out)
    }
}

impl SuperOperator {
    pub fn from_dense(matrix: DMatrix<f64>) -> Self {
        let d_in = integer_sqrt(matrix.ncols());
        let d_out = integer_sqrt(matrix.nrows());
        Self { d_in, d_out, repr: Repr::Dense(matrix) }
    }

    /// Matrix-free map. `apply` must be real-linear and Hermiticity-preserving.
    pub fn from_fn(
        d_in: usize,
        d_out: usize,
        apply: impl Fn(&CMat) -> CMat + Send + Sync + 'static,
        adjoint: Option<Box<dyn Fn(&CMat) -> CMat + Send + Sync>>,
    ) -> Self {
        Self {
            d_in,
            d_out,
            repr: Repr::MatrixFree { apply: Arc::new(apply), adjoint: adjoint.map(Arc::from) },
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_dense(DMatrix::identity(d * d, d * d))
    }

    pub fn zero(d: usize) -> Self {
        Self::from_dense(DMatrix::zeros(d * d, d * d))
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    pub fn dense_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.repr {
            Repr::Dense(m) => Some(m),
            Repr::MatrixFree { .. } => None,
        }
    }

    fn check_input(&self, x: &CMat) -> Result<()> {
        if x.nrows() != self.d_in || x.ncols() != self.d_in {
            return Err(Error::DimensionMismatch { expected: self.d_in, got: x.nrows() });
        }
        Ok(())
    }

    fn apply_herm(&self, x: &CMat, adjoint: bool) -> Result<CMat> {
        match &self.repr {
            Repr::Dense(m) => {
                let v = herm_coords(x);
                if adjoint {
                    Ok(herm_from_coords(&m.tr_mul(&v), self.d_in))
                } else {
                    Ok(herm_from_coords(&(m * v), self.d_out))
                }
            }
            Repr::MatrixFree { apply, adjoint: adj } => {
                if adjoint {
                    let f = adj.as_ref().ok_or_else(|| Error::invalid("superoperator has no adjoint"))?;
                    Ok(f(x))
                } else {
                    Ok(apply(x))
                }
            }
        }
    }

    /// Applies the complex-linear extension: `X = H₁ + iH₂ ↦ S(H₁) + iS(H₂)`.
    pub fn apply(&self, x: &CMat) -> Result<CMat> {
        self.check_input(x)?;
        self.apply_split(x, false)
    }

    pub fn apply_adjoint(&self, x: &CMat) -> Result<CMat> {
        if x.nrows() != self.d_out || x.ncols() != self.d_out {
            return Err(Error::DimensionMismatch { expected: self.d_out, got: x.nrows() });
        }
        self.apply_split(x, true)
    }

    fn apply_split(&self, x: &CMat, adjoint: bool) -> Result<CMat> {
        let h1 = hermitian_part(x);
        let anti = x - &h1;
        let h2 = anti * C64::new(0.0, -1.0);
        let y1 = self.apply_herm(&h1, adjoint)?;
        if h2.iter().all(|z| z.norm() == 0.0) {
            return Ok(y1);
        }
        let y2 = self.apply_herm(&h2, adjoint)?;
        Ok(y1 + y2 * C64::new(0.0, 1.0))
    }

    /// Dense coordinate matrix, materialized column by column if needed.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if let Repr::Dense(m) = &self.repr {
            return Ok(m.clone());
        }
        let n_in = self.d_in * self.d_in;
        let mut out = DMatrix::zeros(self.d_out * self.d_out, n_in);
        for c in 0..n_in {
            let mut e = DVector::zeros(n_in);
            e[c] = 1.0;
            let y = self.apply_herm(&herm_from_coords(&e, self.d_in), false)?;
            out.set_column(c, &herm_coords(&y));
        }
        Ok(out)
    }

    pub fn densified(&self) -> Result<Self> {
        Ok(Self::from_dense(self.to_dense()?))
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &SuperOperator) -> Result<Self> {
        if other.d_out != self.d_in {
            return Err(Error::DimensionMismatch { expected: self.d_in, got: other.d_out });
        }
        Ok(Self::from_dense(self.to_dense()? * other.to_dense()?))
    }

    pub fn sub(&self, other: &SuperOperator) -> Result<Self> {
        if other.d_in != self.d_in || other.d_out != self.d_out {
            return Err(Error::DimensionMismatch { expected: self.d_in, got: other.d_in });
        }
        Ok(Self::from_dense(self.to_dense()? - other.to_dense()?))
    }

    /// Superoperator 2→2 norm `sup ‖S(X)‖₂ / ‖X‖₂`.
    pub fn norm(&self) -> Result<f64> {
        match &self.repr {
            Repr::Dense(m) if m.nrows().max(m.ncols()) <= 1024 => {
                if m.nrows() == m.ncols() && is_symmetric(m) {
                    Ok(symmetric_spectral_norm(m))
                } else {
                    Ok(m.clone().singular_values().max())
                }
            }
            _ => self.norm_by_power_iteration(1e-10, 5000),
        }
    }

    /// Largest singular value by power iteration on `S†S`.
    pub fn norm_by_power_iteration(&self, rel_tol: f64, max_iter: usize) -> Result<f64> {
        let mut rng = rng_for(0x5eed, &[self.d_in as u64, self.d_out as u64]);
        let n = self.d_in * self.d_in;
        let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        v.normalize_mut();
        let mut prev = 0.0;
        for _ in 0..max_iter {
            let y = self.apply_herm(&herm_from_coords(&v, self.d_in), false)?;
            let z = herm_coords(&self.apply_herm(&y, true)?);
            let lam = z.norm();
            if lam == 0.0 {
                return Ok(0.0);
            }
            v = z / lam;
            if (lam - prev).abs() <= rel_tol * lam {
                return Ok(lam.sqrt());
            }
            prev = lam;
        }
        Ok(prev.sqrt())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= 1e-12 * scale))
}

fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.amax()
}

/// `P_w: ρ ↦ (w, ρ) w` for a normalized `w`.
pub fn projector_onto(w: &Observable) -> Result<SuperOperator> {
    if !w.is_normalized() {
        return Err(Error::NotNormalized(w.matrix().norm()));
    }
    let d = w.dim();
    if d <= DENSE_MAX_DIM / 2 {
        let v = herm_coords(w.matrix());
        return Ok(SuperOperator::from_dense(&v * v.transpose()));
    }
    let wm = w.matrix().clone();
    let wm2 = wm.clone();
    Ok(SuperOperator::from_fn(
        d,
        d,
        move |x| wm.scale(hs_inner(&wm, x).expect("shape checked").re),
        Some(Box::new(move |x: &CMat| wm2.scale(hs_inner(&wm2, x).expect("shape checked").re))),
    ))
}

/// `‖W − id‖` in the superoperator 2→2 norm.
pub fn tight_frame_defect(w: &SuperOperator) -> Result<f64> {
    if w.d_in != w.d_out {
        return Err(Error::DimensionMismatch { expected: w.d_in, got: w.d_out });
    }
    w.sub(&SuperOperator::identity(w.d_in))?.norm()
}

/// Haar-random element of `SU(d)`.
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMat {
    let qr = ginibre(d, d, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        let rjj = r[(j, j)];
        let phase = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    fix_determinant(&mut q);
    q
}

/// Multiplies by a global phase so that `det U = 1`.
pub fn fix_determinant(u: &mut CMat) {
    let d = u.nrows();
    let det = u.determinant();
    if det.norm() > 0.0 {
        let phase = C64::from_polar(1.0, -det.arg() / d as f64);
        *u *= phase;
    }
}

/// Probability measure over unitaries of a fixed dimension.
pub trait UnitaryEnsemble: Send + Sync {
    fn shape(&self) -> SystemShape;

    fn dim(&self) -> usize {
        self.shape().dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat;

    /// Atoms and weights when the measure is finitely supported.
    fn finite_support(&self) -> Option<(Vec<CMat>, Vec<f64>)> {
        None
    }

    fn is_exact_haar(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

#[derive(Clone, Debug)]
pub struct HaarEnsemble {
    shape: SystemShape,
}

impl HaarEnsemble {
    pub fn new(shape: SystemShape) -> Self {
        Self { shape }
    }
}

impl UnitaryEnsemble for HaarEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        haar_unitary(self.shape.dim(), rng)
    }
    fn is_exact_haar(&self) -> bool {
        true
    }
    fn describe(&self) -> String {
        format!("haar(d={})", self.shape.dim())
    }
}

/// Finitely supported gate set.
#[derive(Clone, Debug)]
pub struct FiniteEnsemble {
    shape: SystemShape,
    gates: Vec<CMat>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl FiniteEnsemble {
    pub fn new(shape: SystemShape, gates: Vec<CMat>, weights: Vec<f64>) -> Result<Self> {
        if gates.is_empty() || gates.len() != weights.len() {
            return Err(Error::invalid("gate set and weights must be non-empty and of equal length"));
        }
        for g in &gates {
            if g.nrows() != shape.dim() || g.ncols() != shape.dim() {
                return Err(Error::DimensionMismatch { expected: shape.dim(), got: g.nrows() });
            }
            let dev = unitarity_deviation(g);
            if dev > Tolerances::default().unit {
                return Err(Error::NotUnitary(dev));
            }
        }
        let cumulative = check_weights(&weights)?;
        Ok(Self { shape, gates, weights, cumulative })
    }

    pub fn uniform(shape: SystemShape, gates: Vec<CMat>) -> Result<Self> {
        let n = gates.len();
        Self::new(shape, gates, vec![1.0 / n.max(1) as f64; n])
    }

    /// Adds `U†` for every gate, halving the weights.
    pub fn inversion_closed(&self) -> Result<Self> {
        let mut gates = self.gates.clone();
        gates.extend(self.gates.iter().map(|g| g.adjoint()));
        let weights = self.weights.iter().chain(self.weights.iter()).map(|w| w / 2.0).collect();
        Self::new(self.shape, gates, weights)
    }
}

fn check_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    let mut acc = 0.0;
    Ok(weights.iter().map(|w| {
        acc += w;
        acc
    }).collect())
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

impl UnitaryEnsemble for FiniteEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        self.gates[pick(&self.cumulative, rng.random())].clone()
    }
    fn finite_support(&self) -> Option<(Vec<CMat>, Vec<f64>)> {
        Some((self.gates.clone(), self.weights.clone()))
    }
    fn describe(&self) -> String {
        format!("finite({} gates, d={})", self.gates.len(), self.shape.dim())
    }
}

/// Independent Haar unitaries on each block of a basis partition, followed by a global phase fix.
#[derive(Clone, Debug)]
pub struct BlockHaarEnsemble {
    shape: SystemShape,
    blocks: Vec<Vec<usize>>,
}

impl BlockHaarEnsemble {
    pub fn new(shape: SystemShape, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; shape.dim()];
        for &i in blocks.iter().flatten() {
            if i >= shape.dim() || seen[i] {
                return Err(Error::invalid("blocks must partition the basis"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("blocks must partition the basis"));
        }
        Ok(Self { shape, blocks })
    }

    /// Partition by the eigenvalues of a diagonal conserved quantity.
    pub fn conserving(shape: SystemShape, diagonal: &[f64]) -> Result<Self> {
        if diagonal.len() != shape.dim() {
            return Err(Error::DimensionMismatch { expected: shape.dim(), got: diagonal.len() });
        }
        let mut blocks: Vec<(f64, Vec<usize>)> = Vec::new();
        for (i, &n) in diagonal.iter().enumerate() {
            match blocks.iter_mut().find(|(v, _)| (v - n).abs() < 1e-9) {
                Some((_, b)) => b.push(i),
                None => blocks.push((n, vec![i])),
            }
        }
        Self::new(shape, blocks.into_iter().map(|(_, b)| b).collect())
    }
}

impl UnitaryEnsemble for BlockHaarEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        let d = self.shape.dim();
        let mut u = CMat::zeros(d, d);
        for block in &self.blocks {
            let v = haar_unitary(block.len(), rng);
            for (a, &i) in block.iter().enumerate() {
                for (b, &j) in block.iter().enumerate() {
                    u[(i, j)] = v[(a, b)];
                }
            }
        }
        fix_determinant(&mut u);
        u
    }
    fn describe(&self) -> String {
        format!("block-haar({} blocks, d={})", self.blocks.len(), self.shape.dim())
    }
}

/// An ensemble compressed onto an invariant subspace: samples `V† U V`.
pub struct RestrictedEnsemble {
    inner: Arc<dyn UnitaryEnsemble>,
    restriction: Restriction,
    shape: SystemShape,
}

impl RestrictedEnsemble {
    pub fn new(inner: Arc<dyn UnitaryEnsemble>, restriction: Restriction) -> Result<Self> {
        if inner.dim() != restriction.dim() {
            return Err(Error::DimensionMismatch { expected: restriction.dim(), got: inner.dim() });
        }
        let shape = SystemShape::flat(restriction.block_dim())?;
        Ok(Self { inner, restriction, shape })
    }
}

impl UnitaryEnsemble for RestrictedEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        self.restriction.to_block(&self.inner.sample(rng))
    }
    fn finite_support(&self) -> Option<(Vec<CMat>, Vec<f64>)> {
        let (gates, weights) = self.inner.finite_support()?;
        Some((gates.iter().map(|g| self.restriction.to_block(g)).collect(), weights))
    }
    fn describe(&self) -> String {
        format!("{} restricted to d_N={}", self.inner.describe(), self.restriction.block_dim())
    }
}

/// The 24 single-qubit Clifford unitaries, each scaled into `SU(2)`.
pub fn single_qubit_cliffords() -> Vec<CMat> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let o = C64::new(0.0, 0.0);
    let h = CMat::from_row_slice(2, 2, &[C64::new(s, 0.0), C64::new(s, 0.0), C64::new(s, 0.0), C64::new(-s, 0.0)]);
    let p = CMat::from_row_slice(2, 2, &[C64::new(1.0, 0.0), o, o, C64::new(0.0, 1.0)]);
    let canon = |m: &CMat| {
        let mut m = m.clone();
        fix_determinant(&mut m);
        // SU(2) still carries a ±1 ambiguity.
        let lead = m.iter().find(|z| z.norm() > 1e-9).copied().expect("nonzero");
        if lead.re < -1e-9 || (lead.re.abs() <= 1e-9 && lead.im < 0.0) {
            m = -m;
        }
        m
    };
    let mut group: Vec<CMat> = vec![CMat::identity(2, 2)];
    let mut frontier = group.clone();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for g in &frontier {
            for gen in [&h, &p] {
                let c = canon(&(gen * g));
                if !group.iter().any(|x| (x - &c).norm() < 1e-9) {
                    group.push(c.clone());
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    group
}

/// Normalized Pauli strings on `n` qubits (an orthonormal operator basis).
pub fn pauli_basis(n: usize) -> Result<Vec<Observable>> {
    let shape = SystemShape::new(n, 2)?;
    let p = paulis();
    let scale = 1.0 / (shape.dim() as f64).sqrt();
    let sites: Vec<Vec<usize>> = (1..=n).map(|s| vec![s]).collect();
    (0..4usize.pow(n as u32))
        .map(|mut idx| {
            let mut labels = vec![0; n];
            for l in labels.iter_mut().rev() {
                *l = idx % 4;
                idx /= 4;
            }
            let factors: Vec<(&[usize], &CMat)> =
                labels.iter().enumerate().map(|(s, &l)| (sites[s].as_slice(), &p[l])).collect();
            let m = product_on_sites(&shape, &factors)?.scale(scale);
            Observable::new(shape, m)
        })
        .collect()
}

/// Draw from an observable measure.
#[derive(Clone, Debug)]
pub struct ObservableSample {
    pub matrix: CMat,
    pub identity_atom: bool,
}

/// Probability measure over normalized observables.
#[derive(Clone)]
pub enum ObservableMeasure {
    Finite { shape: SystemShape, atoms: Vec<CMat>, weights: Vec<f64>, cumulative: Vec<f64> },
    /// `(1 − 1/d²)·(law of U†w₀U) + (1/d²)·δ_{𝟙/√d}`.
    Induced { ensemble: Arc<dyn UnitaryEnsemble>, w0: Observable },
}

impl std::fmt::Debug for ObservableMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Finite { atoms, .. } => write!(f, "Finite({} atoms)", atoms.len()),
            Self::Induced { ensemble, .. } => write!(f, "Induced({})", ensemble.describe()),
        }
    }
}

impl ObservableMeasure {
    pub fn finite(atoms: Vec<Observable>, weights: Vec<f64>) -> Result<Self> {
        let first = atoms.first().ok_or_else(|| Error::invalid("empty measure"))?;
        let shape = first.shape();
        if atoms.len() != weights.len() {
            return Err(Error::invalid("atoms and weights differ in length"));
        }
        for a in &atoms {
            if a.shape() != shape {
                return Err(Error::DimensionMismatch { expected: shape.dim(), got: a.dim() });
            }
            if !a.is_normalized() {
                return Err(Error::NotNormalized(a.matrix().norm()));
            }
        }
        let cumulative = check_weights(&weights)?;
        Ok(Self::Finite { shape, atoms: atoms.into_iter().map(Observable::into_matrix).collect(), weights, cumulative })
    }

    pub fn point_mass(w: Observable) -> Result<Self> {
        Self::finite(vec![w], vec![1.0])
    }

    /// Uniform measure over the normalized Pauli basis of `n` qubits.
    pub fn pauli(n: usize) -> Result<Self> {
        let basis = pauli_basis(n)?;
        let m = basis.len();
        Self::finite(basis, vec![1.0 / m as f64; m])
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Finite { shape, .. } => shape.dim(),
            Self::Induced { w0, .. } => w0.dim(),
        }
    }

    /// Draw number `index` under the master `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> ObservableSample {
        let mut rng = rng_for(seed, &[index]);
        match self {
            Self::Finite { atoms, cumulative, .. } => {
                let i = pick(cumulative, rng.random());
                ObservableSample { matrix: atoms[i].clone(), identity_atom: false }
            }
            Self::Induced { ensemble, w0 } => {
                let d = w0.dim();
                if rng.random::<f64>() < 1.0 / (d * d) as f64 {
                    return ObservableSample { matrix: normalized_identity(d), identity_atom: true };
                }
                let u = ensemble.sample(&mut rng);
                let w = u.adjoint() * w0.matrix() * &u;
                ObservableSample { matrix: hermitian_part(&w), identity_atom: false }
            }
        }
    }

    /// Atoms and weights of a finitely supported measure.
    pub fn support(&self) -> Option<(Vec<CMat>, Vec<f64>)> {
        match self {
            Self::Finite { atoms, weights, .. } => Some((atoms.clone(), weights.clone())),
            Self::Induced { ensemble, w0 } => {
                let (gates, weights) = ensemble.finite_support()?;
                let d = w0.dim();
                let p_id = 1.0 / (d * d) as f64;
                let mut atoms = vec![normalized_identity(d)];
                let mut ws = vec![p_id];
                for (u, wgt) in gates.iter().zip(weights) {
                    atoms.push(hermitian_part(&(u.adjoint() * w0.matrix() * u)));
                    ws.push(wgt * (1.0 - p_id));
                }
                Some((atoms, ws))
            }
        }
    }
}

fn normalized_identity(d: usize) -> CMat {
    CMat::identity(d, d).unscale((d as f64).sqrt())
}

/// Measure `(1 − 1/d²)·(U†w₀U) + (1/d²)·δ_{𝟙/√d}` for a traceless normalized `w₀`.
pub fn induced_measure(ensemble: Arc<dyn UnitaryEnsemble>, w0: Observable) -> Result<ObservableMeasure> {
    if ensemble.dim() != w0.dim() {
        return Err(Error::DimensionMismatch { expected: w0.dim(), got: ensemble.dim() });
    }
    if !w0.is_normalized() {
        return Err(Error::NotNormalized(w0.matrix().norm()));
    }
    if w0.trace().abs() > Tolerances::default().norm {
        return Err(Error::NotTraceless(w0.trace()));
    }
    Ok(ObservableMeasure::Induced { ensemble, w0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Sampling operator together with its tight-frame defect.
#[derive(Clone, Debug)]
pub struct FrameEstimate {
    pub operator: SuperOperator,
    /// `None` for exact evaluation.
    pub samples: Option<usize>,
    pub defect: f64,
    /// Jackknife standard error of `defect` (zero when exact).
    pub defect_stderr: f64,
}

/// `W_d = d²·E_w[P_w]`, exactly for finite measures or by Monte-Carlo.
pub fn sampling_operator(measure: &ObservableMeasure, mode: SamplingMode) -> Result<FrameEstimate> {
    let d = measure.dim();
    match mode {
        SamplingMode::Exact => {
            let (atoms, weights) = measure.support().ok_or_else(|| {
                Error::ExactModeUnsupported(format!("{measure:?}"))
            })?;
            if d > DENSE_MAX_DIM {
                return Err(Error::ExactModeUnsupported(format!("dense frame with d = {d}")));
            }
            let n = d * d;
            let mut w = DMatrix::zeros(n, n);
            for (a, p) in atoms.iter().zip(weights) {
                let v = herm_coords(a);
                w.ger(p * (d * d) as f64, &v, &v, 1.0);
            }
            let operator = SuperOperator::from_dense(w);
            let defect = tight_frame_defect(&operator)?;
            Ok(FrameEstimate { operator, samples: None, defect, defect_stderr: 0.0 })
        }
        SamplingMode::MonteCarlo { samples, seed } => {
            monte_carlo_frame(d, samples, |i| measure.sample(seed, i).matrix)
        }
    }
}

/// Monte-Carlo frame operator `d²/M · Σ_i P_{w_i}` for `d×d` draws `w_i = draw(i)`.
///
/// Draws are grouped into fixed jackknife groups and reduced in a fixed order,
/// so the result does not depend on the number of worker threads.
pub fn monte_carlo_frame(
    d: usize,
    samples: usize,
    draw: impl Fn(u64) -> CMat + Sync,
) -> Result<FrameEstimate> {
    if samples < JACKKNIFE_GROUPS {
        return Err(Error::invalid(format!("need at least {JACKKNIFE_GROUPS} samples")));
    }
    if d > MONTE_CARLO_MAX_DIM {
        return Err(Error::invalid(format!("Monte-Carlo frames are limited to d ≤ {MONTE_CARLO_MAX_DIM}")));
    }
    let n = d * d;
    let groups = JACKKNIFE_GROUPS;
    let bounds: Vec<(usize, usize)> =
        (0..groups).map(|g| (g * samples / groups, (g + 1) * samples / groups)).collect();
    let sums: Vec<DMatrix<f64>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            const CHUNK: usize = 128;
            let mut acc = DMatrix::zeros(n, n);
            let mut start = lo;
            while start < hi {
                let end = (start + CHUNK).min(hi);
                let mut block = DMatrix::zeros(end - start, n);
                for (c, i) in (start..end).enumerate() {
                    block.set_row(c, &herm_coords(&draw(i as u64)).transpose());
                }
                acc.gemm_tr(1.0, &block, &block, 1.0);
                start = end;
            }
            acc
        })
        .collect();
    let mut total = DMatrix::zeros(n, n);
    for s in &sums {
        total += s;
    }
    let scale = (d * d) as f64;
    let defect_of = |sum: &DMatrix<f64>, count: usize| {
        let mut w = sum * (scale / count as f64);
        for i in 0..n {
            w[(i, i)] -= 1.0;
        }
        SymmetricEigen::new(w).eigenvalues.amax()
    };
    let defect = defect_of(&total, samples);
    let leave_out: Vec<f64> = sums
        .par_iter()
        .zip(bounds.par_iter())
        .map(|(s, &(lo, hi))| defect_of(&(&total - s), samples - (hi - lo)))
        .collect();
    let g = groups as f64;
    let mean = leave_out.iter().sum::<f64>() / g;
    let var = leave_out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (g - 1.0) / g;
    let operator = SuperOperator::from_dense(total * (scale / samples as f64));
    Ok(FrameEstimate { operator, samples: Some(samples), defect, defect_stderr: var.sqrt() })
}

/// Compression onto an eigenspace of a Hermitian operator.
#[derive(Clone, Debug)]
pub struct Restriction {
    isometry: CMat,
    eigenvalue: f64,
    basis: Option<Vec<usize>>,
}

impl Restriction {
    pub fn dim(&self) -> usize {
        self.isometry.nrows()
    }

    /// `d_N`.
    pub fn block_dim(&self) -> usize {
        self.isometry.ncols()
    }

    pub fn eigenvalue(&self) -> f64 {
        self.eigenvalue
    }

    /// `d × d_N` isometry onto the eigenspace.
    pub fn isometry(&self) -> &CMat {
        &self.isometry
    }

    /// Computational basis indices spanning the eigenspace, when it is spanned by them.
    pub fn basis_indices(&self) -> Option<&[usize]> {
        self.basis.as_deref()
    }

    /// `V† X V`.
    pub fn to_block(&self, x: &CMat) -> CMat {
        self.isometry.adjoint() * x * &self.isometry
    }

    /// `V Y V†`.
    pub fn from_block(&self, y: &CMat) -> CMat {
        &self.isometry * y * self.isometry.adjoint()
    }

    /// `P_N(X) = Π X Π`.
    pub fn project(&self, x: &CMat) -> CMat {
        self.from_block(&self.to_block(x))
    }

    pub fn superoperator(&self) -> SuperOperator {
        let a = self.clone();
        let b = self.clone();
        let d = self.dim();
        SuperOperator::from_fn(d, d, move |x| a.project(x), Some(Box::new(move |x: &CMat| b.project(x))))
    }
}

/// Projector onto the eigenvalue-`n` block of `n_hat`.
pub fn restricted_projector(n_hat: &CMat, n: f64) -> Result<Restriction> {
    let d = n_hat.nrows();
    const TOL: f64 = 1e-8;
    let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || n_hat[(i, j)].norm() == 0.0));
    if diagonal {
        let basis: Vec<usize> = (0..d).filter(|&i| (n_hat[(i, i)].re - n).abs() <= TOL).collect();
        if basis.is_empty() {
            return Err(Error::NotAnEigenvalue { value: n });
        }
        let mut v = CMat::zeros(d, basis.len());
        for (c, &i) in basis.iter().enumerate() {
            v[(i, c)] = C64::new(1.0, 0.0);
        }
        return Ok(Restriction { isometry: v, eigenvalue: n, basis: Some(basis) });
    }
    let (vals, vecs) = eigh(n_hat);
    let cols: Vec<usize> = (0..d).filter(|&i| (vals[i] - n).abs() <= TOL).collect();
    if cols.is_empty() {
        return Err(Error::NotAnEigenvalue { value: n });
    }
    let mut v = CMat::zeros(d, cols.len());
    for (c, &i) in cols.iter().enumerate() {
        v.set_column(c, &vecs.column(i));
    }
    Ok(Restriction { isometry: v, eigenvalue: n, basis: None })
}

/// Monte-Carlo estimate of `‖W_{d_N}∘P_N − P_N‖` for an induced measure on the block.
///
/// `ensemble` acts on the full space and must conserve the block; `w0` is a
/// block-supported traceless observable on the full space.
pub fn restricted_frame(
    ensemble: Arc<dyn UnitaryEnsemble>,
    restriction: &Restriction,
    w0: &Observable,
    samples: usize,
    seed: u64,
) -> Result<FrameEstimate> {
    let block_w0 = restriction.to_block(w0.matrix());
    let leak = (restriction.from_block(&block_w0) - w0.matrix()).norm();
    if leak > 1e-9 {
        return Err(Error::invalid(format!("w0 is not supported on the block (leak {leak:.3e})")));
    }
    let shape = SystemShape::flat(restriction.block_dim())?;
    let w0_block = Observable::normalized(shape, block_w0)?;
    let ens: Arc<dyn UnitaryEnsemble> = Arc::new(RestrictedEnsemble::new(ensemble, restriction.clone())?);
    let measure = induced_measure(ens, w0_block)?;
    sampling_operator(&measure, SamplingMode::MonteCarlo { samples, seed })
}
