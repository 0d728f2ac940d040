//! Dense finite-dimensional Hilbert-space core.
//!
//! Composite systems are chains of `k` sites with local dimension `d_l`.
//! Sites are numbered `1..=k` and site 1 is the most significant tensor
//! factor, so basis index `i` has base-`d_l` digits `(i_1, ..., i_k)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

/// Largest total dimension accepted by [`SystemShape::new`].
pub const DEFAULT_MAX_DIM: usize = 4096;

/// Numerical tolerances for the validating constructors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub herm: f64,
    pub norm: f64,
    pub unit: f64,
    pub trace: f64,
    /// Eigenvalue floor: states may have eigenvalues down to `-psd`.
    pub psd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { herm: 1e-10, norm: 1e-10, unit: 1e-10, trace: 1e-10, psd: 1e-8 }
    }
}

/// Chain of `sites` sites with `local_dim` levels each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SystemShape {
    sites: usize,
    local_dim: usize,
    dim: usize,
}

impl SystemShape {
    pub fn new(sites: usize, local_dim: usize) -> Result<Self> {
        Self::with_max_dim(sites, local_dim, DEFAULT_MAX_DIM)
    }

    pub fn with_max_dim(sites: usize, local_dim: usize, max_dim: usize) -> Result<Self> {
        if sites == 0 || local_dim == 0 {
            return Err(Error::invalid("sites and local dimension must be positive"));
        }
        let overflow = Error::DimensionOverflow { local: local_dim, sites, max: max_dim };
        let mut dim = 1usize;
        for _ in 0..sites {
            dim = dim.checked_mul(local_dim).ok_or_else(|| overflow_clone(&overflow))?;
            if dim > max_dim {
                return Err(overflow);
            }
        }
        Ok(Self { sites, local_dim, dim })
    }

    /// A structureless space of dimension `dim` (one site).
    pub fn flat(dim: usize) -> Result<Self> {
        Self::with_max_dim(1, dim, usize::MAX)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stride of site `site` (1-based) in the flat basis index.
    pub fn stride(&self, site: usize) -> usize {
        self.local_dim.pow((self.sites - site) as u32)
    }

    /// Digits of a basis index, site 1 first.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.sites];
        for slot in out.iter_mut().rev() {
            *slot = index % self.local_dim;
            index /= self.local_dim;
        }
        out
    }

    pub fn index_of(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, &x| acc * self.local_dim + x)
    }

    pub fn check_site(&self, site: usize) -> Result<()> {
        if site == 0 || site > self.sites {
            return Err(Error::InvalidSite { site, sites: self.sites });
        }
        Ok(())
    }

    /// Shape of a contiguous sub-chain of `len` sites.
    pub fn sub_chain(&self, len: usize) -> Result<Self> {
        Self::with_max_dim(len, self.local_dim, usize::MAX)
    }
}

fn overflow_clone(e: &Error) -> Error {
    match e {
        Error::DimensionOverflow { local, sites, max } => {
            Error::DimensionOverflow { local: *local, sites: *sites, max: *max }
        }
        _ => unreachable!(),
    }
}

/// Hermitian, Frobenius-normalized-or-not operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    shape: SystemShape,
    matrix: CMat,
    normalized: bool,
}

impl Observable {
    /// Validates Hermiticity, then stores the symmetrized matrix.
    pub fn new(shape: SystemShape, matrix: CMat) -> Result<Self> {
        Self::with_tolerances(shape, matrix, &Tolerances::default())
    }

    pub fn with_tolerances(shape: SystemShape, matrix: CMat, tol: &Tolerances) -> Result<Self> {
        check_square(&matrix, shape.dim())?;
        let matrix = symmetrize_checked(matrix, tol.herm)?;
        let norm = matrix.norm();
        Ok(Self { shape, matrix, normalized: (norm - 1.0).abs() <= tol.norm })
    }

    /// Like [`Observable::new`] but rejects matrices with `‖w‖₂ ≠ 1`.
    pub fn normalized(shape: SystemShape, matrix: CMat) -> Result<Self> {
        let obs = Self::new(shape, matrix)?;
        if !obs.normalized {
            return Err(Error::NotNormalized(obs.matrix.norm()));
        }
        Ok(obs)
    }

    /// Rescales to unit Frobenius norm.
    pub fn into_normalized(self) -> Result<Self> {
        let norm = self.matrix.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NotNormalized(norm));
        }
        Ok(Self { shape: self.shape, matrix: self.matrix.unscale(norm), normalized: true })
    }

    /// `𝟙/√d`, the normalized identity.
    pub fn normalized_identity(shape: SystemShape) -> Self {
        let d = shape.dim();
        Self {
            shape,
            matrix: CMat::identity(d, d).unscale((d as f64).sqrt()),
            normalized: true,
        }
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Conjugation `U† w U` (Heisenberg picture).
    pub fn conjugate_by(&self, u: &CMat) -> Result<Self> {
        check_square(u, self.dim())?;
        let m = u.adjoint() * &self.matrix * u;
        Ok(Self { shape: self.shape, matrix: hermitian_part(&m), normalized: self.normalized })
    }

    pub(crate) fn from_parts_unchecked(shape: SystemShape, matrix: CMat) -> Self {
        let normalized = (matrix.norm() - 1.0).abs() <= Tolerances::default().norm;
        Self { shape, matrix, normalized }
    }
}

/// Hermitian, unit-trace, positive semidefinite operator.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    shape: SystemShape,
    matrix: CMat,
}

impl DensityMatrix {
    pub fn new(shape: SystemShape, matrix: CMat) -> Result<Self> {
        Self::with_tolerances(shape, matrix, &Tolerances::default())
    }

    pub fn with_tolerances(shape: SystemShape, matrix: CMat, tol: &Tolerances) -> Result<Self> {
        check_square(&matrix, shape.dim())?;
        let matrix = symmetrize_checked(matrix, tol.herm)?;
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > tol.trace || tr.im.abs() > tol.trace {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min_eig = eigh(&matrix).0.min();
        if min_eig < -tol.psd {
            return Err(Error::InvalidState(format!("negative eigenvalue {min_eig:.3e}")));
        }
        Ok(Self { shape, matrix })
    }

    pub fn pure(shape: SystemShape, psi: &DVector<C64>) -> Result<Self> {
        if psi.len() != shape.dim() {
            return Err(Error::DimensionMismatch { expected: shape.dim(), got: psi.len() });
        }
        let norm = psi.norm();
        if norm == 0.0 {
            return Err(Error::InvalidState("zero vector".into()));
        }
        let psi = psi.unscale(norm);
        Ok(Self { shape, matrix: &psi * psi.adjoint() })
    }

    /// Computational basis state with the given digits.
    pub fn basis_state(shape: SystemShape, digits: &[usize]) -> Result<Self> {
        if digits.len() != shape.sites() || digits.iter().any(|&x| x >= shape.local_dim()) {
            return Err(Error::invalid("basis digits do not fit the shape"));
        }
        let i = shape.index_of(digits);
        let mut m = CMat::zeros(shape.dim(), shape.dim());
        m[(i, i)] = C64::new(1.0, 0.0);
        Ok(Self { shape, matrix: m })
    }

    pub fn maximally_mixed(shape: SystemShape) -> Self {
        let d = shape.dim();
        Self { shape, matrix: CMat::identity(d, d).unscale(d as f64) }
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    /// `U ρ U†` (Schrödinger picture).
    pub fn evolve(&self, u: &CMat) -> Result<Self> {
        check_square(u, self.dim())?;
        let m = u * &self.matrix * u.adjoint();
        Ok(Self { shape: self.shape, matrix: hermitian_part(&m) })
    }

    /// Reduced state on `keep` (1-based sites, output in the given order).
    pub fn reduce(&self, keep: &[usize]) -> Result<Self> {
        let m = partial_trace(&self.matrix, &self.shape, keep)?;
        let shape = SystemShape::with_max_dim(keep.len(), self.shape.local_dim(), usize::MAX)?;
        Ok(Self { shape, matrix: hermitian_part(&m) })
    }

    /// Expectation value `Tr(w ρ)`.
    pub fn expectation(&self, w: &CMat) -> Result<f64> {
        Ok(hs_inner(w, &self.matrix)?.re)
    }
}

/// Unitary operator on a shaped space.
#[derive(Clone, Debug, PartialEq)]
pub struct Unitary {
    shape: SystemShape,
    matrix: CMat,
}

impl Unitary {
    pub fn new(shape: SystemShape, matrix: CMat) -> Result<Self> {
        Self::with_tolerance(shape, matrix, Tolerances::default().unit)
    }

    pub fn with_tolerance(shape: SystemShape, matrix: CMat, tol: f64) -> Result<Self> {
        check_square(&matrix, shape.dim())?;
        let dev = unitarity_deviation(&matrix);
        if dev > tol {
            return Err(Error::NotUnitary(dev));
        }
        Ok(Self { shape, matrix })
    }

    pub fn identity(shape: SystemShape) -> Self {
        let d = shape.dim();
        Self { shape, matrix: CMat::identity(d, d) }
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self { shape: self.shape, matrix: self.matrix.adjoint() }
    }

    /// `self · other` (apply `other` first).
    pub fn then_after(&self, other: &Unitary) -> Result<Self> {
        check_square(&other.matrix, self.dim())?;
        Ok(Self { shape: self.shape, matrix: &self.matrix * &other.matrix })
    }
}

/// `max |(U†U − 𝟙)_{ij}|`.
pub fn unitarity_deviation(u: &CMat) -> f64 {
    let d = u.nrows();
    let g = u.adjoint() * u - CMat::identity(d, d);
    g.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_square(m: &CMat, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: m.nrows().max(m.ncols()) });
    }
    Ok(())
}

/// Largest entry of `|A − A†|`.
pub fn hermitian_deviation(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

/// `(A + A†)/2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).unscale(2.0)
}

fn symmetrize_checked(m: CMat, tol: f64) -> Result<CMat> {
    let dev = hermitian_deviation(&m);
    if dev > tol || !dev.is_finite() {
        return Err(Error::NotHermitian(dev));
    }
    Ok(hermitian_part(&m))
}

/// Hilbert-Schmidt product `Tr(A†B)`.
pub fn hs_inner(a: &CMat, b: &CMat) -> Result<C64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchattenP {
    One,
    Two,
    Inf,
}

pub fn schatten_norm(m: &CMat, p: SchattenP) -> Result<f64> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    if p == SchattenP::Two {
        return Ok(m.norm());
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let sv = m.clone().singular_values();
    Ok(match p {
        SchattenP::One => sv.iter().sum(),
        SchattenP::Inf => sv.max(),
        SchattenP::Two => unreachable!(),
    })
}

/// Operator norm of a Hermitian matrix via its spectrum.
pub fn hermitian_operator_norm(m: &CMat) -> f64 {
    let (vals, _) = eigh(m);
    vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMat) -> (DVector<f64>, CMat) {
    let eig = SymmetricEigen::new(hermitian_part(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = CMat::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Applies a real function to the spectrum of a Hermitian matrix.
pub fn hermitian_map(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    scaled * vecs.adjoint()
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// Offsets of the flat index contributed by each multi-index over `sites`
/// (first listed site most significant).
fn site_offsets(shape: &SystemShape, sites: &[usize]) -> Vec<usize> {
    let dl = shape.local_dim();
    let mut offs = vec![0usize];
    for &s in sites {
        let stride = shape.stride(s);
        offs = offs.iter().flat_map(|&o| (0..dl).map(move |x| o + x * stride)).collect();
    }
    offs
}

fn check_site_set(shape: &SystemShape, sites: &[usize]) -> Result<()> {
    for (i, &s) in sites.iter().enumerate() {
        shape.check_site(s)?;
        if sites[..i].contains(&s) {
            return Err(Error::invalid(format!("site {s} listed twice")));
        }
    }
    Ok(())
}

fn complement(shape: &SystemShape, sites: &[usize]) -> Vec<usize> {
    (1..=shape.sites()).filter(|s| !sites.contains(s)).collect()
}

/// Partial trace keeping `keep` (1-based); the output factors follow the order of `keep`.
pub fn partial_trace(m: &CMat, shape: &SystemShape, keep: &[usize]) -> Result<CMat> {
    check_square(m, shape.dim())?;
    check_site_set(shape, keep)?;
    let traced = complement(shape, keep);
    let keep_off = site_offsets(shape, keep);
    let tr_off = site_offsets(shape, &traced);
    let n = keep_off.len();
    let mut out = CMat::zeros(n, n);
    for (a, &ra) in keep_off.iter().enumerate() {
        for (b, &cb) in keep_off.iter().enumerate() {
            out[(a, b)] = tr_off.iter().map(|&t| m[(ra + t, cb + t)]).sum();
        }
    }
    Ok(out)
}

/// `op` acting on `sites` (in the listed order) tensored with the identity elsewhere.
pub fn embed_operator(op: &CMat, sites: &[usize], shape: &SystemShape) -> Result<CMat> {
    product_on_sites(shape, &[(sites, op)])
}

/// Tensor product of operators on disjoint site sets, identity on the rest.
pub fn product_on_sites(shape: &SystemShape, factors: &[(&[usize], &CMat)]) -> Result<CMat> {
    let mut all = Vec::new();
    for (sites, op) in factors {
        check_site_set(shape, sites)?;
        let want = shape.local_dim().pow(sites.len() as u32);
        check_square(op, want)?;
        for &s in sites.iter() {
            if all.contains(&s) {
                return Err(Error::invalid(format!("site {s} used by two factors")));
            }
            all.push(s);
        }
    }
    let rest = site_offsets(shape, &complement(shape, &all));
    let mut entries: Vec<(usize, usize, C64)> = vec![(0, 0, C64::new(1.0, 0.0))];
    for (sites, op) in factors {
        let offs = site_offsets(shape, sites);
        let mut next = Vec::with_capacity(entries.len() * offs.len());
        for &(r, c, v) in &entries {
            for (a, &oa) in offs.iter().enumerate() {
                for (b, &ob) in offs.iter().enumerate() {
                    let x = op[(a, b)];
                    if x != C64::new(0.0, 0.0) {
                        next.push((r + oa, c + ob, v * x));
                    }
                }
            }
        }
        entries = next;
    }
    let d = shape.dim();
    let mut out = CMat::zeros(d, d);
    for &o in &rest {
        for &(r, c, v) in &entries {
            out[(r + o, c + o)] = v;
        }
    }
    Ok(out)
}

/// Matrix of a site-factorized operator restricted to a set of computational basis states.
pub fn product_in_basis(
    shape: &SystemShape,
    factors: &[(&[usize], &CMat)],
    basis: &[usize],
) -> Result<CMat> {
    let mut covered = vec![false; shape.sites() + 1];
    for (sites, op) in factors {
        check_site_set(shape, sites)?;
        check_square(op, shape.local_dim().pow(sites.len() as u32))?;
        for &s in sites.iter() {
            covered[s] = true;
        }
    }
    let digits: Vec<Vec<usize>> = basis.iter().map(|&i| shape.digits(i)).collect();
    let local = |dg: &[usize], sites: &[usize]| {
        sites.iter().fold(0, |acc, &s| acc * shape.local_dim() + dg[s - 1])
    };
    let n = basis.len();
    let mut out = CMat::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            let free_match = (1..=shape.sites())
                .filter(|&s| !covered[s])
                .all(|s| digits[x][s - 1] == digits[y][s - 1]);
            if !free_match {
                continue;
            }
            let mut v = C64::new(1.0, 0.0);
            for (sites, op) in factors {
                v *= op[(local(&digits[x], sites), local(&digits[y], sites))];
                if v == C64::new(0.0, 0.0) {
                    break;
                }
            }
            out[(x, y)] = v;
        }
    }
    Ok(out)
}

/// Places a normalized traceless `v` on sites `position..position+m` and pads
/// with `𝟙/√(d_l^{k−m})`, keeping the Frobenius norm at one.
pub fn embed_local(v: &Observable, position: usize, shape: &SystemShape) -> Result<Observable> {
    let vs = v.shape();
    if vs.local_dim() != shape.local_dim() {
        return Err(Error::DimensionMismatch { expected: shape.local_dim(), got: vs.local_dim() });
    }
    let m = vs.sites();
    if position == 0 || position + m - 1 > shape.sites() {
        return Err(Error::InvalidSite { site: position, sites: shape.sites() });
    }
    if !v.is_normalized() {
        return Err(Error::NotNormalized(v.matrix().norm()));
    }
    let tol = Tolerances::default();
    if v.trace().abs() > tol.norm {
        return Err(Error::NotTraceless(v.trace()));
    }
    let sites: Vec<usize> = (position..position + m).collect();
    let rest = shape.local_dim().pow((shape.sites() - m) as u32) as f64;
    let full = embed_operator(v.matrix(), &sites, shape)?.unscale(rest.sqrt());
    Ok(Observable::from_parts_unchecked(*shape, full))
}

/// Pauli matrices `[𝟙, X, Y, Z]`.
pub fn paulis() -> [CMat; 4] {
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    [
        CMat::from_row_slice(2, 2, &[l, o, o, l]),
        CMat::from_row_slice(2, 2, &[o, l, l, o]),
        CMat::from_row_slice(2, 2, &[o, -i, i, o]),
        CMat::from_row_slice(2, 2, &[l, o, o, -l]),
    ]
}

/// Standard complex Gaussian matrix (entries with `E|z|² = 1`).
pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

/// Uniformly random unit vector.
pub fn random_pure_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<C64> {
    let g = ginibre(dim, 1, rng);
    let v = DVector::from_column_slice(g.as_slice());
    let n = v.norm();
    v.unscale(n)
}

/// Random state of the given rank with Haar eigenvectors and uniform-simplex weights.
pub fn random_density_matrix<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> CMat {
    let g = ginibre(dim, rank, rng);
    let m = &g * g.adjoint();
    let tr = m.trace().re;
    m.unscale(tr)
}

/// Random Hermitian matrix with Gaussian entries.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMat {
    hermitian_part(&ginibre(dim, dim, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn haar(d: usize, rng: &mut ChaCha8Rng) -> CMat {
        crate::frames::haar_unitary(d, rng)
    }

    #[test]
    fn hs_inner_examples() {
        let [_, x, _, z] = paulis();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let xs = x.scale(s);
        let zs = z.scale(s);
        assert_abs_diff_eq!(hs_inner(&xs, &xs).unwrap().re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hs_inner(&xs, &zs).unwrap().norm(), 0.0, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = random_density_matrix(4, 2, &mut rng);
        let id = CMat::identity(4, 4).scale(0.5);
        assert_abs_diff_eq!(hs_inner(&id, &rho).unwrap().re, 0.5, epsilon = 1e-12);
        assert!(hs_inner(&id, &CMat::zeros(2, 2)).is_err());
    }

    #[test]
    fn schatten_examples() {
        assert_abs_diff_eq!(
            schatten_norm(&CMat::identity(4, 4), SchattenP::Two).unwrap(),
            2.0,
            epsilon = 1e-15
        );
        let m = CMat::from_diagonal(&DVector::from_vec(vec![c(3.0), c(-4.0)]));
        assert_abs_diff_eq!(schatten_norm(&m, SchattenP::One).unwrap(), 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(schatten_norm(&m, SchattenP::Inf).unwrap(), 4.0, epsilon = 1e-12);
        let mut bad = m.clone();
        bad[(0, 0)] = C64::new(f64::NAN, 0.0);
        assert!(schatten_norm(&bad, SchattenP::One).is_err());
    }

    #[test]
    fn schatten_norms_are_unitarily_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [2, 3, 5, 8] {
            let a = ginibre(d, d, &mut rng);
            let u = haar(d, &mut rng);
            let b = &u * &a * u.adjoint();
            for p in [SchattenP::One, SchattenP::Two, SchattenP::Inf] {
                let na = schatten_norm(&a, p).unwrap();
                let nb = schatten_norm(&b, p).unwrap();
                assert!((na - nb).abs() / na < 1e-10, "p={p:?} d={d}");
            }
        }
    }

    #[test]
    fn partial_trace_of_product_and_bell_states() {
        let shape = SystemShape::new(2, 2).unwrap();
        let p00 = DensityMatrix::basis_state(shape, &[0, 0]).unwrap();
        let r = partial_trace(p00.matrix(), &shape, &[1]).unwrap();
        let mut e0 = CMat::zeros(2, 2);
        e0[(0, 0)] = c(1.0);
        assert_abs_diff_eq!((r - e0).norm(), 0.0, epsilon = 1e-15);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = DVector::from_vec(vec![c(s), c(0.0), c(0.0), c(s)]);
        let rho = DensityMatrix::pure(shape, &bell).unwrap();
        let r = partial_trace(rho.matrix(), &shape, &[1]).unwrap();
        assert_abs_diff_eq!((r - CMat::identity(2, 2).scale(0.5)).norm(), 0.0, epsilon = 1e-15);
    }

    /// Brute-force contraction over explicit qubit indices.
    #[test]
    fn partial_trace_matches_elementwise_contraction() {
        let shape = SystemShape::new(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = random_pure_vector(8, &mut rng);
        let rho = &psi * psi.adjoint();
        let mut oracle = CMat::zeros(4, 4);
        for a1 in 0..2 {
            for a2 in 0..2 {
                for b1 in 0..2 {
                    for b2 in 0..2 {
                        let mut acc = c(0.0);
                        for t in 0..2 {
                            acc += rho[(a1 * 4 + a2 * 2 + t, b1 * 4 + b2 * 2 + t)];
                        }
                        oracle[(a1 * 2 + a2, b1 * 2 + b2)] = acc;
                    }
                }
            }
        }
        let got = partial_trace(&rho, &shape, &[1, 2]).unwrap();
        assert_abs_diff_eq!((got - &oracle).norm(), 0.0, epsilon = 1e-14);

        // Reversed keep order swaps the output factors.
        let swapped = partial_trace(&rho, &shape, &[2, 1]).unwrap();
        for a1 in 0..2 {
            for a2 in 0..2 {
                for b1 in 0..2 {
                    for b2 in 0..2 {
                        let x = swapped[(a2 * 2 + a1, b2 * 2 + b1)];
                        let y = oracle[(a1 * 2 + a2, b1 * 2 + b2)];
                        assert_abs_diff_eq!((x - y).norm(), 0.0, epsilon = 1e-14);
                    }
                }
            }
        }
        assert!(partial_trace(&rho, &shape, &[4]).is_err());
        assert!(partial_trace(&rho, &shape, &[1, 1]).is_err());
    }

    #[test]
    fn embed_local_examples() {
        let [_, _, _, z] = paulis();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let one = SystemShape::new(1, 2).unwrap();
        let v = Observable::normalized(one, z.scale(s)).unwrap();
        let shape = SystemShape::new(2, 2).unwrap();
        let w = embed_local(&v, 1, &shape).unwrap();
        let expect = kron(&z, &CMat::identity(2, 2)).scale(0.5);
        assert_abs_diff_eq!((w.matrix() - expect).norm(), 0.0, epsilon = 1e-15);
        assert!(w.is_normalized());
        assert_abs_diff_eq!(w.trace(), 0.0, epsilon = 1e-15);
        assert!(embed_local(&v, 3, &shape).is_err());
        assert!(embed_local(&v, 0, &shape).is_err());
    }

    #[test]
    fn embedded_operator_norm_and_incoherence_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let two = SystemShape::new(2, 2).unwrap();
        let raw = random_hermitian(4, &mut rng);
        let traceless = &raw - CMat::identity(4, 4).scale(raw.trace().re / 4.0);
        let v = Observable::new(two, traceless).unwrap().into_normalized().unwrap();
        let v_inf = hermitian_operator_norm(v.matrix());
        let lambda = 4.0 * v_inf * v_inf;
        for k in 2..=6 {
            let shape = SystemShape::new(k, 2).unwrap();
            let w = embed_local(&v, 1, &shape).unwrap();
            let w_inf = hermitian_operator_norm(w.matrix());
            let rest = 2f64.powi(k as i32 - 2);
            assert!((w_inf - v_inf / rest.sqrt()).abs() < 1e-12);
            let d = shape.dim() as f64;
            assert!(w_inf * w_inf <= lambda / d + 1e-12, "k={k}");
            assert!((w.matrix().norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn product_on_sites_matches_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = SystemShape::new(3, 2).unwrap();
        let a = ginibre(2, 2, &mut rng);
        let b = ginibre(4, 4, &mut rng);
        let full = product_on_sites(&shape, &[(&[1], &a), (&[2, 3], &b)]).unwrap();
        assert_abs_diff_eq!((full - kron(&a, &b)).norm(), 0.0, epsilon = 1e-13);
        let mid = embed_operator(&a, &[2], &shape).unwrap();
        let i2 = CMat::identity(2, 2);
        assert_abs_diff_eq!((mid - kron(&kron(&i2, &a), &i2)).norm(), 0.0, epsilon = 1e-13);

        let basis = [1usize, 2, 4, 7];
        let restricted = product_in_basis(&shape, &[(&[1], &a), (&[2, 3], &b)], &basis).unwrap();
        let full = kron(&a, &b);
        for (x, &bx) in basis.iter().enumerate() {
            for (y, &by) in basis.iter().enumerate() {
                assert_abs_diff_eq!((restricted[(x, y)] - full[(bx, by)]).norm(), 0.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn shape_overflow_and_validation() {
        assert!(SystemShape::new(13, 2).is_err());
        assert_eq!(SystemShape::new(12, 2).unwrap().dim(), 4096);
        assert!(SystemShape::new(0, 2).is_err());
        let shape = SystemShape::new(2, 2).unwrap();
        let mut m = CMat::identity(4, 4);
        m[(0, 1)] = c(1.0);
        assert!(matches!(Observable::new(shape, m), Err(Error::NotHermitian(_))));
        assert!(DensityMatrix::new(shape, CMat::identity(4, 4)).is_err());
        let neg = CMat::from_diagonal(&DVector::from_vec(vec![c(1.5), c(-0.5), c(0.0), c(0.0)]));
        assert!(DensityMatrix::new(shape, neg).is_err());
        assert!(Unitary::new(shape, CMat::identity(4, 4).scale(2.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn hs_inner_is_a_real_symmetric_bilinear_form(seed in any::<u64>(), d in 2usize..6, s in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_hermitian(d, &mut rng);
            let b = random_hermitian(d, &mut rng);
            let e = random_hermitian(d, &mut rng);
            let ab = hs_inner(&a, &b).unwrap();
            prop_assert!(ab.im.abs() < 1e-12);
            prop_assert!((ab - hs_inner(&b, &a).unwrap()).norm() < 1e-12);
            let lhs = hs_inner(&a, &(b.scale(s) + &e)).unwrap();
            let rhs = ab.scale(s) + hs_inner(&a, &e).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }

        #[test]
        fn partial_trace_preserves_trace_and_positivity(seed in any::<u64>(), rank in 1usize..4, keep_mask in 1u8..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = SystemShape::new(3, 2).unwrap();
            let rho = random_density_matrix(8, rank, &mut rng);
            let keep: Vec<usize> = (1..=3).filter(|s| keep_mask & (1 << (s - 1)) != 0).collect();
            let r = partial_trace(&rho, &shape, &keep).unwrap();
            prop_assert!((r.trace().re - 1.0).abs() < 1e-12);
            prop_assert!(eigh(&r).0.min() > -1e-12);
        }

        #[test]
        fn embed_local_preserves_normalization(seed in any::<u64>(), k in 2usize..5, pos_frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let one = SystemShape::new(1, 3).unwrap();
            let raw = random_hermitian(3, &mut rng);
            let tl = &raw - CMat::identity(3, 3).scale(raw.trace().re / 3.0);
            let v = Observable::new(one, tl).unwrap().into_normalized().unwrap();
            let shape = SystemShape::new(k, 3).unwrap();
            let pos = 1 + ((k as f64 - 1.0) * pos_frac) as usize;
            let w = embed_local(&v, pos, &shape).unwrap();
            prop_assert!((w.matrix().norm() - 1.0).abs() < 1e-10);
            prop_assert!(w.trace().abs() < 1e-10);
        }
    }
}
