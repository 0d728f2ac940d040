//! Second-moment (t = 2) twirl operators, design distances and spectral gaps.
//!
//! A twirl acts on operators `X` on `H ⊗ H`, stored as vectors of length `d⁴`.
//! Vectors use a site-major layout: every site `s` contributes a superdigit
//! `(a_s, b_s, a'_s, b'_s)` of size `d_l⁴` (copy-1 row, copy-2 row, copy-1
//! column, copy-2 column) and site 1 is most significant. For one site this is
//! the row-major flattening of `X[(a, b), (a', b')]`. Two-site gate twirls then
//! act on adjacent superdigits, which keeps brickwork circuits matrix-free.

use std::sync::Arc;

use nalgebra::{ComplexField, DMatrix, DMatrixViewMut, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frames::{herm_coords, herm_from_coords, SuperOperator, UnitaryEnsemble};
use crate::hilbert::{CMat, C64};
use crate::rng::rng_for;

/// Largest vector length `d⁴` for which dense twirl matrices are formed.
pub const DENSE_TWIRL_MAX: usize = 4096;

/// Scalar type of twirl vectors: `f64` for real twirls (local Haar), `C64` otherwise.
pub trait Field: ComplexField<RealField = f64> + Copy + Send + Sync + 'static {
    fn from_parts(re: f64, im: f64) -> Self;
    fn to_c64(self) -> C64;
    /// Real and (for real fields) imaginary components of a complex vector.
    fn split(v: &DVector<C64>) -> (DVector<Self>, Option<DVector<Self>>);
    fn merge(re: DVector<Self>, im: Option<DVector<Self>>) -> DVector<C64>;
    fn from_c64_matrix(m: &CMat) -> Result<DMatrix<Self>>;
}

impl Field for f64 {
    fn from_parts(re: f64, _im: f64) -> Self {
        re
    }
    fn to_c64(self) -> C64 {
        C64::new(self, 0.0)
    }
    fn split(v: &DVector<C64>) -> (DVector<f64>, Option<DVector<f64>>) {
        (v.map(|z| z.re), Some(v.map(|z| z.im)))
    }
    fn merge(re: DVector<f64>, im: Option<DVector<f64>>) -> DVector<C64> {
        match im {
            Some(im) => re.zip_map(&im, C64::new),
            None => re.map(|x| C64::new(x, 0.0)),
        }
    }
    fn from_c64_matrix(m: &CMat) -> Result<DMatrix<f64>> {
        let max_im = m.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
        if max_im > 1e-12 {
            return Err(Error::invalid("complex twirl cannot be stored as a real operator"));
        }
        Ok(m.map(|z| z.re))
    }
}

impl Field for C64 {
    fn from_parts(re: f64, im: f64) -> Self {
        C64::new(re, im)
    }
    fn to_c64(self) -> C64 {
        self
    }
    fn split(v: &DVector<C64>) -> (DVector<C64>, Option<DVector<C64>>) {
        (v.clone(), None)
    }
    fn merge(re: DVector<C64>, _im: Option<DVector<C64>>) -> DVector<C64> {
        re
    }
    fn from_c64_matrix(m: &CMat) -> Result<CMat> {
        Ok(m.clone())
    }
}

/// Site structure of a twirl vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TwirlLayout {
    pub sites: usize,
    pub local_dim: usize,
}

impl TwirlLayout {
    pub fn new(sites: usize, local_dim: usize) -> Self {
        Self { sites, local_dim }
    }

    pub fn flat(dim: usize) -> Self {
        Self { sites: 1, local_dim: dim }
    }

    /// `d = d_l^k`.
    pub fn base_dim(&self) -> usize {
        self.local_dim.pow(self.sites as u32)
    }

    pub fn superdigit(&self) -> usize {
        self.local_dim.pow(4)
    }

    /// `d⁴`.
    pub fn len(&self) -> usize {
        self.superdigit().pow(self.sites as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indexer(&self) -> LayoutIndexer {
        LayoutIndexer::new(*self)
    }
}

/// Maps `(A, B, A', B')` full-space indices to layout positions.
#[derive(Clone, Debug)]
pub struct LayoutIndexer {
    layout: TwirlLayout,
    tables: [Vec<usize>; 4],
}

impl LayoutIndexer {
    fn new(layout: TwirlLayout) -> Self {
        let d = layout.base_dim();
        let dl = layout.local_dim;
        let sd = layout.superdigit();
        let tables = std::array::from_fn(|slot| {
            let within = dl.pow(3 - slot as u32);
            (0..d)
                .map(|mut idx| {
                    let mut acc = 0;
                    let mut weight = within;
                    for _ in 0..layout.sites {
                        acc += (idx % dl) * weight;
                        idx /= dl;
                        weight *= sd;
                    }
                    acc
                })
                .collect()
        });
        Self { layout, tables }
    }

    pub fn layout(&self) -> TwirlLayout {
        self.layout
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, ap: usize, bp: usize) -> usize {
        self.tables[0][a] + self.tables[1][b] + self.tables[2][ap] + self.tables[3][bp]
    }

    /// `perm[layout index] = row-major index of X[(a, b), (a', b')]`.
    pub fn permutation(&self) -> Vec<usize> {
        let d = self.layout.base_dim();
        let mut perm = vec![0; self.layout.len()];
        let mut c = 0;
        for a in 0..d {
            for b in 0..d {
                for ap in 0..d {
                    for bp in 0..d {
                        perm[self.index(a, b, ap, bp)] = c;
                        c += 1;
                    }
                }
            }
        }
        perm
    }

    /// Layout vector of an operator `X` on `H ⊗ H` given as a `d² × d²` matrix.
    pub fn vector_from_operator(&self, x: &CMat) -> DVector<C64> {
        let d = self.layout.base_dim();
        let mut v = DVector::zeros(self.layout.len());
        for a in 0..d {
            for b in 0..d {
                for ap in 0..d {
                    for bp in 0..d {
                        v[self.index(a, b, ap, bp)] = x[(a * d + b, ap * d + bp)];
                    }
                }
            }
        }
        v
    }

    pub fn operator_from_vector(&self, v: &DVector<C64>) -> CMat {
        let d = self.layout.base_dim();
        CMat::from_fn(d * d, d * d, |r, c| v[self.index(r / d, r % d, c / d, c % d)])
    }

    /// Layout vector of `A ⊗ B`.
    pub fn product_vector(&self, a_op: &CMat, b_op: &CMat) -> DVector<C64> {
        let d = self.layout.base_dim();
        let mut v = DVector::zeros(self.layout.len());
        for a in 0..d {
            for ap in 0..d {
                let x = a_op[(a, ap)];
                if x == C64::new(0.0, 0.0) {
                    continue;
                }
                for b in 0..d {
                    for bp in 0..d {
                        v[self.index(a, b, ap, bp)] = x * b_op[(b, bp)];
                    }
                }
            }
        }
        v
    }

    /// Layout positions of the identity and swap operators (each `d²` entries equal to 1).
    pub fn fixed_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let d = self.layout.base_dim();
        let mut id = Vec::with_capacity(d * d);
        let mut sw = Vec::with_capacity(d * d);
        for a in 0..d {
            for b in 0..d {
                id.push(self.index(a, b, a, b));
                sw.push(self.index(a, b, b, a));
            }
        }
        (id, sw)
    }

    /// Symmetrizes `v` into the layout vector of a Hermitian operator.
    pub fn hermitize<T: Field>(&self, v: &mut DVector<T>) {
        let d = self.layout.base_dim();
        for a in 0..d {
            for b in 0..d {
                for ap in 0..d {
                    for bp in 0..d {
                        let i = self.index(a, b, ap, bp);
                        let j = self.index(ap, bp, a, b);
                        if i < j {
                            let avg = (v[i] + v[j].conjugate()) * T::from_real(0.5);
                            v[i] = avg;
                            v[j] = avg.conjugate();
                        } else if i == j {
                            v[i] = T::from_real(v[i].real());
                        }
                    }
                }
            }
        }
    }
}

/// The fixed space `span{𝟙⊗𝟙, SWAP}` of every twirl, with its orthogonal projector.
#[derive(Clone, Debug)]
pub struct FixedSpace {
    layout: TwirlLayout,
    identity: Vec<usize>,
    swap: Vec<usize>,
    gram_inv: [[f64; 2]; 2],
}

impl FixedSpace {
    pub fn new(layout: TwirlLayout) -> Result<Self> {
        let d = layout.base_dim() as f64;
        if layout.base_dim() < 2 {
            return Err(Error::invalid("twirls need d ≥ 2"));
        }
        let (identity, swap) = layout.indexer().fixed_indices();
        // Gram matrix [[d², d], [d, d²]].
        let det = d.powi(4) - d * d;
        let gram_inv = [[d * d / det, -d / det], [-d / det, d * d / det]];
        Ok(Self { layout, identity, swap, gram_inv })
    }

    pub fn layout(&self) -> TwirlLayout {
        self.layout
    }

    fn coefficients<T: Field>(&self, x: &DVector<T>) -> [T; 2] {
        let ci = self.identity.iter().fold(T::from_real(0.0), |acc, &i| acc + x[i]);
        let cs = self.swap.iter().fold(T::from_real(0.0), |acc, &i| acc + x[i]);
        let g = &self.gram_inv;
        [
            ci * T::from_real(g[0][0]) + cs * T::from_real(g[0][1]),
            ci * T::from_real(g[1][0]) + cs * T::from_real(g[1][1]),
        ]
    }

    /// Haar twirl: orthogonal projection onto the fixed space.
    pub fn project<T: Field>(&self, x: &DVector<T>) -> DVector<T> {
        let [a, s] = self.coefficients(x);
        let mut out = DVector::from_element(x.len(), T::from_real(0.0));
        for &i in &self.identity {
            out[i] += a;
        }
        for &i in &self.swap {
            out[i] += s;
        }
        out
    }

    /// Removes the fixed-space component in place.
    pub fn deflate<T: Field>(&self, x: &mut DVector<T>) {
        let [a, s] = self.coefficients(x);
        for &i in &self.identity {
            x[i] -= a;
        }
        for &i in &self.swap {
            x[i] -= s;
        }
    }

    pub fn identity_vector<T: Field>(&self) -> DVector<T> {
        let mut v = DVector::from_element(self.layout.len(), T::from_real(0.0));
        for &i in &self.identity {
            v[i] = T::from_real(1.0);
        }
        v
    }

    pub fn swap_vector<T: Field>(&self) -> DVector<T> {
        let mut v = DVector::from_element(self.layout.len(), T::from_real(0.0));
        for &i in &self.swap {
            v[i] = T::from_real(1.0);
        }
        v
    }
}

/// Twirl of a two-site gate ensemble in the layout of two adjacent sites.
#[derive(Clone, Debug)]
pub enum PairTwirl<T: Field> {
    /// `T = U V†`, stored as `conj(V)` and `Uᵀ`.
    LowRank { vc: DMatrix<T>, ut: DMatrix<T> },
    /// Stored transposed.
    Dense { tt: DMatrix<T> },
}

impl<T: Field> PairTwirl<T> {
    /// Exact two-site Haar twirl, a rank-2 projector.
    pub fn haar(local_dim: usize) -> Result<Self> {
        let fixed = FixedSpace::new(TwirlLayout::new(2, local_dim))?;
        let f = fixed.layout.len();
        let mut u = DMatrix::from_element(f, 2, T::from_real(0.0));
        for &i in &fixed.identity {
            u[(i, 0)] = T::from_real(1.0);
        }
        for &i in &fixed.swap {
            u[(i, 1)] = T::from_real(1.0);
        }
        let g = fixed.gram_inv;
        let ginv = DMatrix::from_fn(2, 2, |i, j| T::from_real(g[i][j]));
        let v = &u * ginv;
        Ok(Self::LowRank { vc: v.map(|x| x.conjugate()), ut: u.transpose() })
    }

    /// From a twirl in the single-site layout of local dimension `d_l²`.
    pub fn from_canonical(t: &DMatrix<T>, local_dim: usize) -> Result<Self> {
        let layout = TwirlLayout::new(2, local_dim);
        if t.nrows() != layout.len() || t.ncols() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: t.nrows() });
        }
        let perm = layout.indexer().permutation();
        let n = perm.len();
        Ok(Self::Dense { tt: DMatrix::from_fn(n, n, |i, j| t[(perm[j], perm[i])]) })
    }

    pub fn adjoint(&self) -> Self {
        match self {
            // (U V†)† = V U†.
            Self::LowRank { vc, ut } => Self::LowRank { vc: ut.adjoint(), ut: vc.adjoint() },
            Self::Dense { tt } => Self::Dense { tt: tt.adjoint() },
        }
    }

    /// `X ← X Tᵀ` for a block `X` of shape `inner × F`.
    fn apply_block(&self, mut x: DMatrixViewMut<'_, T>) {
        match self {
            Self::LowRank { vc, ut } => {
                let c = &x * vc;
                x.gemm(T::from_real(1.0), &c, ut, T::from_real(0.0));
            }
            Self::Dense { tt } => {
                let tmp = x.clone_owned();
                x.gemm(T::from_real(1.0), &tmp, tt, T::from_real(0.0));
            }
        }
    }
}

/// Bond between two sites (1-based); `second` is `first + 1` or the periodic bond `(k, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub first: usize,
    pub second: usize,
}

fn apply_pair<T: Field>(x: &mut DVector<T>, layout: TwirlLayout, bond: Bond, pair: &PairTwirl<T>) {
    let sd = layout.superdigit();
    let k = layout.sites;
    let f = sd * sd;
    if bond.second == bond.first + 1 {
        let inner = sd.pow((k - bond.second) as u32);
        x.as_mut_slice().par_chunks_mut(f * inner).for_each(|chunk| {
            pair.apply_block(DMatrixViewMut::from_slice(chunk, inner, f));
        });
        return;
    }
    // Periodic bond (k, 1): gather superdigits k and 1 into one block.
    debug_assert!(bond.first == k && bond.second == 1);
    let middle = sd.pow((k - 2) as u32);
    let top = sd.pow((k - 1) as u32);
    let mut block = DMatrix::from_element(middle, f, T::from_real(0.0));
    for fk in 0..sd {
        for f1 in 0..sd {
            for m in 0..middle {
                block[(m, fk * sd + f1)] = x[f1 * top + m * sd + fk];
            }
        }
    }
    pair.apply_block(block.as_view_mut());
    for fk in 0..sd {
        for f1 in 0..sd {
            for m in 0..middle {
                x[f1 * top + m * sd + fk] = block[(m, fk * sd + f1)];
            }
        }
    }
}

/// A t = 2 moment operator `G(X) = E[U^{⊗2} X U^{†⊗2}]`.
#[derive(Clone, Debug)]
pub enum TwirlOp<T: Field> {
    Identity(TwirlLayout),
    /// Exact Haar twirl of the full space.
    Haar(Arc<FixedSpace>),
    /// Dense matrix in the op's layout.
    Dense { layout: TwirlLayout, matrix: Arc<DMatrix<T>> },
    /// Commuting pair twirls on disjoint bonds.
    Layer { layout: TwirlLayout, pairs: Vec<(Bond, Arc<PairTwirl<T>>)> },
    Combination { layout: TwirlLayout, terms: Vec<(f64, TwirlOp<T>)> },
    /// Applied left to right.
    Compose(Vec<TwirlOp<T>>),
    Power(Box<TwirlOp<T>>, usize),
}

impl<T: Field> TwirlOp<T> {
    pub fn haar(layout: TwirlLayout) -> Result<Self> {
        Ok(Self::Haar(Arc::new(FixedSpace::new(layout)?)))
    }

    /// Dense operator from a matrix in the single-site (row-major) layout, permuted into `layout`.
    pub fn dense_from_canonical(layout: TwirlLayout, t: DMatrix<T>) -> Result<Self> {
        if t.nrows() != layout.len() || t.ncols() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: t.nrows() });
        }
        let matrix = if layout.sites == 1 {
            t
        } else {
            let perm = layout.indexer().permutation();
            let n = perm.len();
            DMatrix::from_fn(n, n, |i, j| t[(perm[i], perm[j])])
        };
        Ok(Self::Dense { layout, matrix: Arc::new(matrix) })
    }

    pub fn layout(&self) -> TwirlLayout {
        match self {
            Self::Identity(l) => *l,
            Self::Haar(f) => f.layout,
            Self::Dense { layout, .. } | Self::Layer { layout, .. } | Self::Combination { layout, .. } => *layout,
            Self::Compose(ops) => ops[0].layout(),
            Self::Power(op, _) => op.layout(),
        }
    }

    pub fn power(self, n: usize) -> Self {
        Self::Power(Box::new(self), n)
    }

    pub fn combination(terms: Vec<(f64, TwirlOp<T>)>) -> Result<Self> {
        let layout = terms.first().ok_or_else(|| Error::invalid("empty combination"))?.1.layout();
        if terms.iter().any(|(_, op)| op.layout() != layout) {
            return Err(Error::invalid("combination of twirls with different layouts"));
        }
        Ok(Self::Combination { layout, terms })
    }

    pub fn compose(ops: Vec<TwirlOp<T>>) -> Result<Self> {
        let layout = ops.first().ok_or_else(|| Error::invalid("empty composition"))?.layout();
        if ops.iter().any(|op| op.layout() != layout) {
            return Err(Error::invalid("composition of twirls with different layouts"));
        }
        Ok(Self::Compose(ops))
    }

    fn check(&self, x: &DVector<T>) -> Result<()> {
        let n = self.layout().len();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        Ok(())
    }

    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        Ok(self.apply_unchecked(x, false))
    }

    pub fn apply_adjoint(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        Ok(self.apply_unchecked(x, true))
    }

    fn apply_unchecked(&self, x: &DVector<T>, adjoint: bool) -> DVector<T> {
        match self {
            Self::Identity(_) => x.clone(),
            Self::Haar(f) => f.project(x),
            Self::Dense { matrix, .. } => {
                if adjoint {
                    matrix.ad_mul(x)
                } else {
                    matrix.as_ref() * x
                }
            }
            Self::Layer { layout, pairs } => {
                let mut y = x.clone();
                for (bond, pair) in pairs {
                    if adjoint {
                        apply_pair(&mut y, *layout, *bond, &pair.adjoint());
                    } else {
                        apply_pair(&mut y, *layout, *bond, pair);
                    }
                }
                y
            }
            Self::Combination { terms, .. } => {
                let mut acc = DVector::from_element(x.len(), T::from_real(0.0));
                for (c, op) in terms {
                    let y = op.apply_unchecked(x, adjoint);
                    acc.axpy(T::from_real(*c), &y, T::from_real(1.0));
                }
                acc
            }
            Self::Compose(ops) => {
                let mut y = x.clone();
                if adjoint {
                    for op in ops.iter().rev() {
                        y = op.apply_unchecked(&y, true);
                    }
                } else {
                    for op in ops {
                        y = op.apply_unchecked(&y, false);
                    }
                }
                y
            }
            Self::Power(op, n) => {
                let mut y = x.clone();
                for _ in 0..*n {
                    y = op.apply_unchecked(&y, adjoint);
                }
                y
            }
        }
    }

    /// Applies the op to a complex vector; real ops act on real and imaginary parts separately.
    pub fn apply_complex(&self, x: &DVector<C64>, adjoint: bool) -> Result<DVector<C64>> {
        let (re, im) = T::split(x);
        let f = |v: &DVector<T>| if adjoint { self.apply_adjoint(v) } else { self.apply(v) };
        let re = f(&re)?;
        let im = im.map(|v| f(&v)).transpose()?;
        Ok(T::merge(re, im))
    }

    /// Dense matrix of the op, column by column.
    pub fn to_dense(&self) -> Result<DMatrix<T>> {
        if let Self::Dense { matrix, .. } = self {
            return Ok(matrix.as_ref().clone());
        }
        let n = self.layout().len();
        if n > DENSE_TWIRL_MAX {
            return Err(Error::invalid(format!("dense twirl of size {n} exceeds {DENSE_TWIRL_MAX}")));
        }
        let mut out = DMatrix::from_element(n, n, T::from_real(0.0));
        for c in 0..n {
            let mut e = DVector::from_element(n, T::from_real(0.0));
            e[c] = T::from_real(1.0);
            out.set_column(c, &self.apply_unchecked(&e, false));
        }
        Ok(out)
    }
}

/// `U^{⊗2} ⊗ Ū^{⊗2}` in the single-site layout.
pub fn unitary_twirl(u: &CMat) -> CMat {
    let v = u.kronecker(u);
    v.kronecker(&v.map(|z| z.conj()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentMode {
    ExactFinite,
    MonteCarlo { samples: usize, seed: u64 },
}

/// The t = 2 twirl of a unitary ensemble, in the layout of its shape.
pub fn moment_operator(ens: &dyn UnitaryEnsemble, mode: MomentMode) -> Result<TwirlOp<C64>> {
    let shape = ens.shape();
    let layout = TwirlLayout::new(shape.sites(), shape.local_dim());
    match mode {
        MomentMode::ExactFinite => {
            if ens.is_exact_haar() {
                return TwirlOp::haar(layout);
            }
            let (gates, weights) = ens
                .finite_support()
                .ok_or_else(|| Error::ExactModeUnsupported(ens.describe()))?;
            check_dense(layout)?;
            let n = layout.len();
            let mut t = CMat::zeros(n, n);
            for (g, w) in gates.iter().zip(weights) {
                t += unitary_twirl(g) * C64::new(w, 0.0);
            }
            TwirlOp::dense_from_canonical(layout, t)
        }
        MomentMode::MonteCarlo { samples, seed } => {
            let (t, _) = monte_carlo_twirl(ens, samples, seed, 1)?;
            TwirlOp::dense_from_canonical(layout, t)
        }
    }
}

fn check_dense(layout: TwirlLayout) -> Result<()> {
    if layout.len() > DENSE_TWIRL_MAX {
        return Err(Error::invalid(format!(
            "dense twirl needs d⁴ ≤ {DENSE_TWIRL_MAX}, got {}",
            layout.len()
        )));
    }
    Ok(())
}

/// Monte-Carlo twirl in the single-site layout, plus per-group means.
fn monte_carlo_twirl(
    ens: &dyn UnitaryEnsemble,
    samples: usize,
    seed: u64,
    groups: usize,
) -> Result<(CMat, Vec<(CMat, usize)>)> {
    let layout = TwirlLayout::flat(ens.dim());
    check_dense(layout)?;
    if samples < groups || samples == 0 {
        return Err(Error::invalid("too few samples"));
    }
    let n = layout.len();
    let sums: Vec<(CMat, usize)> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let (lo, hi) = (g * samples / groups, (g + 1) * samples / groups);
            let mut acc = CMat::zeros(n, n);
            for i in lo..hi {
                let u = ens.sample(&mut rng_for(seed, &[i as u64]));
                acc += unitary_twirl(&u);
            }
            (acc, hi - lo)
        })
        .collect();
    let mut total = CMat::zeros(n, n);
    for (s, _) in &sums {
        total += s;
    }
    Ok((total.unscale(samples as f64), sums))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesignMethod {
    ExactDense,
    PowerIteration,
    MonteCarlo,
}

#[derive(Clone, Debug)]
pub struct DesignReport {
    pub epsilon: f64,
    pub method: DesignMethod,
    pub samples: Option<usize>,
    pub stderr: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PowerOptions {
    pub starts: usize,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Largest vector length for dense SVD in [`design_epsilon`].
    pub dense_max: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { starts: 3, rel_tol: 1e-8, max_iter: 5000, seed: 0x7a11, dense_max: 1024 }
    }
}

fn random_hermitian_vector<T: Field>(indexer: &LayoutIndexer, seed: u64, start: usize) -> DVector<T> {
    let mut rng = rng_for(seed, &[start as u64]);
    let n = indexer.layout.len();
    let mut v = DVector::from_fn(n, |_, _| {
        T::from_parts(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    });
    indexer.hermitize(&mut v);
    v
}

/// `‖G − reference‖` in the superoperator 2→2 norm.
pub fn design_epsilon<T: Field>(g: &TwirlOp<T>, reference: &TwirlOp<T>, opts: &PowerOptions) -> Result<DesignReport> {
    if g.layout() != reference.layout() {
        return Err(Error::DimensionMismatch { expected: reference.layout().len(), got: g.layout().len() });
    }
    let n = g.layout().len();
    if n <= opts.dense_max {
        let a = g.to_dense()? - reference.to_dense()?;
        let eps = a.singular_values().iter().fold(0.0f64, |m, &s| m.max(s));
        return Ok(DesignReport { epsilon: eps, method: DesignMethod::ExactDense, samples: None, stderr: None, iterations: 0 });
    }
    let (eps, iterations) = difference_norm_power(g, reference, opts)?;
    Ok(DesignReport { epsilon: eps, method: DesignMethod::PowerIteration, samples: None, stderr: None, iterations })
}

/// Largest singular value of `G − R` by power iteration on `(G − R)†(G − R)`.
pub fn difference_norm_power<T: Field>(g: &TwirlOp<T>, r: &TwirlOp<T>, opts: &PowerOptions) -> Result<(f64, usize)> {
    let indexer = g.layout().indexer();
    let mut best = 0.0f64;
    let mut total_iter = 0;
    for start in 0..opts.starts {
        let mut x = random_hermitian_vector::<T>(&indexer, opts.seed, start);
        let nx = x.norm();
        x.unscale_mut(nx);
        let mut prev = f64::NAN;
        let mut est = 0.0;
        for it in 0..opts.max_iter {
            total_iter += 1;
            let mut y = g.apply(&x)?;
            y -= r.apply(&x)?;
            est = y.norm();
            if est == 0.0 {
                break;
            }
            let mut z = g.apply_adjoint(&y)?;
            z -= r.apply_adjoint(&y)?;
            let nz = z.norm();
            if nz == 0.0 {
                break;
            }
            x = z.unscale(nz);
            if it > 0 && (est - prev).abs() <= opts.rel_tol * est {
                break;
            }
            prev = est;
        }
        best = best.max(est);
    }
    Ok((best, total_iter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMethod {
    /// Eigenvalue modulus of a self-adjoint operator.
    Eigenvalue,
    /// Largest singular value on the deflated space (non-self-adjoint fallback).
    SingularValue,
}

#[derive(Clone, Debug)]
pub struct SpectralReport {
    pub value: f64,
    pub method: SpectralMethod,
    /// Relative asymmetry `|⟨x, Gy⟩ − ⟨Gx, y⟩|` on random unit vectors.
    pub asymmetry: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SpectralReport {
    pub fn self_adjoint(&self) -> bool {
        self.method == SpectralMethod::Eigenvalue
    }
}

/// Tolerance on [`SpectralReport::asymmetry`] below which an op counts as self-adjoint.
pub const SELF_ADJOINT_TOL: f64 = 1e-9;

/// Largest eigenvalue modulus of `G` on the complement of `span{𝟙⊗𝟙, SWAP}`.
pub fn lambda2<T: Field>(g: &TwirlOp<T>, opts: &PowerOptions) -> Result<SpectralReport> {
    let layout = g.layout();
    let fixed = FixedSpace::new(layout)?;
    let indexer = layout.indexer();

    let mut x = random_hermitian_vector::<T>(&indexer, opts.seed ^ 0xa5a5, 0);
    let mut y = random_hermitian_vector::<T>(&indexer, opts.seed ^ 0xa5a5, 1);
    x.unscale_mut(x.norm());
    y.unscale_mut(y.norm());
    let lhs = x.dotc(&g.apply(&y)?);
    let rhs = g.apply(&x)?.dotc(&y);
    let asymmetry = (lhs - rhs).modulus();
    drop((x, y));
    let adjoint = asymmetry <= SELF_ADJOINT_TOL;

    let mut best = 0.0f64;
    let mut iterations = 0;
    let mut converged = true;
    for start in 0..opts.starts {
        let mut v = random_hermitian_vector::<T>(&indexer, opts.seed, start);
        fixed.deflate(&mut v);
        let nv = v.norm();
        if nv == 0.0 {
            continue;
        }
        v.unscale_mut(nv);
        let mut prev = f64::NAN;
        let mut est = 0.0;
        let mut done = false;
        for it in 0..opts.max_iter {
            iterations += 1;
            let mut w = g.apply(&v)?;
            if !adjoint {
                w = g.apply_adjoint(&w)?;
            }
            fixed.deflate(&mut w);
            let nw = w.norm();
            est = nw;
            if nw == 0.0 {
                done = true;
                break;
            }
            v = w.unscale(nw);
            if it > 0 && (est - prev).abs() <= opts.rel_tol * est {
                done = true;
                break;
            }
            prev = est;
        }
        converged &= done;
        best = best.max(if adjoint { est } else { est.sqrt() });
    }
    Ok(SpectralReport {
        value: best,
        method: if adjoint { SpectralMethod::Eigenvalue } else { SpectralMethod::SingularValue },
        asymmetry,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug)]
pub struct MixingReport {
    pub s: usize,
    /// `λ₂(((M_e² + M_o²)/2)^s)`.
    pub lhs: f64,
    /// `λ₂((M_e^{2s} + M_o^{2s})/2)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Compares the two sides of the mixing inequality for a power of two `s`.
pub fn verify_mixing_inequality<T: Field>(
    m_e: &TwirlOp<T>,
    m_o: &TwirlOp<T>,
    s: usize,
    opts: &PowerOptions,
) -> Result<MixingReport> {
    if s == 0 || !s.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(s));
    }
    let half_squares = TwirlOp::combination(vec![
        (0.5, m_e.clone().power(2)),
        (0.5, m_o.clone().power(2)),
    ])?;
    let lhs_op = half_squares.power(s);
    let rhs_op = TwirlOp::combination(vec![
        (0.5, m_e.clone().power(2 * s)),
        (0.5, m_o.clone().power(2 * s)),
    ])?;
    let lhs = lambda2(&lhs_op, opts)?.value;
    let rhs = lambda2(&rhs_op, opts)?.value;
    Ok(MixingReport { s, lhs, rhs, holds: lhs <= rhs + 1e-8 })
}

/// Monte-Carlo design distance to the Haar twirl with a jackknife error bar.
pub fn monte_carlo_design_epsilon(ens: &dyn UnitaryEnsemble, samples: usize, seed: u64) -> Result<DesignReport> {
    const GROUPS: usize = 20;
    let layout = TwirlLayout::flat(ens.dim());
    let (mean, groups) = monte_carlo_twirl(ens, samples, seed, GROUPS)?;
    let haar = TwirlOp::<C64>::haar(layout)?.to_dense()?;
    let eps = |m: &CMat| (m - &haar).singular_values().iter().fold(0.0f64, |a, &s| a.max(s));
    let epsilon = eps(&mean);
    let total = mean.scale(samples as f64);
    let leave_out: Vec<f64> = groups
        .iter()
        .map(|(s, c)| eps(&(&total - s).unscale((samples - c) as f64)))
        .collect();
    let g = GROUPS as f64;
    let avg = leave_out.iter().sum::<f64>() / g;
    let var = leave_out.iter().map(|x| (x - avg).powi(2)).sum::<f64>() * (g - 1.0) / g;
    Ok(DesignReport {
        epsilon,
        method: DesignMethod::MonteCarlo,
        samples: Some(samples),
        stderr: Some(var.sqrt()),
        iterations: 0,
    })
}

/// Sampling operator of the measure induced by `w₀` under an ensemble with twirl `G`:
/// `W(X) = (d² − 1)·Tr₁[G†(w₀⊗w₀)(X ⊗ 𝟙)] + 𝟙·Tr X / d`.
pub fn frame_from_twirl<T: Field>(g: &TwirlOp<T>, w0: &CMat) -> Result<SuperOperator> {
    let layout = g.layout();
    let d = layout.base_dim();
    if w0.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w0.nrows() });
    }
    let indexer = layout.indexer();
    let y = g.apply_complex(&indexer.product_vector(w0, w0), true)?;
    let n = d * d;
    let scale = (d * d) as f64 - 1.0;
    let mut dense = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = DVector::zeros(n);
        e[c] = 1.0;
        let x = herm_from_coords(&e, d);
        let mut z = CMat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..d {
                    for b in 0..d {
                        let xv = x[(b, a)];
                        if xv != C64::new(0.0, 0.0) {
                            acc += y[indexer.index(a, i, b, j)] * xv;
                        }
                    }
                }
                z[(i, j)] = acc * scale;
            }
        }
        let tr = x.trace() / d as f64;
        for i in 0..d {
            z[(i, i)] += tr;
        }
        dense.set_column(c, &herm_coords(&z));
    }
    Ok(SuperOperator::from_dense(dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{haar_unitary, single_qubit_cliffords, FiniteEnsemble, HaarEnsemble};
    use crate::hilbert::{random_hermitian, SystemShape};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qubit() -> SystemShape {
        SystemShape::new(1, 2).unwrap()
    }

    fn point_identity(shape: SystemShape) -> FiniteEnsemble {
        FiniteEnsemble::uniform(shape, vec![CMat::identity(shape.dim(), shape.dim())]).unwrap()
    }

    fn random_operator_vector(layout: TwirlLayout, seed: u64) -> DVector<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = layout.base_dim();
        layout.indexer().vector_from_operator(&random_hermitian(d * d, &mut rng))
    }

    /// Trace of the operator represented by a layout vector.
    fn op_trace(layout: TwirlLayout, v: &DVector<C64>) -> C64 {
        let (id, _) = layout.indexer().fixed_indices();
        id.iter().map(|&i| v[i]).sum()
    }

    #[test]
    fn layout_round_trip_and_single_site_identity() {
        let layout = TwirlLayout::new(2, 2);
        let idx = layout.indexer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_hermitian(16, &mut rng);
        let v = idx.vector_from_operator(&x);
        assert_abs_diff_eq!((idx.operator_from_vector(&v) - &x).norm(), 0.0, epsilon = 1e-14);
        let flat = TwirlLayout::flat(4).indexer();
        assert!(flat.permutation().iter().enumerate().all(|(i, &p)| i == p));
    }

    #[test]
    fn haar_twirl_fixed_points_and_projector() {
        let layout = TwirlLayout::new(2, 2);
        let g = TwirlOp::<C64>::haar(layout).unwrap();
        let fixed = FixedSpace::new(layout).unwrap();
        let id = fixed.identity_vector::<C64>();
        let sw = fixed.swap_vector::<C64>();
        assert_abs_diff_eq!((g.apply(&id).unwrap() - &id).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((g.apply(&sw).unwrap() - &sw).norm(), 0.0, epsilon = 1e-12);
        let x = random_operator_vector(layout, 2);
        let once = g.apply(&x).unwrap();
        assert_abs_diff_eq!((g.apply(&once).unwrap() - &once).norm(), 0.0, epsilon = 1e-12);
        let y = random_operator_vector(layout, 3);
        let a = x.dotc(&g.apply(&y).unwrap());
        let b = g.apply(&x).unwrap().dotc(&y);
        assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn haar_twirl_matches_monte_carlo_average() {
        let layout = TwirlLayout::flat(2);
        let idx = layout.indexer();
        let mut e00 = CMat::zeros(2, 2);
        e00[(0, 0)] = C64::new(1.0, 0.0);
        let x = idx.product_vector(&e00, &e00);
        let exact = TwirlOp::<C64>::haar(layout).unwrap().apply(&x).unwrap();
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Real and imaginary parts of each entry, tracked separately.
        let mut s = vec![0.0f64; 32];
        let mut s2 = vec![0.0f64; 32];
        for _ in 0..n {
            let u = haar_unitary(2, &mut rng);
            let col = u.column(0).clone_owned();
            let v = col.kronecker(&col);
            let m = &v * v.adjoint();
            for (i, z) in m.transpose().iter().enumerate() {
                for (slot, val) in [(2 * i, z.re), (2 * i + 1, z.im)] {
                    s[slot] += val;
                    s2[slot] += val * val;
                }
            }
        }
        for i in 0..16 {
            for (slot, e) in [(2 * i, exact[i].re), (2 * i + 1, exact[i].im)] {
                let mean = s[slot] / n as f64;
                let se = ((s2[slot] / n as f64 - mean * mean) / n as f64).sqrt();
                assert!((mean - e).abs() <= 5.0 * se + 1e-12, "entry {i}: {mean} vs {e}");
            }
        }
    }

    #[test]
    fn clifford_group_is_an_exact_two_design() {
        let ens = FiniteEnsemble::uniform(qubit(), single_qubit_cliffords()).unwrap();
        let g = moment_operator(&ens, MomentMode::ExactFinite).unwrap();
        let h = TwirlOp::haar(g.layout()).unwrap();
        let rep = design_epsilon(&g, &h, &PowerOptions::default()).unwrap();
        assert!(rep.epsilon < 1e-10, "{}", rep.epsilon);
    }

    #[test]
    fn identity_ensemble_examples() {
        let ens = point_identity(qubit());
        let g = moment_operator(&ens, MomentMode::ExactFinite).unwrap();
        let x = random_operator_vector(g.layout(), 5);
        assert_abs_diff_eq!((g.apply(&x).unwrap() - &x).norm(), 0.0, epsilon = 1e-12);
        let h = TwirlOp::haar(g.layout()).unwrap();
        let dense = design_epsilon(&g, &h, &PowerOptions::default()).unwrap();
        let opts = PowerOptions { dense_max: 0, ..PowerOptions::default() };
        let power = design_epsilon(&g, &h, &opts).unwrap();
        assert_eq!(dense.method, DesignMethod::ExactDense);
        assert_eq!(power.method, DesignMethod::PowerIteration);
        assert_abs_diff_eq!(dense.epsilon, power.epsilon, epsilon = 1e-6);
        assert_abs_diff_eq!(dense.epsilon, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(lambda2(&g, &PowerOptions::default()).unwrap().value, 1.0, epsilon = 1e-10);
        assert_eq!(design_epsilon(&h, &h, &PowerOptions::default()).unwrap().epsilon, 0.0);
    }

    #[test]
    fn lambda2_of_haar_twirl_is_zero() {
        for layout in [TwirlLayout::flat(3), TwirlLayout::new(3, 2)] {
            let rep = lambda2(&TwirlOp::<f64>::haar(layout).unwrap(), &PowerOptions::default()).unwrap();
            assert!(rep.value < 1e-12 && rep.self_adjoint());
        }
    }

    #[test]
    fn haar_pair_twirl_on_two_sites_equals_global_haar() {
        let layout = TwirlLayout::new(2, 2);
        let layer = TwirlOp::<f64>::Layer {
            layout,
            pairs: vec![(Bond { first: 1, second: 2 }, Arc::new(PairTwirl::haar(2).unwrap()))],
        };
        let h = TwirlOp::haar(layout).unwrap();
        let rep = design_epsilon(&layer, &h, &PowerOptions::default()).unwrap();
        assert!(rep.epsilon < 1e-12);
        assert!(lambda2(&layer, &PowerOptions::default()).unwrap().value < 1e-12);
    }

    #[test]
    fn dense_pair_twirl_matches_full_space_twirl() {
        // A single fixed two-qubit gate on sites (2, 3) of three qubits.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gate = haar_unitary(4, &mut rng);
        let pair = PairTwirl::from_canonical(&unitary_twirl(&gate), 2).unwrap();
        let layout = TwirlLayout::new(3, 2);
        let layer = TwirlOp::<C64>::Layer { layout, pairs: vec![(Bond { first: 2, second: 3 }, Arc::new(pair.clone()))] };
        let full = CMat::identity(2, 2).kronecker(&gate);
        let reference = TwirlOp::dense_from_canonical(layout, unitary_twirl(&full)).unwrap();
        let x = random_operator_vector(layout, 7);
        let a = layer.apply(&x).unwrap();
        let b = reference.apply(&x).unwrap();
        assert_abs_diff_eq!((&a - &b).norm(), 0.0, epsilon = 1e-12);
        let a = layer.apply_adjoint(&x).unwrap();
        let b = reference.apply_adjoint(&x).unwrap();
        assert_abs_diff_eq!((&a - &b).norm(), 0.0, epsilon = 1e-12);

        // Periodic bond (3, 1): gate acts on site 3 then site 1.
        let wrap = TwirlOp::<C64>::Layer { layout, pairs: vec![(Bond { first: 3, second: 1 }, Arc::new(pair))] };
        let mut perm = CMat::zeros(8, 8);
        for i in 0..8usize {
            let (s1, s2, s3) = (i >> 2 & 1, i >> 1 & 1, i & 1);
            // Basis with site order (3, 1, 2) mapped back to (1, 2, 3).
            let j = (s3 << 2) | (s1 << 1) | s2;
            perm[(i, j)] = C64::new(1.0, 0.0);
        }
        let full = &perm * gate.kronecker(&CMat::identity(2, 2)) * perm.adjoint();
        let reference = TwirlOp::dense_from_canonical(layout, unitary_twirl(&full)).unwrap();
        assert_abs_diff_eq!((wrap.apply(&x).unwrap() - reference.apply(&x).unwrap()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn low_rank_adjoint_matches_dense_adjoint() {
        let pair = PairTwirl::<C64>::haar(2).unwrap();
        let layout = TwirlLayout::new(2, 2);
        let op = TwirlOp::Layer { layout, pairs: vec![(Bond { first: 1, second: 2 }, Arc::new(pair))] };
        let dense = op.to_dense().unwrap();
        let x = random_operator_vector(layout, 8);
        assert_abs_diff_eq!((op.apply_adjoint(&x).unwrap() - dense.ad_mul(&x)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn monte_carlo_haar_twirl_is_close() {
        let rep = monte_carlo_design_epsilon(&HaarEnsemble::new(qubit()), 100_000, 9).unwrap();
        assert!(rep.epsilon <= 0.05, "{}", rep.epsilon);
        assert!(rep.stderr.unwrap() > 0.0);
        let g = moment_operator(&HaarEnsemble::new(qubit()), MomentMode::MonteCarlo { samples: 1000, seed: 1 }).unwrap();
        assert!(g.to_dense().is_ok());
    }

    #[test]
    fn exact_mode_requires_finite_support() {
        struct Continuous;
        impl UnitaryEnsemble for Continuous {
            fn shape(&self) -> SystemShape {
                SystemShape::new(1, 2).unwrap()
            }
            fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> CMat {
                haar_unitary(2, rng)
            }
            fn describe(&self) -> String {
                "continuous".into()
            }
        }
        assert!(matches!(moment_operator(&Continuous, MomentMode::ExactFinite), Err(Error::ExactModeUnsupported(_))));
        assert!(moment_operator(&HaarEnsemble::new(qubit()), MomentMode::ExactFinite).is_ok());
    }

    #[test]
    fn mixing_inequality_rejects_non_powers_of_two() {
        let layout = TwirlLayout::flat(2);
        let id = TwirlOp::<f64>::Identity(layout);
        assert!(matches!(verify_mixing_inequality(&id, &id, 3, &PowerOptions::default()), Err(Error::NotPowerOfTwo(3))));
    }

    #[test]
    fn frame_from_twirl_is_tight_for_haar() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 4;
        let h = random_hermitian(d, &mut rng);
        let w0 = &h - CMat::identity(d, d).scale(h.trace().re / d as f64);
        let w0 = w0.unscale(w0.norm());
        let g = TwirlOp::<f64>::haar(TwirlLayout::new(2, 2)).unwrap();
        let w = frame_from_twirl(&g, &w0).unwrap();
        assert!(crate::frames::tight_frame_defect(&w).unwrap() < 1e-12);
        // The identity ensemble gives a rank-deficient frame.
        let id = TwirlOp::<f64>::Identity(TwirlLayout::new(2, 2));
        let w = frame_from_twirl(&id, &w0).unwrap();
        assert!(crate::frames::tight_frame_defect(&w).unwrap() > 0.5);
    }

    #[test]
    fn frame_from_twirl_matches_exact_finite_frame() {
        use crate::frames::{induced_measure, sampling_operator, ObservableMeasure, SamplingMode};
        use crate::hilbert::Observable;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = SystemShape::new(2, 2).unwrap();
        let gates: Vec<CMat> = (0..3).map(|_| haar_unitary(4, &mut rng)).collect();
        let ens = Arc::new(FiniteEnsemble::uniform(shape, gates).unwrap());
        let h = random_hermitian(4, &mut rng);
        let w0 = &h - CMat::identity(4, 4).scale(h.trace().re / 4.0);
        let w0 = Observable::normalized(shape, w0.unscale(w0.norm())).unwrap();
        let mu: ObservableMeasure = induced_measure(ens.clone(), w0.clone()).unwrap();
        let exact = sampling_operator(&mu, SamplingMode::Exact).unwrap().operator.to_dense().unwrap();
        let g = moment_operator(ens.as_ref(), MomentMode::ExactFinite).unwrap();
        let from_twirl = frame_from_twirl(&g, w0.matrix()).unwrap().to_dense().unwrap();
        assert_abs_diff_eq!((exact - from_twirl).norm(), 0.0, epsilon = 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn twirls_preserve_trace_and_fix_identity_and_swap(seed in any::<u64>(), n_gates in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = SystemShape::new(2, 2).unwrap();
            let gates: Vec<CMat> = (0..n_gates).map(|_| haar_unitary(4, &mut rng)).collect();
            let g = moment_operator(&FiniteEnsemble::uniform(shape, gates).unwrap(), MomentMode::ExactFinite).unwrap();
            let layout = g.layout();
            let x = random_operator_vector(layout, seed ^ 1);
            let y = g.apply(&x).unwrap();
            prop_assert!((op_trace(layout, &y) - op_trace(layout, &x)).norm() < 1e-9);
            let idx = layout.indexer();
            prop_assert!(crate::hilbert::hermitian_deviation(&idx.operator_from_vector(&y)) < 1e-10);
            let fixed = FixedSpace::new(layout).unwrap();
            for v in [fixed.identity_vector::<C64>(), fixed.swap_vector::<C64>()] {
                prop_assert!((g.apply(&v).unwrap() - &v).norm() < 1e-9);
            }
        }
    }
}
