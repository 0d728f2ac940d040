//! Truncated bosonic chains: ladder operators, the Bose-Hubbard Hamiltonian and
//! two-site gate, the speckle gate ensemble, time-of-flight observables and
//! quasi-momentum distributions.
//!
//! Energies are in units of the hopping `J`; sites are 1-based.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frames::UnitaryEnsemble;
use crate::hilbert::{
    eigh, hs_inner, product_in_basis, product_on_sites, CMat, DensityMatrix, Observable,
    SystemShape, C64,
};

/// `k` sites with at most `n_max` bosons each, optionally in a fixed-`N` sector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FockShape {
    sites: usize,
    n_max: usize,
    total: Option<usize>,
    system: SystemShape,
}

impl FockShape {
    pub fn new(sites: usize, n_max: usize, total: Option<usize>) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::invalid("the per-site cutoff must be at least 1"));
        }
        if let Some(n) = total {
            if n > sites * n_max {
                return Err(Error::invalid(format!("N = {n} exceeds k·N_S = {}", sites * n_max)));
            }
        }
        let system = SystemShape::new(sites, n_max + 1)?;
        Ok(Self { sites, n_max, total, system })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn total(&self) -> Option<usize> {
        self.total
    }

    pub fn local_dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn system(&self) -> SystemShape {
        self.system
    }

    /// Caveats about the chosen cutoff.
    pub fn warnings(&self) -> Vec<String> {
        match self.total {
            Some(n) if n > self.sites && self.n_max < n => vec![format!(
                "N = {n} exceeds k = {} and the cutoff N_S = {} truncates states with more bosons per site",
                self.sites, self.n_max
            )],
            _ => Vec::new(),
        }
    }

    /// Occupations of a basis index, site 1 first.
    pub fn occupations(&self, index: usize) -> Vec<usize> {
        self.system.digits(index)
    }

    /// Basis indices of the fixed-`N` sector, ascending.
    pub fn sector_basis(&self) -> Result<Vec<usize>> {
        let n = self.total.ok_or_else(|| Error::invalid("no particle number fixed"))?;
        Ok(self.basis_with_total(n))
    }

    pub fn basis_with_total(&self, n: usize) -> Vec<usize> {
        (0..self.system.dim()).filter(|&i| self.occupations(i).iter().sum::<usize>() == n).collect()
    }

    /// Diagonal of the total number operator.
    pub fn number_diagonal(&self) -> Vec<f64> {
        (0..self.system.dim()).map(|i| self.occupations(i).iter().sum::<usize>() as f64).collect()
    }

    fn check_site(&self, site: usize) -> Result<()> {
        self.system.check_site(site)
    }
}

fn binomial(n: i64, r: i64) -> i64 {
    if r < 0 || n < r {
        return 0;
    }
    (0..r).fold(1i64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of occupation tuples of `k` sites with cutoff `n_max` summing to `n`.
pub fn sector_dimension(k: usize, n_max: usize, n: usize) -> usize {
    let (k, c, n) = (k as i64, n_max as i64 + 1, n as i64);
    let total: i64 = (0..=k)
        .map(|j| {
            let sign = if j % 2 == 0 { 1 } else { -1 };
            sign * binomial(k, j) * binomial(n - j * c + k - 1, k - 1)
        })
        .sum();
    total as usize
}

/// Truncated annihilation operator on one site: `⟨n−1|b|n⟩ = √n`.
pub fn local_annihilation(n_max: usize) -> CMat {
    let d = n_max + 1;
    let mut b = CMat::zeros(d, d);
    for n in 1..d {
        b[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    b
}

/// `(b_s, b_s†)` embedded in the full chain.
pub fn ladder_operators(shape: &FockShape, site: usize) -> Result<(CMat, CMat)> {
    shape.check_site(site)?;
    let b = local_annihilation(shape.n_max);
    let full = product_on_sites(&shape.system, &[(&[site], &b)])?;
    let dag = full.adjoint();
    Ok((full, dag))
}

/// `N̂ = Σ_s n̂_s`.
pub fn number_operator(shape: &FockShape) -> CMat {
    let diag = shape.number_diagonal();
    CMat::from_fn(diag.len(), diag.len(), |i, j| if i == j { C64::new(diag[i], 0.0) } else { C64::new(0.0, 0.0) })
}

/// Parameters of `H = −Σ J_i(b_i†b_{i+1} + h.c.) + Σ (U_i/2) n_i(n_i − 1) + Σ Δ_i n_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoseHubbardParams {
    /// One per bond (`k − 1` entries).
    pub hopping: Vec<f64>,
    /// One per site.
    pub interaction: Vec<f64>,
    /// One per site.
    pub offset: Vec<f64>,
}

impl BoseHubbardParams {
    pub fn uniform(k: usize, j: f64, u: f64, delta: f64) -> Self {
        Self { hopping: vec![j; k.saturating_sub(1)], interaction: vec![u; k], offset: vec![delta; k] }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.hopping.len() != k.saturating_sub(1) || self.interaction.len() != k || self.offset.len() != k {
            return Err(Error::invalid(format!(
                "parameter lengths ({}, {}, {}) do not match k = {k}",
                self.hopping.len(),
                self.interaction.len(),
                self.offset.len()
            )));
        }
        let all = self.hopping.iter().chain(&self.interaction).chain(&self.offset);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::invalid("Bose-Hubbard parameters must be finite"));
        }
        Ok(())
    }
}

fn onsite(n_max: usize, u: f64, delta: f64) -> CMat {
    CMat::from_fn(n_max + 1, n_max + 1, |i, j| {
        if i == j {
            let n = i as f64;
            C64::new(0.5 * u * n * (n - 1.0) + delta * n, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Hermitian Bose-Hubbard Hamiltonian on the full truncated chain.
pub fn build_hamiltonian(shape: &FockShape, params: &BoseHubbardParams) -> Result<Observable> {
    let h = hamiltonian_matrix(shape, params, None)?;
    Observable::new(shape.system, h)
}

/// Hamiltonian matrix, optionally restricted to a set of basis states.
pub fn hamiltonian_matrix(shape: &FockShape, params: &BoseHubbardParams, basis: Option<&[usize]>) -> Result<CMat> {
    let k = shape.sites;
    params.validate(k)?;
    let b = local_annihilation(shape.n_max);
    let bd = b.adjoint();
    let build = |factors: &[(&[usize], &CMat)]| match basis {
        Some(bs) => product_in_basis(&shape.system, factors, bs),
        None => product_on_sites(&shape.system, factors),
    };
    let n = basis.map_or(shape.system.dim(), |bs| bs.len());
    let mut h = CMat::zeros(n, n);
    for s in 1..k {
        let j = params.hopping[s - 1];
        if j == 0.0 {
            continue;
        }
        let hop = build(&[(&[s], &bd), (&[s + 1], &b)])?;
        h -= (&hop + hop.adjoint()) * C64::new(j, 0.0);
    }
    for s in 1..=k {
        let local = onsite(shape.n_max, params.interaction[s - 1], params.offset[s - 1]);
        h += build(&[(&[s], &local)])?;
    }
    Ok(h)
}

/// Parameters of one two-site gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub j: f64,
    pub u: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub t: f64,
}

/// `exp(−iHt)` for the two-site Bose-Hubbard Hamiltonian.
pub fn bose_hubbard_gate(n_max: usize, p: &GateParams) -> Result<CMat> {
    if !(p.t >= 0.0) || !p.t.is_finite() {
        return Err(Error::invalid(format!("evolution time must be finite and nonnegative, got {}", p.t)));
    }
    let shape = FockShape::new(2, n_max, None)?;
    let params = BoseHubbardParams {
        hopping: vec![p.j],
        interaction: vec![p.u, p.u],
        offset: vec![p.delta1, p.delta2],
    };
    let h = hamiltonian_matrix(&shape, &params, None)?;
    Ok(evolution(&h, p.t))
}

/// `exp(−iHt)` by Hermitian eigendecomposition.
pub fn evolution(h: &CMat, t: f64) -> CMat {
    let (vals, vecs) = eigh(h);
    let phased = CMat::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * C64::from_polar(1.0, -vals[j] * t));
    phased * vecs.adjoint()
}

/// Distributions of the speckle gate ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeckleParams {
    pub j: f64,
    pub u: f64,
    pub delta_mean: f64,
    pub delta_sigma: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Return `U†` with probability 1/2.
    pub inversion_closed: bool,
}

impl Default for SpeckleParams {
    fn default() -> Self {
        Self { j: 1.0, u: 1.0, delta_mean: 0.0, delta_sigma: 1.0, t_min: 0.5, t_max: 1.5, inversion_closed: true }
    }
}

/// Two-site Bose-Hubbard gates with Gaussian offsets `Δ₁, Δ₂` and uniform times.
#[derive(Clone, Debug)]
pub struct SpeckleEnsemble {
    n_max: usize,
    params: SpeckleParams,
    delta: Normal<f64>,
    shape: SystemShape,
}

impl SpeckleEnsemble {
    pub fn new(n_max: usize, params: SpeckleParams) -> Result<Self> {
        let p = &params;
        if !(p.delta_sigma >= 0.0) || !p.delta_sigma.is_finite() {
            return Err(Error::invalid(format!("offset standard deviation must be ≥ 0, got {}", p.delta_sigma)));
        }
        if !(p.t_min >= 0.0 && p.t_min <= p.t_max) || !p.t_max.is_finite() {
            return Err(Error::invalid(format!("invalid time range [{}, {}]", p.t_min, p.t_max)));
        }
        if ![p.j, p.u, p.delta_mean].iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("speckle parameters must be finite"));
        }
        let delta = Normal::new(p.delta_mean, p.delta_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self { n_max, params, delta, shape: SystemShape::new(2, n_max + 1)? })
    }

    pub fn params(&self) -> &SpeckleParams {
        &self.params
    }

    pub fn draw_params(&self, rng: &mut ChaCha8Rng) -> GateParams {
        let p = &self.params;
        let delta1 = self.delta.sample(rng);
        let delta2 = self.delta.sample(rng);
        let t = if p.t_max > p.t_min { rng.random_range(p.t_min..p.t_max) } else { p.t_min };
        GateParams { j: p.j, u: p.u, delta1, delta2, t }
    }
}

impl UnitaryEnsemble for SpeckleEnsemble {
    fn shape(&self) -> SystemShape {
        self.shape
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> CMat {
        let g = self.draw_params(rng);
        let invert = self.params.inversion_closed && rng.random::<bool>();
        let u = bose_hubbard_gate(self.n_max, &g).expect("parameters validated on construction");
        if invert {
            u.adjoint()
        } else {
            u
        }
    }

    fn describe(&self) -> String {
        let p = &self.params;
        format!(
            "speckle(N_S={}, J={}, U={}, Δ~N({}, {}), t~U[{}, {}], inversion={})",
            self.n_max, p.j, p.u, p.delta_mean, p.delta_sigma, p.t_min, p.t_max, p.inversion_closed
        )
    }
}

/// Reading of the time-of-flight seed observable `w₀^{(i)}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TofReading {
    /// `Σ_j (b_j†b_{j+i} + h.c.)` over open-chain pairs at separation `i ≥ 1`.
    #[default]
    FixedSeparation,
    /// `Σ_{l≠i} (b_i†b_l + h.c.)`: hopping terms attached to site `i`.
    FixedSite,
}

/// Normalized, traceless time-of-flight observable.
pub fn tof_observable(i: usize, shape: &FockShape, reading: TofReading) -> Result<Observable> {
    let k = shape.sites;
    let pairs: Vec<(usize, usize)> = match reading {
        TofReading::FixedSeparation => (1..=k).filter(|&j| i >= 1 && j + i <= k).map(|j| (j, j + i)).collect(),
        TofReading::FixedSite => {
            shape.check_site(i)?;
            (1..=k).filter(|&l| l != i).map(|l| (i, l)).collect()
        }
    };
    if pairs.is_empty() {
        return Err(Error::invalid(format!("offset {i} gives an empty hopping sum on {k} sites")));
    }
    let b = local_annihilation(shape.n_max);
    let bd = b.adjoint();
    let d = shape.system.dim();
    let mut w = CMat::zeros(d, d);
    for (s, l) in pairs {
        let hop = product_on_sites(&shape.system, &[(&[s], &bd), (&[l], &b)])?;
        w += &hop + hop.adjoint();
    }
    Observable::new(shape.system, w)?.into_normalized()
}

/// Uniform grid on `[−π, π]` including both endpoints.
pub fn momentum_grid(points: usize) -> Result<Vec<f64>> {
    if points < 3 {
        return Err(Error::invalid("momentum grid needs at least 3 points"));
    }
    let pi = std::f64::consts::PI;
    Ok((0..points).map(|i| -pi + 2.0 * pi * i as f64 / (points - 1) as f64).collect())
}

/// Default grid size: 512 intervals.
pub const DEFAULT_GRID_POINTS: usize = 513;

/// `C_{sl} = ⟨b_s† b_l⟩` (0-based indices in the returned `k × k` matrix).
pub fn correlation_matrix(rho: &DensityMatrix, shape: &FockShape) -> Result<CMat> {
    if rho.shape() != shape.system {
        return Err(Error::DimensionMismatch { expected: shape.system.dim(), got: rho.dim() });
    }
    let k = shape.sites;
    let b = local_annihilation(shape.n_max);
    let bd = b.adjoint();
    let mut c = CMat::zeros(k, k);
    for s in 1..=k {
        for l in 1..=k {
            let op = if s == l {
                product_on_sites(&shape.system, &[(&[s], &(&bd * &b))])?
            } else {
                product_on_sites(&shape.system, &[(&[s], &bd), (&[l], &b)])?
            };
            // Tr(ρ O) = (O†, ρ).
            c[(s - 1, l - 1)] = hs_inner(&op.adjoint(), rho.matrix())?;
        }
    }
    Ok(c)
}

/// `S(p) = Σ_{s,l} e^{ip(s−l)} ⟨b_s†b_l⟩` on the grid.
pub fn quasimomentum_distribution(rho: &DensityMatrix, shape: &FockShape, grid: &[f64]) -> Result<Vec<f64>> {
    let c = correlation_matrix(rho, shape)?;
    Ok(distribution_from_correlations(&c, grid))
}

pub fn distribution_from_correlations(c: &CMat, grid: &[f64]) -> Vec<f64> {
    let k = c.nrows();
    grid.iter()
        .map(|&p| {
            let mut acc = C64::new(0.0, 0.0);
            for s in 0..k {
                for l in 0..k {
                    acc += C64::from_polar(1.0, p * (s as f64 - l as f64)) * c[(s, l)];
                }
            }
            acc.re
        })
        .collect()
}

fn trapezoid(values: &[C64], h: f64) -> C64 {
    let n = values.len();
    let inner: C64 = values[1..n - 1].iter().sum();
    (inner + (values[0] + values[n - 1]) * 0.5) * h
}

/// `(1/2π) ∫ e^{ipl} S(p) dp` by the trapezoid rule; errors when halving the grid changes the result by more than `tol`.
pub fn correlator_from_s(s: &[f64], grid: &[f64], l: i64, tol: f64) -> Result<C64> {
    let n = s.len();
    if n != grid.len() || n < 5 || n % 2 == 0 {
        return Err(Error::invalid("grid needs an odd number (≥ 5) of points matching S"));
    }
    let pi = std::f64::consts::PI;
    if (grid[0] + pi).abs() > 1e-12 || (grid[n - 1] - pi).abs() > 1e-12 {
        return Err(Error::invalid("grid must span [−π, π]"));
    }
    let h = grid[1] - grid[0];
    let vals: Vec<C64> = grid.iter().zip(s).map(|(&p, &sv)| C64::from_polar(1.0, p * l as f64) * sv).collect();
    let fine = trapezoid(&vals, h) / (2.0 * pi);
    let coarse_vals: Vec<C64> = vals.iter().step_by(2).copied().collect();
    let coarse = trapezoid(&coarse_vals, 2.0 * h) / (2.0 * pi);
    let residual = (fine - coarse).norm();
    if residual > tol {
        return Err(Error::InsufficientResolution { residual, tol });
    }
    Ok(fine)
}

/// `Σ_s ⟨b_s† b_{s+l}⟩` read off the correlation matrix.
pub fn direct_correlator(c: &CMat, l: i64) -> C64 {
    let k = c.nrows() as i64;
    (0..k).filter(|s| (0..k).contains(&(s + l))).map(|s| c[(s as usize, (s + l) as usize)]).sum()
}
