//! Measurement simulation, trace-norm reconstruction, and tomography of local
//! reduced density matrices through light-cone evolution of local observables.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::circuits::{Boundary, CircuitSchedule, Direction, GateEnsemble};
use crate::error::{Error, Result};
use crate::frames::{herm_coords, herm_from_coords, monte_carlo_frame, FrameEstimate, ObservableMeasure};
use crate::hilbert::{
    eigh, embed_operator, hermitian_operator_norm, hermitian_part, hs_inner, partial_trace, product_on_sites, CMat,
    DensityMatrix, Observable, SystemShape, C64,
};
use crate::rng::{derive_seed, rng_for};

/// Number of projective measurements per record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shots {
    Exact,
    Finite(usize),
}

impl Shots {
    pub fn count(&self) -> Option<usize> {
        match self {
            Self::Exact => None,
            Self::Finite(n) => Some(*n),
        }
    }
}

/// Estimated expectation value of one observable.
#[derive(Clone, Debug)]
pub struct MeasurementRecord {
    pub observable: CMat,
    pub value: f64,
    /// `None` for exact expectations.
    pub shots: Option<usize>,
    pub stderr: f64,
    /// Schedule descriptor when the observable came from a circuit.
    pub source: Option<String>,
    /// Number of sites preceding the sub-chain the circuit acted on.
    pub offset: Option<usize>,
}

/// Born statistics of `w` in `ρ`: exact `(w, ρ)` or the mean of i.i.d. eigenvalue outcomes.
pub fn simulate_measurement(rho: &DensityMatrix, w: &CMat, shots: Shots, seed: u64) -> Result<MeasurementRecord> {
    if w.nrows() != rho.dim() || w.ncols() != rho.dim() {
        return Err(Error::DimensionMismatch { expected: rho.dim(), got: w.nrows() });
    }
    let exact = rho.expectation(w)?;
    let (value, stderr, count) = match shots {
        Shots::Exact => (exact, 0.0, None),
        Shots::Finite(0) => return Err(Error::invalid("shots must be positive")),
        Shots::Finite(n) => {
            let (vals, vecs) = eigh(&hermitian_part(w));
            let probs: Vec<f64> = (0..vals.len())
                .map(|j| {
                    let v = vecs.column(j);
                    (v.adjoint() * rho.matrix() * v)[(0, 0)].re.max(0.0)
                })
                .collect();
            let (mean, se) = sample_outcomes(vals.as_slice(), &probs, n, &mut rng_for(seed, &[]));
            (mean, se, Some(n))
        }
    };
    Ok(MeasurementRecord { observable: w.clone(), value, shots: count, stderr, source: None, offset: None })
}

/// Mean and standard error of `n` draws of `values` with probabilities `probs`.
fn sample_outcomes(values: &[f64], probs: &[f64], n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let total: f64 = probs.iter().sum();
    let mut remaining = n as u64;
    let mut mass = total;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (j, (&v, &p)) in values.iter().zip(probs).enumerate() {
        if remaining == 0 {
            break;
        }
        let c = if j + 1 == values.len() || mass <= p {
            remaining
        } else {
            let q = (p / mass).clamp(0.0, 1.0);
            Binomial::new(remaining, q).expect("valid binomial").sample(rng)
        };
        remaining -= c;
        mass -= p;
        s1 += c as f64 * v;
        s2 += c as f64 * v * v;
    }
    let nf = n as f64;
    let mean = s1 / nf;
    let var = if n > 1 { ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    (mean, (var / nf).sqrt())
}

/// Records for `m` observables drawn from `measure`.
pub fn sample_records(
    rho: &DensityMatrix,
    measure: &ObservableMeasure,
    m: usize,
    shots: Shots,
    seed: u64,
) -> Result<Vec<MeasurementRecord>> {
    (0..m as u64)
        .map(|i| {
            let w = measure.sample(seed, i).matrix;
            simulate_measurement(rho, &w, shots, derive_seed(seed, &[1, i]))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IncoherenceReport {
    /// `‖w₀‖∞²`.
    pub norm_sq: f64,
    /// `λ/d`.
    pub bound: f64,
    /// `λ/d − ‖w₀‖∞²`.
    pub margin: f64,
    /// Smallest `λ` that passes: `d‖w₀‖∞²`.
    pub lambda_needed: f64,
    pub passes: bool,
}

/// `‖w₀‖∞² ≤ λ/d`; for induced measures this covers every draw by unitary invariance.
pub fn incoherence_check(w0: &Observable, lambda: f64) -> IncoherenceReport {
    let d = w0.dim() as f64;
    let norm_sq = hermitian_operator_norm(w0.matrix()).powi(2);
    let bound = lambda / d;
    IncoherenceReport { norm_sq, bound, margin: bound - norm_sq, lambda_needed: d * norm_sq, passes: norm_sq <= bound }
}

#[derive(Clone, Copy, Debug)]
pub struct CsOptions {
    /// Constraint residual accepted for exact records.
    pub tol: f64,
    /// Relative change of `‖σ‖₁` between iterations.
    pub objective_tol: f64,
    pub max_iter: usize,
    /// Douglas-Rachford step (soft-threshold level).
    pub step: f64,
    /// Weight of the inverse-variance penalty for noisy records.
    pub penalty: f64,
    /// Rank used in the feasibility bound `1/(8√r)`.
    pub rank_hint: usize,
}

impl Default for CsOptions {
    fn default() -> Self {
        Self { tol: 1e-6, objective_tol: 1e-7, max_iter: 20_000, step: 0.05, penalty: 1.0, rank_hint: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    /// Hermitian solver output.
    pub raw: CMat,
    /// `raw` with negative eigenvalues removed and unit trace.
    pub estimate: DensityMatrix,
    /// `‖raw‖₁`.
    pub objective: f64,
    /// Largest `|(w_i, σ) − y_i|` for exact records, RMS of `(·)/stderr_i` for noisy ones.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Frame-defect threshold `1/(8√r)` below which recovery is guaranteed.
    pub feasibility_bound: f64,
}

impl ReconstructionResult {
    /// `⟨ψ|σ̂|ψ⟩` for the projected estimate.
    pub fn fidelity_with_pure(&self, psi: &DVector<C64>) -> f64 {
        (psi.adjoint() * self.estimate.matrix() * psi)[(0, 0)].re
    }
}

fn trace_norm_prox(x: &DVector<f64>, d: usize, t: f64) -> (DVector<f64>, f64) {
    let (vals, vecs) = eigh(&herm_from_coords(x, d));
    let shrunk: Vec<f64> = vals.iter().map(|&l| l.signum() * (l.abs() - t).max(0.0)).collect();
    let m = CMat::from_fn(d, d, |i, j| {
        (0..d).map(|a| vecs[(i, a)] * shrunk[a] * vecs[(j, a)].conj()).sum()
    });
    (herm_coords(&m), shrunk.iter().map(|l| l.abs()).sum())
}

fn trace_norm(x: &DVector<f64>, d: usize) -> f64 {
    eigh(&herm_from_coords(x, d)).0.iter().map(|l| l.abs()).sum()
}

/// PSD part with unit trace (maximally mixed when nothing survives).
pub fn project_to_state(shape: SystemShape, m: &CMat) -> Result<DensityMatrix> {
    let (vals, vecs) = eigh(&hermitian_part(m));
    let d = m.nrows();
    let kept: Vec<f64> = vals.iter().map(|&l| l.max(0.0)).collect();
    let tr: f64 = kept.iter().sum();
    if tr <= 0.0 {
        return Ok(DensityMatrix::maximally_mixed(shape));
    }
    let rho = CMat::from_fn(d, d, |i, j| (0..d).map(|a| vecs[(i, a)] * (kept[a] / tr) * vecs[(j, a)].conj()).sum());
    DensityMatrix::new(shape, hermitian_part(&rho))
}

/// Trace-norm minimization under the measured constraints by Douglas-Rachford splitting.
///
/// Exact records are hard constraints; when any record carries shot noise the
/// constraints become the penalty `(μ/2) Σ ((w_i, σ) − y_i)² / s_i²`.
pub fn cs_reconstruct(records: &[MeasurementRecord], shape: SystemShape, opts: &CsOptions) -> Result<ReconstructionResult> {
    let first = records.first().ok_or_else(|| Error::invalid("no measurement records"))?;
    let d = shape.dim();
    if first.observable.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, got: first.observable.nrows() });
    }
    let n = d * d;
    let m = records.len();
    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut y = DVector::<f64>::zeros(m);
    for (i, r) in records.iter().enumerate() {
        if r.observable.nrows() != d || r.observable.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.observable.nrows() });
        }
        a.set_row(i, &herm_coords(&r.observable).transpose());
        y[i] = r.value;
    }
    let noisy = records.iter().any(|r| r.shots.is_some());
    let gamma = opts.step;

    // Second proximal map: affine projection (exact) or penalized least squares (noisy).
    let prox_g: Box<dyn Fn(&DVector<f64>) -> DVector<f64>> = if !noisy {
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let cutoff = 1e-10 * smax.max(f64::MIN_POSITIVE);
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cutoff).collect();
        let vr = DMatrix::from_fn(n, keep.len(), |i, j| vt[(keep[j], i)]);
        let coef = DVector::from_fn(keep.len(), |j, _| u.column(keep[j]).dot(&y) / svd.singular_values[keep[j]]);
        let x0 = &vr * coef;
        Box::new(move |v: &DVector<f64>| v - &vr * (vr.transpose() * v) + &x0)
    } else {
        let variances: Vec<f64> = records.iter().map(|r| r.stderr * r.stderr).collect();
        let mut positive: Vec<f64> = variances.iter().copied().filter(|&v| v > 0.0).collect();
        positive.sort_by(f64::total_cmp);
        let floor = positive.get(positive.len() / 2).copied().unwrap_or(1.0) * 1e-3;
        let weights: Vec<f64> = variances.iter().map(|&v| 1.0 / v.max(floor)).collect();
        let mut wa = a.clone();
        for (i, w) in weights.iter().enumerate() {
            wa.row_mut(i).scale_mut(*w);
        }
        let c = gamma * opts.penalty;
        let mut lhs = a.transpose() * &wa * c;
        for i in 0..n {
            lhs[(i, i)] += 1.0;
        }
        let chol = lhs.cholesky().ok_or_else(|| Error::invalid("penalty system is not positive definite"))?;
        let rhs0 = wa.transpose() * &y * c;
        Box::new(move |v: &DVector<f64>| chol.solve(&(v + &rhs0)))
    };

    let mut z = prox_g(&DVector::zeros(n));
    let mut best = z.clone();
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let (x, _) = trace_norm_prox(&z, d, gamma);
        let p = prox_g(&(x.scale(2.0) - &z));
        let gap = (&p - &x).norm();
        z += &p - &x;
        let obj = trace_norm(&p, d);
        best = p;
        let stalled = (obj - prev_obj).abs() <= opts.objective_tol * obj.max(1e-300);
        if stalled && gap <= opts.tol.max(1e-12) {
            converged = true;
            break;
        }
        prev_obj = obj;
    }
    let fitted = &a * &best - &y;
    let residual = if noisy {
        let chi: f64 = records
            .iter()
            .zip(fitted.iter())
            .map(|(r, f)| if r.stderr > 0.0 { (f / r.stderr).powi(2) } else { 0.0 })
            .sum();
        (chi / m as f64).sqrt()
    } else {
        fitted.amax()
    };
    if !noisy && residual > opts.tol {
        converged = false;
    }
    let raw = herm_from_coords(&best, d);
    let estimate = project_to_state(shape, &raw)?;
    Ok(ReconstructionResult {
        objective: trace_norm(&best, d),
        raw,
        estimate,
        residual,
        iterations,
        converged,
        feasibility_bound: 1.0 / (8.0 * (opts.rank_hint.max(1) as f64).sqrt()),
    })
}

/// Operator on `sites` consecutive sites starting at `start` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTerm {
    pub start: usize,
    pub sites: usize,
    pub op: CMat,
}

/// `w₀ = Σ_i v_i ⊗ 𝟙_{R_i}/√d_{R_i}` with each `v_i` on a short block.
#[derive(Clone, Debug)]
pub struct LocalSum {
    shape: SystemShape,
    terms: Vec<LocalTerm>,
}

fn sites_of(dim: usize, local_dim: usize) -> Option<usize> {
    let mut s = 0;
    let mut p = 1;
    while p < dim {
        p *= local_dim;
        s += 1;
    }
    (p == dim).then_some(s)
}

impl LocalSum {
    pub fn new(shape: SystemShape, terms: Vec<(usize, CMat)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("a local sum needs at least one term"));
        }
        let mut out = Vec::with_capacity(terms.len());
        for (start, op) in terms {
            let sites = sites_of(op.nrows(), shape.local_dim())
                .filter(|_| op.is_square())
                .ok_or_else(|| Error::invalid(format!("term of dimension {} is not a power of d_l", op.nrows())))?;
            if start == 0 || sites == 0 || start + sites - 1 > shape.sites() {
                return Err(Error::InvalidSite { site: start, sites: shape.sites() });
            }
            out.push(LocalTerm { start, sites, op: hermitian_part(&op) });
        }
        Ok(Self { shape, terms: out })
    }

    /// A single normalized observable placed at `position`.
    pub fn single(shape: SystemShape, v: &Observable, position: usize) -> Result<Self> {
        Self::new(shape, vec![(position, v.matrix().clone())])
    }

    pub fn shape(&self) -> SystemShape {
        self.shape
    }

    pub fn terms(&self) -> &[LocalTerm] {
        &self.terms
    }

    /// The full `d × d` operator.
    pub fn to_dense(&self) -> Result<CMat> {
        let d = self.shape.dim();
        let mut w = CMat::zeros(d, d);
        for t in &self.terms {
            let sites: Vec<usize> = (t.start..t.start + t.sites).collect();
            let rest = (self.shape.local_dim() as f64).powi((self.shape.sites() - t.sites) as i32);
            w += embed_operator(&t.op, &sites, &self.shape)?.unscale(rest.sqrt());
        }
        Ok(w)
    }
}

/// Heisenberg-evolved term: `op` on sites `start..start+len` tensored with `𝟙/√d_rest`.
#[derive(Clone, Debug)]
pub struct EvolvedTerm {
    pub start: usize,
    pub len: usize,
    pub op: CMat,
}

fn region_shape(len: usize, local_dim: usize) -> Result<SystemShape> {
    SystemShape::with_max_dim(len, local_dim, usize::MAX)
}

/// `X (𝟙 ⊗ g ⊗ 𝟙)` with the two-site gate `g` on sites `site, site+1` of a `len`-site region.
fn right_multiply_pair(x: &CMat, g: &CMat, site: usize, len: usize, local_dim: usize) -> CMat {
    let pair = local_dim * local_dim;
    let lo = local_dim.pow((len - site - 1) as u32);
    let hi = local_dim.pow((site - 1) as u32);
    let d = x.nrows();
    let mut out = CMat::zeros(d, d);
    let mut v = vec![C64::new(0.0, 0.0); pair];
    for r in 0..d {
        for h in 0..hi {
            for l in 0..lo {
                let col = |m: usize| (h * pair + m) * lo + l;
                for (m, slot) in v.iter_mut().enumerate() {
                    *slot = x[(r, col(m))];
                }
                for m in 0..pair {
                    let mut acc = C64::new(0.0, 0.0);
                    for (mp, val) in v.iter().enumerate() {
                        acc += val * g[(mp, m)];
                    }
                    out[(r, col(m))] = acc;
                }
            }
        }
    }
    out
}

/// Evolves each term through a circuit acting on sites `offset+1..=offset+k_s`, tracking only its light cone.
pub fn evolve_terms(terms: &[LocalTerm], schedule: &CircuitSchedule, offset: usize, local_dim: usize) -> Result<Vec<EvolvedTerm>> {
    if schedule.boundary() == Boundary::Periodic {
        return Err(Error::invalid("light-cone evolution needs an open-boundary schedule"));
    }
    if schedule.shape().local_dim() != local_dim {
        return Err(Error::DimensionMismatch { expected: local_dim, got: schedule.shape().local_dim() });
    }
    let layers: Vec<Vec<(usize, CMat)>> = (0..schedule.depth())
        .map(|t| schedule.layer_gates(t).into_iter().map(|(b, g)| (b.first + offset, g)).collect())
        .collect();
    let pad = (local_dim as f64).sqrt();
    terms
        .iter()
        .map(|t| {
            let (mut lo, mut hi) = (t.start, t.start + t.sites - 1);
            let mut op = t.op.clone();
            for layer in layers.iter().rev() {
                let touching: Vec<&(usize, CMat)> =
                    layer.iter().filter(|(a, _)| *a + 1 >= lo && *a <= hi).collect();
                if touching.is_empty() {
                    continue;
                }
                let new_lo = touching.iter().map(|(a, _)| *a).min().unwrap().min(lo);
                let new_hi = touching.iter().map(|(a, _)| a + 1).max().unwrap().max(hi);
                let shape = region_shape(new_hi - new_lo + 1, local_dim)?;
                if (new_lo, new_hi) != (lo, hi) {
                    let sites: Vec<usize> = (lo - new_lo + 1..=hi - new_lo + 1).collect();
                    let added = (new_hi - new_lo) - (hi - lo);
                    op = embed_operator(&op, &sites, &shape)?.unscale(pad.powi(added as i32));
                    lo = new_lo;
                    hi = new_hi;
                }
                let len = shape.sites();
                for (a, g) in &touching {
                    // G† X G = ((X G)† G)†.
                    let xg = right_multiply_pair(&op, g, a - lo + 1, len, local_dim);
                    op = right_multiply_pair(&xg.adjoint(), g, a - lo + 1, len, local_dim).adjoint();
                }
            }
            Ok(EvolvedTerm { start: lo, len: hi - lo + 1, op: hermitian_part(&op) })
        })
        .collect()
}

/// `Tr_{R_q}` of `Σ op_i ⊗ 𝟙/√d_rest` on the block `q..q+l−1` of a `k`-site chain.
pub fn reduce_evolved(terms: &[EvolvedTerm], sites: usize, local_dim: usize, q: usize, l: usize) -> Result<CMat> {
    let block_shape = region_shape(l, local_dim)?;
    let db = block_shape.dim();
    let dl = local_dim as f64;
    let mut out = CMat::zeros(db, db);
    for t in terms {
        let region: Vec<usize> = (t.start..t.start + t.len).collect();
        let inside: Vec<usize> = region.iter().copied().filter(|&s| s >= q && s < q + l).collect();
        let rest = sites - t.len;
        let block_outside = l - inside.len();
        let scale = dl.powi((rest - block_outside) as i32) / dl.powf(rest as f64 / 2.0);
        let rshape = region_shape(t.len, local_dim)?;
        if inside.is_empty() {
            let tr = t.op.trace();
            for i in 0..db {
                out[(i, i)] += tr * scale;
            }
            continue;
        }
        let keep: Vec<usize> = inside.iter().map(|s| s - t.start + 1).collect();
        let reduced = partial_trace(&t.op, &rshape, &keep)?;
        let block_sites: Vec<usize> = inside.iter().map(|s| s - q + 1).collect();
        out += embed_operator(&reduced, &block_sites, &block_shape)?.scale(scale);
    }
    Ok(out)
}

fn check_block(shape: &SystemShape, q: usize, l: usize) -> Result<()> {
    if l == 0 || q == 0 || q + l - 1 > shape.sites() {
        return Err(Error::InvalidSite { site: q + l.max(1) - 1, sites: shape.sites() });
    }
    Ok(())
}

/// `Tr_{R_q}(U† w₀ U)` from light-cone blocks only.
pub fn evolved_local_observable(w0: &LocalSum, schedule: &CircuitSchedule, q: usize, l: usize) -> Result<CMat> {
    let shape = w0.shape();
    if schedule.shape() != shape {
        return Err(Error::DimensionMismatch { expected: shape.dim(), got: schedule.shape().dim() });
    }
    check_block(&shape, q, l)?;
    let evolved = evolve_terms(w0.terms(), schedule, 0, shape.local_dim())?;
    reduce_evolved(&evolved, shape.sites(), shape.local_dim(), q, l)
}

/// Full-space reference for [`evolved_local_observable`].
pub fn evolved_local_observable_dense(w0: &LocalSum, schedule: &CircuitSchedule, q: usize, l: usize) -> Result<CMat> {
    let shape = w0.shape();
    check_block(&shape, q, l)?;
    let ev = schedule.apply_circuit(&w0.to_dense()?, Direction::Heisenberg)?;
    let keep: Vec<usize> = (q..q + l).collect();
    partial_trace(&ev, &shape, &keep)
}

#[derive(Clone, Debug)]
pub struct ReducedDefectReport {
    /// Defect of the frame of direction-normalized reduced observables.
    pub defect: f64,
    pub stderr: f64,
    /// Defect of the frame of the reduced observables `Tr_{R_q} w/√d_{R_q}` as they are.
    pub raw_defect: f64,
    pub raw_stderr: f64,
    pub samples: usize,
    pub block_dim: usize,
}

fn reduced_draw(w0: &LocalSum, template: &CircuitSchedule, q: usize, l: usize, seed: u64, i: u64) -> Result<Option<CMat>> {
    let shape = w0.shape();
    let db = shape.local_dim().pow(l as u32);
    let mut rng = rng_for(seed, &[0, i]);
    if rng.random::<f64>() < 1.0 / (db * db) as f64 {
        return Ok(None);
    }
    let schedule = template.with_seed(derive_seed(seed, &[1, i]));
    let dr = (shape.local_dim() as f64).powi((shape.sites() - l) as i32);
    Ok(Some(evolved_local_observable(w0, &schedule, q, l)?.unscale(dr.sqrt())))
}

/// Monte-Carlo `‖W_B − id‖` for the reduced observables of a circuit family on the block `q..q+l−1`.
///
/// Reduced observables `Tr_{R_q}(w)/√d_{R_q}` are drawn with the atom `𝟙_B/√d_B` at weight `1/d_B²`.
/// The primary value uses them normalized to unit Frobenius norm; `raw_defect` uses them as they are.
pub fn reduced_defect(
    template: &CircuitSchedule,
    w0: &LocalSum,
    q: usize,
    l: usize,
    samples: usize,
    seed: u64,
) -> Result<ReducedDefectReport> {
    let shape = w0.shape();
    check_block(&shape, q, l)?;
    if template.shape() != shape {
        return Err(Error::DimensionMismatch { expected: shape.dim(), got: template.shape().dim() });
    }
    let db = shape.local_dim().pow(l as u32);
    let draws: Vec<Option<CMat>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| reduced_draw(w0, template, q, l, seed, i))
        .collect::<Result<_>>()?;
    let identity = CMat::identity(db, db).unscale((db as f64).sqrt());
    let draw = |i: u64, normalize: bool| -> CMat {
        match draws[i as usize].clone() {
            None => identity.clone(),
            Some(a) if normalize => {
                let n = a.norm();
                if n > 1e-12 {
                    a.unscale(n)
                } else {
                    CMat::zeros(db, db)
                }
            }
            Some(a) => a,
        }
    };
    let normalized: FrameEstimate = monte_carlo_frame(db, samples, |i| draw(i, true))?;
    let raw: FrameEstimate = monte_carlo_frame(db, samples, |i| draw(i, false))?;
    Ok(ReducedDefectReport {
        defect: normalized.defect,
        stderr: normalized.defect_stderr,
        raw_defect: raw.defect,
        raw_stderr: raw.defect_stderr,
        samples,
        block_dim: db,
    })
}

/// Block-local tomography settings: circuits act only inside each block.
#[derive(Clone, Debug)]
pub struct RdmOptions {
    pub block_len: usize,
    pub depth: usize,
    pub samples: usize,
    pub shots: Shots,
    pub seed: u64,
    pub gates: GateEnsemble,
    /// Normalized traceless observable placed at the first site of each block.
    pub seed_term: Observable,
}

#[derive(Clone, Debug)]
pub struct RdmEstimate {
    pub start: usize,
    pub len: usize,
    /// Hermitian, unit trace.
    pub estimate: CMat,
    /// Trace of the inversion before correction.
    pub raw_trace: f64,
    /// Propagated Frobenius standard error (zero for exact data).
    pub stderr: f64,
    /// `s_max / s_min` of the design matrix.
    pub condition: f64,
    /// Block-level records; observables are `Tr_{R_q} w / d_{R_q}`, identity atoms have no source.
    pub records: Vec<MeasurementRecord>,
}

/// Linear-inversion estimates of all `l`-site reduced density matrices.
pub fn estimate_rdms(rho: &DensityMatrix, opts: &RdmOptions) -> Result<Vec<RdmEstimate>> {
    let shape = rho.shape();
    let l = opts.block_len;
    let dl = shape.local_dim();
    if l == 0 || l > shape.sites() {
        return Err(Error::invalid(format!("block length {l} outside 1..={}", shape.sites())));
    }
    if opts.gates.local_dim() != dl || opts.seed_term.shape().local_dim() != dl {
        return Err(Error::DimensionMismatch { expected: dl, got: opts.gates.local_dim() });
    }
    let m_sites = opts.seed_term.shape().sites();
    if m_sites > l {
        return Err(Error::invalid("seed term is wider than the block"));
    }
    let block_shape = region_shape(l, dl)?;
    let template = CircuitSchedule::new(block_shape, opts.depth, 0, opts.gates.clone())?;
    let db = block_shape.dim();
    let n = db * db;
    if opts.samples + 1 < n {
        return Err(Error::RankDeficient { rank: opts.samples + 1, needed: n, condition: f64::INFINITY });
    }
    let term = LocalTerm { start: 1, sites: m_sites, op: opts.seed_term.matrix().clone() };
    let root_db = (db as f64).sqrt();
    (1..=shape.sites() - l + 1)
        .map(|q| {
            let keep: Vec<usize> = (q..q + l).collect();
            let rho_b = rho.reduce(&keep)?;
            let mut a = DMatrix::<f64>::zeros(opts.samples + 1, n);
            let mut y = DVector::<f64>::zeros(opts.samples + 1);
            let mut var = DVector::<f64>::zeros(opts.samples + 1);
            let mut records = Vec::with_capacity(opts.samples);
            for i in 0..opts.samples {
                let path = [q as u64, i as u64];
                let mut rng = rng_for(opts.seed, &path);
                let (obs, source) = if rng.random::<f64>() < 1.0 / (db * db) as f64 {
                    (CMat::identity(db, db).unscale(root_db), None)
                } else {
                    let schedule = template.with_seed(derive_seed(opts.seed, &[1, q as u64, i as u64]));
                    let ev = evolve_terms(std::slice::from_ref(&term), &schedule, 0, dl)?;
                    (reduce_evolved(&ev, l, dl, 1, l)?, Some(schedule.descriptor()))
                };
                // `w = obs ⊗ 𝟙_R/√d_R` has the statistics of `obs/√d_R` on ρ_B; rows are scaled alike.
                let dr = (dl as f64).powi((shape.sites() - l) as i32).sqrt();
                let w = obs.unscale(dr);
                let mut rec = simulate_measurement(&rho_b, &w, opts.shots, derive_seed(opts.seed, &[2, q as u64, i as u64]))?;
                a.set_row(i, &herm_coords(&w).transpose());
                y[i] = rec.value;
                var[i] = rec.stderr * rec.stderr;
                rec.source = source;
                rec.offset = Some(q - 1);
                records.push(rec);
            }
            let last = opts.samples;
            a.set_row(last, &herm_coords(&CMat::identity(db, db)).transpose());
            y[last] = 1.0;

            let svd = a.svd(true, true);
            let s = &svd.singular_values;
            let smax = s.max();
            let cutoff = 1e-8 * smax;
            let rank = s.iter().filter(|&&x| x > cutoff).count();
            let smin = s.min();
            let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if rank < n {
                return Err(Error::RankDeficient { rank, needed: n, condition });
            }
            let pinv = svd.pseudo_inverse(cutoff).map_err(|e| Error::invalid(e.to_string()))?;
            let x = &pinv * &y;
            let mut cov_trace = 0.0;
            for r in 0..n {
                for c in 0..pinv.ncols() {
                    cov_trace += pinv[(r, c)].powi(2) * var[c];
                }
            }
            let raw = hermitian_part(&herm_from_coords(&x, db));
            let raw_trace = raw.trace().re;
            let mut est = raw;
            for i in 0..db {
                est[(i, i)] += C64::new((1.0 - raw_trace) / db as f64, 0.0);
            }
            Ok(RdmEstimate { start: q, len: l, estimate: est, raw_trace, stderr: cov_trace.sqrt(), condition, records })
        })
        .collect()
}

/// Statement attached to every certification that relies on reduced density matrices alone.
pub const LOCAL_CERTIFICATE_CAVEAT: &str = "Matching every l-site reduced density matrix does not by itself \
identify the global state: long-range correlations that no l-site block can see are left unconstrained.";

#[derive(Clone, Debug)]
pub struct CertificationReport {
    /// `(q, ‖Tr_{R_q} ρ_c − ρ̂_q‖₂)`.
    pub blocks: Vec<(usize, f64)>,
    pub max_defect: f64,
    pub tol: f64,
    pub passes: bool,
    /// Present unless the caller asserts an injectivity assumption.
    pub caveat: Option<&'static str>,
}

/// Largest Frobenius distance between the candidate's reduced density matrices and the estimates.
pub fn certify_candidate(
    candidate: &DensityMatrix,
    estimates: &[RdmEstimate],
    tol: f64,
    assume_injective: bool,
) -> Result<CertificationReport> {
    let shape = candidate.shape();
    let mut blocks = Vec::with_capacity(estimates.len());
    for e in estimates {
        check_block(&shape, e.start, e.len)?;
        let db = shape.local_dim().pow(e.len as u32);
        if e.estimate.nrows() != db {
            return Err(Error::DimensionMismatch { expected: db, got: e.estimate.nrows() });
        }
        let keep: Vec<usize> = (e.start..e.start + e.len).collect();
        let r = candidate.reduce(&keep)?;
        blocks.push((e.start, (r.matrix() - &e.estimate).norm()));
    }
    let max_defect = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
    Ok(CertificationReport {
        blocks,
        max_defect,
        tol,
        passes: max_defect <= tol,
        caveat: (!assume_injective).then_some(LOCAL_CERTIFICATE_CAVEAT),
    })
}

/// Replaces site `site` of `ρ` by the maximally mixed state with probability `p`.
pub fn depolarize_site(rho: &DensityMatrix, site: usize, p: f64) -> Result<DensityMatrix> {
    let shape = rho.shape();
    shape.check_site(site)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("depolarizing probability {p} outside [0, 1]")));
    }
    let others: Vec<usize> = (1..=shape.sites()).filter(|&s| s != site).collect();
    let dl = shape.local_dim();
    let mixed_site = CMat::identity(dl, dl).unscale(dl as f64);
    let replaced = if others.is_empty() {
        mixed_site
    } else {
        let rest = partial_trace(rho.matrix(), &shape, &others)?;
        product_on_sites(&shape, &[(&others, &rest), (&[site], &mixed_site)])?
    };
    DensityMatrix::new(shape, rho.matrix().scale(1.0 - p) + replaced.scale(p))
}

/// Translation-invariant matrix product state with random tensors of bond dimension `bond`.
pub fn random_translation_invariant_mps(shape: SystemShape, bond: usize, rng: &mut ChaCha8Rng) -> Result<DensityMatrix> {
    let dl = shape.local_dim();
    let tensors: Vec<CMat> = (0..dl).map(|_| crate::hilbert::ginibre(bond, bond, rng)).collect();
    let left = crate::hilbert::ginibre(1, bond, rng);
    let right = crate::hilbert::ginibre(bond, 1, rng);
    let d = shape.dim();
    let mut psi = DVector::<C64>::zeros(d);
    for (idx, amp) in psi.iter_mut().enumerate() {
        let mut v = left.clone();
        for digit in shape.digits(idx) {
            v = v * &tensors[digit];
        }
        *amp = (v * &right)[(0, 0)];
    }
    let n = psi.norm();
    DensityMatrix::pure(shape, &psi.unscale(n))
}

/// Frobenius inner product check used by tests and reports: `Tr(ρ w)`.
pub fn expectation_of(rho: &DensityMatrix, w: &CMat) -> Result<f64> {
    Ok(hs_inner(w, rho.matrix())?.re)
}
