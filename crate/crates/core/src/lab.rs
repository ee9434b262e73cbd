//! Numerical experiments on the scan objectives.
//!
//! For data `d = L₀sη + n` with `Var(s) = Q²` and noise covariance `N`, the
//! expected sLORETA power of a candidate `A` under metric `C` splits into
//!
//! ```text
//! signal(A) = Q² ηᵀL₀ᵀCA (AᵀCA)⁻¹ AᵀCL₀η
//! noise(A)  = Tr((AᵀCA)⁻¹ AᵀCNCA)
//! ```
//!
//! and `E[rv_C(A)] = E‖d‖²_C − signal(A) − noise(A)`. The signal part peaks at
//! any `A` whose range holds `L₀η`; the noise part is constant exactly when
//! `C ∝ N⁻¹`, otherwise its derivative
//!
//! ```text
//! Dnoise(A)(B) = 2 Tr(B [(AᵀCA)⁻¹AᵀCNC − (AᵀCA)⁻¹AᵀCNCA(AᵀCA)⁻¹AᵀC])
//! ```
//!
//! vanishes iff `CN·Ker(Aᵀ) = Ker(Aᵀ)`, and an ascent step away from `L₀`
//! produces a candidate the scan prefers over the truth.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::beamformer::{
    derived_constants, nai_sam_transform, nai_tilde, power_nai_vector, power_sam_vector,
    BeamformerInputs, DerivedConstants,
};
use crate::error::{Error, Result};
use crate::forward::{analytic_covariance, simulate_samples, CandidateGrid, CovariancePair, SourceScenario};
use crate::linalg::{has_full_column_rank, left_null_space, symmetrize, thin_svd, Metric};
use crate::scan::{
    argmax_with_ties, check_gram, gof, sloreta_power, sloreta_power_batch, weighted_ls_fit,
};
use crate::{Mat, Vector};

/// Relative step of the central finite difference.
pub const FD_STEP: f64 = 1e-5;
/// `CN` is treated as a multiple of the identity below this normalized distance.
pub const WHITENING_TOL: f64 = 1e-10;
/// Relative residual below which `CN` leaves `Ker(Aᵀ)` invariant.
pub const KERNEL_TOL: f64 = 1e-9;
/// Directional derivatives below this fraction of their natural scale count as zero.
pub const ZERO_GRADIENT_TOL: f64 = 1e-8;
pub const KERNEL_DIRECTIONS: usize = 50;
pub const WITNESS_INITIAL_STEP: f64 = 1e-2;
pub const WITNESS_HALVINGS: usize = 60;
/// A witness must beat the truth by this fraction of its objective.
pub const WITNESS_MARGIN: f64 = 1e-12;
pub const BALANCE_TOL: f64 = 1e-9;
pub const REFINE_DRAWS: usize = 50;
pub const REFINE_INITIAL_SIZE: f64 = 1e-3;
/// GOF of a refined leadfield must undercut the truth by more than this.
pub const GOF_MARGIN: f64 = 1e-12;
/// Candidate pairs whose GOF differ by less than this are not ordered.
pub const ORDER_TOL: f64 = 1e-10;

type Chol = Cholesky<f64, Dyn>;

fn gram_factor(c: &Metric, a: &Mat) -> Result<Chol> {
    c.check_dim(a.nrows())?;
    if !has_full_column_rank(a) {
        return Err(Error::DegenerateCandidate);
    }
    let g = c.gram(a);
    check_gram(&g)?;
    Cholesky::new(g).ok_or(Error::DegenerateCandidate)
}

fn check_square(m: &Mat, n: usize, what: &str) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: format!("{n}x{n} {what}"),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedScanObjective {
    pub signal_term: f64,
    pub noise_term: f64,
    pub total: f64,
}

/// Analytic `E‖j^sLORETA(d, A)‖²` for the scenario's data model.
pub fn expected_power_terms(
    c: &Metric,
    a: &Mat,
    sc: &SourceScenario,
) -> Result<ExpectedScanObjective> {
    objective_terms(c, a, &sc.effective_source().x, sc.noise_cov())
}

/// Same as [`expected_power_terms`] for an explicit source vector `x` and noise `N`.
pub fn objective_terms(
    c: &Metric,
    a: &Mat,
    x: &Vector,
    noise: &Mat,
) -> Result<ExpectedScanObjective> {
    let chol = gram_factor(c, a)?;
    check_square(noise, c.dim(), "noise covariance")?;
    let ca = c.matrix() * a;
    let b = ca.transpose() * x;
    let signal_term = b.dot(&chol.solve(&b));
    let noise_term = chol.solve(&(ca.transpose() * noise * &ca)).trace();
    Ok(ExpectedScanObjective {
        signal_term,
        noise_term,
        total: signal_term + noise_term,
    })
}

/// `E‖d‖²_C = ‖x‖²_C + Tr(CN)`.
pub fn expected_data_norm_sq(c: &Metric, x: &Vector, noise: &Mat) -> Result<f64> {
    Ok(c.norm_sq(x)? + (c.matrix() * noise).trace())
}

/// `Tr((AᵀCA)⁻¹ AᵀCNCA)`.
pub fn noise_distortion(c: &Metric, a: &Mat, noise: &Mat) -> Result<f64> {
    let chol = gram_factor(c, a)?;
    check_square(noise, c.dim(), "noise covariance")?;
    let ca = c.matrix() * a;
    Ok(chol.solve(&(ca.transpose() * noise * &ca)).trace())
}

struct GradientParts {
    /// `(AᵀCA)⁻¹AᵀCNC − (AᵀCA)⁻¹AᵀCNCA(AᵀCA)⁻¹AᵀC`, `k × N`.
    m: Mat,
    /// `‖(AᵀCA)⁻¹AᵀCNC‖_F`.
    lead_norm: f64,
}

fn gradient_parts(c: &Metric, a: &Mat, noise: &Mat) -> Result<GradientParts> {
    let chol = gram_factor(c, a)?;
    check_square(noise, c.dim(), "noise covariance")?;
    let ca = c.matrix() * a;
    let p = chol.solve(&ca.transpose());
    let lead = &p * noise * c.matrix();
    let m = &lead - &lead * a * &p;
    Ok(GradientParts {
        lead_norm: lead.norm(),
        m,
    })
}

/// Directional derivative of [`noise_distortion`] at `A` along `B`.
pub fn noise_distortion_gradient(c: &Metric, a: &Mat, noise: &Mat, b: &Mat) -> Result<f64> {
    check_direction(a, b)?;
    let parts = gradient_parts(c, a, noise)?;
    Ok(2.0 * b.dot(&parts.m.transpose()))
}

/// Gradient of [`noise_distortion`] with respect to the Frobenius inner product.
pub fn noise_distortion_riesz(c: &Metric, a: &Mat, noise: &Mat) -> Result<Mat> {
    Ok(gradient_parts(c, a, noise)?.m.transpose() * 2.0)
}

fn check_direction(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} direction", a.nrows(), a.ncols()),
            found: format!("{}x{}", b.nrows(), b.ncols()),
        });
    }
    Ok(())
}

/// Central difference `(g(A + hB) − g(A − hB)) / 2h` with `h = FD_STEP‖A‖_F/‖B‖_F`.
pub fn finite_difference(c: &Metric, a: &Mat, noise: &Mat, b: &Mat) -> Result<f64> {
    check_direction(a, b)?;
    let bn = b.norm();
    if bn == 0.0 {
        return Ok(0.0);
    }
    let h = FD_STEP * a.norm() / bn;
    let plus = noise_distortion(c, &(a + b * h), noise)?;
    let minus = noise_distortion(c, &(a - b * h), noise)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / max(|analytic|, |numeric|)`; zero when both vanish.
    pub rel_error: f64,
    /// `2‖B‖_F ‖(AᵀCA)⁻¹AᵀCNC‖_F`, the size a non-vanishing derivative would have.
    pub scale: f64,
}

pub fn gradient_check(c: &Metric, a: &Mat, noise: &Mat, b: &Mat) -> Result<GradientCheck> {
    check_direction(a, b)?;
    let parts = gradient_parts(c, a, noise)?;
    let analytic = 2.0 * b.dot(&parts.m.transpose());
    let numeric = finite_difference(c, a, noise, b)?;
    let denom = analytic.abs().max(numeric.abs());
    Ok(GradientCheck {
        analytic,
        numeric,
        rel_error: if denom == 0.0 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        },
        scale: 2.0 * b.norm() * parts.lead_norm,
    })
}

/// `‖(I − KKᵀ) CNK‖_F / ‖CNK‖_F` for an orthonormal basis `K` of `Ker(Aᵀ)`.
pub fn kernel_invariance_residual(c: &Metric, noise: &Mat, a: &Mat) -> Result<f64> {
    c.check_dim(a.nrows())?;
    check_square(noise, c.dim(), "noise covariance")?;
    if !has_full_column_rank(a) {
        return Err(Error::DegenerateCandidate);
    }
    let k = left_null_space(a);
    if k.ncols() == 0 {
        return Ok(0.0);
    }
    let image = c.matrix() * noise * &k;
    let norm = image.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let outside = &image - &k * (k.transpose() * &image);
    Ok(outside.norm() / norm)
}

/// Whether `CN` maps `Ker(Aᵀ)` into itself.
pub fn kernel_invariance_check(c: &Metric, noise: &Mat, a: &Mat) -> Result<bool> {
    Ok(kernel_invariance_residual(c, noise, a)? <= KERNEL_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelInvarianceReport {
    pub invariant: bool,
    pub residual: f64,
    /// Largest `|Dnoise(A)(B)| / scale(B)` over the sampled directions.
    pub max_directional: f64,
    pub gradient_vanishes: bool,
}

impl KernelInvarianceReport {
    /// The subspace criterion and the derivative criterion agree.
    pub fn consistent(&self) -> bool {
        self.invariant == self.gradient_vanishes
    }
}

/// Evaluates both sides of the invariance characterization, probing the
/// derivative along [`KERNEL_DIRECTIONS`] Gaussian directions.
pub fn kernel_invariance_report<R: Rng + ?Sized>(
    c: &Metric,
    noise: &Mat,
    a: &Mat,
    rng: &mut R,
) -> Result<KernelInvarianceReport> {
    let residual = kernel_invariance_residual(c, noise, a)?;
    let parts = gradient_parts(c, a, noise)?;
    let mut max_directional: f64 = 0.0;
    for _ in 0..KERNEL_DIRECTIONS {
        let b: Mat = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| rng.sample(StandardNormal));
        let value = 2.0 * b.dot(&parts.m.transpose());
        let scale = 2.0 * b.norm() * parts.lead_norm;
        if scale > 0.0 {
            max_directional = max_directional.max(value.abs() / scale);
        }
    }
    Ok(KernelInvarianceReport {
        invariant: residual <= KERNEL_TOL,
        residual,
        max_directional,
        gradient_vanishes: max_directional <= ZERO_GRADIENT_TOL,
    })
}

/// `‖CN / (Tr(CN)/n) − I‖_F`, or infinity when `Tr(CN) ≤ 0`.
pub fn whitening_distance(c: &Metric, noise: &Mat) -> f64 {
    let n = c.dim();
    let cn = c.matrix() * noise;
    let s = cn.trace() / n as f64;
    if !(s > 0.0) {
        return f64::INFINITY;
    }
    (cn / s - Mat::identity(n, n)).norm()
}

/// Whether `C = αN⁻¹` for some `α > 0`.
pub fn is_whitening_metric(c: &Metric, noise: &Mat) -> bool {
    whitening_distance(c, noise) <= WHITENING_TOL
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyOutcome {
    pub alpha: f64,
    pub argmin: usize,
    pub argmin_id: String,
    /// Gap between the runner-up and the minimum of `E[rv]`; `None` for a
    /// single-candidate grid.
    pub margin: Option<f64>,
    pub is_tie: bool,
    pub expected_rv: Vec<Option<f64>>,
}

/// Scans `grid` by analytic expected residual variance under `C = αN⁻¹` for
/// each `α`.
pub fn prewhitening_sufficiency(
    sc: &SourceScenario,
    grid: &CandidateGrid,
    alphas: &[f64],
) -> Result<Vec<SufficiencyOutcome>> {
    if grid.is_empty() {
        return Err(Error::Invalid("candidate grid is empty".into()));
    }
    let n_inv = Metric::new(sc.noise_cov().clone())?.inverse()?;
    let x = sc.effective_source().x;
    alphas
        .iter()
        .map(|&alpha| {
            let c = n_inv.scaled(alpha)?;
            let data = expected_data_norm_sq(&c, &x, sc.noise_cov())?;
            let expected_rv: Vec<Option<f64>> = grid
                .leadfields()
                .iter()
                .map(|a| objective_terms(&c, a, &x, sc.noise_cov()).ok().map(|o| data - o.total))
                .collect();
            let neg: Vec<Option<f64>> = expected_rv.iter().map(|v| v.map(|v| -v)).collect();
            let (argmin, is_tie) = argmax_with_ties(&neg);
            let argmin = argmin.ok_or(Error::DegenerateCandidate)?;
            let best = expected_rv[argmin].expect("argmin is scored");
            let margin = expected_rv
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != argmin)
                .filter_map(|(_, v)| *v)
                .map(|v| v - best)
                .reduce(f64::min);
            Ok(SufficiencyOutcome {
                alpha,
                argmin,
                argmin_id: grid.id(argmin).to_string(),
                margin,
                is_tie,
                expected_rv,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub leadfield: Mat,
    /// `total(A) − total(L₀)`.
    pub improvement: f64,
    /// Step `t` with `A = L₀ + t‖L₀‖_F G/‖G‖_F`.
    pub step: f64,
    pub before: ExpectedScanObjective,
    pub after: ExpectedScanObjective,
    pub expected_rv_before: f64,
    pub expected_rv_after: f64,
}

/// Finds a leadfield with larger expected sLORETA power than the truth under a
/// non-whitening metric by stepping along the noise-distortion gradient.
pub fn whitening_witness(sc: &SourceScenario, c: &Metric) -> Result<Witness> {
    let noise = sc.noise_cov();
    c.check_dim(noise.nrows())?;
    if is_whitening_metric(c, noise) {
        return Err(Error::WhiteningMetric);
    }
    let l0 = sc.leadfield();
    let parts = gradient_parts(c, l0, noise)?;
    let grad = parts.m.transpose() * 2.0;
    let gnorm = grad.norm();
    if gnorm <= ZERO_GRADIENT_TOL * 2.0 * parts.lead_norm {
        return Err(Error::NoWitness);
    }
    let direction = grad * (l0.norm() / gnorm);
    let before = expected_power_terms(c, l0, sc)?;
    let x = sc.effective_source().x;
    let data = expected_data_norm_sq(c, &x, noise)?;
    let mut t = WITNESS_INITIAL_STEP;
    for _ in 0..WITNESS_HALVINGS {
        let a = l0 + &direction * t;
        if let Ok(after) = expected_power_terms(c, &a, sc) {
            let improvement = after.total - before.total;
            if improvement > WITNESS_MARGIN * before.total.abs() {
                return Ok(Witness {
                    leadfield: a,
                    improvement,
                    step: t,
                    before,
                    after,
                    expected_rv_before: data - before.total,
                    expected_rv_after: data - after.total,
                });
            }
        }
        t *= 0.5;
    }
    Err(Error::NoWitness)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRefinement {
    pub leadfield: Mat,
    pub nai: f64,
    pub gof: f64,
    pub draws: usize,
}

/// Perturbation of the true leadfield that raises the trace-ratio NAI while
/// keeping `Tr((LᵀN⁻¹L)⁻¹)` fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasConstruction {
    /// Thin SVD `N^{-1/2}L₀ = U diag(s) Vᵀ`, singular values descending.
    pub u: Mat,
    pub singular_values: Vector,
    pub v: Mat,
    /// `diag(s) Vᵀ η`.
    pub coords: Vector,
    pub epsilon: f64,
    /// Index whose `s⁻²` is lowered (smallest `|coords|`).
    pub shrink_index: usize,
    /// Index whose `s⁻²` is raised (largest `|coords|`).
    pub grow_index: usize,
    pub inv_sq: Vector,
    pub inv_sq_tilde: Vector,
    pub l_tilde: Mat,
    pub nai_before: f64,
    pub nai_after: f64,
    /// `|Σ s̃⁻² − Σ s⁻²| / Σ s⁻²`.
    pub trace_deviation: f64,
    pub gof_truth: f64,
    pub refinement: Option<BiasRefinement>,
}

impl BiasConstruction {
    pub fn increases(&self) -> bool {
        self.nai_after > self.nai_before
    }
}

fn lowest_index_by(values: &Vector, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if better(values[i], values[best]) {
            best = i;
        }
    }
    best
}

/// Builds `L̃ = N^{1/2} U diag(s̃) Vᵀ` with `s̃_i⁻² = s_i⁻² − ε`, `s̃_j⁻² = s_j⁻² + ε`,
/// `ε = ½ min s⁻²`, where `i`/`j` index the smallest/largest `|coords|`.
pub fn trace_ratio_bias(sc: &SourceScenario) -> Result<BiasConstruction> {
    let noise = Metric::new(sc.noise_cov().clone())?;
    let whiten = noise.power(-0.5, false)?;
    let l0 = sc.leadfield();
    let (u, s, v) = thin_svd(&(whiten.matrix() * l0));
    let coords = Vector::from_fn(s.len(), |i, _| s[i]).component_mul(&(v.transpose() * sc.orientation()));
    let mags = coords.abs();
    let (lo, hi) = (mags.min(), mags.max());
    if hi - lo <= BALANCE_TOL * hi {
        return Err(Error::BalancedCase);
    }
    let shrink_index = lowest_index_by(&mags, |a, b| a < b);
    let grow_index = lowest_index_by(&mags, |a, b| a > b);
    let inv_sq = s.map(|x| 1.0 / (x * x));
    let epsilon = 0.5 * inv_sq.min();
    let mut inv_sq_tilde = inv_sq.clone();
    inv_sq_tilde[shrink_index] -= epsilon;
    inv_sq_tilde[grow_index] += epsilon;
    let s_tilde = inv_sq_tilde.map(|x| x.powf(-0.5));
    let l_tilde = noise.sqrt_matrix() * &u * Mat::from_diagonal(&s_tilde) * v.transpose();

    let inputs = BeamformerInputs::from_pair(&analytic_covariance(sc))?;
    let nai_before = nai_tilde(&inputs.r_inv, &inputs.noise_inv, l0)?;
    let nai_after = nai_tilde(&inputs.r_inv, &inputs.noise_inv, &l_tilde)?;
    let trace = inv_sq.sum();
    let gof_truth = gof(&inputs.noise_inv, l0, &sc.effective_source().x)?;
    Ok(BiasConstruction {
        trace_deviation: (inv_sq_tilde.sum() - trace).abs() / trace,
        u,
        singular_values: s,
        v,
        coords,
        epsilon,
        shrink_index,
        grow_index,
        inv_sq,
        inv_sq_tilde,
        l_tilde,
        nai_before,
        nai_after,
        gof_truth,
        refinement: None,
    })
}

/// Random perturbations of `L̃` that keep the trace-ratio NAI above the truth's
/// while fitting the source strictly worse. The perturbation size halves after
/// an NAI failure and doubles after a GOF failure.
pub fn refine_trace_ratio_bias<R: Rng + ?Sized>(
    sc: &SourceScenario,
    bc: &BiasConstruction,
    rng: &mut R,
) -> Result<Option<BiasRefinement>> {
    let inputs = BeamformerInputs::from_pair(&analytic_covariance(sc))?;
    let x = sc.effective_source().x;
    let base = &bc.l_tilde;
    let mut size = REFINE_INITIAL_SIZE * base.norm();
    for draw in 1..=REFINE_DRAWS {
        let z: Mat = DMatrix::from_fn(base.nrows(), base.ncols(), |_, _| rng.sample(StandardNormal));
        let candidate = base + &z * (size / z.norm());
        let (Ok(nai), Ok(fit)) = (
            nai_tilde(&inputs.r_inv, &inputs.noise_inv, &candidate),
            gof(&inputs.noise_inv, &candidate, &x),
        ) else {
            size *= 0.5;
            continue;
        };
        let nai_ok = nai > bc.nai_before;
        let gof_ok = fit < bc.gof_truth - GOF_MARGIN;
        if nai_ok && gof_ok {
            return Ok(Some(BiasRefinement {
                leadfield: candidate,
                nai,
                gof: fit,
                draws: draw,
            }));
        }
        if !nai_ok {
            size *= 0.5;
        } else {
            size *= 2.0;
        }
    }
    Ok(None)
}

/// `|‖j^sLORETA‖² − ‖d‖²_C GOF_C| / max(‖j^sLORETA‖², ‖d‖²_C GOF_C)`.
pub fn sloreta_identity_deviation(c: &Metric, a: &Mat, d: &Vector) -> Result<f64> {
    let power = sloreta_power(c, a, d)?;
    let fit = weighted_ls_fit(c, a, d)?;
    let expected = fit.data_norm_sq * fit.gof;
    let denom = power.abs().max(expected.abs());
    Ok(if denom == 0.0 {
        0.0
    } else {
        (power - expected).abs() / denom
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl MonteCarloEstimate {
    /// `|mean − expected|` in units of the standard error.
    pub fn z_score(&self, expected: f64) -> f64 {
        (self.mean - expected).abs() / self.std_err
    }
}

/// Empirical mean of the sLORETA power over `samples` simulated data vectors.
pub fn monte_carlo_power(
    c: &Metric,
    a: &Mat,
    sc: &SourceScenario,
    samples: usize,
) -> Result<MonteCarloEstimate> {
    if samples < 2 {
        return Err(Error::Invalid("at least two samples are required".into()));
    }
    let data = simulate_samples(sc, samples)?;
    let powers = sloreta_power_batch(c, a, &data)?;
    let t = powers.len() as f64;
    let mean = powers.iter().sum::<f64>() / t;
    let var = powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (t - 1.0);
    Ok(MonteCarloEstimate {
        mean,
        std_err: (var / t).sqrt(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerCheck {
    pub candidate_id: String,
    pub k: usize,
    pub gof: f64,
    pub p_nai: f64,
    pub p_sam: f64,
    /// `|P_NAI − k − f(GOF)|`.
    pub nai_deviation: f64,
    /// `|P_SAM − k − g(GOF)|`.
    pub sam_deviation: f64,
    /// `|g(f⁻¹(P_NAI − k)) − (P_SAM − k)|`.
    pub transform_deviation: f64,
}

impl BeamformerCheck {
    pub fn max_deviation(&self) -> f64 {
        self.nai_deviation
            .max(self.sam_deviation)
            .max(self.transform_deviation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerCertification {
    pub constants: DerivedConstants,
    pub checks: Vec<BeamformerCheck>,
    /// Candidates that could not be scored, with the reason.
    pub flagged: Vec<(String, String)>,
    /// `1e-9 (1 + q)`.
    pub tolerance: f64,
    pub max_deviation: f64,
    pub argmax_gof: Option<usize>,
    pub argmax_nai: Option<usize>,
    pub argmax_sam: Option<usize>,
    pub argmax_agree: bool,
    pub truth: Option<usize>,
    pub truth_recovered: Option<bool>,
    /// Equal-`k` pairs compared by ordering.
    pub ordered_pairs: usize,
    pub ordering_consistent: bool,
}

impl BeamformerCertification {
    pub fn pass(&self) -> bool {
        self.max_deviation <= self.tolerance
            && self.argmax_agree
            && self.truth_recovered.unwrap_or(true)
            && self.ordering_consistent
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Checks NAI and SAM powers against the GOF transfer functions on every
/// candidate, the agreement of the three argmaxes and of pairwise orderings
/// among equal-`k` candidates.
///
/// `checks[i]` lines up with the `i`-th scored candidate; argmax indices refer
/// to `checks`.
pub fn beamformer_gof_certification(
    cp: &CovariancePair,
    grid: &CandidateGrid,
    truth_id: Option<&str>,
) -> Result<BeamformerCertification> {
    let x = cp
        .source_vector()
        .ok_or_else(|| Error::Invalid("analytic covariance pair required".into()))?
        .clone();
    let inputs = BeamformerInputs::from_pair(cp)?;
    let constants = derived_constants(&inputs.noise_inv, &x)?;
    let tolerance = 1e-9 * (1.0 + constants.q);

    let mut checks = Vec::new();
    let mut flagged = Vec::new();
    for (id, l) in grid.iter() {
        let k = l.ncols();
        let scored = (|| -> Result<BeamformerCheck> {
            let t = gof(&inputs.noise_inv, l, &x)?;
            let p_nai = power_nai_vector(&inputs.r_inv, &inputs.noise_inv, l)?;
            let p_sam = power_sam_vector(&inputs.r_inv, &inputs.noise, l)?;
            let kf = k as f64;
            let mapped = nai_sam_transform(&constants, p_nai - kf)?;
            Ok(BeamformerCheck {
                candidate_id: id.to_string(),
                k,
                gof: t,
                p_nai,
                p_sam,
                nai_deviation: (p_nai - kf - constants.f(t)?).abs(),
                sam_deviation: (p_sam - kf - constants.g(t)?).abs(),
                transform_deviation: (mapped - (p_sam - kf)).abs(),
            })
        })();
        match scored {
            Ok(c) => checks.push(c),
            Err(e) => flagged.push((id.to_string(), e.to_string())),
        }
    }

    let max_deviation = checks
        .iter()
        .map(BeamformerCheck::max_deviation)
        .fold(0.0, f64::max);
    let by = |f: &dyn Fn(&BeamformerCheck) -> f64| -> Option<usize> {
        argmax_with_ties(&checks.iter().map(|c| Some(f(c))).collect::<Vec<_>>()).0
    };
    let argmax_gof = by(&|c| c.gof);
    let argmax_nai = by(&|c| c.p_nai - c.k as f64);
    let argmax_sam = by(&|c| c.p_sam - c.k as f64);
    let argmax_agree = argmax_gof == argmax_nai && argmax_nai == argmax_sam;
    let truth = truth_id.and_then(|t| checks.iter().position(|c| c.candidate_id == t));
    let truth_recovered = truth_id.map(|_| {
        truth.is_some() && argmax_gof == truth && argmax_nai == truth && argmax_sam == truth
    });

    let mut ordered_pairs = 0;
    let mut ordering_consistent = true;
    for (i, a) in checks.iter().enumerate() {
        for b in &checks[i + 1..] {
            if a.k != b.k || (a.gof - b.gof).abs() <= ORDER_TOL {
                continue;
            }
            ordered_pairs += 1;
            let s = sign(a.gof - b.gof);
            ordering_consistent &= sign(a.p_nai - b.p_nai) == s && sign(a.p_sam - b.p_sam) == s;
        }
    }

    Ok(BeamformerCertification {
        constants,
        checks,
        flagged,
        tolerance,
        max_deviation,
        argmax_gof,
        argmax_nai,
        argmax_sam,
        argmax_agree,
        truth,
        truth_recovered,
        ordered_pairs,
        ordering_consistent,
    })
}

/// `C` and `N` that both act block-diagonally on `range(A) ⊕ Ker(Aᵀ)`, so that
/// `CN` leaves `Ker(Aᵀ)` invariant without `C` being a multiple of `N⁻¹`.
pub fn invariant_pair<R: Rng + ?Sized>(a: &Mat, rng: &mut R) -> Result<(Metric, Mat)> {
    let n = a.nrows();
    let (u, _, _) = thin_svd(a);
    let k = left_null_space(a);
    let basis = Mat::from_fn(n, n, |i, j| if j < u.ncols() { u[(i, j)] } else { k[(i, j - u.ncols())] });
    let block = |rng: &mut R| -> Mat {
        let r = u.ncols();
        let mut m = Mat::zeros(n, n);
        let top = crate::forward::random_spd(rng, r);
        let bottom = crate::forward::random_spd(rng, n - r);
        m.view_mut((0, 0), (r, r)).copy_from(&top);
        m.view_mut((r, r), (n - r, n - r)).copy_from(&bottom);
        symmetrize(&(&basis * m * basis.transpose()))
    };
    let c = block(rng);
    let noise = block(rng);
    Ok((Metric::new(c)?, noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{random_leadfield, random_spd, seeded_rng};
    use nalgebra::dvector;

    fn n_inv(sc: &SourceScenario) -> Metric {
        Metric::new(sc.noise_cov().clone()).unwrap().inverse().unwrap()
    }

    #[test]
    fn noiseless_limit() {
        let sc = SourceScenario::random(5, 8);
        let tiny = Mat::identity(8, 8) * 1e-14;
        let quiet = sc.clone().with_noise(tiny).unwrap();
        let c = Metric::new(random_spd(&mut seeded_rng(5, 1), 8)).unwrap();
        let a = random_leadfield(&mut seeded_rng(5, 2), 8, 3);
        let terms = expected_power_terms(&c, &a, &quiet).unwrap();
        assert!(terms.noise_term < 1e-12);
        let d0 = quiet.effective_source().x;
        let fit = weighted_ls_fit(&c, &a, &d0).unwrap();
        let target = fit.data_norm_sq * fit.gof;
        assert!((terms.total - target).abs() <= 1e-10 * target);
    }

    #[test]
    fn whitening_metric_fixes_noise_term() {
        let sc = SourceScenario::random(6, 9);
        let c = n_inv(&sc);
        for s in 0..5 {
            let a = random_leadfield(&mut seeded_rng(6, s), 9, 3);
            let terms = expected_power_terms(&c, &a, &sc).unwrap();
            assert!((terms.noise_term - 3.0).abs() < 1e-12);
            let scaled = expected_power_terms(&c.scaled(2.5).unwrap(), &a, &sc).unwrap();
            assert!((scaled.noise_term - 7.5).abs() < 1e-11);
        }
    }

    #[test]
    fn objective_matches_monte_carlo() {
        let sc = SourceScenario::random(23, 8);
        let c = Metric::new(random_spd(&mut seeded_rng(23, 100), 8)).unwrap();
        let a = random_leadfield(&mut seeded_rng(23, 101), 8, 3);
        let terms = expected_power_terms(&c, &a, &sc).unwrap();
        let mc = monte_carlo_power(&c, &a, &sc, 50_000).unwrap();
        assert!(mc.z_score(terms.total) <= 5.0, "z = {}", mc.z_score(terms.total));
    }

    #[test]
    fn gradient_vanishes_for_whitening_metric() {
        let sc = SourceScenario::random(28, 7);
        let c = n_inv(&sc);
        let mut rng = seeded_rng(28, 1);
        let a = random_leadfield(&mut rng, 7, 3);
        for _ in 0..10 {
            let b = random_leadfield(&mut rng, 7, 3);
            let chk = gradient_check(&c, &a, sc.noise_cov(), &b).unwrap();
            assert!(chk.analytic.abs() <= 1e-8 * chk.scale);
        }
        let zero = Mat::zeros(7, 3);
        assert_eq!(noise_distortion_gradient(&c, &a, sc.noise_cov(), &zero).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(29, 0);
        let c = Metric::new(random_spd(&mut rng, 7)).unwrap();
        let noise = random_spd(&mut rng, 7);
        let a = random_leadfield(&mut rng, 7, 3);
        for _ in 0..20 {
            let b = random_leadfield(&mut rng, 7, 3);
            let chk = gradient_check(&c, &a, &noise, &b).unwrap();
            assert!(chk.rel_error <= 1e-5, "{chk:?}");
        }
    }

    #[test]
    fn riesz_gradient_represents_derivative() {
        let mut rng = seeded_rng(30, 0);
        let c = Metric::new(random_spd(&mut rng, 6)).unwrap();
        let noise = random_spd(&mut rng, 6);
        let a = random_leadfield(&mut rng, 6, 3);
        let grad = noise_distortion_riesz(&c, &a, &noise).unwrap();
        let b = random_leadfield(&mut rng, 6, 3);
        let d = noise_distortion_gradient(&c, &a, &noise, &b).unwrap();
        assert!((grad.dot(&b) - d).abs() <= 1e-12 * d.abs().max(1.0));
    }

    #[test]
    fn rank_deficient_candidate_rejected() {
        let c = Metric::identity(5);
        let mut a = random_leadfield(&mut seeded_rng(31, 0), 5, 3);
        let col = a.column(0).into_owned();
        a.set_column(1, &col);
        assert!(noise_distortion(&c, &a, &Mat::identity(5, 5)).is_err());
        assert!(kernel_invariance_check(&c, &Mat::identity(5, 5), &a).is_err());
    }

    #[test]
    fn kernel_invariance_trivial_cases() {
        let sc = SourceScenario::random(31, 8);
        let a = random_leadfield(&mut seeded_rng(31, 1), 8, 3);
        assert!(kernel_invariance_check(&n_inv(&sc), sc.noise_cov(), &a).unwrap());
        assert!(kernel_invariance_check(&Metric::identity(8), &Mat::identity(8, 8), &a).unwrap());
    }

    #[test]
    fn kernel_invariance_generic_case() {
        let mut rng = seeded_rng(31, 2);
        let c = Metric::new(random_spd(&mut rng, 8)).unwrap();
        let noise = random_spd(&mut rng, 8);
        let a = random_leadfield(&mut rng, 8, 3);
        let rep = kernel_invariance_report(&c, &noise, &a, &mut rng).unwrap();
        assert!(!rep.invariant && !rep.gradient_vanishes && rep.consistent());
    }

    #[test]
    fn kernel_invariance_block_case() {
        let mut rng = seeded_rng(32, 0);
        let a = random_leadfield(&mut rng, 8, 3);
        let (c, noise) = invariant_pair(&a, &mut rng).unwrap();
        assert!(!is_whitening_metric(&c, &noise));
        let rep = kernel_invariance_report(&c, &noise, &a, &mut rng).unwrap();
        assert!(rep.invariant && rep.gradient_vanishes, "{rep:?}");
    }

    #[test]
    fn sufficiency_single_candidate() {
        let sc = SourceScenario::random(36, 6);
        let grid = CandidateGrid::new(vec![("true".into(), sc.leadfield().clone())]).unwrap();
        let out = prewhitening_sufficiency(&sc, &grid, &[1.0]).unwrap();
        assert_eq!(out[0].argmin_id, "true");
        assert_eq!(out[0].margin, None);
    }

    #[test]
    fn sufficiency_recovers_truth() {
        let sc = SourceScenario::random(37, 10);
        let grid =
            CandidateGrid::random(&mut seeded_rng(37, 1), 10, 3, 50, Some(sc.leadfield())).unwrap();
        let out = prewhitening_sufficiency(&sc, &grid, &[0.5, 1.0, 2.0]).unwrap();
        for o in &out {
            assert_eq!(o.argmin_id, "true");
            assert!(o.margin.unwrap() > 0.0 && !o.is_tie);
        }
    }

    #[test]
    fn witness_refuses_whitening_metric() {
        let sc = SourceScenario::random(40, 8);
        assert!(matches!(
            whitening_witness(&sc, &n_inv(&sc)),
            Err(Error::WhiteningMetric)
        ));
        assert!(matches!(
            whitening_witness(&sc, &n_inv(&sc).scaled(3.0).unwrap()),
            Err(Error::WhiteningMetric)
        ));
    }

    #[test]
    fn witness_for_identity_metric() {
        let mut diag = vec![1.0; 8];
        diag[2] = 4.0;
        let noise = Mat::from_diagonal(&Vector::from_vec(diag));
        let sc = SourceScenario::random(41, 8).with_noise(noise).unwrap();
        let w = whitening_witness(&sc, &Metric::identity(8)).unwrap();
        assert!(w.improvement > 0.0);
        assert!(w.expected_rv_after < w.expected_rv_before);
        let again = expected_power_terms(&Metric::identity(8), &w.leadfield, &sc).unwrap();
        assert!(again.total > w.before.total);
    }

    #[test]
    fn witness_not_found_in_invariant_case() {
        let sc = SourceScenario::random(42, 8);
        let (c, noise) = invariant_pair(sc.leadfield(), &mut seeded_rng(42, 1)).unwrap();
        let sc = sc.with_noise(noise).unwrap();
        assert!(matches!(whitening_witness(&sc, &c), Err(Error::NoWitness)));
    }

    #[test]
    fn bias_unit_case() {
        let sc = SourceScenario::new(
            Mat::identity(3, 3),
            dvector![1.0, 0.0, 0.0],
            1.0,
            Mat::identity(3, 3),
            0,
        )
        .unwrap();
        let bc = trace_ratio_bias(&sc).unwrap();
        assert_eq!(bc.epsilon, 0.5);
        assert!((bc.nai_before - 4.0 / 3.0).abs() < 1e-14);
        assert!((bc.nai_after - 1.5).abs() < 1e-14);
        let mut got: Vec<f64> = bc.inv_sq_tilde.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.5, 1.0, 1.5]);
        assert!((bc.inv_sq_tilde[bc.grow_index] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bias_balanced_case() {
        let eta = Vector::from_element(3, 1.0 / 3f64.sqrt());
        let sc =
            SourceScenario::new(Mat::identity(3, 3), eta, 1.0, Mat::identity(3, 3), 0).unwrap();
        assert!(matches!(trace_ratio_bias(&sc), Err(Error::BalancedCase)));
    }

    #[test]
    fn bias_random_case() {
        let sc = SourceScenario::random(43, 10);
        let mut bc = trace_ratio_bias(&sc).unwrap();
        assert!(bc.epsilon > 0.0 && bc.epsilon < bc.inv_sq.min());
        assert!(bc.trace_deviation <= 1e-14);
        assert!(bc.increases());
        let ltn = n_inv(&sc).gram(&bc.l_tilde);
        let tr = ltn.try_inverse().unwrap().trace();
        assert!((tr - bc.inv_sq.sum()).abs() <= 1e-10 * tr);
        bc.refinement = refine_trace_ratio_bias(&sc, &bc, &mut seeded_rng(43, 1)).unwrap();
        let r = bc.refinement.as_ref().expect("refinement");
        assert!(r.nai > bc.nai_before && r.gof < bc.gof_truth);
    }

    #[test]
    fn identity_deviation_is_tiny() {
        let mut rng = seeded_rng(44, 0);
        let c = Metric::new(random_spd(&mut rng, 8)).unwrap();
        let a = random_leadfield(&mut rng, 8, 3);
        let d = Vector::from_fn(8, |_, _| rng.sample(StandardNormal));
        assert!(sloreta_identity_deviation(&c, &a, &d).unwrap() <= 1e-10);
    }

    #[test]
    fn beamformer_certification_single_truth() {
        let sc = SourceScenario::random(46, 8);
        let cp = analytic_covariance(&sc);
        let grid = CandidateGrid::new(vec![("true".into(), sc.leadfield().clone())]).unwrap();
        let cert = beamformer_gof_certification(&cp, &grid, Some("true")).unwrap();
        let c = &cert.checks[0];
        assert!((c.gof - 1.0).abs() < 1e-12);
        assert!((c.p_nai - 3.0 - cert.constants.q).abs() <= cert.tolerance);
        assert!((c.p_sam - 3.0 - cert.constants.g(1.0).unwrap()).abs() <= cert.tolerance);
        assert!(cert.pass());
    }

    #[test]
    fn beamformer_certification_batch() {
        let sc = SourceScenario::random(47, 12);
        let cp = analytic_covariance(&sc);
        let grid =
            CandidateGrid::random(&mut seeded_rng(47, 1), 12, 3, 100, Some(sc.leadfield())).unwrap();
        let cert = beamformer_gof_certification(&cp, &grid, Some("true")).unwrap();
        assert!(cert.max_deviation <= 1e-9, "{}", cert.max_deviation);
        assert!(cert.pass());
        assert!(cert.ordered_pairs > 4000);
    }

    #[test]
    fn beamformer_certification_needs_analytic_pair() {
        let sc = SourceScenario::random(48, 6);
        let mut cp = analytic_covariance(&sc);
        cp.provenance = crate::forward::Provenance::Sample { samples: 100 };
        let grid = CandidateGrid::new(vec![("a".into(), sc.leadfield().clone())]).unwrap();
        assert!(beamformer_gof_certification(&cp, &grid, None).is_err());
    }
}
