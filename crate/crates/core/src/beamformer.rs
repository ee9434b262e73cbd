//! Minimum-variance beamformers.
//!
//! The filter `w_τ(l) = τ R⁻¹l / (lᵀR⁻¹l)` minimizes `wᵀRw` under `wᵀl = τ`;
//! the choice of `τ` distinguishes the unit-gain, NAI and SAM powers. In the
//! single-source model `R = N + xxᵀ` the NAI and SAM powers are strictly
//! increasing functions of `GOF_{N⁻¹}(x, L)`:
//!
//! ```text
//! P_NAI(L) = k + f(GOF),  f(t) = μt / (1 − μt)
//! P_SAM(L) = k + g(GOF),  g(t) = (1/(q + 2)) (1/(1 − ρt) − 1)
//! ```
//!
//! with `q = ⟨N⁻¹x, x⟩`, `μ = q/(1+q)` and `ρ = (q² + 2q)/(q + 1)²`.

use nalgebra::Cholesky;

use crate::error::{shape, Error, Result};
use crate::forward::{CandidateGrid, CovariancePair};
use crate::linalg::{has_full_column_rank, symmetrize, Metric};
use crate::scan::{argmax_with_ties, ScanReport, ScanRow};
use crate::{Mat, Vector};

/// Slack admitted on `[0, 1]` arguments before they are clamped.
const UNIT_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    pub w: Vector,
    pub tau: f64,
    pub constraint_leadfield: Vector,
}

fn quad(m: &Metric, l: &Vector) -> Result<f64> {
    m.check_dim(l.len())?;
    Ok(l.dot(&m.apply(l)))
}

fn nonnull(l: &Vector) -> Result<()> {
    if l.iter().all(|v| *v == 0.0) {
        return Err(Error::NullConstraint);
    }
    Ok(())
}

/// `w = τ R⁻¹l / (lᵀR⁻¹l)`.
pub fn filter_weights(r_inv: &Metric, l: &Vector, tau: f64) -> Result<BeamformerWeights> {
    nonnull(l)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("gain {tau} must be positive")));
    }
    let ril = r_inv.apply(l);
    let denom = l.dot(&ril);
    if !(denom > 0.0) {
        return Err(Error::DegenerateCandidate);
    }
    Ok(BeamformerWeights {
        w: ril * (tau / denom),
        tau,
        constraint_leadfield: l.clone(),
    })
}

/// Pseudo-Z score `(wᵀRw)/(wᵀNw)`.
pub fn pseudo_z(r: &Mat, noise: &Mat, w: &Vector) -> f64 {
    w.dot(&(r * w)) / w.dot(&(noise * w))
}

/// Unit gain: `1/(lᵀR⁻¹l)`.
pub fn power_ug(r_inv: &Metric, l: &Vector) -> Result<f64> {
    nonnull(l)?;
    let d = quad(r_inv, l)?;
    if !(d > 0.0) {
        return Err(Error::DegenerateCandidate);
    }
    Ok(1.0 / d)
}

/// Neural activity index: `(lᵀN⁻¹l)/(lᵀR⁻¹l)`.
pub fn power_nai_scalar(r_inv: &Metric, n_inv: &Metric, l: &Vector) -> Result<f64> {
    Ok(quad(n_inv, l)? * power_ug(r_inv, l)?)
}

/// Synthetic aperture magnetometry: `(lᵀR⁻¹l)/(lᵀR⁻¹NR⁻¹l)`.
pub fn power_sam_scalar(r_inv: &Metric, noise: &Metric, l: &Vector) -> Result<f64> {
    nonnull(l)?;
    let ril = r_inv.apply(l);
    let num = l.dot(&ril);
    let den = ril.dot(&noise.apply(&ril));
    if !(den > 0.0) {
        return Err(Error::DegenerateCandidate);
    }
    Ok(num / den)
}

/// Array gain: NAI with white noise `σ²I`.
pub fn power_ag(r_inv: &Metric, sigma2: f64, l: &Vector) -> Result<f64> {
    let n_inv = Metric::identity(l.len()).scaled(1.0 / sigma2)?;
    power_nai_scalar(r_inv, &n_inv, l)
}

/// Unit noise gain: SAM with white noise `σ²I`.
pub fn power_ung(r_inv: &Metric, sigma2: f64, l: &Vector) -> Result<f64> {
    let noise = Metric::identity(l.len()).scaled(sigma2)?;
    power_sam_scalar(r_inv, &noise, l)
}

fn check_leadfield(m: &Metric, l: &Mat) -> Result<()> {
    if l.nrows() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} sensor rows", m.dim()),
            found: shape(l.nrows(), l.ncols()),
        });
    }
    if !has_full_column_rank(l) {
        return Err(Error::DegenerateCandidate);
    }
    Ok(())
}

/// `Tr(A B⁻¹)` for SPD `B`.
fn trace_solve(a: &Mat, b: &Mat) -> Result<f64> {
    let chol = Cholesky::new(symmetrize(b)).ok_or(Error::DegenerateCandidate)?;
    Ok(chol.solve(&a.transpose()).trace())
}

fn trace_inverse(b: &Mat) -> Result<f64> {
    let chol = Cholesky::new(symmetrize(b)).ok_or(Error::DegenerateCandidate)?;
    Ok(chol.inverse().trace())
}

/// `Tr((LᵀN⁻¹L)(LᵀR⁻¹L)⁻¹)`.
pub fn power_nai_vector(r_inv: &Metric, n_inv: &Metric, l: &Mat) -> Result<f64> {
    check_leadfield(r_inv, l)?;
    trace_solve(&n_inv.gram(l), &r_inv.gram(l))
}

/// `Tr((LᵀR⁻¹L)(LᵀR⁻¹NR⁻¹L)⁻¹)`.
pub fn power_sam_vector(r_inv: &Metric, noise: &Metric, l: &Mat) -> Result<f64> {
    check_leadfield(r_inv, l)?;
    let ril = r_inv.matrix() * l;
    trace_solve(&r_inv.gram(l), &noise.gram(&ril))
}

/// Trace-ratio activity index `Tr((LᵀR⁻¹L)⁻¹) / Tr((LᵀN⁻¹L)⁻¹)`.
pub fn nai_tilde(r_inv: &Metric, n_inv: &Metric, l: &Mat) -> Result<f64> {
    check_leadfield(r_inv, l)?;
    Ok(trace_inverse(&r_inv.gram(l))? / trace_inverse(&n_inv.gram(l))?)
}

/// `q = ⟨N⁻¹x, x⟩`, `μ = q/(1+q)`, `ρ = (q²+2q)/(q+1)²`; always `0 < μ < ρ < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    pub q: f64,
    pub mu: f64,
    pub rho: f64,
}

impl DerivedConstants {
    pub fn from_q(q: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::NoSource);
        }
        Ok(Self {
            q,
            mu: q / (1.0 + q),
            rho: (q * q + 2.0 * q) / ((q + 1.0) * (q + 1.0)),
        })
    }

    pub fn f(&self, t: f64) -> Result<f64> {
        nai_excess_from_gof(self, t)
    }

    pub fn g(&self, t: f64) -> Result<f64> {
        sam_excess_from_gof(self, t)
    }
}

pub fn derived_constants(n_inv: &Metric, x: &Vector) -> Result<DerivedConstants> {
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::NoSource);
    }
    DerivedConstants::from_q(quad(n_inv, x)?)
}

fn unit_arg(t: f64) -> Result<f64> {
    if !(-UNIT_SLACK..=1.0 + UNIT_SLACK).contains(&t) {
        return Err(Error::Domain(format!("argument {t} outside [0, 1]")));
    }
    Ok(t.clamp(0.0, 1.0))
}

/// `f(t) = μt/(1 − μt)`.
pub fn nai_excess_from_gof(dc: &DerivedConstants, t: f64) -> Result<f64> {
    let t = unit_arg(t)?;
    Ok(dc.mu * t / (1.0 - dc.mu * t))
}

/// `g(t) = (1/(q+2)) (1/(1 − ρt) − 1)`.
pub fn sam_excess_from_gof(dc: &DerivedConstants, t: f64) -> Result<f64> {
    let t = unit_arg(t)?;
    Ok((1.0 / (1.0 - dc.rho * t) - 1.0) / (dc.q + 2.0))
}

/// Maps the NAI excess `P_NAI − k` to the SAM excess `P_SAM − k` via `g ∘ f⁻¹`.
pub fn nai_sam_transform(dc: &DerivedConstants, p_nai_excess: f64) -> Result<f64> {
    let slack = UNIT_SLACK * (1.0 + dc.q);
    if !(p_nai_excess >= -slack) || !p_nai_excess.is_finite() {
        return Err(Error::Domain(format!("NAI excess {p_nai_excess} is negative")));
    }
    let e = p_nai_excess.max(0.0);
    // f(t) = e  ⇔  μt = e/(1+e)
    let t = e / (dc.mu * (1.0 + e));
    sam_excess_from_gof(dc, t)
}

/// Precomputed `R⁻¹`, `N` and `N⁻¹` shared across candidates.
#[derive(Debug, Clone)]
pub struct BeamformerInputs {
    pub r_inv: Metric,
    pub noise: Metric,
    pub noise_inv: Metric,
}

impl BeamformerInputs {
    pub fn from_pair(cp: &CovariancePair) -> Result<Self> {
        let noise = Metric::new(cp.noise.clone())?;
        let noise_inv = noise.inverse()?;
        let r_inv = Metric::new(cp.r.clone())?.inverse()?;
        Ok(Self {
            r_inv,
            noise,
            noise_inv,
        })
    }
}

/// Fills `p_ug` (k = 1 only), `p_nai`, `p_sam`, `nai_tilde` for every row of
/// `report`; failures become flags.
pub fn attach_beamformer_powers(
    report: &mut ScanReport,
    inputs: &BeamformerInputs,
    grid: &CandidateGrid,
) {
    for (row, (_, l)) in report.rows.iter_mut().zip(grid.iter()) {
        fill_row(row, inputs, l);
    }
    report.beamformer_columns = true;
}

fn fill_row(row: &mut ScanRow, inputs: &BeamformerInputs, l: &Mat) {
    let mut flag = |e: Error| {
        let f = match e {
            Error::DegenerateCandidate => "degenerate".to_string(),
            other => other.to_string().replace([',', ';'], " "),
        };
        if !row.flags.contains(&f) {
            row.flags.push(f);
        }
    };
    let mut take = |r: Result<f64>| r.map_err(&mut flag).ok();
    let p_ug = if l.ncols() == 1 {
        take(power_ug(&inputs.r_inv, &l.column(0).into_owned()))
    } else {
        None
    };
    let p_nai = take(power_nai_vector(&inputs.r_inv, &inputs.noise_inv, l));
    let p_sam = take(power_sam_vector(&inputs.r_inv, &inputs.noise, l));
    let nt = take(nai_tilde(&inputs.r_inv, &inputs.noise_inv, l));
    row.p_ug = p_ug;
    row.p_nai = p_nai;
    row.p_sam = p_sam;
    row.nai_tilde = nt;
}

/// Beamformer-only scan ranked by `P_NAI − k`.
pub fn beamformer_scan(inputs: &BeamformerInputs, grid: &CandidateGrid) -> ScanReport {
    let rows: Vec<ScanRow> = grid
        .iter()
        .map(|(id, l)| {
            let mut row = ScanRow::new(id, l.ncols());
            fill_row(&mut row, inputs, l);
            row
        })
        .collect();
    let scores: Vec<Option<f64>> = rows.iter().map(|r| r.p_nai.map(|p| p - r.k as f64)).collect();
    let (argmax, is_tie) = argmax_with_ties(&scores);
    ScanReport {
        metric: "beamformer_nai".into(),
        argmax_id: argmax.map(|i| rows[i].candidate_id.clone()),
        rows,
        argmax,
        is_tie,
        beamformer_columns: true,
    }
}
