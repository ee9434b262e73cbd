//! Generalized dipole scanning and the generalized sLORETA family.
//!
//! For a metric `C`, candidate leadfield `A` (`N×k`) and data `d`:
//!
//! * the dipole fit minimizes `‖d − Aj‖²_C`, solved as the ordinary least
//!   squares problem `‖C^{1/2}d − C^{1/2}Aj‖²` through a QR factorization of
//!   `C^{1/2}A`;
//! * `GOF_C(d, A) = 1 − ‖d − Aj_C‖²_C / ‖d‖²_C`;
//! * the sLORETA reconstruction is `(AᵀCA)^{-1/2} AᵀCd`, whose squared norm
//!   equals `‖d‖²_C · GOF_C(d, A)`.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::forward::CandidateGrid;
use crate::linalg::{centering_matrix, has_full_column_rank, symmetrize, Metric};
use crate::{Mat, Vector};

/// `AᵀCA` is declared degenerate when `λ_min ≤ DEGENERACY_TOL · λ_max`.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Candidates whose scan score lies within this distance of the best are tied.
pub const TIE_TOL: f64 = 1e-12;
pub const ELORETA_TOL: f64 = 1e-9;
pub const ELORETA_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct DipoleFit {
    pub moment: Vector,
    pub residual_norm_sq: f64,
    pub data_norm_sq: f64,
    pub gof: f64,
}

struct Whitened {
    moment: Vector,
    residual_norm_sq: f64,
    data_norm_sq: f64,
}

fn check_candidate(c: &Metric, a: &Mat) -> Result<()> {
    if a.nrows() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} sensor rows", c.dim()),
            found: shape(a.nrows(), a.ncols()),
        });
    }
    if a.ncols() == 0 || a.ncols() > a.nrows() {
        return Err(Error::DegenerateCandidate);
    }
    Ok(())
}

/// Rejects `AᵀCA` with `λ_min ≤ DEGENERACY_TOL · λ_max`.
pub(crate) fn check_gram(gram: &Mat) -> Result<()> {
    let eig = gram.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= DEGENERACY_TOL * max {
        return Err(Error::DegenerateCandidate);
    }
    Ok(())
}

fn whitened_fit(c: &Metric, a: &Mat, d: &Vector) -> Result<Whitened> {
    check_candidate(c, a)?;
    c.check_range(d)?;
    check_gram(&c.gram(a))?;
    let wa = c.sqrt_matrix() * a;
    let wd = c.sqrt_matrix() * d;
    let qr = wa.clone().qr();
    let qtd = qr.q().transpose() * &wd;
    let moment = qr
        .r()
        .solve_upper_triangular(&qtd)
        .ok_or(Error::DegenerateCandidate)?;
    let residual = &wd - &wa * &moment;
    Ok(Whitened {
        moment,
        residual_norm_sq: residual.norm_squared(),
        data_norm_sq: wd.norm_squared(),
    })
}

/// Weighted least-squares dipole fit `j_C = argmin_j ‖d − Aj‖²_C`.
pub fn weighted_ls_fit(c: &Metric, a: &Mat, d: &Vector) -> Result<DipoleFit> {
    let w = whitened_fit(c, a, d)?;
    if w.data_norm_sq == 0.0 {
        return Err(Error::ZeroData);
    }
    Ok(DipoleFit {
        gof: 1.0 - w.residual_norm_sq / w.data_norm_sq,
        moment: w.moment,
        residual_norm_sq: w.residual_norm_sq,
        data_norm_sq: w.data_norm_sq,
    })
}

pub fn gof(c: &Metric, a: &Mat, d: &Vector) -> Result<f64> {
    weighted_ls_fit(c, a, d).map(|f| f.gof)
}

/// `min_j ‖d − Aj‖²_C`; zero data gives zero.
pub fn residual_variance(c: &Metric, a: &Mat, d: &Vector) -> Result<f64> {
    whitened_fit(c, a, d).map(|w| w.residual_norm_sq)
}

fn inverse_sqrt_gram(c: &Metric, a: &Mat) -> Result<Mat> {
    check_candidate(c, a)?;
    let gram = c.gram(a);
    check_gram(&gram)?;
    Ok(Metric::new(gram)?.power(-0.5, false)?.matrix().clone())
}

/// `(AᵀCA)^{-1/2} AᵀCd`.
pub fn sloreta_reconstruction(c: &Metric, a: &Mat, d: &Vector) -> Result<Vector> {
    let g = inverse_sqrt_gram(c, a)?;
    c.check_range(d)?;
    Ok(g * (a.transpose() * c.apply(d)))
}

/// `‖(AᵀCA)^{-1/2} AᵀCd‖²`.
pub fn sloreta_power(c: &Metric, a: &Mat, d: &Vector) -> Result<f64> {
    sloreta_reconstruction(c, a, d).map(|j| j.norm_squared())
}

/// sLORETA power of every column of `samples`.
///
/// Columns are not range-checked; pass data in the metric's range.
pub fn sloreta_power_batch(c: &Metric, a: &Mat, samples: &Mat) -> Result<Vec<f64>> {
    let g = inverse_sqrt_gram(c, a)?;
    let proj = g * a.transpose() * c.matrix();
    let j = proj * samples;
    Ok(j.column_iter().map(|col| col.norm_squared()).collect())
}

/// Metric choices: plain GOF scan, pre-whitening, classic and Sekihara sLORETA,
/// eLORETA, or a user-supplied operator.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    Identity,
    InverseNoise,
    ClassicSloreta { alpha: f64 },
    SekiharaSloreta { alpha: f64 },
    Eloreta { alpha: f64 },
    Explicit(Mat),
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::InverseNoise => "inverse_noise",
            Self::ClassicSloreta { .. } => "classic_sloreta",
            Self::SekiharaSloreta { .. } => "sekihara_sloreta",
            Self::Eloreta { .. } => "eloreta",
            Self::Explicit(_) => "explicit",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Self::ClassicSloreta { alpha }
            | Self::SekiharaSloreta { alpha }
            | Self::Eloreta { alpha } => Some(*alpha),
            _ => None,
        }
    }

    /// Whether the built metric may carry the kernel `span{𝟙}`, which requires
    /// average-referenced data.
    pub fn needs_average_reference(&self) -> bool {
        matches!(self, Self::ClassicSloreta { .. } | Self::Eloreta { .. })
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha() {
            Some(alpha) => write!(f, "{}(alpha={alpha})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricRecipe {
    pub kind: MetricKind,
    pub built: Metric,
    pub eloreta: Option<ELoretaWeights>,
}

/// Builds the metric for `kind` from the complete leadfield `L = [L₁ … L_M]`
/// (`N × 3M`) and, for [`MetricKind::InverseNoise`], the noise covariance.
///
/// * classic sLORETA: `(LLᵀ + αH)⁺`
/// * Sekihara sLORETA: `(LLᵀ + αI)⁻¹`
/// * eLORETA: `(LW⁻¹Lᵀ + αH)⁺` with converged block weights `W`
pub fn build_metric(
    kind: &MetricKind,
    complete_leadfield: &Mat,
    noise_cov: Option<&Mat>,
) -> Result<MetricRecipe> {
    if let Some(alpha) = kind.alpha() {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha {alpha} must be nonnegative")));
        }
    }
    let n = complete_leadfield.nrows();
    let llt = || complete_leadfield * complete_leadfield.transpose();
    let mut eloreta = None;
    let built = match kind {
        MetricKind::Identity => Metric::identity(n),
        MetricKind::InverseNoise => {
            let noise = noise_cov
                .ok_or_else(|| Error::Invalid("inverse_noise metric needs a noise covariance".into()))?;
            if noise.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: shape(n, n),
                    found: shape(noise.nrows(), noise.ncols()),
                });
            }
            Metric::new(noise.clone())?.inverse()?
        }
        MetricKind::ClassicSloreta { alpha } => {
            Metric::new(symmetrize(&(llt() + centering_matrix(n) * *alpha)))?.pseudo_inverse()
        }
        MetricKind::SekiharaSloreta { alpha } => {
            Metric::new(symmetrize(&(llt() + Mat::identity(n, n) * *alpha)))?.inverse()?
        }
        MetricKind::Eloreta { alpha } => {
            let w = solve_eloreta_weights(complete_leadfield, *alpha, ELORETA_TOL, ELORETA_MAX_ITER)?;
            if !w.converged {
                return Err(Error::EloretaNotConverged {
                    residual: w.residual,
                    iterations: w.iterations,
                });
            }
            let m = eloreta_metric(complete_leadfield, &w.blocks, *alpha)?;
            eloreta = Some(w);
            m
        }
        MetricKind::Explicit(m) => {
            if m.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: shape(n, n),
                    found: shape(m.nrows(), m.ncols()),
                });
            }
            Metric::new(m.clone())?
        }
    };
    Ok(MetricRecipe {
        kind: kind.clone(),
        built,
        eloreta,
    })
}

/// Block-diagonal eLORETA weights solving `W_i = (L_iᵀ(LW⁻¹Lᵀ + αH)⁺L_i)^{1/2}`.
#[derive(Debug, Clone)]
pub struct ELoretaWeights {
    pub blocks: Vec<Mat>,
    pub alpha: f64,
    /// `max_i ‖W_i − (L_iᵀ(LW⁻¹Lᵀ+αH)⁺L_i)^{1/2}‖_F` at the returned weights.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn split_blocks(complete_leadfield: &Mat) -> Result<Vec<Mat>> {
    let cols = complete_leadfield.ncols();
    if cols == 0 || !cols.is_multiple_of(3) {
        return Err(Error::Invalid(format!(
            "complete leadfield must have 3M columns, found {cols}"
        )));
    }
    (0..cols / 3)
        .map(|i| {
            let li = complete_leadfield.columns(3 * i, 3).into_owned();
            if has_full_column_rank(&li) {
                Ok(li)
            } else {
                Err(Error::Invalid(format!("leadfield block {i} is rank deficient")))
            }
        })
        .collect()
}

/// `(LW⁻¹Lᵀ + αH)⁺` for the given blocks.
pub fn eloreta_metric(complete_leadfield: &Mat, blocks: &[Mat], alpha: f64) -> Result<Metric> {
    let n = complete_leadfield.nrows();
    let mut acc = centering_matrix(n) * alpha;
    for (i, w) in blocks.iter().enumerate() {
        let li = complete_leadfield.columns(3 * i, 3);
        let w_inv = Metric::new(w.clone())
            .and_then(|m| m.inverse())
            .map_err(|_| Error::EloretaIndefinite)?;
        acc += li * w_inv.matrix() * li.transpose();
    }
    Ok(Metric::new(symmetrize(&acc))?.pseudo_inverse())
}

/// Right-hand sides `(L_iᵀ C L_i)^{1/2}` of the fixed-point equations.
fn eloreta_targets(complete_leadfield: &Mat, blocks: &[Mat], alpha: f64) -> Result<Vec<Mat>> {
    let c = eloreta_metric(complete_leadfield, blocks, alpha)?;
    (0..blocks.len())
        .map(|i| {
            let li = complete_leadfield.columns(3 * i, 3).into_owned();
            let m = Metric::new(c.gram(&li)).map_err(|_| Error::EloretaIndefinite)?;
            if !m.is_full_rank() {
                return Err(Error::EloretaIndefinite);
            }
            Ok(m.sqrt_matrix().clone())
        })
        .collect()
}

/// Plug-back defect `max_i ‖W_i − (L_iᵀ(LW⁻¹Lᵀ+αH)⁺L_i)^{1/2}‖_F`.
pub fn eloreta_residual(complete_leadfield: &Mat, blocks: &[Mat], alpha: f64) -> Result<f64> {
    let targets = eloreta_targets(complete_leadfield, blocks, alpha)?;
    Ok(blocks
        .iter()
        .zip(&targets)
        .map(|(w, t)| (w - t).norm())
        .fold(0.0, f64::max))
}

/// Fixed-point iteration `W ← (L_iᵀ(LW⁻¹Lᵀ+αH)⁺L_i)^{1/2}` from `W_i = I₃`.
///
/// Non-convergence is reported through `converged = false`, not as an error.
pub fn solve_eloreta_weights(
    complete_leadfield: &Mat,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ELoretaWeights> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha {alpha} must be nonnegative")));
    }
    let m = split_blocks(complete_leadfield)?.len();
    let mut blocks = vec![Mat::identity(3, 3); m];
    let mut iterations = 0;
    loop {
        let targets = eloreta_targets(complete_leadfield, &blocks, alpha)?;
        let residual = blocks
            .iter()
            .zip(&targets)
            .map(|(w, t)| (w - t).norm())
            .fold(0.0, f64::max);
        if residual <= tol || iterations >= max_iter {
            return Ok(ELoretaWeights {
                blocks,
                alpha,
                residual,
                iterations,
                converged: residual <= tol,
            });
        }
        blocks = targets;
        iterations += 1;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanRow {
    pub candidate_id: String,
    pub k: usize,
    pub gof: Option<f64>,
    pub sloreta_power: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_ug: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_nai: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_sam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nai_tilde: Option<f64>,
    pub flags: Vec<String>,
}

impl ScanRow {
    pub(crate) fn new(candidate_id: &str, k: usize) -> Self {
        Self {
            candidate_id: candidate_id.to_string(),
            k,
            gof: None,
            sloreta_power: None,
            p_ug: None,
            p_nai: None,
            p_sam: None,
            nai_tilde: None,
            flags: Vec::new(),
        }
    }
}

/// Per-candidate scan values with a deterministic argmax.
#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub metric: String,
    pub rows: Vec<ScanRow>,
    /// Index of the best candidate; ties go to the lowest index.
    pub argmax: Option<usize>,
    pub argmax_id: Option<String>,
    pub is_tie: bool,
    #[serde(skip)]
    pub beamformer_columns: bool,
}

/// Lowest index among the entries within `TIE_TOL` of the maximum, and whether
/// more than one entry qualified.
pub fn argmax_with_ties(values: &[Option<f64>]) -> (Option<usize>, bool) {
    let best = values
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return (None, false);
    }
    let mut hits = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.filter(|v| *v >= best - TIE_TOL).map(|_| i));
    let first = hits.next();
    (first, hits.next().is_some())
}

fn flag_for(err: &Error) -> String {
    match err {
        Error::DegenerateCandidate => "degenerate".into(),
        Error::DimensionMismatch { .. } => "dimension_mismatch".into(),
        other => other.to_string().replace([',', ';'], " "),
    }
}

/// Scores every candidate by GOF and sLORETA power and picks the GOF argmax.
///
/// Per-candidate failures become flags; only data-level problems (wrong length,
/// zero data, data outside the metric range) abort the scan.
pub fn scan(c: &Metric, grid: &CandidateGrid, d: &Vector) -> Result<ScanReport> {
    scan_with_label(c, grid, d, "explicit")
}

pub fn scan_with_label(
    c: &Metric,
    grid: &CandidateGrid,
    d: &Vector,
    metric_label: &str,
) -> Result<ScanReport> {
    if grid.is_empty() {
        return Err(Error::Invalid("candidate grid is empty".into()));
    }
    if c.norm_sq(d)? == 0.0 {
        return Err(Error::ZeroData);
    }
    let rows: Vec<ScanRow> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let a = grid.leadfield(i);
            let mut row = ScanRow::new(grid.id(i), a.ncols());
            match gof(c, a, d) {
                Ok(v) => row.gof = Some(v),
                Err(e) => row.flags.push(flag_for(&e)),
            }
            match sloreta_power(c, a, d) {
                Ok(v) => row.sloreta_power = Some(v),
                Err(e) => {
                    let f = flag_for(&e);
                    if !row.flags.contains(&f) {
                        row.flags.push(f);
                    }
                }
            }
            row
        })
        .collect();
    let scores: Vec<Option<f64>> = rows.iter().map(|r| r.gof).collect();
    let (argmax, is_tie) = argmax_with_ties(&scores);
    Ok(ScanReport {
        metric: metric_label.to_string(),
        argmax_id: argmax.map(|i| rows[i].candidate_id.clone()),
        rows,
        argmax,
        is_tie,
        beamformer_columns: false,
    })
}

fn opt(v: Option<f64>) -> String {
    crate::report::cell(v)
}

impl ScanReport {
    pub const CSV_COLUMNS: [&'static str; 4] = ["candidate_id", "gof", "sloreta_power", "flags"];
    pub const BEAMFORMER_COLUMNS: [&'static str; 5] = ["p_ug", "p_nai", "p_sam", "nai_tilde", "k"];

    pub fn header(&self) -> Vec<&'static str> {
        let mut h = Self::CSV_COLUMNS.to_vec();
        if self.beamformer_columns {
            h.extend(Self::BEAMFORMER_COLUMNS);
        }
        h
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.candidate_id.clone(),
                opt(r.gof),
                opt(r.sloreta_power),
                r.flags.join(";"),
            ];
            if self.beamformer_columns {
                rec.extend([
                    opt(r.p_ug),
                    opt(r.p_nai),
                    opt(r.p_sam),
                    opt(r.nai_tilde),
                    r.k.to_string(),
                ]);
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{
        average_reference, random_leadfield, random_spd, seeded_rng, standard_normal_matrix,
        SourceScenario,
    };
    use crate::linalg::rel_frobenius;
    use nalgebra::dvector;
    use rand::Rng;

    fn random_vec(seed: u64, stream: u64, n: usize) -> Vector {
        let mut rng = seeded_rng(seed, stream);
        Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Normal-equation form of the GOF, kept apart from the QR route under test.
    fn gof_quadratic_form(c: &Metric, a: &Mat, d: &Vector) -> f64 {
        let cm = c.matrix();
        let g = a.transpose() * cm * a;
        let b = a.transpose() * cm * d;
        let num = b.dot(&g.lu().solve(&b).unwrap());
        num / d.dot(&(cm * d))
    }

    #[test]
    fn identity_fit() {
        let c = Metric::identity(3);
        let a = Mat::identity(3, 3);
        let d = dvector![1.0, 2.0, 2.0];
        let fit = weighted_ls_fit(&c, &a, &d).unwrap();
        assert!((fit.moment - &d).norm() < 1e-14);
        assert!((fit.gof - 1.0).abs() < 1e-15);
        assert!(residual_variance(&c, &a, &d).unwrap() < 1e-28);
        let j = sloreta_reconstruction(&c, &a, &d).unwrap();
        assert!((j - &d).norm() < 1e-14);
        assert!((sloreta_power(&c, &a, &d).unwrap() - 9.0).abs() < 1e-13);
    }

    #[test]
    fn orthogonal_data_has_zero_fit() {
        let mut rng = seeded_rng(2, 0);
        let c = Metric::new(random_spd(&mut rng, 6)).unwrap();
        let a = random_leadfield(&mut rng, 6, 3);
        // d ⟂_C range(A) ⇔ AᵀCd = 0, i.e. d = C⁻¹k with k ∈ Ker(Aᵀ).
        let k = crate::linalg::left_null_space(&a).column(0).into_owned();
        let d = c.inverse().unwrap().matrix() * k;
        let fit = weighted_ls_fit(&c, &a, &d).unwrap();
        assert!(fit.moment.norm() < 1e-12);
        assert!(fit.gof.abs() < 1e-12);
        assert!(sloreta_power(&c, &a, &d).unwrap() < 1e-24);
        let rv = residual_variance(&c, &a, &d).unwrap();
        let dn = c.norm_sq(&d).unwrap();
        assert!((rv - dn).abs() <= 1e-12 * dn);
    }

    #[test]
    fn fit_matches_brute_force_grid() {
        let mut rng = seeded_rng(13, 0);
        let n = 8;
        let c = Metric::new(random_spd(&mut rng, n)).unwrap();
        let a = random_leadfield(&mut rng, n, 3);
        let d = random_vec(13, 1, n) + &a * dvector![0.4, -0.3, 0.2];
        let fit = weighted_ls_fit(&c, &a, &d).unwrap();

        let objective = |j: &Vector| {
            let r = &d - &a * j;
            r.dot(&(c.matrix() * &r))
        };
        let (mut best, mut best_j) = (f64::INFINITY, Vector::zeros(3));
        let radius: f64 = 4.0;
        let step: f64 = 0.04;
        let m = (2.0 * radius / step).round() as i32;
        for i in 0..=m {
            for k in 0..=m {
                for l in 0..=m {
                    let j = dvector![
                        -radius + i as f64 * step,
                        -radius + k as f64 * step,
                        -radius + l as f64 * step
                    ];
                    let v = objective(&j);
                    if v < best {
                        best = v;
                        best_j = j;
                    }
                }
            }
        }
        assert!(fit.moment.amax() < radius - step, "closed form outside search box");
        // A grid point within step·√3/2 of the optimum exists, so the grid argmin
        // lies within √κ of that distance in the Gram geometry.
        let eig = c.gram(&a).symmetric_eigenvalues();
        let kappa = eig.max() / eig.min();
        let bound = kappa.sqrt() * step * 3f64.sqrt() / 2.0;
        assert!((best_j - &fit.moment).norm() <= bound);
        assert!(objective(&fit.moment) <= best + 1e-12);
    }

    #[test]
    fn gof_formulas_agree() {
        for seed in 0..20 {
            let mut rng = seeded_rng(13, seed);
            let c = Metric::new(random_spd(&mut rng, 8)).unwrap();
            let a = random_leadfield(&mut rng, 8, 3);
            let d = random_vec(13, 100 + seed, 8);
            let via_qr = gof(&c, &a, &d).unwrap();
            let via_normal = gof_quadratic_form(&c, &a, &d);
            assert!((via_qr - via_normal).abs() <= 1e-10);
            assert!((-1e-10..=1.0 + 1e-10).contains(&via_qr));
            let rv = residual_variance(&c, &a, &d).unwrap();
            let dn = c.norm_sq(&d).unwrap();
            assert!((rv - dn * (1.0 - via_qr)).abs() <= 1e-10 * dn);
        }
    }

    #[test]
    fn fit_invariants() {
        let mut rng = seeded_rng(4, 0);
        let c = Metric::new(random_spd(&mut rng, 7)).unwrap();
        let a = random_leadfield(&mut rng, 7, 3);
        let d = random_vec(4, 1, 7);
        let fit = weighted_ls_fit(&c, &a, &d).unwrap();
        let resid = &d - &a * &fit.moment;
        let direct = resid.dot(&(c.matrix() * &resid));
        assert!((fit.residual_norm_sq - direct).abs() <= 1e-10 * direct);
        let dn = c.norm_sq(&d).unwrap();
        for col in a.column_iter() {
            let col = col.into_owned();
            let ip = resid.dot(&(c.matrix() * &col)).abs();
            assert!(ip <= 1e-10 * dn.sqrt() * c.norm_sq(&col).unwrap().sqrt());
        }
    }

    #[test]
    fn sloreta_power_equals_scaled_gof() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = seeded_rng(77, seed);
            let n = rng.random_range(4..16);
            let c = Metric::new(random_spd(&mut rng, n)).unwrap();
            let a = random_leadfield(&mut rng, n, 3);
            let d = random_vec(77, 1000 + seed, n);
            let p = sloreta_power(&c, &a, &d).unwrap();
            let rhs = c.norm_sq(&d).unwrap() * gof(&c, &a, &d).unwrap();
            worst = worst.max((p - rhs).abs() / rhs);
        }
        assert!(worst <= 1e-10, "worst {worst:e}");
    }

    #[test]
    fn degenerate_candidate_and_zero_data() {
        let c = Metric::identity(4);
        let mut a = Mat::zeros(4, 3);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        a[(0, 2)] = 1.0;
        let d = dvector![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(weighted_ls_fit(&c, &a, &d), Err(Error::DegenerateCandidate)));
        assert!(matches!(sloreta_power(&c, &a, &d), Err(Error::DegenerateCandidate)));
        let good = Mat::identity(4, 3);
        assert!(matches!(gof(&c, &good, &Vector::zeros(4)), Err(Error::ZeroData)));
        assert_eq!(residual_variance(&c, &good, &Vector::zeros(4)).unwrap(), 0.0);
    }

    #[test]
    fn identity_and_sekihara_recipes() {
        let r = build_metric(&MetricKind::Identity, &Mat::zeros(4, 3), None).unwrap();
        assert_eq!(r.built.matrix(), &Mat::identity(4, 4));
        let r = build_metric(&MetricKind::SekiharaSloreta { alpha: 2.0 }, &Mat::zeros(5, 3), None)
            .unwrap();
        assert!(rel_frobenius(r.built.matrix(), &(Mat::identity(5, 5) * 0.5)) < 1e-15);
        assert!(matches!(
            build_metric(&MetricKind::SekiharaSloreta { alpha: 0.0 }, &Mat::zeros(5, 3), None),
            Err(Error::SingularMetric)
        ));
        assert!(build_metric(&MetricKind::ClassicSloreta { alpha: -1.0 }, &Mat::zeros(5, 3), None)
            .is_err());
        assert!(build_metric(&MetricKind::InverseNoise, &Mat::zeros(5, 3), None).is_err());
    }

    #[test]
    fn classic_sloreta_is_moore_penrose_inverse() {
        let mut rng = seeded_rng(9, 0);
        let l = random_leadfield(&mut rng, 10, 6);
        let r = build_metric(&MetricKind::ClassicSloreta { alpha: 0.0 }, &l, None).unwrap();
        let c = r.built.matrix();
        let llt = &l * l.transpose();
        assert!(rel_frobenius(&(c * &llt * c), c) <= 1e-9);
        assert!(rel_frobenius(&(&llt * c * &llt), &llt) <= 1e-9);
        assert_eq!(r.built.rank(), 6);
    }

    #[test]
    fn classic_sloreta_with_regularization_has_constant_kernel() {
        let mut rng = seeded_rng(10, 0);
        let l = average_reference(&standard_normal_matrix(&mut rng, 8, 9));
        let r = build_metric(&MetricKind::ClassicSloreta { alpha: 0.3 }, &l, None).unwrap();
        assert_eq!(r.built.rank(), 7);
        let expected = (&l * l.transpose() + centering_matrix(8) * 0.3)
            .pseudo_inverse(1e-12)
            .unwrap();
        assert!(rel_frobenius(r.built.matrix(), &expected) <= 1e-9);
        // Non-referenced data leave the range.
        let d = Vector::from_element(8, 1.0) + random_vec(10, 1, 8);
        assert!(matches!(r.built.norm_sq(&d), Err(Error::OutsideMetricRange(_))));
    }

    #[test]
    fn eloreta_trivial_fixed_point() {
        let w = solve_eloreta_weights(&Mat::identity(3, 3), 0.0, 1e-9, 500).unwrap();
        assert!(w.converged);
        assert_eq!(w.blocks[0], Mat::identity(3, 3));
        assert_eq!(w.residual, 0.0);
    }

    #[test]
    fn eloreta_converged_weights_satisfy_equations() {
        for (seed, alpha) in [(1u64, 0.0), (2, 0.1), (3, 0.0), (4, 0.1)] {
            let mut rng = seeded_rng(seed, 0);
            let m = 2 + seed as usize;
            let l = average_reference(&standard_normal_matrix(&mut rng, 16, 3 * m));
            let w = solve_eloreta_weights(&l, alpha, 1e-9, 500).unwrap();
            assert!(w.converged, "seed {seed}: residual {:e}", w.residual);
            let plug = eloreta_residual(&l, &w.blocks, alpha).unwrap();
            assert!(plug <= 1e-9);
            for b in &w.blocks {
                assert!(Metric::new(b.clone()).unwrap().is_full_rank());
            }
        }
    }

    #[test]
    fn eloreta_scaling_is_consistent() {
        let mut rng = seeded_rng(5, 0);
        let l = random_leadfield(&mut rng, 12, 9);
        let w1 = solve_eloreta_weights(&l, 0.0, 1e-10, 500).unwrap();
        let scaled = &l * 3.0;
        let w3 = solve_eloreta_weights(&scaled, 0.0, 1e-10, 500).unwrap();
        assert!(w3.converged);
        assert!(eloreta_residual(&scaled, &w3.blocks, 0.0).unwrap() <= 1e-9);
        // With α = 0 the defining equations are invariant under L → cL.
        for (a, b) in w1.blocks.iter().zip(&w3.blocks) {
            assert!(rel_frobenius(b, a) <= 1e-8);
        }
        assert!(eloreta_residual(&scaled, &w1.blocks, 0.0).unwrap() <= 1e-9);
    }

    #[test]
    fn eloreta_non_convergence_is_reported() {
        let mut rng = seeded_rng(6, 0);
        let l = random_leadfield(&mut rng, 10, 9);
        let w = solve_eloreta_weights(&l, 0.1, 1e-14, 2).unwrap();
        assert!(!w.converged);
        assert_eq!(w.iterations, 2);
        assert!(w.residual > 1e-14);
    }

    #[test]
    fn noiseless_scan_finds_truth() {
        let sc = SourceScenario::random(12, 10);
        let mut rng = seeded_rng(12, 1);
        let grid = CandidateGrid::random(&mut rng, 10, 3, 15, Some(sc.leadfield())).unwrap();
        let d = sc.dipole_topography();
        let report = scan(&Metric::identity(10), &grid, &d).unwrap();
        let i = report.argmax.unwrap();
        assert_eq!(report.argmax_id.as_deref(), Some("true"));
        assert!((report.rows[i].gof.unwrap() - 1.0).abs() < 1e-12);
        assert!(!report.is_tie);

        let scaled = scan(&Metric::identity(10), &grid, &(&d * -2.5)).unwrap();
        assert_eq!(scaled.argmax, report.argmax);
    }

    #[test]
    fn single_candidate_and_ties() {
        let mut rng = seeded_rng(14, 0);
        let a = random_leadfield(&mut rng, 6, 3);
        let grid = CandidateGrid::new(vec![("only".into(), a.clone())]).unwrap();
        let d = random_vec(14, 1, 6);
        let r = scan(&Metric::identity(6), &grid, &d).unwrap();
        assert_eq!(r.argmax, Some(0));

        // Same range, different parametrization: identical GOF.
        let g = nalgebra::dmatrix![1.0, 2.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 3.0];
        let grid = CandidateGrid::new(vec![
            ("x".into(), random_leadfield(&mut rng, 6, 3)),
            ("a".into(), a.clone()),
            ("ag".into(), &a * g),
        ])
        .unwrap();
        let r = scan(&Metric::identity(6), &grid, &d).unwrap();
        if r.argmax == Some(1) {
            assert!(r.is_tie);
        }
        let (i, tie) = argmax_with_ties(&[Some(0.5), Some(0.9), Some(0.9), None]);
        assert_eq!((i, tie), (Some(1), true));
        assert_eq!(argmax_with_ties(&[None, None]), (None, false));
    }

    #[test]
    fn scan_flags_degenerate_candidates() {
        let mut rng = seeded_rng(15, 0);
        let good = random_leadfield(&mut rng, 5, 3);
        // Full column rank in ℝ⁵ but C-degenerate: C kills the candidate's range.
        let c = Metric::new(Mat::from_diagonal(&dvector![1.0, 1.0, 1.0, 0.0, 0.0])).unwrap();
        let mut bad = Mat::zeros(5, 2);
        bad[(3, 0)] = 1.0;
        bad[(4, 1)] = 1.0;
        let grid = CandidateGrid::new(vec![("bad".into(), bad), ("good".into(), good)]).unwrap();
        let d = dvector![1.0, -1.0, 0.5, 0.0, 0.0];
        let r = scan(&c, &grid, &d).unwrap();
        assert_eq!(r.rows[0].flags, vec!["degenerate".to_string()]);
        assert_eq!(r.argmax_id.as_deref(), Some("good"));
        let csv = r.to_csv_string().unwrap();
        assert!(csv.starts_with("candidate_id,gof,sloreta_power,flags\n"));
        assert!(csv.contains("bad,,,degenerate"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json_string().unwrap()).unwrap();
        assert_eq!(json["argmax"], 1);
        assert_eq!(json["is_tie"], false);
        assert!(json["rows"][0]["gof"].is_null());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn gof_is_scale_invariant(seed in 0u64..5000, lambda in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
                let mut rng = seeded_rng(seed, 0);
                let c = Metric::new(random_spd(&mut rng, 7)).unwrap();
                let a = random_leadfield(&mut rng, 7, 3);
                let d = random_vec(seed, 1, 7);
                let g1 = gof(&c, &a, &d).unwrap();
                let g2 = gof(&c, &a, &(&d * lambda)).unwrap();
                prop_assert!((g1 - g2).abs() <= 1e-12);
            }

            #[test]
            fn gof_depends_only_on_range(seed in 0u64..5000) {
                let mut rng = seeded_rng(seed, 0);
                let c = Metric::new(random_spd(&mut rng, 7)).unwrap();
                let a = random_leadfield(&mut rng, 7, 3);
                let g = random_leadfield(&mut rng, 3, 3);
                let d = random_vec(seed, 1, 7);
                let g1 = gof(&c, &a, &d).unwrap();
                let g2 = gof(&c, &(&a * g), &d).unwrap();
                prop_assert!((g1 - g2).abs() <= 1e-10);
            }

            #[test]
            fn sloreta_identity_for_any_recipe(seed in 0u64..5000, recipe in 0usize..4) {
                let mut rng = seeded_rng(seed, 0);
                let n = 9;
                let l = average_reference(&random_leadfield(&mut rng, n, 6));
                let kind = match recipe {
                    0 => MetricKind::Identity,
                    1 => MetricKind::ClassicSloreta { alpha: 0.05 },
                    2 => MetricKind::SekiharaSloreta { alpha: 0.05 },
                    _ => MetricKind::Eloreta { alpha: 0.05 },
                };
                let c = build_metric(&kind, &l, None).unwrap().built;
                let a = average_reference(&random_leadfield(&mut rng, n, 3));
                let d = average_reference(&Mat::from_column_slice(n, 1, random_vec(seed, 1, n).as_slice()))
                    .column(0)
                    .into_owned();
                let p = sloreta_power(&c, &a, &d).unwrap();
                let dn = c.norm_sq(&d).unwrap();
                let rhs = dn * gof(&c, &a, &d).unwrap();
                prop_assert!((p - rhs).abs() <= 1e-10 * dn);
            }
        }
    }
}
