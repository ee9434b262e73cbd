//! Synthetic single-source data: leadfields, candidate grids, noise models,
//! sample generation and covariance pairs.
//!
//! Data follow `d(t) = L₀ (s(t) η) + n(t)` with `s(t) ~ 𝒩(0, Q²)` and
//! `n(t) ~ 𝒩(0, N)` independent of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape, Error, Result};
use crate::linalg::{has_full_column_rank, symmetrize, Metric};
use crate::{Mat, Vector};

/// Columns simulated per independently seeded block.
pub const SAMPLE_BLOCK: usize = 1024;

/// Deterministic generator for `(seed, stream)`. Distinct streams are
/// independent, which lets batch units and sample blocks run in any order.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    // Filled row by row so the draw order matches the row-major storage convention.
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_row_slice(rows, cols, &data)
}

/// i.i.d. standard normal `n × k` matrix, redrawn until it has full column rank.
pub fn random_leadfield<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Mat {
    assert!(k >= 1 && k <= n, "leadfield must be tall: {n}x{k}");
    loop {
        let a = standard_normal_matrix(rng, n, k);
        if has_full_column_rank(&a) {
            return a;
        }
    }
}

/// Random SPD matrix with a Haar-like eigenbasis and eigenvalues log-uniform in `[0.5, 5]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mat {
    let g = standard_normal_matrix(rng, n, n);
    let q = g.qr().q();
    let values = Vector::from_fn(n, |_, _| (rng.random_range(0.5f64.ln()..5.0f64.ln())).exp());
    symmetrize(&(&q * Mat::from_diagonal(&values) * q.transpose()))
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vector {
    loop {
        let v = Vector::from_fn(k, |_, _| rng.sample(StandardNormal));
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Applies the average-reference projection `H = I − 𝟙𝟙ᵀ/n` to every column.
pub fn average_reference(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Generative model of the noisy single-source setting.
#[derive(Debug, Clone)]
pub struct SourceScenario {
    leadfield: Mat,
    orientation: Vector,
    amplitude_var: f64,
    noise_cov: Mat,
    seed: u64,
}

impl SourceScenario {
    /// `q2 = 0` is accepted and describes a silent source (`R = N`).
    pub fn new(
        leadfield: Mat,
        orientation: Vector,
        q2: f64,
        noise_cov: Mat,
        seed: u64,
    ) -> Result<Self> {
        let n = leadfield.nrows();
        if leadfield.ncols() != orientation.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("orientation of length {}", leadfield.ncols()),
                found: format!("length {}", orientation.len()),
            });
        }
        if noise_cov.nrows() != n || noise_cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: shape(n, n),
                found: shape(noise_cov.nrows(), noise_cov.ncols()),
            });
        }
        if (orientation.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "orientation must be a unit vector (norm {})",
                orientation.norm()
            )));
        }
        if !(q2 >= 0.0) || !q2.is_finite() {
            return Err(Error::Invalid(format!("source power {q2} must be nonnegative")));
        }
        if !has_full_column_rank(&leadfield) {
            return Err(Error::DegenerateCandidate);
        }
        if !Metric::new(noise_cov.clone())?.is_full_rank() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self {
            leadfield,
            orientation,
            amplitude_var: q2,
            noise_cov: symmetrize(&noise_cov),
            seed,
        })
    }

    /// Random scenario: `N×3` Gaussian leadfield, uniform orientation,
    /// `Q² ∈ [0.5, 2]` and a random SPD noise covariance.
    pub fn random(seed: u64, sensors: usize) -> Self {
        let mut rng = seeded_rng(seed, 0);
        let leadfield = random_leadfield(&mut rng, sensors, 3);
        let orientation = random_unit_vector(&mut rng, 3);
        let q2 = rng.random_range(0.5..2.0);
        let noise = random_spd(&mut rng, sensors);
        Self::new(leadfield, orientation, q2, noise, seed).expect("random scenario is valid")
    }

    pub fn sensors(&self) -> usize {
        self.leadfield.nrows()
    }

    pub fn leadfield(&self) -> &Mat {
        &self.leadfield
    }

    pub fn orientation(&self) -> &Vector {
        &self.orientation
    }

    pub fn q2(&self) -> f64 {
        self.amplitude_var
    }

    pub fn noise_cov(&self) -> &Mat {
        &self.noise_cov
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, noise_cov: Mat) -> Result<Self> {
        if !Metric::new(noise_cov.clone())?.is_full_rank() {
            return Err(Error::NotPositiveDefinite);
        }
        self.noise_cov = symmetrize(&noise_cov);
        Ok(self)
    }

    /// Unit-power noiseless dipolar signal `L₀η`.
    pub fn dipole_topography(&self) -> Vector {
        &self.leadfield * &self.orientation
    }

    pub fn effective_source(&self) -> EffectiveSourceVector {
        EffectiveSourceVector::from_scenario(self)
    }
}

/// `x = √Q² · L₀η`, the source term in `R = N + xxᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSourceVector {
    pub x: Vector,
}

impl EffectiveSourceVector {
    pub fn from_scenario(sc: &SourceScenario) -> Self {
        Self {
            x: sc.dipole_topography() * sc.q2().sqrt(),
        }
    }
}

/// Ordered list of candidate leadfields over one sensor array.
#[derive(Debug, Clone)]
pub struct CandidateGrid {
    ids: Vec<String>,
    leadfields: Vec<Mat>,
    sensors: usize,
}

impl CandidateGrid {
    pub fn new(candidates: Vec<(String, Mat)>) -> Result<Self> {
        let sensors = candidates
            .first()
            .map(|(_, a)| a.nrows())
            .ok_or_else(|| Error::Invalid("candidate grid is empty".into()))?;
        let mut ids = Vec::with_capacity(candidates.len());
        let mut leadfields = Vec::with_capacity(candidates.len());
        for (id, a) in candidates {
            if a.nrows() != sensors {
                return Err(Error::DimensionMismatch {
                    expected: format!("{sensors} sensor rows"),
                    found: shape(a.nrows(), a.ncols()),
                });
            }
            if !has_full_column_rank(&a) {
                return Err(Error::Invalid(format!("candidate `{id}` is rank deficient")));
            }
            if ids.contains(&id) {
                return Err(Error::Invalid(format!("duplicate candidate id `{id}`")));
            }
            ids.push(id);
            leadfields.push(a);
        }
        Ok(Self {
            ids,
            leadfields,
            sensors,
        })
    }

    /// `count` random `sensors × k` candidates named `c000, c001, …`; when `truth`
    /// is given it is inserted under the id `true` at a seeded position.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        sensors: usize,
        k: usize,
        count: usize,
        truth: Option<&Mat>,
    ) -> Result<Self> {
        let mut candidates: Vec<(String, Mat)> = (0..count)
            .map(|i| (format!("c{i:03}"), random_leadfield(rng, sensors, k)))
            .collect();
        if let Some(t) = truth {
            let pos = rng.random_range(0..=count);
            candidates.insert(pos, ("true".to_string(), t.clone()));
        }
        Self::new(candidates)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn leadfield(&self, i: usize) -> &Mat {
        &self.leadfields[i]
    }

    pub fn leadfields(&self) -> &[Mat] {
        &self.leadfields
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.ids.iter().map(String::as_str).zip(self.leadfields.iter())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Index of the first candidate whose leadfield equals `target` exactly.
    pub fn find(&self, target: &Mat) -> Option<usize> {
        self.leadfields.iter().position(|a| a == target)
    }

    /// Horizontal concatenation `[L₁, …, L_M]`.
    pub fn complete_leadfield(&self) -> Mat {
        let cols: usize = self.leadfields.iter().map(|a| a.ncols()).sum();
        let mut out = Mat::zeros(self.sensors, cols);
        let mut at = 0;
        for a in &self.leadfields {
            out.columns_mut(at, a.ncols()).copy_from(a);
            at += a.ncols();
        }
        out
    }

    pub fn map_leadfields(&self, f: impl Fn(&Mat) -> Mat) -> Result<Self> {
        Self::new(
            self.iter()
                .map(|(id, a)| (id.to_string(), f(a)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// `R = N + xxᵀ` for the recorded source vector.
    Analytic { x: Vector },
    Sample { samples: usize },
}

/// Signal second moment `R` and noise covariance `N`.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub r: Mat,
    pub noise: Mat,
    pub provenance: Provenance,
}

impl CovariancePair {
    /// Pairs an estimated second-moment matrix with a known noise covariance.
    pub fn from_samples(cov: &SampleCovariance, noise: Mat) -> Result<Self> {
        if cov.rank_deficient {
            return Err(Error::RankDeficientCovariance);
        }
        if noise.shape() != cov.matrix.shape() {
            return Err(Error::DimensionMismatch {
                expected: shape(cov.matrix.nrows(), cov.matrix.ncols()),
                found: shape(noise.nrows(), noise.ncols()),
            });
        }
        Ok(Self {
            r: cov.matrix.clone(),
            noise: symmetrize(&noise),
            provenance: Provenance::Sample {
                samples: cov.samples,
            },
        })
    }

    pub fn source_vector(&self) -> Option<&Vector> {
        match &self.provenance {
            Provenance::Analytic { x } => Some(x),
            Provenance::Sample { .. } => None,
        }
    }
}

/// `N × T` sample matrix whose columns are `L₀(s_t η) + n_t`.
///
/// Columns are generated in blocks of [`SAMPLE_BLOCK`]; block `b` draws from
/// stream `b + 1` of the scenario seed, so the output does not depend on how
/// blocks are scheduled.
pub fn simulate_samples(sc: &SourceScenario, samples: usize) -> Result<Mat> {
    if samples == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let n = sc.sensors();
    let coloring = Metric::new(sc.noise_cov().clone())?.sqrt_matrix().clone();
    let topo = sc.dipole_topography();
    let amp = sc.q2().sqrt();
    let blocks = samples.div_ceil(SAMPLE_BLOCK);

    let parts: Vec<Mat> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let cols = SAMPLE_BLOCK.min(samples - b * SAMPLE_BLOCK);
            let mut rng = seeded_rng(sc.seed(), b as u64 + 1);
            let mut block = Mat::zeros(n, cols);
            for t in 0..cols {
                let s: f64 = rng.sample::<f64, _>(StandardNormal) * amp;
                let z = Vector::from_fn(n, |_, _| rng.sample(StandardNormal));
                let col = &topo * s + &coloring * z;
                block.set_column(t, &col);
            }
            block
        })
        .collect();

    let mut out = Mat::zeros(n, samples);
    for (b, part) in parts.iter().enumerate() {
        out.columns_mut(b * SAMPLE_BLOCK, part.ncols()).copy_from(part);
    }
    Ok(out)
}

/// `R = N + xxᵀ` with `x = √Q² L₀η`.
pub fn analytic_covariance(sc: &SourceScenario) -> CovariancePair {
    let x = sc.effective_source().x;
    let r = sc.noise_cov() + &x * x.transpose();
    CovariancePair {
        r: symmetrize(&r),
        noise: sc.noise_cov().clone(),
        provenance: Provenance::Analytic { x },
    }
}

#[derive(Debug, Clone)]
pub struct SampleCovariance {
    pub matrix: Mat,
    pub samples: usize,
    /// Set when the estimate is singular under the crate-wide rank tolerance;
    /// such estimates are refused by inversion-based methods.
    pub rank_deficient: bool,
}

/// `(1/T) Σ d_t d_tᵀ`, symmetrized.
pub fn sample_covariance(samples: &Mat) -> Result<SampleCovariance> {
    let (n, t) = samples.shape();
    if t < n {
        return Err(Error::InsufficientSamples {
            samples: t,
            sensors: n,
        });
    }
    let matrix = symmetrize(&((samples * samples.transpose()) / t as f64));
    let rank_deficient = match Metric::new(matrix.clone()) {
        Ok(m) => !m.is_full_rank(),
        Err(_) => true,
    };
    Ok(SampleCovariance {
        matrix,
        samples: t,
        rank_deficient,
    })
}

/// Unit vector spanning `ℝ·x`, read off the top eigenvector of `N^{-1/2} R N^{-1/2}`.
/// The sign makes the first nonzero component positive.
pub fn recover_source_direction(cp: &CovariancePair) -> Result<Vector> {
    let noise = Metric::new(cp.noise.clone())?;
    let whiten = noise.power(-0.5, false)?;
    let white_r = whiten.matrix() * &cp.r * whiten.matrix();
    let spectrum = Metric::new(symmetrize(&white_r))?;
    let vals = spectrum.eigenvalues();
    if vals[0] <= 1.0 + 1e-8 {
        return Err(Error::NotIdentifiable);
    }
    if vals.len() > 1 && vals[0] - vals[1] <= 1e-10 * vals[0] {
        return Err(Error::NotIdentifiable);
    }
    let top = spectrum.eigenvectors().column(0).into_owned();
    let v = noise.sqrt_matrix() * top;
    let v = &v / v.norm();
    Ok(fix_sign(v))
}

/// Flips `v` so that its first component that is not negligible is positive.
pub fn fix_sign(v: Vector) -> Vector {
    let tiny = 1e-12 * v.amax();
    match v.iter().find(|c| c.abs() > tiny) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rel_frobenius, singular_values};
    use nalgebra::dvector;

    fn unit_scenario(x_scale: f64) -> SourceScenario {
        SourceScenario::new(
            Mat::identity(3, 3),
            dvector![1.0, 0.0, 0.0],
            x_scale * x_scale,
            Mat::identity(3, 3),
            0,
        )
        .unwrap()
    }

    #[test]
    fn analytic_covariance_of_unit_source() {
        let cp = analytic_covariance(&unit_scenario(1.0));
        let expected = Mat::from_diagonal(&dvector![2.0, 1.0, 1.0]);
        assert!(rel_frobenius(&cp.r, &expected) < 1e-15);
    }

    #[test]
    fn silent_source_has_r_equal_n() {
        let sc = SourceScenario::random(3, 6);
        let silent = SourceScenario::new(
            sc.leadfield().clone(),
            sc.orientation().clone(),
            0.0,
            sc.noise_cov().clone(),
            3,
        )
        .unwrap();
        let cp = analytic_covariance(&silent);
        assert_eq!(cp.r, cp.noise);
        assert!(matches!(
            recover_source_direction(&cp),
            Err(Error::NotIdentifiable)
        ));
    }

    #[test]
    fn top_whitened_eigenvector_is_whitened_source() {
        let sc = SourceScenario::random(5, 8);
        let cp = analytic_covariance(&sc);
        let x = cp.source_vector().unwrap();
        let w = Metric::new(cp.noise.clone()).unwrap().power(-0.5, false).unwrap();
        let m = Metric::new(symmetrize(&(w.matrix() * &cp.r * w.matrix()))).unwrap();
        let top = m.eigenvectors().column(0).into_owned();
        let wx = w.matrix() * x;
        let cos = (top.dot(&wx) / wx.norm()).abs().min(1.0);
        assert!(cos.acos() <= 1e-8);
    }

    #[test]
    fn analytic_difference_is_rank_one() {
        let sc = SourceScenario::random(9, 10);
        let cp = analytic_covariance(&sc);
        let s = singular_values(&(&cp.r - &cp.noise));
        assert!(s[1] <= 1e-12 * s[0]);
    }

    #[test]
    fn recovers_axis_aligned_source() {
        let v = recover_source_direction(&analytic_covariance(&unit_scenario(3.0))).unwrap();
        assert!((v - dvector![1.0, 0.0, 0.0]).norm() < 1e-12);
    }

    #[test]
    fn recovers_random_source_direction() {
        for seed in 0..10 {
            let sc = SourceScenario::random(seed, 9);
            let cp = analytic_covariance(&sc);
            let v = recover_source_direction(&cp).unwrap();
            let x = cp.source_vector().unwrap();
            let xh = x / x.norm();
            let sin = (&v - &xh * v.dot(&xh)).norm();
            assert!(sin.asin() <= 1e-8, "seed {seed}: {sin:e}");
            assert!(v[0] >= 0.0);
        }
    }

    #[test]
    fn zero_amplitude_samples_are_pure_noise() {
        let sc = SourceScenario::random(17, 6);
        let silent = SourceScenario::new(
            sc.leadfield().clone(),
            sc.orientation().clone(),
            0.0,
            sc.noise_cov().clone(),
            17,
        )
        .unwrap();
        let t = 4000;
        let d = simulate_samples(&silent, t).unwrap();
        let max_var = silent.noise_cov().diagonal().max();
        let bound = 5.0 / (t as f64).sqrt() * max_var.sqrt();
        for i in 0..6 {
            assert!(d.row(i).mean().abs() <= bound, "row {i}");
        }
    }

    #[test]
    fn near_noiseless_samples_are_dipolar() {
        let sc = SourceScenario::random(21, 7)
            .with_noise(Mat::identity(7, 7) * 1e-20)
            .unwrap();
        let d = simulate_samples(&sc, 50).unwrap();
        let u = sc.dipole_topography().normalize();
        for col in d.column_iter() {
            let col = col.into_owned();
            let resid = &col - &u * u.dot(&col);
            assert!(resid.norm() <= 1e-8 * col.norm());
        }
    }

    #[test]
    fn samples_are_deterministic() {
        let sc = SourceScenario::random(42, 5);
        let a = simulate_samples(&sc, 2500).unwrap();
        let b = simulate_samples(&sc, 2500).unwrap();
        assert_eq!(a, b);
        let c = simulate_samples(&sc.clone().with_seed(43), 2500).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_second_moment_within_standard_errors() {
        let sc = SourceScenario::random(42, 8);
        let t = 10_000;
        let d = simulate_samples(&sc, t).unwrap();
        let r = analytic_covariance(&sc).r;
        // Gaussian d: Var(d_i d_j) = R_ii R_jj + R_ij².
        for i in 0..8 {
            for j in 0..8 {
                let est = d.row(i).dot(&d.row(j)) / t as f64;
                let se = ((r[(i, i)] * r[(j, j)] + r[(i, j)].powi(2)) / t as f64).sqrt();
                assert!((est - r[(i, j)]).abs() <= 5.0 * se, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn sample_covariance_converges() {
        let sc = SourceScenario::random(42, 8);
        let d = simulate_samples(&sc, 20_000).unwrap();
        let est = sample_covariance(&d).unwrap();
        assert!(!est.rank_deficient);
        assert!(rel_frobenius(&est.matrix, &analytic_covariance(&sc).r) <= 0.05);
        let pair = CovariancePair::from_samples(&est, sc.noise_cov().clone()).unwrap();
        assert_eq!(pair.provenance, Provenance::Sample { samples: 20_000 });
    }

    #[test]
    fn sample_covariance_edge_cases() {
        let col = dvector![1.0, -2.0, 0.5];
        let d = Mat::from_columns(&vec![col.clone(); 5]);
        let est = sample_covariance(&d).unwrap();
        assert!(rel_frobenius(&est.matrix, &(&col * col.transpose())) < 1e-15);
        assert!(est.rank_deficient);

        let zero = sample_covariance(&Mat::zeros(3, 4)).unwrap();
        assert_eq!(zero.matrix, Mat::zeros(3, 3));
        assert!(zero.rank_deficient);
        assert!(matches!(
            CovariancePair::from_samples(&zero, Mat::identity(3, 3)),
            Err(Error::RankDeficientCovariance)
        ));

        let err = sample_covariance(&Mat::zeros(4, 3)).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"));
    }

    #[test]
    fn scenario_validation() {
        let l = Mat::identity(3, 3);
        let n = Mat::identity(3, 3);
        assert!(SourceScenario::new(l.clone(), dvector![1.0, 1.0, 0.0], 1.0, n.clone(), 0).is_err());
        assert!(SourceScenario::new(l.clone(), dvector![1.0, 0.0, 0.0], -1.0, n.clone(), 0).is_err());
        let rank2 = Mat::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(SourceScenario::new(rank2, dvector![1.0, 0.0, 0.0], 1.0, n, 0).is_err());
        let singular_noise = Mat::from_diagonal(&dvector![1.0, 1.0, 0.0]);
        assert!(SourceScenario::new(l, dvector![1.0, 0.0, 0.0], 1.0, singular_noise, 0).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut rng = seeded_rng(1, 0);
        let a = random_leadfield(&mut rng, 5, 3);
        assert!(CandidateGrid::new(vec![]).is_err());
        assert!(CandidateGrid::new(vec![("a".into(), a.clone()), ("a".into(), a.clone())]).is_err());
        let grid = CandidateGrid::random(&mut rng, 5, 3, 4, Some(&a)).unwrap();
        assert_eq!(grid.len(), 5);
        assert_eq!(grid.find(&a), grid.position("true"));
        assert_eq!(grid.complete_leadfield().ncols(), 15);
    }
}
