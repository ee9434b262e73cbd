//! One function per experiment. Instances run in parallel; instance `i` of a
//! run with seed `s` uses the seed [`instance_seed`]`(s, i)` and results are
//! gathered in instance order, so reports do not depend on scheduling.

use std::path::Path;

use dipscan::beamformer::{attach_beamformer_powers, BeamformerInputs};
use dipscan::forward::{
    analytic_covariance, average_reference, random_leadfield, recover_source_direction,
    sample_covariance, seeded_rng, simulate_samples, standard_normal_matrix, CandidateGrid,
    CovariancePair, SourceScenario,
};
use dipscan::lab::{
    beamformer_gof_certification, gradient_check, is_whitening_metric, kernel_invariance_report,
    prewhitening_sufficiency, refine_trace_ratio_bias, sloreta_identity_deviation,
    trace_ratio_bias, whitening_distance, whitening_witness,
};
use dipscan::linalg::rel_frobenius;
use dipscan::matrix_io::{read_matrix, write_matrix};
use dipscan::report::{cell, real, CertificationReport, InstanceTable};
use dipscan::scan::{
    build_metric, scan_with_label, solve_eloreta_weights, weighted_ls_fit, MetricKind,
    ScanReport, ELORETA_MAX_ITER,
};
use dipscan::{Error, Mat, Metric, Vector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig, MetricSpec, NoiseSpec};
use crate::CliError;

pub const DEFAULT_IDENTITY_TOL: f64 = 1e-10;
pub const DEFAULT_TRANSFER_TOL: f64 = 1e-9;
pub const DEFAULT_TRACE_TOL: f64 = 1e-14;
pub const DEFAULT_REFINE_RATE: f64 = 0.9;
pub const DEFAULT_GRADIENT_TOL: f64 = 1e-5;
pub const DEFAULT_ZERO_GRADIENT_TOL: f64 = 1e-8;
pub const DEFAULT_ELORETA_TOL: f64 = 1e-9;
pub const SUFFICIENCY_ALPHAS: [f64; 3] = [0.5, 1.0, 2.0];

/// Seed of instance `index` in a run with master seed `master`.
pub fn instance_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Result of one run.
#[derive(Debug, Clone)]
pub enum Outcome {
    Certification(CertificationReport),
    Scan(ScanOutcome),
    Simulation(SimulationReport),
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub seed: u64,
    pub report: ScanReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub experiment: String,
    pub seed: u64,
    pub sensors: usize,
    pub samples: usize,
    pub amplitude_var: f64,
    /// `‖R̂ − R‖_F / ‖R‖_F`.
    pub covariance_rel_error: f64,
    pub rank_deficient: bool,
    /// Angle in radians between the recovered direction and the source vector.
    pub direction_angle: Option<f64>,
    #[serde(skip)]
    pub table: InstanceTable,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        match self {
            Self::Certification(r) => r.pass,
            Self::Scan(_) | Self::Simulation(_) => true,
        }
    }

    pub fn to_json_string(&self) -> dipscan::Result<String> {
        match self {
            Self::Certification(r) => r.to_json_string(),
            Self::Scan(s) => s.report.to_json_string(),
            Self::Simulation(s) => Ok(serde_json::to_string_pretty(s)? + "\n"),
        }
    }

    pub fn to_csv_string(&self) -> dipscan::Result<String> {
        match self {
            Self::Certification(r) => r.to_csv_string(),
            Self::Scan(s) => s.report.to_csv_string(),
            Self::Simulation(s) => s.table.to_csv_string(),
        }
    }

    pub fn summary_line(&self) -> String {
        match self {
            Self::Certification(r) => r.summary_line(),
            Self::Scan(s) => format!(
                "scan seed={} metric={} candidates={} argmax={} tie={}",
                s.seed,
                s.report.metric,
                s.report.rows.len(),
                s.report.argmax_id.as_deref().unwrap_or("none"),
                s.report.is_tie
            ),
            Self::Simulation(s) => format!(
                "simulate seed={} sensors={} samples={} covariance_rel_error={:e} direction_angle={}",
                s.seed,
                s.sensors,
                s.samples,
                s.covariance_rel_error,
                s.direction_angle
                    .map(|a| format!("{a:e}"))
                    .unwrap_or_else(|| "none".into())
            ),
        }
    }

    /// Seeds of failing instances, for diagnostics.
    pub fn failed_seeds(&self) -> Vec<u64> {
        match self {
            Self::Certification(r) => r
                .summary
                .get("failed_seeds")
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(|s| s.as_u64()).collect())
                .unwrap_or_default(),
            _ => Vec::new(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let ctx = Context::new(cfg)?;
    Ok(match cfg.experiment {
        Experiment::Thm1 => Outcome::Certification(sloreta_identity(&ctx)?),
        Experiment::Thm2Sufficiency => Outcome::Certification(sufficiency(&ctx)?),
        Experiment::Thm2Witness => Outcome::Certification(witness(&ctx)?),
        Experiment::Thm4 => Outcome::Certification(transfer(&ctx)?),
        Experiment::Thm5 => Outcome::Certification(bias(&ctx)?),
        Experiment::Gradcheck => Outcome::Certification(gradcheck(&ctx)?),
        Experiment::Eloreta => Outcome::Certification(eloreta(&ctx)?),
        Experiment::Scan => Outcome::Scan(scan_one(&ctx)?),
        Experiment::Simulate => Outcome::Simulation(simulate(&ctx)?),
    })
}

/// Config plus the matrices it references, loaded once.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    explicit_noise: Option<Mat>,
    explicit_metric: Option<Mat>,
}

fn load(path: &Path, n: usize, what: &str) -> Result<Mat, CliError> {
    let m = read_matrix(path)?;
    if m.shape() != (n, n) {
        return Err(CliError::Core(Error::DimensionMismatch {
            expected: format!("{n}x{n} {what} in {}", path.display()),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        }));
    }
    Ok(m)
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, CliError> {
        let explicit_noise = match &cfg.noise {
            NoiseSpec::Explicit(p) => Some(load(p, cfg.sensors, "noise covariance")?),
            _ => None,
        };
        let explicit_metric = match &cfg.metric {
            MetricSpec::Explicit(p) => Some(load(p, cfg.sensors, "metric")?),
            _ => None,
        };
        Ok(Self {
            cfg,
            explicit_noise,
            explicit_metric,
        })
    }

    fn scenario(&self, seed: u64) -> dipscan::Result<SourceScenario> {
        let sc = SourceScenario::random(seed, self.cfg.sensors);
        match &self.cfg.noise {
            NoiseSpec::RandomSpd => Ok(sc),
            NoiseSpec::White(sigma) => {
                let n = self.cfg.sensors;
                sc.with_noise(Mat::identity(n, n) * (sigma * sigma))
            }
            NoiseSpec::Explicit(_) => {
                sc.with_noise(self.explicit_noise.clone().expect("loaded with the config"))
            }
        }
    }

    fn kind(&self) -> MetricKind {
        self.cfg.metric.kind(self.cfg.alpha, self.explicit_metric.clone())
    }

    fn metric(&self, complete: &Mat, noise: &Mat) -> dipscan::Result<Metric> {
        Ok(build_metric(&self.kind(), complete, Some(noise))?.built)
    }

    fn report(&self, tolerance: f64, table: InstanceTable) -> CertificationReport {
        let mut r = CertificationReport::new(
            self.cfg.experiment.name(),
            self.cfg.seed,
            tolerance,
            table,
        );
        r.instances = self.cfg.instances;
        r
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.instances)
            .map(|i| instance_seed(self.cfg.seed, i))
            .collect()
    }
}

fn f(v: f64) -> String {
    real(v)
}

fn finish(r: &mut CertificationReport, failed: Vec<u64>) {
    r.require(failed.is_empty());
    r.note("failed_seeds", failed);
}

fn avg_vector(d: &Vector) -> Vector {
    average_reference(&Mat::from_column_slice(d.len(), 1, d.as_slice()))
        .column(0)
        .into_owned()
}

fn sloreta_identity(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("identity", DEFAULT_IDENTITY_TOL);
    let header = [
        "instance", "seed", "candidate_id", "k", "gof", "sloreta_power", "data_norm_sq",
        "deviation", "flags",
    ];
    type Rows = Vec<(Vec<String>, Option<f64>)>;
    let per_instance: Vec<dipscan::Result<Rows>> = ctx
        .seeds()
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let sc = ctx.scenario(seed)?;
            let mut rng = seeded_rng(seed, 1);
            let mut grid = CandidateGrid::random(&mut rng, cfg.sensors, cfg.k, cfg.grid_size, None)?;
            let mut d = simulate_samples(&sc, 1)?.column(0).into_owned();
            if ctx.kind().needs_average_reference() {
                grid = grid.map_leadfields(average_reference)?;
                d = avg_vector(&d);
            }
            let c = ctx.metric(&grid.complete_leadfield(), sc.noise_cov())?;
            Ok(grid
                .iter()
                .map(|(id, a)| {
                    let fit = weighted_ls_fit(&c, a, &d);
                    let dev = sloreta_identity_deviation(&c, a, &d);
                    let power = dipscan::scan::sloreta_power(&c, a, &d).ok();
                    let flags = match (&fit, &dev) {
                        (Err(e), _) | (_, Err(e)) => e.to_string(),
                        _ => String::new(),
                    };
                    let fit = fit.ok();
                    let dev = dev.ok();
                    (
                        vec![
                            i.to_string(),
                            seed.to_string(),
                            id.to_string(),
                            a.ncols().to_string(),
                            cell(fit.as_ref().map(|x| x.gof)),
                            cell(power),
                            cell(fit.as_ref().map(|x| x.data_norm_sq)),
                            cell(dev),
                            flags,
                        ],
                        dev,
                    )
                })
                .collect())
        })
        .collect();

    let mut r = ctx.report(tol, InstanceTable::new(header));
    r.set_tolerance("identity", tol);
    let mut failed = Vec::new();
    for (seed, rows) in ctx.seeds().into_iter().zip(per_instance) {
        let mut ok = true;
        for (row, dev) in rows? {
            match dev {
                Some(dev) => {
                    r.record_deviation(dev);
                    ok &= dev <= tol;
                }
                None => ok = false,
            }
            r.table.push(row)?;
        }
        if !ok {
            failed.push(seed);
        }
    }
    r.note("metric", ctx.kind().to_string());
    finish(&mut r, failed);
    Ok(r)
}

fn sufficiency(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("margin", 0.0);
    let header = ["instance", "seed", "alpha", "argmin_id", "margin", "tie", "ok"];
    let per_instance: Vec<dipscan::Result<_>> = ctx
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let sc = ctx.scenario(seed)?;
            let mut rng = seeded_rng(seed, 1);
            let k = sc.leadfield().ncols();
            let grid =
                CandidateGrid::random(&mut rng, cfg.sensors, k, cfg.grid_size, Some(sc.leadfield()))?;
            prewhitening_sufficiency(&sc, &grid, &SUFFICIENCY_ALPHAS)
        })
        .collect();

    let mut r = ctx.report(0.0, InstanceTable::new(header));
    r.set_tolerance("margin", tol);
    let mut failed = Vec::new();
    let mut min_margin = f64::INFINITY;
    for (i, (seed, outcomes)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let mut ok = true;
        for o in outcomes? {
            let margin_ok = o.margin.is_none_or(|m| m > tol);
            let row_ok = o.argmin_id == "true" && !o.is_tie && margin_ok;
            if let Some(m) = o.margin {
                min_margin = min_margin.min(m);
                r.record_deviation((tol - m).max(0.0));
            }
            ok &= row_ok;
            r.table.push(vec![
                i.to_string(),
                seed.to_string(),
                f(o.alpha),
                o.argmin_id.clone(),
                cell(o.margin),
                o.is_tie.to_string(),
                row_ok.to_string(),
            ])?;
        }
        if !ok {
            failed.push(seed);
        }
    }
    if min_margin.is_finite() {
        r.note("min_margin", min_margin);
    }
    finish(&mut r, failed);
    Ok(r)
}

fn witness(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("improvement", 0.0);
    let header = [
        "instance", "seed", "whitening_distance", "outcome", "improvement", "step",
        "expected_rv_before", "expected_rv_after", "control_refused", "ok",
    ];
    struct Row {
        distance: f64,
        outcome: String,
        improvement: Option<f64>,
        step: Option<f64>,
        rv: (Option<f64>, Option<f64>),
        control_refused: bool,
        ok: bool,
    }
    let per_instance: Vec<dipscan::Result<Row>> = ctx
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let sc = ctx.scenario(seed)?;
            let mut rng = seeded_rng(seed, 1);
            let grid = CandidateGrid::random(
                &mut rng,
                cfg.sensors,
                sc.leadfield().ncols(),
                cfg.grid_size,
                Some(sc.leadfield()),
            )?;
            let c = ctx.metric(&grid.complete_leadfield(), sc.noise_cov())?;
            let n_inv = Metric::new(sc.noise_cov().clone())?.inverse()?;
            let control_refused =
                matches!(whitening_witness(&sc, &n_inv), Err(Error::WhiteningMetric));
            let whitening = is_whitening_metric(&c, sc.noise_cov());
            let mut row = Row {
                distance: whitening_distance(&c, sc.noise_cov()),
                outcome: String::new(),
                improvement: None,
                step: None,
                rv: (None, None),
                control_refused,
                ok: false,
            };
            match whitening_witness(&sc, &c) {
                Ok(w) => {
                    row.outcome = "witness".into();
                    row.improvement = Some(w.improvement);
                    row.step = Some(w.step);
                    row.rv = (Some(w.expected_rv_before), Some(w.expected_rv_after));
                    row.ok = !whitening
                        && w.improvement > tol
                        && w.expected_rv_after < w.expected_rv_before;
                }
                Err(Error::WhiteningMetric) => {
                    row.outcome = "refused".into();
                    row.ok = whitening;
                }
                Err(Error::NoWitness) => row.outcome = "no_witness".into(),
                Err(e) => return Err(e),
            }
            row.ok &= control_refused;
            Ok(row)
        })
        .collect();

    let mut r = ctx.report(0.0, InstanceTable::new(header));
    r.set_tolerance("improvement", tol);
    let mut failed = Vec::new();
    let mut found = 0usize;
    for (i, (seed, row)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let row = row?;
        if let Some(imp) = row.improvement {
            found += 1;
            r.record_deviation((tol - imp).max(0.0));
        }
        if !row.ok {
            failed.push(seed);
        }
        r.table.push(vec![
            i.to_string(),
            seed.to_string(),
            f(row.distance),
            row.outcome,
            cell(row.improvement),
            cell(row.step),
            cell(row.rv.0),
            cell(row.rv.1),
            row.control_refused.to_string(),
            row.ok.to_string(),
        ])?;
    }
    r.note("metric", ctx.kind().to_string());
    r.note("witnesses", found);
    finish(&mut r, failed);
    Ok(r)
}

/// Candidate with the source vector in its range: `[L₀η, extra…]` for `k < 3`,
/// `[L₀, extra…]` otherwise.
pub fn truth_candidate<R: rand::Rng + ?Sized>(
    sc: &SourceScenario,
    k: usize,
    rng: &mut R,
) -> Mat {
    let n = sc.sensors();
    let l0 = sc.leadfield();
    let base = if k >= l0.ncols() {
        l0.clone()
    } else {
        Mat::from_column_slice(n, 1, sc.dipole_topography().as_slice())
    };
    let extra = k - base.ncols();
    if extra == 0 {
        return base;
    }
    loop {
        let more = random_leadfield(rng, n, extra);
        let mut m = Mat::zeros(n, k);
        m.columns_mut(0, base.ncols()).copy_from(&base);
        m.columns_mut(base.ncols(), extra).copy_from(&more);
        if dipscan::linalg::has_full_column_rank(&m) {
            return m;
        }
    }
}

fn transfer(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("identity", DEFAULT_TRANSFER_TOL);
    let header = [
        "instance", "seed", "candidate_id", "k", "gof", "p_nai", "p_sam", "nai_deviation",
        "sam_deviation", "transform_deviation", "q",
    ];
    let per_instance: Vec<dipscan::Result<_>> = ctx
        .seeds()
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let sc = ctx.scenario(seed)?;
            let k = 1 + i % cfg.k.min(cfg.sensors - 1);
            let mut rng = seeded_rng(seed, 1);
            let truth = (i % 2 == 0).then(|| truth_candidate(&sc, k, &mut rng));
            let grid = CandidateGrid::random(&mut rng, cfg.sensors, k, cfg.grid_size, truth.as_ref())?;
            let cert = beamformer_gof_certification(
                &analytic_covariance(&sc),
                &grid,
                truth.as_ref().map(|_| "true"),
            )?;
            Ok(cert)
        })
        .collect();

    let mut r = ctx.report(tol, InstanceTable::new(header));
    r.set_tolerance("identity", tol);
    let mut failed = Vec::new();
    let mut pairs = 0usize;
    for (i, (seed, cert)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let cert = cert?;
        let scale = 1.0 + cert.constants.q;
        let scaled = cert.max_deviation / scale;
        r.record_deviation(scaled);
        pairs += cert.ordered_pairs;
        let ok = scaled <= tol
            && cert.argmax_agree
            && cert.truth_recovered.unwrap_or(true)
            && cert.ordering_consistent
            && cert.flagged.is_empty();
        if !ok {
            failed.push(seed);
        }
        for c in &cert.checks {
            r.table.push(vec![
                i.to_string(),
                seed.to_string(),
                c.candidate_id.clone(),
                c.k.to_string(),
                f(c.gof),
                f(c.p_nai),
                f(c.p_sam),
                f(c.nai_deviation),
                f(c.sam_deviation),
                f(c.transform_deviation),
                f(cert.constants.q),
            ])?;
        }
    }
    r.note("deviation_scale", "1 + q");
    r.note("ordered_pairs", pairs);
    finish(&mut r, failed);
    Ok(r)
}

fn bias(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("trace", DEFAULT_TRACE_TOL);
    let rate_tol = cfg.tolerance("refine_rate", DEFAULT_REFINE_RATE);
    let header = [
        "instance", "seed", "status", "epsilon", "nai_before", "nai_after", "trace_deviation",
        "refined", "refined_nai", "refined_gof", "draws",
    ];
    let per_instance: Vec<dipscan::Result<_>> = ctx
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let sc = ctx.scenario(seed)?;
            match trace_ratio_bias(&sc) {
                Ok(mut bc) => {
                    bc.refinement = refine_trace_ratio_bias(&sc, &bc, &mut seeded_rng(seed, 2))?;
                    Ok(Some(bc))
                }
                Err(Error::BalancedCase) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut r = ctx.report(tol, InstanceTable::new(header));
    r.set_tolerance("trace", tol);
    r.set_tolerance("refine_rate", rate_tol);
    let mut failed = Vec::new();
    let (mut constructed, mut refined) = (0usize, 0usize);
    for (i, (seed, bc)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let row = match bc? {
            None => vec![
                i.to_string(),
                seed.to_string(),
                "balanced".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                String::new(),
                String::new(),
                String::new(),
            ],
            Some(bc) => {
                constructed += 1;
                r.record_deviation(bc.trace_deviation);
                if !bc.increases() || bc.trace_deviation > tol {
                    failed.push(seed);
                }
                let refinement = bc.refinement.as_ref();
                refined += refinement.is_some() as usize;
                vec![
                    i.to_string(),
                    seed.to_string(),
                    "constructed".into(),
                    f(bc.epsilon),
                    f(bc.nai_before),
                    f(bc.nai_after),
                    f(bc.trace_deviation),
                    refinement.is_some().to_string(),
                    cell(refinement.map(|x| x.nai)),
                    cell(refinement.map(|x| x.gof)),
                    refinement.map(|x| x.draws.to_string()).unwrap_or_default(),
                ]
            }
        };
        r.table.push(row)?;
    }
    let rate = if constructed == 0 {
        0.0
    } else {
        refined as f64 / constructed as f64
    };
    r.note("constructed", constructed);
    r.note("refined", refined);
    r.note("refine_rate", rate);
    r.require(constructed > 0 && rate >= rate_tol);
    finish(&mut r, failed);
    Ok(r)
}

fn gradcheck(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let rel_tol = cfg.tolerance("relative", DEFAULT_GRADIENT_TOL);
    let zero_tol = cfg.tolerance("zero", DEFAULT_ZERO_GRADIENT_TOL);
    let header = [
        "instance", "seed", "mode", "analytic", "numeric", "rel_error", "scale", "deviation",
        "kernel_residual", "kernel_invariant", "gradient_vanishes",
    ];
    let per_instance: Vec<dipscan::Result<_>> = ctx
        .seeds()
        .into_par_iter()
        .map(|seed| {
            let sc = ctx.scenario(seed)?;
            let mut rng = seeded_rng(seed, 1);
            let grid = CandidateGrid::random(&mut rng, cfg.sensors, 3, cfg.grid_size, None)?;
            let c = ctx.metric(&grid.complete_leadfield(), sc.noise_cov())?;
            let a = random_leadfield(&mut rng, cfg.sensors, cfg.k);
            let b = random_leadfield(&mut rng, cfg.sensors, cfg.k);
            let chk = gradient_check(&c, &a, sc.noise_cov(), &b)?;
            let kernel = kernel_invariance_report(&c, sc.noise_cov(), &a, &mut rng)?;
            Ok((is_whitening_metric(&c, sc.noise_cov()), chk, kernel))
        })
        .collect();

    let mut r = ctx.report(rel_tol, InstanceTable::new(header));
    r.set_tolerance("relative", rel_tol);
    r.set_tolerance("zero", zero_tol);
    let mut failed = Vec::new();
    let mut zero_cases = 0usize;
    let mut max_zero: f64 = 0.0;
    for (i, (seed, res)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let (whitening, chk, kernel) = res?;
        let (mode, dev, ok) = if whitening {
            zero_cases += 1;
            let dev = if chk.scale > 0.0 { chk.analytic.abs() / chk.scale } else { 0.0 };
            max_zero = max_zero.max(dev);
            ("zero", dev, dev <= zero_tol)
        } else {
            r.record_deviation(chk.rel_error);
            ("finite_difference", chk.rel_error, chk.rel_error <= rel_tol)
        };
        if !ok || !kernel.consistent() {
            failed.push(seed);
        }
        r.table.push(vec![
            i.to_string(),
            seed.to_string(),
            mode.into(),
            f(chk.analytic),
            f(chk.numeric),
            f(chk.rel_error),
            f(chk.scale),
            f(dev),
            f(kernel.residual),
            kernel.invariant.to_string(),
            kernel.gradient_vanishes.to_string(),
        ])?;
    }
    if zero_cases == cfg.instances {
        r.tolerance = zero_tol;
        r.max_deviation = max_zero;
    }
    r.note("metric", ctx.kind().to_string());
    r.note("zero_gradient_cases", zero_cases);
    finish(&mut r, failed);
    Ok(r)
}

fn eloreta(ctx: &Context) -> Result<CertificationReport, CliError> {
    let cfg = ctx.cfg;
    let tol = cfg.tolerance("residual", DEFAULT_ELORETA_TOL);
    let header = [
        "instance", "seed", "blocks", "alpha", "iterations", "residual", "converged",
    ];
    let per_instance: Vec<dipscan::Result<_>> = ctx
        .seeds()
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let blocks = 1 + i % cfg.grid_size;
            let l = standard_normal_matrix(&mut seeded_rng(seed, 1), cfg.sensors, 3 * blocks);
            let w = solve_eloreta_weights(&l, cfg.alpha, tol, ELORETA_MAX_ITER)?;
            Ok((blocks, w))
        })
        .collect();

    let mut r = ctx.report(tol, InstanceTable::new(header));
    r.set_tolerance("residual", tol);
    let mut failed = Vec::new();
    for (i, (seed, res)) in ctx.seeds().into_iter().zip(per_instance).enumerate() {
        let (blocks, w) = res?;
        r.record_deviation(w.residual);
        if !w.converged || w.residual > tol {
            failed.push(seed);
        }
        r.table.push(vec![
            i.to_string(),
            seed.to_string(),
            blocks.to_string(),
            f(cfg.alpha),
            w.iterations.to_string(),
            f(w.residual),
            w.converged.to_string(),
        ])?;
    }
    finish(&mut r, failed);
    Ok(r)
}

fn scenario_pair(ctx: &Context, sc: &SourceScenario) -> dipscan::Result<CovariancePair> {
    if ctx.cfg.samples < ctx.cfg.sensors {
        return Err(Error::InsufficientSamples {
            samples: ctx.cfg.samples,
            sensors: ctx.cfg.sensors,
        });
    }
    let cov = sample_covariance(&simulate_samples(sc, ctx.cfg.samples)?)?;
    CovariancePair::from_samples(&cov, sc.noise_cov().clone())
}

fn scan_one(ctx: &Context) -> Result<ScanOutcome, CliError> {
    let cfg = ctx.cfg;
    let sc = ctx.scenario(cfg.seed)?;
    let cp = scenario_pair(ctx, &sc)?;
    let mut d = recover_source_direction(&cp)?;
    let mut rng = seeded_rng(cfg.seed, 1);
    let truth = truth_candidate(&sc, cfg.k, &mut rng);
    let mut grid = CandidateGrid::random(&mut rng, cfg.sensors, cfg.k, cfg.grid_size, Some(&truth))?;
    let beam_grid = grid.clone();
    if ctx.kind().needs_average_reference() {
        grid = grid.map_leadfields(average_reference)?;
        d = avg_vector(&d);
    }
    let c = ctx.metric(&grid.complete_leadfield(), sc.noise_cov())?;
    let mut report = scan_with_label(&c, &grid, &d, &ctx.kind().to_string())?;
    attach_beamformer_powers(&mut report, &BeamformerInputs::from_pair(&cp)?, &beam_grid);
    Ok(ScanOutcome {
        seed: cfg.seed,
        report,
    })
}

fn simulate(ctx: &Context) -> Result<SimulationReport, CliError> {
    let cfg = ctx.cfg;
    let sc = ctx.scenario(cfg.seed)?;
    let samples = simulate_samples(&sc, cfg.samples)?;
    if cfg.write_samples {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Io {
            path: cfg.out_dir.clone(),
            source: e,
        })?;
        write_matrix(cfg.out_dir.join(format!("{}-samples.txt", cfg.stem())), &samples)?;
    }
    let analytic = analytic_covariance(&sc);
    let (sample_r, rank_deficient, direction_angle) = if cfg.samples >= cfg.sensors {
        let cov = sample_covariance(&samples)?;
        let angle = CovariancePair::from_samples(&cov, sc.noise_cov().clone())
            .and_then(|cp| recover_source_direction(&cp))
            .ok()
            .map(|v| {
                let x = analytic.source_vector().expect("analytic pair");
                let xh = x / x.norm();
                (&v - &xh * v.dot(&xh)).norm().min(1.0).asin()
            });
        (cov.matrix, cov.rank_deficient, angle)
    } else {
        ((&samples * samples.transpose()) / cfg.samples as f64, true, None)
    };
    let mut table = InstanceTable::new(["row", "col", "analytic", "sample"]);
    for i in 0..cfg.sensors {
        for j in i..cfg.sensors {
            table.push(vec![
                i.to_string(),
                j.to_string(),
                f(analytic.r[(i, j)]),
                f(sample_r[(i, j)]),
            ])?;
        }
    }
    Ok(SimulationReport {
        experiment: cfg.experiment.name().into(),
        seed: cfg.seed,
        sensors: cfg.sensors,
        samples: cfg.samples,
        amplitude_var: sc.q2(),
        covariance_rel_error: rel_frobenius(&sample_r, &analytic.r),
        rank_deficient,
        direction_angle,
        table,
    })
}
