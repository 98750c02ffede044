//! End-to-end orchestration: the three-stage envelope computation, the
//! deterministic single-point baseline it is compared against, a
//! proportional-fairness audit, and seeded Monte Carlo validation against the
//! exact power flow.

use crate::expand::{expand_dfr, verify_expansion, ExpandError, ExpansionProblem};
use crate::linfr::{linearize, parametric_fr, LinError, ParametricFR};
use crate::netmodel::{NetworkModel, Status};
use crate::optbackend::{solve_lp, LpOutcome, LpProblem, SolverFailure};
use crate::polytope::{
    ellipsoid_to_box, max_inscribed_ellipsoid, mtt_contains, remove_redundant, BoxBounds,
    Containment, Ellipsoid, GeomError, Polyhedron, StatusConfig,
};
use crate::utpf::{check_limits, solve_power_flow, Injection, PfError};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage linearize: {0}")]
    Lin(#[from] LinError),
    #[error("stage geometry: {0}")]
    Geom(#[from] GeomError),
    #[error("stage expansion: {0}")]
    Expand(#[from] ExpandError),
    #[error("stage solve: {0}")]
    Solver(#[from] SolverFailure),
    #[error("power flow: {0}")]
    Pf(#[from] PfError),
    #[error("network has no active customers")]
    NoActiveCustomers,
    #[error("final containment certificate failed against the full region")]
    CertificationFailed,
    #[error("{0}")]
    Config(String),
}

/// Run configuration for the envelope pipeline and its validation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoeConfig {
    /// Optimise customer reactive setpoints in stage 1 (otherwise they are
    /// fixed at the midpoint of their bounds).
    pub optimize_q: bool,
    /// Exploit per-customer import/export statuses from the network file.
    pub use_statuses: bool,
    /// Penalty weight pinning the unused envelope side of a committed
    /// customer.
    pub eps_md: f64,
    /// Stall tolerance on the expansion log objective.
    pub expansion_tol: f64,
    pub expansion_rounds: usize,
    /// Monte Carlo scenarios per number-of-varying-customers level.
    pub scenarios_per_k: usize,
    pub seed: u64,
    /// Voltage margin (p.u.) absorbed during nonlinear validation of
    /// linearly-derived envelopes.
    pub v_margin: f64,
}

impl Default for RoeConfig {
    fn default() -> Self {
        Self {
            optimize_q: true,
            use_statuses: false,
            eps_md: crate::polytope::DEFAULT_EPS_MD,
            expansion_tol: crate::expand::DEFAULT_STALL_TOL,
            expansion_rounds: crate::expand::DEFAULT_MAX_ROUNDS,
            scenarios_per_k: 100,
            seed: 0,
            v_margin: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CustomerEnvelope {
    pub id: String,
    /// Signed lower bound in kW (exports are negative).
    pub export_kw: f64,
    pub import_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub q_star: Vec<f64>,
    pub ellipsoid: Ellipsoid,
    pub initial_box: BoxBounds,
    pub expanded_box: BoxBounds,
    pub statuses: Vec<i8>,
    pub fr_rows_full: usize,
    pub fr_rows_reduced: usize,
    pub expansion_rounds: usize,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateBundle {
    /// Multiplier matrix certifying the expanded box against the reduced
    /// region (inner rows x reduced-region rows).
    pub multipliers_reduced: Vec<Vec<f64>>,
    /// Whether a separate certificate was obtained against the full
    /// (pre-reduction) region.
    pub verified_against_full: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimingsMs {
    pub inscribe: u128,
    pub reduce: u128,
    pub expand: u128,
    pub total: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeSet {
    pub customers: Vec<CustomerEnvelope>,
    pub stages: StageArtifacts,
    pub certificates: CertificateBundle,
    /// Wall-clock stage timings; excluded from serialisation so envelope
    /// files are byte-identical across reruns of the same seed.
    #[serde(skip)]
    pub timings: Option<StageTimingsMs>,
}

impl EnvelopeSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("envelope set serialises")
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn statuses_from_net(net: &NetworkModel) -> Vec<i8> {
    net.active_customers()
        .iter()
        .map(|&ci| match net.doc.customers[ci].status() {
            Status::Importing => 1,
            Status::Exporting => -1,
            Status::Free => 0,
        })
        .collect()
}

/// Three-stage envelope computation: inscribe (optionally optimising q and
/// exploiting statuses), reduce, expand, then certify the result against the
/// full region.
pub fn compute_roe(net: &NetworkModel, cfg: &RoeConfig) -> Result<EnvelopeSet, PipelineError> {
    let t_start = Instant::now();
    let acts = net.active_customers();
    if acts.is_empty() {
        return Err(PipelineError::NoActiveCustomers);
    }
    let n = acts.len();
    let lm = linearize(net, None)?;
    let mut pfr = parametric_fr(&lm)?;
    if !cfg.optimize_q {
        let mid = pfr.q_midpoint();
        pfr.q_lo = mid.clone();
        pfr.q_hi = mid;
    }

    let lambdas = if cfg.use_statuses {
        statuses_from_net(net)
    } else {
        vec![0; n]
    };
    let status_cfg = if lambdas.iter().any(|&l| l != 0) {
        Some(StatusConfig {
            lambdas: lambdas.clone(),
            eps_md: cfg.eps_md,
        })
    } else {
        None
    };

    // stage 1: maximum inscribed ellipsoid and its box
    let t1 = Instant::now();
    let (ellipsoid, q_star) = max_inscribed_ellipsoid(&pfr, status_cfg.as_ref())?;
    let mut initial_box = ellipsoid_to_box(&ellipsoid, n);
    // committed customers: snap the pinned side to exactly zero when the
    // slack stayed inactive
    for (k, &lam) in lambdas.iter().enumerate() {
        if lam == 1 && initial_box.lo[k].abs() <= 1e-6 {
            initial_box.lo[k] = 0.0;
        }
        if lam == -1 && initial_box.hi[k].abs() <= 1e-6 {
            initial_box.hi[k] = 0.0;
        }
    }
    let inscribe_ms = t1.elapsed().as_millis();

    // stage 2: fix q, rebuild the region, strip redundant rows
    let t2 = Instant::now();
    let fr_full = pfr.at_q(&q_star)?;
    let (fr_reduced, stats) = remove_redundant(&fr_full)?;
    let reduce_ms = t2.elapsed().as_millis();

    // stage 3: grow the box inside the reduced region
    let t3 = Instant::now();
    let lock_import = lambdas.iter().map(|&l| l == -1).collect();
    let lock_export = lambdas.iter().map(|&l| l == 1).collect();
    let prob = ExpansionProblem {
        initial: initial_box.clone(),
        fr: fr_reduced.clone(),
        lock_import,
        lock_export,
    };
    let res = expand_dfr(&prob, cfg.expansion_tol, cfg.expansion_rounds)?;
    let expand_ms = t3.elapsed().as_millis();

    if !verify_expansion(&res, &initial_box, &fr_reduced) {
        return Err(PipelineError::CertificationFailed);
    }
    // the expanded box must also certify against the full region
    let verified_full = matches!(
        mtt_contains(&res.expanded.to_polyhedron(), &fr_full)?,
        Containment::Certified { .. }
    );
    if !verified_full {
        return Err(PipelineError::CertificationFailed);
    }

    // +0.0 normalises negative zeros out of the serialised output
    let clean = |x: f64| x + 0.0;
    let customers = acts
        .iter()
        .enumerate()
        .map(|(k, &ci)| CustomerEnvelope {
            id: net.doc.customers[ci].id.clone(),
            export_kw: clean(res.expanded.lo[k] * net.doc.base.s_kva),
            import_kw: clean(res.expanded.hi[k] * net.doc.base.s_kva),
            q_kvar: clean(q_star[k] * net.doc.base.s_kva),
        })
        .collect();

    Ok(EnvelopeSet {
        customers,
        stages: StageArtifacts {
            q_star: q_star.to_vec(),
            ellipsoid,
            initial_box,
            expanded_box: res.expanded.clone(),
            statuses: lambdas,
            fr_rows_full: stats.rows_before,
            fr_rows_reduced: stats.rows_after,
            expansion_rounds: res.rounds,
            objective_trace: res.objective_trace.clone(),
        },
        certificates: CertificateBundle {
            multipliers_reduced: res
                .certificate
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            verified_against_full: verified_full,
        },
        timings: Some(StageTimingsMs {
            inscribe: inscribe_ms,
            reduce: reduce_ms,
            expand: expand_ms,
            total: t_start.elapsed().as_millis(),
        }),
    })
}

/// Deterministic single-point baseline: one LP maximising status-weighted
/// total power over the region with q free in its bounds. Returns the
/// allocated powers and the dispatched reactive vector.
pub fn deterministic_baseline(
    net: &NetworkModel,
    statuses: &[i8],
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let lm = linearize(net, None)?;
    let pfr = parametric_fr(&lm)?;
    let n = pfr.n_p();
    let nq = pfr.n_q();
    if statuses.len() != n {
        return Err(PipelineError::Config(format!(
            "{} statuses for {} active customers",
            statuses.len(),
            n
        )));
    }
    let mut lp = LpProblem::new(n + nq);
    for k in 0..n {
        lp.maximize[k] = statuses[k] as f64;
        lp.bounds[k] = (pfr.p_lo[k], pfr.p_hi[k]);
    }
    for j in 0..nq {
        lp.bounds[n + j] = (pfr.q_lo[j], pfr.q_hi[j]);
    }
    for i in 0..pfr.g_p.nrows() {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            if pfr.g_p[[i, j]] != 0.0 {
                row.push((j, pfr.g_p[[i, j]]));
            }
        }
        for j in 0..nq {
            if pfr.q_coef[[i, j]] != 0.0 {
                row.push((n + j, pfr.q_coef[[i, j]]));
            }
        }
        lp.rows.push((row, pfr.r[i]));
    }
    match solve_lp(&lp, crate::optbackend::DEFAULT_TOL)? {
        LpOutcome::Optimal { point, .. } => Ok((point[..n].to_vec(), point[n..n + nq].to_vec())),
        LpOutcome::Infeasible { .. } => Err(PipelineError::Geom(GeomError::EmptyInterior)),
        LpOutcome::Unbounded => Err(PipelineError::Geom(GeomError::Unbounded(
            "baseline LP".into(),
        ))),
    }
}

/// Wraps a baseline allocation as single-sided envelopes so it can run
/// through the same validation protocol: importing customers get [0, p_k],
/// exporting ones [p_k, 0].
pub fn baseline_envelopes(
    net: &NetworkModel,
    alloc: &[f64],
    q: &[f64],
    statuses: &[i8],
) -> EnvelopeSet {
    let acts = net.active_customers();
    let n = acts.len();
    let customers: Vec<CustomerEnvelope> = acts
        .iter()
        .enumerate()
        .map(|(k, &ci)| CustomerEnvelope {
            id: net.doc.customers[ci].id.clone(),
            export_kw: alloc[k].min(0.0),
            import_kw: alloc[k].max(0.0),
            q_kvar: q[k],
        })
        .collect();
    let lo: Vec<f64> = customers.iter().map(|c| c.export_kw).collect();
    let hi: Vec<f64> = customers.iter().map(|c| c.import_kw).collect();
    let bx = BoxBounds { lo, hi };
    EnvelopeSet {
        customers,
        stages: StageArtifacts {
            q_star: q.to_vec(),
            ellipsoid: Ellipsoid {
                l_diag: vec![1e-9; n],
                center: vec![0.0; n],
            },
            initial_box: bx.clone(),
            expanded_box: bx,
            statuses: statuses.to_vec(),
            fr_rows_full: 0,
            fr_rows_reduced: 0,
            expansion_rounds: 0,
            objective_trace: vec![],
        },
        certificates: CertificateBundle {
            multipliers_reduced: vec![],
            verified_against_full: false,
        },
        timings: None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Worst relative-gain sum over sampled feasible perturbations of the
    /// stage-1 solution; nonpositive (within tolerance) certifies the
    /// first-order proportional-fairness condition.
    pub max_condition_step1: f64,
    pub samples_step1: usize,
    /// Same probe around the expanded box (box perturbations inside the
    /// region); may be positive since expansion trades fairness for size.
    pub max_condition_expanded: f64,
    pub samples_expanded: usize,
    pub skipped_coordinates: Vec<usize>,
}

/// Samples feasible perturbations of the stage-1 ellipsoid (and of the
/// expanded box) and evaluates the relative-gain sum
/// sum_i (delta w_i / w_i). For the optimal stage-1 solution the sum cannot
/// be positive beyond solver tolerance.
pub fn fairness_audit(
    env: &EnvelopeSet,
    fr: &Polyhedron,
    n_perturb: usize,
    seed: u64,
) -> FairnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ell = &env.stages.ellipsoid;
    let n = ell.dim();
    let widths: Vec<f64> = env.stages.initial_box.widths();
    let skipped: Vec<usize> = (0..n)
        .filter(|&k| widths[k] <= 1e-9 || ell.l_diag[k] <= 1e-9)
        .collect();

    let mut max_step1 = f64::NEG_INFINITY;
    let mut used1 = 0;
    let scale = 0.05 * ell.l_diag.iter().sum::<f64>() / n as f64;
    let mut attempts = 0;
    while used1 < n_perturb && attempts < 400 * n_perturb {
        attempts += 1;
        let mut cand = ell.clone();
        for k in 0..n {
            cand.l_diag[k] += scale * (rng.gen::<f64>() - 0.5);
            cand.center[k] += scale * (rng.gen::<f64>() - 0.5);
        }
        if cand.l_diag.iter().any(|&l| l <= 1e-12) || !cand.fits_in(fr, 1e-12) {
            continue;
        }
        let cond: f64 = (0..n)
            .filter(|k| !skipped.contains(k))
            .map(|k| (cand.l_diag[k] - ell.l_diag[k]) / ell.l_diag[k])
            .sum();
        max_step1 = max_step1.max(cond);
        used1 += 1;
    }

    let bx = &env.stages.expanded_box;
    let bw = bx.widths();
    let bscale = 0.05 * bw.iter().sum::<f64>() / n as f64;
    let mut max_exp = f64::NEG_INFINITY;
    let mut used2 = 0;
    attempts = 0;
    while used2 < n_perturb && attempts < 400 * n_perturb {
        attempts += 1;
        let mut cand = bx.clone();
        for k in 0..n {
            cand.lo[k] -= bscale * (rng.gen::<f64>() - 0.5);
            cand.hi[k] += bscale * (rng.gen::<f64>() - 0.5);
        }
        if cand.lo.iter().zip(&cand.hi).any(|(l, h)| l >= h) || !cand.fits_in(fr, 1e-12) {
            continue;
        }
        let cond: f64 = (0..n)
            .filter(|k| !skipped.contains(k))
            .map(|k| ((cand.hi[k] - bx.hi[k]) + (bx.lo[k] - cand.lo[k])) / bw[k])
            .sum();
        max_exp = max_exp.max(cond);
        used2 += 1;
    }

    FairnessReport {
        max_condition_step1: max_step1,
        samples_step1: used1,
        max_condition_expanded: max_exp,
        samples_expanded: used2,
        skipped_coordinates: skipped,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationRow {
    /// Number of customers drawing nonzero power in each scenario.
    pub k: usize,
    pub min_v: f64,
    pub max_v: f64,
    pub violations: usize,
    pub nonconverged: usize,
    /// Worst offending (scenario, bus, phase letter, |V|) if any scenario
    /// violated.
    pub worst: Option<(usize, String, char, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub total_violations: usize,
    pub total_nonconverged: usize,
    pub seed: u64,
    pub scenarios_per_k: usize,
    pub v_margin: f64,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,min_v,max_v,violations\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.k, r.min_v, r.max_v, r.violations
            ));
        }
        out
    }
}

/// Replays the random-utilisation protocol against the exact power flow: for
/// each k, draws `scenarios_per_k` scenarios selecting k active customers,
/// scales each selected customer's directed envelope bound by a uniform
/// realisation factor, fixes all active reactive powers at their setpoints,
/// and checks voltage/current limits with the configured margin. Scenarios
/// whose power flow diverges are counted separately.
pub fn monte_carlo_validate(
    net: &NetworkModel,
    env: &EnvelopeSet,
    cfg: &RoeConfig,
) -> Result<ValidationReport, PipelineError> {
    if cfg.scenarios_per_k < 1 {
        return Err(PipelineError::Config("scenario count must be >= 1".into()));
    }
    let acts = net.active_customers();
    let n = acts.len();
    if env.customers.len() != n {
        return Err(PipelineError::Config(format!(
            "envelope set has {} customers, network has {} active",
            env.customers.len(),
            n
        )));
    }
    for (k, &ci) in acts.iter().enumerate() {
        if env.customers[k].id != net.doc.customers[ci].id {
            return Err(PipelineError::Config(format!(
                "envelope customer '{}' does not match network customer '{}'",
                env.customers[k].id, net.doc.customers[ci].id
            )));
        }
    }
    let statuses = &env.stages.statuses;
    let q_set: Vec<f64> = env.customers.iter().map(|c| c.q_kvar).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // all randomness drawn up front so evaluation order cannot disturb it
    let mut scenario_powers: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n * cfg.scenarios_per_k);
    for k in 1..=n {
        for _ in 0..cfg.scenarios_per_k {
            let sel = rand::seq::index::sample(&mut rng, n, k);
            let mut p = vec![0.0; n];
            for idx in sel.iter() {
                let rf: f64 = rng.gen();
                let lam = if statuses.is_empty() {
                    0
                } else {
                    statuses[idx]
                };
                let import_side = match lam {
                    1 => true,
                    -1 => false,
                    _ => rng.gen::<bool>(),
                };
                p[idx] = if import_side {
                    env.customers[idx].import_kw * rf
                } else {
                    env.customers[idx].export_kw * rf
                };
            }
            scenario_powers.push((k, p));
        }
    }

    use rayon::prelude::*;
    struct Outcome {
        k: usize,
        min_v: f64,
        max_v: f64,
        violated: bool,
        converged: bool,
        worst: Option<(String, char, f64)>,
    }
    let outcomes: Vec<Outcome> = scenario_powers
        .par_iter()
        .map(|(k, p)| {
            let inj = Injection::from_active(net, p, &q_set);
            match solve_power_flow(net, &inj, crate::utpf::DEFAULT_TOL, 300) {
                Ok(sol) => {
                    let mut min_v = f64::INFINITY;
                    let mut max_v = f64::NEG_INFINITY;
                    for (bi, bus) in net.doc.buses.iter().enumerate() {
                        if bi == net.reference_bus() {
                            continue;
                        }
                        for &ph in &bus.phases {
                            let m = sol.v_mag(bi, ph);
                            min_v = min_v.min(m);
                            max_v = max_v.max(m);
                        }
                    }
                    let report = check_limits(&sol, net, cfg.v_margin);
                    let worst = report
                        .worst()
                        .map(|v| (v.element.clone(), v.phase.letter(), v.magnitude));
                    Outcome {
                        k: *k,
                        min_v,
                        max_v,
                        violated: !report.is_compliant(),
                        converged: true,
                        worst,
                    }
                }
                Err(_) => Outcome {
                    k: *k,
                    min_v: f64::INFINITY,
                    max_v: f64::NEG_INFINITY,
                    violated: false,
                    converged: false,
                    worst: None,
                },
            }
        })
        .collect();

    let mut rows: Vec<ValidationRow> = (1..=n)
        .map(|k| ValidationRow {
            k,
            min_v: f64::INFINITY,
            max_v: f64::NEG_INFINITY,
            violations: 0,
            nonconverged: 0,
            worst: None,
        })
        .collect();
    for (si, o) in outcomes.iter().enumerate() {
        let row = &mut rows[o.k - 1];
        if !o.converged {
            row.nonconverged += 1;
            continue;
        }
        row.min_v = row.min_v.min(o.min_v);
        row.max_v = row.max_v.max(o.max_v);
        if o.violated {
            row.violations += 1;
            if row.worst.is_none() {
                if let Some((bus, ph, mag)) = &o.worst {
                    row.worst = Some((si % cfg.scenarios_per_k, bus.clone(), *ph, *mag));
                }
            }
        }
    }
    let total_violations = rows.iter().map(|r| r.violations).sum();
    let total_nonconverged = rows.iter().map(|r| r.nonconverged).sum();
    Ok(ValidationReport {
        rows,
        total_violations,
        total_nonconverged,
        seed: cfg.seed,
        scenarios_per_k: cfg.scenarios_per_k,
        v_margin: cfg.v_margin,
    })
}

/// Convenience: the fixed-q region (full rows plus box) an envelope set was
/// computed against.
pub fn region_for_envelopes(
    net: &NetworkModel,
    env: &EnvelopeSet,
) -> Result<Polyhedron, PipelineError> {
    let lm = linearize(net, None)?;
    let pfr = parametric_fr(&lm)?;
    Ok(pfr.at_q(&Array1::from_vec(env.stages.q_star.clone()))?)
}

/// Midpoint-q parametric region, used to compare stage-1 volumes with and
/// without reactive optimisation.
pub fn fixed_q_region(net: &NetworkModel) -> Result<(ParametricFR, Array1<f64>), PipelineError> {
    let lm = linearize(net, None)?;
    let pfr = parametric_fr(&lm)?;
    let mid = pfr.q_midpoint();
    Ok((pfr, mid))
}

/// Verifies the end-to-end containment invariant on an envelope set: every
/// corner (small n) or a sample of corners (large n) of the expanded box
/// satisfies the full region rows with slack >= -tol.
pub fn corners_inside_region(env: &EnvelopeSet, fr: &Polyhedron, tol: f64, seed: u64) -> bool {
    let bx = &env.stages.expanded_box;
    let n = bx.dim();
    if n <= 12 {
        bx.corners().iter().all(|c| fr.max_violation(c) <= tol)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10_000).all(|_| {
            let corner = Array1::from_iter((0..n).map(|k| {
                if rng.gen::<bool>() {
                    bx.hi[k]
                } else {
                    bx.lo[k]
                }
            }));
            fr.max_violation(&corner) <= tol
        })
    }
}
