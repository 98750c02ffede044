//! Box expansion inside a fixed feasible region. Grows the per-customer
//! bounds of an initial certified box while keeping the whole box inside the
//! region, by alternating two convex steps on the bilinear
//! containment-certificate program:
//!
//! (a) with the bounds fixed, refresh the multiplier certificate by per-row
//!     LPs that maximise each row's slack;
//! (b) with the multipliers fixed, grow the bound increments by a convex
//!     log-width program over the linearised containment constraints.
//!
//! Each step is a restricted maximisation of the same objective, so the
//! objective trace is nondecreasing; every iterate carries a valid
//! containment certificate.

use crate::optbackend::{solve_logcone, ConeOutcome, LogConeProblem, SolverFailure};
use crate::polytope::{
    mtt_contains, verify_certificate, BoxBounds, Containment, GeomError, Polyhedron,
};
use ndarray::{Array1, Array2};

#[derive(Debug, thiserror::Error)]
pub enum ExpandError {
    #[error("initial box is not contained in the region (violated row {row})")]
    InitialNotContained { row: usize, witness: Vec<f64> },
    #[error("region admits no multiplier for row {0}: unbounded in a box direction")]
    NoMultiplier(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Solver(#[from] SolverFailure),
    #[error("shape: {0}")]
    Shape(String),
}

/// Expansion instance: initial box, target region (fixed reactive setpoint,
/// redundancy-stripped), and per-direction growth locks. Locking the import
/// (export) direction of customer k pins its upper (lower) bound increment
/// to zero; used when operational statuses commit a customer to one side.
#[derive(Debug, Clone)]
pub struct ExpansionProblem {
    pub initial: BoxBounds,
    pub fr: Polyhedron,
    pub lock_import: Vec<bool>,
    pub lock_export: Vec<bool>,
}

impl ExpansionProblem {
    pub fn unlocked(initial: BoxBounds, fr: Polyhedron) -> Self {
        let n = initial.dim();
        Self {
            initial,
            fr,
            lock_import: vec![false; n],
            lock_export: vec![false; n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpansionResult {
    pub expanded: BoxBounds,
    /// Bound increments, interleaved [import_1, export_1, import_2, ...].
    pub delta_f: Array1<f64>,
    pub rounds: usize,
    /// Log-width objective after the initial box and after each round.
    pub objective_trace: Vec<f64>,
    /// Multiplier certificate of `expanded` against the region.
    pub certificate: Array2<f64>,
}

pub const DEFAULT_STALL_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ROUNDS: usize = 50;
const WIDTH_FLOOR: f64 = 1e-9;

fn box_from_f(f: &Array1<f64>) -> Result<BoxBounds, GeomError> {
    let n = f.len() / 2;
    let hi: Vec<f64> = (0..n).map(|k| f[2 * k]).collect();
    let lo: Vec<f64> = (0..n).map(|k| -f[2 * k + 1]).collect();
    BoxBounds::new(lo, hi)
}

fn log_objective(f: &Array1<f64>, active: &[bool]) -> f64 {
    let n = f.len() / 2;
    (0..n)
        .filter(|&k| active[k])
        .map(|k| (f[2 * k] + f[2 * k + 1]).max(WIDTH_FLOOR).ln())
        .sum()
}

/// Grows the initial box inside `prob.fr`. Stops when a round improves the
/// log-width objective by less than `tol` or after `max_rounds`. A stall in
/// the very first round returns the initial box with its certificate.
pub fn expand_dfr(
    prob: &ExpansionProblem,
    tol: f64,
    max_rounds: usize,
) -> Result<ExpansionResult, ExpandError> {
    let n = prob.initial.dim();
    if prob.fr.dim() != n {
        return Err(ExpandError::Shape(format!(
            "box dim {} vs region dim {}",
            n,
            prob.fr.dim()
        )));
    }
    if prob.lock_import.len() != n || prob.lock_export.len() != n {
        return Err(ExpandError::Shape(
            "lock vectors must match the box dimension".into(),
        ));
    }
    let u = prob.fr.n_rows();
    let (_, f0) = prob.initial.to_ef();
    let m = 2 * n;

    // customers whose width can never leave the floor are excluded from logs
    let active: Vec<bool> = (0..n)
        .map(|k| {
            let w0 = f0[2 * k] + f0[2 * k + 1];
            w0 > WIDTH_FLOOR || !(prob.lock_import[k] && prob.lock_export[k])
        })
        .collect();

    // initial certificate doubles as the multiplier initialisation
    let mut multipliers = match mtt_contains(&prob.initial.to_polyhedron(), &prob.fr)? {
        Containment::Certified { multipliers, .. } => multipliers,
        Containment::Violated { row, witness } => {
            return Err(ExpandError::InitialNotContained {
                row,
                witness: witness.to_vec(),
            })
        }
    };

    let mut f_cur = f0.clone();
    let mut trace = vec![log_objective(&f_cur, &active)];
    let mut rounds = 0;

    // locked directions are excluded from the solver so they stay exactly zero
    let locked: Vec<bool> = (0..m)
        .map(|j| {
            if j % 2 == 0 {
                prob.lock_import[j / 2]
            } else {
                prob.lock_export[j / 2]
            }
        })
        .collect();
    let var_of: Vec<Option<usize>> = {
        let mut next = 0;
        locked
            .iter()
            .map(|&l| {
                if l {
                    None
                } else {
                    let v = next;
                    next += 1;
                    Some(v)
                }
            })
            .collect()
    };
    let n_free = var_of.iter().flatten().count();

    for round in 1..=max_rounds {
        // step (b): grow increments under the fixed multipliers.
        // vars: [delta(free), w(n)]; -(f0 + delta)' x_i <= g_i turns into
        // sum_j delta_j (-x_{j,i}) <= g_i + f0' x_i.
        let wvar = |k: usize| n_free + k;
        let mut lp = LogConeProblem::new(n_free + n);
        for k in 0..n {
            if active[k] {
                lp.log_terms.push(wvar(k));
            }
            let mut eq = vec![(wvar(k), 1.0)];
            for j in [2 * k, 2 * k + 1] {
                if let Some(v) = var_of[j] {
                    eq.push((v, -1.0));
                }
            }
            lp.eq_rows.push((eq, f0[2 * k] + f0[2 * k + 1]));
            lp.bounds[wvar(k)] = (WIDTH_FLOOR, f64::INFINITY);
        }
        for v in 0..n_free {
            lp.bounds[v] = (0.0, f64::INFINITY);
        }
        for i in 0..u {
            let col = multipliers.column(i);
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut cap = prob.fr.rhs[i];
            for j in 0..m {
                if col[j] != 0.0 {
                    if let Some(v) = var_of[j] {
                        row.push((v, -col[j]));
                    }
                    cap += f0[j] * col[j];
                }
            }
            lp.rows.push((row, cap));
        }
        let point = match solve_logcone(&lp, crate::optbackend::DEFAULT_TOL)? {
            ConeOutcome::Optimal { point, .. } => point,
            ConeOutcome::Infeasible => {
                // cannot happen: delta = f_cur - f0 >= 0 is feasible by
                // construction; treat as a stall
                break;
            }
        };
        let delta = Array1::from_iter((0..m).map(|j| var_of[j].map_or(0.0, |v| point[v].max(0.0))));
        let f_next = &f0 + &delta;
        let obj_next = log_objective(&f_next, &active);
        let gain = obj_next - trace.last().unwrap();
        if gain < tol {
            break;
        }
        f_cur = f_next;
        trace.push(obj_next);
        rounds = round;

        // step (a): refresh multipliers at the grown box, keeping a valid
        // certificate at every iterate
        match mtt_contains(&box_from_f(&f_cur)?.to_polyhedron(), &prob.fr)? {
            Containment::Certified { multipliers: x, .. } => multipliers = x,
            Containment::Violated { row, .. } => return Err(ExpandError::NoMultiplier(row)),
        }
    }

    let expanded = box_from_f(&f_cur)?;
    let delta_f = &f_cur - &f0;
    Ok(ExpansionResult {
        expanded,
        delta_f,
        rounds,
        objective_trace: trace,
        certificate: multipliers,
    })
}

/// Post-hoc audit: the expanded box must certify against the region and
/// contain the initial box coordinate-wise.
pub fn verify_expansion(res: &ExpansionResult, initial: &BoxBounds, fr: &Polyhedron) -> bool {
    if !res.expanded.contains(initial, 1e-9) {
        return false;
    }
    let box_poly = res.expanded.to_polyhedron();
    if verify_certificate(&box_poly, fr, &res.certificate, 1e-6) {
        return true;
    }
    matches!(
        mtt_contains(&box_poly, fr),
        Ok(Containment::Certified { .. })
    )
}
