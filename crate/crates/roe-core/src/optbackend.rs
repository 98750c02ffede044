//! Solver contracts used by the geometry layers. Linear programs and
//! log-objective cone programs are expressed in a solver-agnostic form here
//! and handed to an interior-point conic engine (Clarabel) behind the scenes;
//! nothing outside this module touches the engine directly.
//!
//! Logarithmic objective terms map onto exponential cones, second-order-cone
//! rows map directly, and infeasible linear programs come back with a
//! Farkas-type witness that is verified before being returned.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: u32 = 200;

#[derive(Debug, thiserror::Error)]
pub enum SolverFailure {
    #[error("numerical breakdown: {status:?} (iterations {iterations}, primal res {r_prim:.3e}, dual res {r_dual:.3e})")]
    Numerical {
        status: String,
        iterations: u32,
        r_prim: f64,
        r_dual: f64,
    },
    #[error("infeasibility certificate failed verification: {0}")]
    BadCertificate(String),
    #[error("log-term variable left the interior (value {0:.3e})")]
    LostInteriority(f64),
    #[error("problem assembly: {0}")]
    Assembly(String),
}

/// Sparse row: list of (column, coefficient) pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// Linear program in inequality form: maximize c'x subject to a_k'x <= b_k,
/// optional equality rows, and per-variable bounds (infinities allowed).
#[derive(Debug, Clone, Default)]
pub struct LpProblem {
    pub n: usize,
    pub maximize: Vec<f64>,
    pub rows: Vec<(SparseRow, f64)>,
    pub eq_rows: Vec<(SparseRow, f64)>,
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            maximize: vec![0.0; n],
            rows: Vec::new(),
            eq_rows: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal {
        value: f64,
        point: Vec<f64>,
    },
    /// No feasible point; `farkas` is a verified witness y (one entry per
    /// stacked equality row then inequality row, inequality entries >= 0)
    /// with y'A = 0 and y'b < 0.
    Infeasible {
        farkas: Vec<f64>,
    },
    Unbounded,
}

/// Second-order-cone row ||F x|| + h'x <= c.
#[derive(Debug, Clone)]
pub struct SocRow {
    pub norm_terms: Vec<SparseRow>,
    pub lin: SparseRow,
    pub rhs: f64,
}

/// Cone program: maximize c0'x + sum_i log(x_{l_i}) subject to linear rows,
/// equality rows, second-order-cone rows and variable bounds. Log-term
/// variables must admit strictly positive values.
#[derive(Debug, Clone, Default)]
pub struct LogConeProblem {
    pub n: usize,
    pub log_terms: Vec<usize>,
    pub maximize: Vec<f64>,
    pub rows: Vec<(SparseRow, f64)>,
    pub eq_rows: Vec<(SparseRow, f64)>,
    pub soc_rows: Vec<SocRow>,
    pub bounds: Vec<(f64, f64)>,
}

impl LogConeProblem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            log_terms: Vec::new(),
            maximize: vec![0.0; n],
            rows: Vec::new(),
            eq_rows: Vec::new(),
            soc_rows: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }
}

#[derive(Debug, Clone)]
pub enum ConeOutcome {
    Optimal { value: f64, point: Vec<f64> },
    Infeasible,
}

/// Triplet assembler for the conic form: minimize q'x s.t. Ax + s = b, s in K.
struct ConicBuilder {
    n: usize,
    q: Vec<f64>,
    trips: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    m: usize,
}

impl ConicBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            q: vec![0.0; n],
            trips: Vec::new(),
            b: Vec::new(),
            cones: Vec::new(),
            m: 0,
        }
    }

    fn push_row(&mut self, row: &SparseRow, rhs: f64) -> usize {
        let r = self.m;
        for &(c, v) in row {
            if v != 0.0 {
                self.trips.push((r, c, v));
            }
        }
        self.b.push(rhs);
        self.m += 1;
        r
    }

    fn finish(self, settings_tol: f64, max_iter: u32) -> Result<SolvedConic, SolverFailure> {
        let a = csc_from_triplets(self.m, self.n, &self.trips);
        let p = CscMatrix::<f64>::zeros((self.n, self.n));
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(max_iter)
            .tol_feas(settings_tol)
            .tol_gap_abs(settings_tol)
            .tol_gap_rel(settings_tol)
            .build()
            .map_err(|e| SolverFailure::Assembly(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.q, &a, &self.b, &self.cones, settings)
            .map_err(|e| SolverFailure::Assembly(format!("{e:?}")))?;
        solver.solve();
        let sol = solver.solution;
        Ok(SolvedConic {
            status: sol.status,
            x: sol.x,
            z: sol.z,
            iterations: sol.iterations,
            r_prim: sol.r_prim,
            r_dual: sol.r_dual,
        })
    }
}

struct SolvedConic {
    status: SolverStatus,
    x: Vec<f64>,
    z: Vec<f64>,
    iterations: u32,
    r_prim: f64,
    r_dual: f64,
}

fn csc_from_triplets(m: usize, n: usize, trips: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut order: Vec<usize> = (0..trips.len()).collect();
    order.sort_by_key(|&k| (trips[k].1, trips[k].0));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(trips.len());
    let mut nzval = Vec::with_capacity(trips.len());
    for &k in &order {
        let (r, c, v) = trips[k];
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Appends finite variable bounds as inequality rows; returns how many were added.
fn bound_rows(bounds: &[(f64, f64)]) -> Vec<(SparseRow, f64)> {
    let mut rows = Vec::new();
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if hi.is_finite() {
            rows.push((vec![(i, 1.0)], hi));
        }
        if lo.is_finite() {
            rows.push((vec![(i, -1.0)], -lo));
        }
    }
    rows
}

/// Solves a linear program. Status is decided within `tol`; optimal points
/// are feasible to `tol`. Infeasible problems return a verified Farkas
/// witness over the stacked (equalities, inequalities incl. bound rows)
/// system.
pub fn solve_lp(p: &LpProblem, tol: f64) -> Result<LpOutcome, SolverFailure> {
    let mut bld = ConicBuilder::new(p.n);
    for (i, &c) in p.maximize.iter().enumerate() {
        bld.q[i] = -c;
    }
    for (row, rhs) in &p.eq_rows {
        bld.push_row(row, *rhs);
    }
    if !p.eq_rows.is_empty() {
        bld.cones.push(SupportedConeT::ZeroConeT(p.eq_rows.len()));
    }
    let ineq: Vec<(SparseRow, f64)> = p
        .rows
        .iter()
        .cloned()
        .chain(bound_rows(&p.bounds))
        .collect();
    for (row, rhs) in &ineq {
        bld.push_row(row, *rhs);
    }
    if !ineq.is_empty() {
        bld.cones.push(SupportedConeT::NonnegativeConeT(ineq.len()));
    }
    let out = bld.finish(tol, DEFAULT_MAX_ITER)?;
    match out.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let point = out.x;
            let value = p.maximize.iter().zip(&point).map(|(c, x)| c * x).sum();
            Ok(LpOutcome::Optimal { value, point })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let farkas = out.z;
            verify_farkas(p, &ineq, &farkas, tol)?;
            Ok(LpOutcome::Infeasible { farkas })
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            Ok(LpOutcome::Unbounded)
        }
        status => Err(SolverFailure::Numerical {
            status: format!("{status:?}"),
            iterations: out.iterations,
            r_prim: out.r_prim,
            r_dual: out.r_dual,
        }),
    }
}

/// Checks y'A = 0, y'b < 0, y >= 0 on inequality entries.
fn verify_farkas(
    p: &LpProblem,
    ineq: &[(SparseRow, f64)],
    y: &[f64],
    tol: f64,
) -> Result<(), SolverFailure> {
    let n_eq = p.eq_rows.len();
    if y.len() != n_eq + ineq.len() {
        return Err(SolverFailure::BadCertificate(format!(
            "certificate length {} vs {} rows",
            y.len(),
            n_eq + ineq.len()
        )));
    }
    let mut yta = vec![0.0; p.n];
    let mut ytb = 0.0;
    let mut scale: f64 = 0.0;
    for (k, (row, rhs)) in p.eq_rows.iter().chain(ineq.iter()).enumerate() {
        for &(c, v) in row {
            yta[c] += y[k] * v;
            scale = scale.max((y[k] * v).abs());
        }
        ytb += y[k] * rhs;
    }
    let vtol = (tol * 1e4).max(1e-6) * scale.max(1.0);
    for (k, &yk) in y.iter().enumerate().skip(n_eq) {
        if yk < -vtol {
            return Err(SolverFailure::BadCertificate(format!(
                "y[{k}] = {yk:.3e} < 0"
            )));
        }
    }
    if let Some(worst) = yta
        .iter()
        .map(|v| v.abs())
        .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |x| x.max(v))))
    {
        if worst > vtol {
            return Err(SolverFailure::BadCertificate(format!(
                "|y'A| = {worst:.3e}"
            )));
        }
    }
    if ytb >= 0.0 {
        return Err(SolverFailure::BadCertificate(format!(
            "y'b = {ytb:.3e} >= 0"
        )));
    }
    Ok(())
}

/// Solves a log-objective cone program. Returns the achieved objective
/// (linear part plus sum of logs) and the point; log-term variables are
/// checked to be strictly positive.
pub fn solve_logcone(p: &LogConeProblem, tol: f64) -> Result<ConeOutcome, SolverFailure> {
    let n_aux = p.log_terms.len();
    let n_tot = p.n + n_aux;
    let mut bld = ConicBuilder::new(n_tot);
    for (i, &c) in p.maximize.iter().enumerate() {
        bld.q[i] = -c;
    }
    for t in 0..n_aux {
        bld.q[p.n + t] = -1.0;
    }

    for (row, rhs) in &p.eq_rows {
        bld.push_row(row, *rhs);
    }
    if !p.eq_rows.is_empty() {
        bld.cones.push(SupportedConeT::ZeroConeT(p.eq_rows.len()));
    }
    let ineq: Vec<(SparseRow, f64)> = p
        .rows
        .iter()
        .cloned()
        .chain(bound_rows(&p.bounds))
        .collect();
    for (row, rhs) in &ineq {
        bld.push_row(row, *rhs);
    }
    if !ineq.is_empty() {
        bld.cones.push(SupportedConeT::NonnegativeConeT(ineq.len()));
    }
    for soc in &p.soc_rows {
        bld.push_row(&soc.lin, soc.rhs);
        for term in &soc.norm_terms {
            let neg: SparseRow = term.iter().map(|&(c, v)| (c, -v)).collect();
            bld.push_row(&neg, 0.0);
        }
        bld.cones
            .push(SupportedConeT::SecondOrderConeT(1 + soc.norm_terms.len()));
    }
    // t_i <= log(x_li)  as  (t_i, 1, x_li) in the exponential cone
    for (t, &li) in p.log_terms.iter().enumerate() {
        bld.push_row(&vec![(p.n + t, -1.0)], 0.0);
        bld.push_row(&vec![], 1.0);
        bld.push_row(&vec![(li, -1.0)], 0.0);
        bld.cones.push(SupportedConeT::ExponentialConeT());
    }

    let out = bld.finish(tol, DEFAULT_MAX_ITER)?;
    match out.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let point: Vec<f64> = out.x[..p.n].to_vec();
            let mut value: f64 = p.maximize.iter().zip(&point).map(|(c, x)| c * x).sum();
            for &li in &p.log_terms {
                if point[li] <= 0.0 {
                    return Err(SolverFailure::LostInteriority(point[li]));
                }
                value += point[li].ln();
            }
            Ok(ConeOutcome::Optimal { value, point })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Ok(ConeOutcome::Infeasible)
        }
        status => Err(SolverFailure::Numerical {
            status: format!("{status:?}"),
            iterations: out.iterations,
            r_prim: out.r_prim,
            r_dual: out.r_dual,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lp_simple_maximum() {
        let mut p = LpProblem::new(1);
        p.maximize = vec![1.0];
        p.rows.push((vec![(0, 1.0)], 1.0));
        match solve_lp(&p, DEFAULT_TOL).unwrap() {
            LpOutcome::Optimal { value, .. } => assert_abs_diff_eq!(value, 1.0, epsilon = 1e-7),
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn lp_dominated_row_scores_nonpositive() {
        // redundancy probe for x1 <= 2 over the unit square: relax the probed
        // row by 1 and maximize its slack; a dominated row cannot go positive.
        let mut p = LpProblem::new(2);
        p.maximize = vec![1.0, 0.0];
        p.rows.push((vec![(0, 1.0)], 3.0)); // probed row, relaxed
        p.rows.push((vec![(0, 1.0)], 1.0));
        p.rows.push((vec![(1, 1.0)], 1.0));
        p.rows.push((vec![(0, -1.0)], 0.0));
        p.rows.push((vec![(1, -1.0)], 0.0));
        match solve_lp(&p, DEFAULT_TOL).unwrap() {
            LpOutcome::Optimal { value, .. } => {
                let o_i = value - 2.0;
                assert!(o_i <= 0.0, "O_i = {o_i}");
                assert_abs_diff_eq!(o_i, -1.0, epsilon = 1e-7);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn lp_infeasible_returns_verified_farkas() {
        let mut p = LpProblem::new(1);
        p.rows.push((vec![(0, 1.0)], -1.0));
        p.rows.push((vec![(0, -1.0)], -2.0));
        match solve_lp(&p, DEFAULT_TOL).unwrap() {
            LpOutcome::Infeasible { farkas } => {
                // y'A = y0 - y1 = 0 and y'b < 0 already verified internally
                assert!(farkas.iter().all(|&y| y >= -1e-9));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn lp_unbounded_detected() {
        let mut p = LpProblem::new(1);
        p.maximize = vec![1.0];
        p.rows.push((vec![(0, -1.0)], 0.0));
        assert!(matches!(
            solve_lp(&p, DEFAULT_TOL).unwrap(),
            LpOutcome::Unbounded
        ));
    }

    #[test]
    fn logcone_single_term() {
        let mut p = LogConeProblem::new(1);
        p.log_terms = vec![0];
        p.rows.push((vec![(0, 1.0)], std::f64::consts::E));
        match solve_logcone(&p, DEFAULT_TOL).unwrap() {
            ConeOutcome::Optimal { value, point } => {
                assert_abs_diff_eq!(point[0], std::f64::consts::E, epsilon = 1e-6);
                assert_abs_diff_eq!(value, 1.0, epsilon = 1e-6);
            }
            ConeOutcome::Infeasible => panic!("feasible by construction"),
        }
    }

    #[test]
    fn logcone_symmetric_split() {
        let mut p = LogConeProblem::new(2);
        p.log_terms = vec![0, 1];
        p.rows.push((vec![(0, 1.0), (1, 1.0)], 2.0));
        match solve_logcone(&p, DEFAULT_TOL).unwrap() {
            ConeOutcome::Optimal { value, point } => {
                // the objective is flat at the symmetric optimum, so the
                // value is tighter than the point coordinates
                assert_abs_diff_eq!(value, 0.0, epsilon = 1e-7);
                assert_abs_diff_eq!(point[0], 1.0, epsilon = 1e-5);
                assert_abs_diff_eq!(point[1], 1.0, epsilon = 1e-5);
            }
            ConeOutcome::Infeasible => panic!("feasible by construction"),
        }
    }

    #[test]
    fn logcone_soc_row_respected() {
        // maximize log x + log y with ||(x, y)|| <= 1: optimum at x = y = 1/sqrt(2)
        let mut p = LogConeProblem::new(2);
        p.log_terms = vec![0, 1];
        p.soc_rows.push(SocRow {
            norm_terms: vec![vec![(0, 1.0)], vec![(1, 1.0)]],
            lin: vec![],
            rhs: 1.0,
        });
        match solve_logcone(&p, DEFAULT_TOL).unwrap() {
            ConeOutcome::Optimal { point, .. } => {
                let r = (0.5f64).sqrt();
                assert_abs_diff_eq!(point[0], r, epsilon = 1e-6);
                assert_abs_diff_eq!(point[1], r, epsilon = 1e-6);
            }
            ConeOutcome::Infeasible => panic!("feasible by construction"),
        }
    }

    #[test]
    fn random_lps_match_vertex_enumeration() {
        use crate::polytope::{enumerate_vertices, Polyhedron};
        use ndarray::{Array1, Array2};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        while checked < 40 {
            let n = 2 + checked % 2;
            let m = 6 + checked % 7; // up to 12 rows
            let mut mat = Array2::zeros((m, n));
            let mut rhs = Array1::zeros(m);
            for i in 0..m {
                for j in 0..n {
                    mat[[i, j]] = rng.gen::<f64>() - 0.5;
                }
                rhs[i] = 0.5 + rng.gen::<f64>();
            }
            let poly = Polyhedron::new(mat.clone(), rhs.clone()).unwrap();
            let Ok(verts) = enumerate_vertices(&poly) else {
                continue;
            }; // unbounded draw
            if verts.is_empty() {
                continue;
            }
            let c: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let oracle = verts
                .iter()
                .map(|v| v.iter().zip(&c).map(|(x, ci)| x * ci).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut lp = LpProblem::new(n);
            lp.maximize = c;
            for i in 0..m {
                lp.rows
                    .push(((0..n).map(|j| (j, mat[[i, j]])).collect(), rhs[i]));
            }
            match solve_lp(&lp, DEFAULT_TOL).unwrap() {
                LpOutcome::Optimal { value, .. } => {
                    assert!(
                        (value - oracle).abs() <= 1e-6,
                        "case {checked}: lp {value} vs vertex oracle {oracle}"
                    );
                }
                other => panic!("bounded nonempty polytope must be optimal, got {other:?}"),
            }
            checked += 1;
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut p = LpProblem::new(3);
        p.maximize = vec![1.0, 2.0, -0.5];
        p.rows.push((vec![(0, 1.0), (1, 1.0), (2, 1.0)], 4.0));
        p.rows.push((vec![(0, 2.0), (1, -1.0)], 1.0));
        p.bounds = vec![(0.0, 3.0); 3];
        let a = solve_lp(&p, DEFAULT_TOL).unwrap();
        let b = solve_lp(&p, DEFAULT_TOL).unwrap();
        match (a, b) {
            (
                LpOutcome::Optimal {
                    value: va,
                    point: pa,
                },
                LpOutcome::Optimal {
                    value: vb,
                    point: pb,
                },
            ) => {
                assert!((va - vb).abs() <= 1e-12);
                for (x, y) in pa.iter().zip(&pb) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
            _ => panic!("both runs must be optimal"),
        }
    }
}
