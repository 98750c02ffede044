//! Core geometry: inscribed ellipsoids and rectangles, redundancy removal,
//! polyhedron-containment certificates, and brute-force oracles.
//!
//! Everything here operates on inequality descriptions {x | G x <= g}. The
//! containment check follows the theorem-of-the-alternative route: a box (or
//! any polyhedron) {E x <= f} lies inside {G x <= g} exactly when every row i
//! of G admits a multiplier column x_{:,i} <= 0 with E' x_{:,i} = -G_{i,:}'
//! and -f' x_{:,i} <= g_i. The multiplier matrix doubles as an offline
//! checkable certificate.

use crate::linfr::ParametricFR;
use crate::optbackend::{
    solve_logcone, solve_lp, ConeOutcome, LogConeProblem, LpOutcome, LpProblem, SocRow,
    SolverFailure,
};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("feasible region has empty interior")]
    EmptyInterior,
    #[error("polyhedron is unbounded (direction {0})")]
    Unbounded(String),
    #[error("dimension {0} too large for exact enumeration (max {1})")]
    DimensionTooLarge(usize, usize),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Solver(#[from] SolverFailure),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Inequality description {x | mat x <= rhs} with optional row provenance.
#[derive(Debug, Clone)]
pub struct Polyhedron {
    pub mat: Array2<f64>,
    pub rhs: Array1<f64>,
    pub var_names: Vec<String>,
    pub tags: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct PolyhedronDoc {
    #[serde(rename = "G")]
    g_mat: Vec<Vec<f64>>,
    #[serde(rename = "g")]
    g_vec: Vec<f64>,
    #[serde(default)]
    var_names: Vec<String>,
}

impl Polyhedron {
    pub fn new(mat: Array2<f64>, rhs: Array1<f64>) -> Result<Self, GeomError> {
        if mat.nrows() != rhs.len() {
            return Err(GeomError::Shape(format!(
                "{} rows vs {} rhs entries",
                mat.nrows(),
                rhs.len()
            )));
        }
        if mat.nrows() == 0 || mat.ncols() == 0 {
            return Err(GeomError::Shape(
                "need at least one row and one column".into(),
            ));
        }
        if mat.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::Shape("non-finite entry".into()));
        }
        let var_names = (0..mat.ncols()).map(|i| format!("p{}", i + 1)).collect();
        Ok(Self {
            mat,
            rhs,
            var_names,
            tags: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn contains_point(&self, x: &Array1<f64>, tol: f64) -> bool {
        self.mat
            .dot(x)
            .iter()
            .zip(self.rhs.iter())
            .all(|(lhs, rhs)| *lhs <= rhs + tol)
    }

    /// Worst row violation at a point (negative means strictly inside).
    pub fn max_violation(&self, x: &Array1<f64>) -> f64 {
        self.mat
            .dot(x)
            .iter()
            .zip(self.rhs.iter())
            .map(|(lhs, rhs)| lhs - rhs)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn parse(text: &str) -> Result<Self, GeomError> {
        let doc: PolyhedronDoc = serde_json::from_str(text)?;
        let m = doc.g_mat.len();
        let n = doc.g_mat.first().map_or(0, |r| r.len());
        if doc.g_mat.iter().any(|r| r.len() != n) {
            return Err(GeomError::Shape("ragged G matrix".into()));
        }
        let mat = Array2::from_shape_vec((m, n), doc.g_mat.into_iter().flatten().collect())
            .map_err(|e| GeomError::Shape(e.to_string()))?;
        let mut poly = Self::new(mat, Array1::from_vec(doc.g_vec))?;
        if !doc.var_names.is_empty() {
            if doc.var_names.len() != n {
                return Err(GeomError::Shape("var_names length mismatch".into()));
            }
            poly.var_names = doc.var_names;
        }
        Ok(poly)
    }

    pub fn to_json(&self) -> String {
        let doc = PolyhedronDoc {
            g_mat: self.mat.rows().into_iter().map(|r| r.to_vec()).collect(),
            g_vec: self.rhs.to_vec(),
            var_names: self.var_names.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("polyhedron serialises")
    }

    /// Rows scaled to unit 2-norm (for LP conditioning). Zero rows are left as
    /// is with scale 1.
    fn normalized(&self) -> (Array2<f64>, Array1<f64>) {
        let mut mat = self.mat.clone();
        let mut rhs = self.rhs.clone();
        for (mut row, b) in mat.rows_mut().into_iter().zip(rhs.iter_mut()) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                row.mapv_inplace(|v| v / norm);
                *b /= norm;
            }
        }
        (mat, rhs)
    }
}

/// Axis-aligned ellipsoid {diag(l) u + center : ||u|| <= 1}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub l_diag: Vec<f64>,
    pub center: Vec<f64>,
}

impl Ellipsoid {
    pub fn dim(&self) -> usize {
        self.l_diag.len()
    }

    /// ||L^{-1}(x - center)||, 1.0 on the surface.
    pub fn radial_coordinate(&self, x: &Array1<f64>) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.l_diag)
            .map(|((xi, c), l)| ((xi - c) / l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// True when the ellipsoid satisfies every row's support condition
    /// ||g_i o L|| + g_i . center <= rhs_i + tol.
    pub fn fits_in(&self, poly: &Polyhedron, tol: f64) -> bool {
        let center = Array1::from_vec(self.center.clone());
        for (row, &b) in poly.mat.rows().into_iter().zip(poly.rhs.iter()) {
            let norm = row
                .iter()
                .zip(&self.l_diag)
                .map(|(a, l)| (a * l) * (a * l))
                .sum::<f64>()
                .sqrt();
            if norm + row.dot(&center) > b + tol {
                return false;
            }
        }
        true
    }
}

/// Axis-aligned box given by signed per-coordinate bounds lo <= hi.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GeomError> {
        if lo.len() != hi.len() {
            return Err(GeomError::Shape("box bounds length mismatch".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(GeomError::Shape("box has lo > hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    /// Sum of log widths, skipping coordinates narrower than `floor`.
    pub fn log_width_sum(&self, floor: f64) -> f64 {
        self.widths()
            .iter()
            .filter(|&&w| w > floor)
            .map(|w| w.ln())
            .sum()
    }

    pub fn contains(&self, other: &BoxBounds, tol: f64) -> bool {
        self.lo.iter().zip(&other.lo).all(|(a, b)| a - tol <= *b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a + tol >= *b)
    }

    /// Interleaved inequality description: row 2k is p_k <= hi_k, row 2k+1 is
    /// -p_k <= -lo_k. This ordering (import bound first, export bound second
    /// per customer) is what the expansion stage expects.
    pub fn to_ef(&self) -> (Array2<f64>, Array1<f64>) {
        let n = self.dim();
        let mut e = Array2::zeros((2 * n, n));
        let mut f = Array1::zeros(2 * n);
        for k in 0..n {
            e[[2 * k, k]] = 1.0;
            f[2 * k] = self.hi[k];
            e[[2 * k + 1, k]] = -1.0;
            f[2 * k + 1] = -self.lo[k];
        }
        (e, f)
    }

    pub fn to_polyhedron(&self) -> Polyhedron {
        let (e, f) = self.to_ef();
        Polyhedron::new(e, f).expect("box rows are well formed")
    }

    /// All 2^n corner points; only intended for small n.
    pub fn corners(&self) -> Vec<Array1<f64>> {
        let n = self.dim();
        assert!(n <= 20, "corner enumeration blows up beyond n = 20");
        (0..1usize << n)
            .map(|mask| {
                Array1::from_iter((0..n).map(|k| {
                    if mask >> k & 1 == 1 {
                        self.hi[k]
                    } else {
                        self.lo[k]
                    }
                }))
            })
            .collect()
    }

    /// Support-function containment: every corner satisfies the rows iff the
    /// row-wise worst corner does.
    pub fn fits_in(&self, poly: &Polyhedron, tol: f64) -> bool {
        for (row, &b) in poly.mat.rows().into_iter().zip(poly.rhs.iter()) {
            let support: f64 = row
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(a, (l, h))| if *a >= 0.0 { a * h } else { a * l })
                .sum();
            if support > b + tol {
                return false;
            }
        }
        true
    }
}

/// Per-customer operational statuses for the inscribed-ellipsoid stage:
/// +1 importing, -1 exporting, 0 unconstrained. `eps_md` is the penalty
/// weight pushing the unused envelope side of a committed customer to zero.
#[derive(Debug, Clone)]
pub struct StatusConfig {
    pub lambdas: Vec<i8>,
    pub eps_md: f64,
}

pub const DEFAULT_EPS_MD: f64 = 1e3;

impl StatusConfig {
    pub fn new(lambdas: Vec<i8>) -> Self {
        assert!(lambdas.iter().all(|l| (-1..=1).contains(l)));
        Self {
            lambdas,
            eps_md: DEFAULT_EPS_MD,
        }
    }
}

const SOLVE_TOL: f64 = crate::optbackend::DEFAULT_TOL;
const LOG_FLOOR: f64 = 1e-9;

/// Maximises sum(log L_ii) over axis-aligned ellipsoids {L u + c : ||u|| <= 1}
/// inscribed in the feasible region, with the reactive vector q free within
/// its bounds. With statuses, a penalised slack pins the unused envelope side
/// of each committed customer near zero. Returns the ellipsoid and the
/// optimising q.
pub fn max_inscribed_ellipsoid(
    pfr: &ParametricFR,
    status: Option<&StatusConfig>,
) -> Result<(Ellipsoid, Array1<f64>), GeomError> {
    let n = pfr.n_p();
    let nq = pfr.n_q();
    if let Some(s) = status {
        if s.lambdas.len() != n {
            return Err(GeomError::Shape(format!(
                "{} statuses for {} customers",
                s.lambdas.len(),
                n
            )));
        }
    }
    let n_delta = status.map_or(0, |s| s.lambdas.iter().filter(|&&l| l != 0).count());
    // variable layout: [L(n), center(n), q(nq), delta(n_delta)]
    let nv = 2 * n + nq + n_delta;
    let mut prob = LogConeProblem::new(nv);
    prob.log_terms = (0..n).collect();
    for i in 0..n {
        prob.bounds[i] = (LOG_FLOOR, f64::INFINITY);
    }
    for j in 0..nq {
        prob.bounds[2 * n + j] = (pfr.q_lo[j], pfr.q_hi[j]);
    }

    // support condition per region row: ||a o L|| + a.c + n_j.q <= r_i
    let (rows, rhs) = pfr.normalized_rows();
    for (i, row) in rows.rows().into_iter().enumerate() {
        let mut norm_terms = Vec::new();
        let mut lin: Vec<(usize, f64)> = Vec::new();
        for (j, &a) in row.iter().take(n).enumerate() {
            if a != 0.0 {
                norm_terms.push(vec![(j, a)]);
                lin.push((n + j, a));
            }
        }
        for (j, &c) in row.iter().skip(n).enumerate() {
            if c != 0.0 {
                lin.push((2 * n + j, c));
            }
        }
        prob.soc_rows.push(SocRow {
            norm_terms,
            lin,
            rhs: rhs[i],
        });
    }
    // ellipsoid inside the raw power box
    for k in 0..n {
        if pfr.p_hi[k].is_finite() {
            prob.rows.push((vec![(n + k, 1.0), (k, 1.0)], pfr.p_hi[k]));
        }
        if pfr.p_lo[k].is_finite() {
            prob.rows
                .push((vec![(n + k, -1.0), (k, 1.0)], -pfr.p_lo[k]));
        }
    }
    // status slacks: |c_k - lambda_k L_k / sqrt(n)| <= delta_k, penalised
    if let Some(s) = status {
        let root_n = (n as f64).sqrt();
        let mut d = 0;
        for (k, &lam) in s.lambdas.iter().enumerate() {
            if lam == 0 {
                continue;
            }
            let dv = 2 * n + nq + d;
            d += 1;
            prob.bounds[dv] = (0.0, f64::INFINITY);
            prob.maximize[dv] = -s.eps_md;
            let lam = lam as f64;
            prob.rows
                .push((vec![(n + k, 1.0), (k, -lam / root_n), (dv, -1.0)], 0.0));
            prob.rows
                .push((vec![(n + k, -1.0), (k, lam / root_n), (dv, -1.0)], 0.0));
        }
    }

    match solve_logcone(&prob, SOLVE_TOL)? {
        ConeOutcome::Optimal { point, .. } => {
            let l_diag = point[..n].to_vec();
            let center = point[n..2 * n].to_vec();
            let q = Array1::from_vec(point[2 * n..2 * n + nq].to_vec());
            Ok((Ellipsoid { l_diag, center }, q))
        }
        ConeOutcome::Infeasible => Err(GeomError::EmptyInterior),
    }
}

/// Largest box inscribed in an axis-aligned ellipsoid: per coordinate
/// center_i +/- L_ii / sqrt(n). Its corners lie on the ellipsoid surface.
pub fn ellipsoid_to_box(e: &Ellipsoid, n: usize) -> BoxBounds {
    assert_eq!(n, e.dim(), "n must equal the ellipsoid dimension");
    let root_n = (n as f64).sqrt();
    let lo = e
        .center
        .iter()
        .zip(&e.l_diag)
        .map(|(c, l)| c - l / root_n)
        .collect();
    let hi = e
        .center
        .iter()
        .zip(&e.l_diag)
        .map(|(c, l)| c + l / root_n)
        .collect();
    BoxBounds { lo, hi }
}

#[derive(Debug, Clone)]
pub struct RemovalStats {
    pub rows_before: usize,
    pub rows_after: usize,
    pub kept: Vec<usize>,
    pub warnings: Vec<String>,
    pub duration: Duration,
}

impl RemovalStats {
    pub fn reduction_fraction(&self) -> f64 {
        1.0 - self.rows_after as f64 / self.rows_before as f64
    }
}

const REDUNDANCY_EPS: f64 = 1e-7;
const DUPLICATE_EPS: f64 = 1e-9;

/// Strips redundant rows: row i is dropped when, with the row relaxed by one
/// unit and all other rows enforced, its slack optimum O_i stays <= 0 (the
/// row is never active). Weakly active duplicates (O_i = 0) keep exactly one
/// copy. The returned set equals the input set pointwise. Row probes are
/// independent LPs and run in parallel; the merge is deterministic.
pub fn remove_redundant(p: &Polyhedron) -> Result<(Polyhedron, RemovalStats), GeomError> {
    let start = Instant::now();
    let (nmat, nrhs) = p.normalized();
    let m = p.n_rows();
    let n = p.dim();

    let probe = |i: usize| -> Result<f64, SolverFailure> {
        let mut lp = LpProblem::new(n);
        for (j, v) in nmat.row(i).iter().enumerate() {
            lp.maximize[j] = *v;
        }
        for k in 0..m {
            let row: Vec<(usize, f64)> = nmat
                .row(k)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, *v))
                .collect();
            let relax = if k == i { 1.0 } else { 0.0 };
            lp.rows.push((row, nrhs[k] + relax));
        }
        match solve_lp(&lp, SOLVE_TOL)? {
            LpOutcome::Optimal { value, .. } => Ok(value - nrhs[i]),
            LpOutcome::Unbounded => Ok(f64::INFINITY),
            LpOutcome::Infeasible { .. } => Ok(f64::NEG_INFINITY),
        }
    };

    let scores: Vec<Result<f64, SolverFailure>> = (0..m).into_par_iter().map(probe).collect();

    let mut warnings = Vec::new();
    let mut kept = Vec::new();
    let mut kept_rows: Vec<usize> = Vec::new();
    let identical = |a: usize, b: usize| -> bool {
        (nrhs[a] - nrhs[b]).abs() <= DUPLICATE_EPS
            && nmat
                .row(a)
                .iter()
                .zip(nmat.row(b).iter())
                .all(|(x, y)| (x - y).abs() <= DUPLICATE_EPS)
    };
    for i in 0..m {
        match &scores[i] {
            Err(e) => {
                warnings.push(format!("row {i}: probe failed ({e}); kept conservatively"));
                kept.push(i);
                kept_rows.push(i);
            }
            Ok(o_i) => {
                if *o_i > REDUNDANCY_EPS {
                    kept.push(i);
                    kept_rows.push(i);
                } else if *o_i >= -REDUNDANCY_EPS {
                    // weakly active: drop only when an identical row is already kept
                    if !kept_rows.iter().any(|&k| identical(k, i)) {
                        kept.push(i);
                        kept_rows.push(i);
                    }
                }
            }
        }
    }

    let mat = p.mat.select(ndarray::Axis(0), &kept);
    let rhs = Array1::from_iter(kept.iter().map(|&i| p.rhs[i]));
    let tags = p
        .tags
        .as_ref()
        .map(|t| kept.iter().map(|&i| t[i].clone()).collect());
    let mut out = Polyhedron::new(mat, rhs)?;
    out.var_names = p.var_names.clone();
    out.tags = tags;
    let stats = RemovalStats {
        rows_before: m,
        rows_after: kept.len(),
        kept,
        warnings,
        duration: start.elapsed(),
    };
    Ok((out, stats))
}

/// Outcome of a containment query `inner ⊆ outer`.
#[derive(Debug, Clone)]
pub enum Containment {
    /// Multiplier matrix (inner rows x outer rows), column i certifying outer
    /// row i. Checkable offline via [`verify_certificate`].
    Certified {
        multipliers: Array2<f64>,
        lp_constraints: usize,
    },
    /// A point of the inner polyhedron violating the named outer row.
    Violated { row: usize, witness: Array1<f64> },
}

/// Decides {x | E x <= f} ⊆ {x | G x <= g} by one multiplier LP per outer
/// row (minimise f'w with E'w = G_{i,:}', w >= 0; containment holds iff the
/// optimum stays below g_i). On failure the violating row's support LP
/// produces a point of the inner polyhedron outside the outer one.
pub fn mtt_contains(inner: &Polyhedron, outer: &Polyhedron) -> Result<Containment, GeomError> {
    if inner.dim() != outer.dim() {
        return Err(GeomError::Shape("dimension mismatch".into()));
    }
    let n = inner.dim();
    let m = inner.n_rows();
    let u = outer.n_rows();

    // normalise outer rows for conditioning; rescale multipliers on the way out
    let mut scales = vec![1.0; u];
    let mut omat = outer.mat.clone();
    let mut orhs = outer.rhs.clone();
    for i in 0..u {
        let norm = omat.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            scales[i] = norm;
            omat.row_mut(i).mapv_inplace(|v| v / norm);
            orhs[i] /= norm;
        }
    }

    enum RowResult {
        Cert(Vec<f64>),
        Viol,
    }
    let per_row = |i: usize| -> Result<RowResult, GeomError> {
        let mut lp = LpProblem::new(m);
        for k in 0..m {
            lp.maximize[k] = -inner.rhs[k]; // minimise f' w
            lp.bounds[k] = (0.0, f64::INFINITY);
        }
        for j in 0..n {
            let row: Vec<(usize, f64)> = (0..m)
                .filter(|&k| inner.mat[[k, j]] != 0.0)
                .map(|k| (k, inner.mat[[k, j]]))
                .collect();
            lp.eq_rows.push((row, omat[[i, j]]));
        }
        match solve_lp(&lp, SOLVE_TOL)? {
            LpOutcome::Optimal { value, point } => {
                let f_dot_w = -value;
                if f_dot_w <= orhs[i] + 1e-6 {
                    // x_{:,i} = -w, rescaled back to the unnormalised row
                    Ok(RowResult::Cert(
                        point.iter().map(|w| -w * scales[i]).collect(),
                    ))
                } else {
                    Ok(RowResult::Viol)
                }
            }
            LpOutcome::Infeasible { .. } | LpOutcome::Unbounded => Ok(RowResult::Viol),
        }
    };

    let results: Vec<Result<RowResult, GeomError>> = (0..u).into_par_iter().map(per_row).collect();

    let mut multipliers = Array2::zeros((m, u));
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            RowResult::Cert(col) => {
                for (k, v) in col.into_iter().enumerate() {
                    multipliers[[k, i]] = v;
                }
            }
            RowResult::Viol => {
                let witness = separating_point(inner, &omat.row(i).to_owned(), orhs[i])?;
                return Ok(Containment::Violated { row: i, witness });
            }
        }
    }
    // n equalities + m sign constraints + 1 inequality per outer row
    let lp_constraints = u * (n + m + 1);
    Ok(Containment::Certified {
        multipliers,
        lp_constraints,
    })
}

/// A point of `inner` with direction . x > rhs, found by maximising the
/// direction over `inner` (capped one unit past the bound so an unbounded
/// support still yields a finite witness).
fn separating_point(
    inner: &Polyhedron,
    direction: &Array1<f64>,
    rhs: f64,
) -> Result<Array1<f64>, GeomError> {
    let n = inner.dim();
    let mut lp = LpProblem::new(n);
    for j in 0..n {
        lp.maximize[j] = direction[j];
    }
    for (row, &b) in inner.mat.rows().into_iter().zip(inner.rhs.iter()) {
        let sparse: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j, *v))
            .collect();
        lp.rows.push((sparse, b));
    }
    lp.rows.push((
        direction
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j, *v))
            .collect(),
        rhs + 1.0,
    ));
    match solve_lp(&lp, SOLVE_TOL)? {
        LpOutcome::Optimal { point, .. } => Ok(Array1::from_vec(point)),
        LpOutcome::Infeasible { .. } => Err(GeomError::EmptyInterior),
        LpOutcome::Unbounded => Err(GeomError::Unbounded("separating support".into())),
    }
}

/// Replays a containment certificate: E' x_{:,i} = -G_{i,:}', x <= 0 and
/// -f' x_{:,i} <= g_i for every outer row.
pub fn verify_certificate(
    inner: &Polyhedron,
    outer: &Polyhedron,
    multipliers: &Array2<f64>,
    tol: f64,
) -> bool {
    let (m, u) = (inner.n_rows(), outer.n_rows());
    if multipliers.nrows() != m || multipliers.ncols() != u {
        return false;
    }
    if multipliers.iter().any(|&x| x > tol) {
        return false;
    }
    for i in 0..u {
        let col = multipliers.column(i);
        for j in 0..inner.dim() {
            let lhs: f64 = (0..m).map(|k| inner.mat[[k, j]] * col[k]).sum();
            if (lhs + outer.mat[[i, j]]).abs() > tol {
                return false;
            }
        }
        let fdot: f64 = (0..m).map(|k| inner.rhs[k] * col[k]).sum();
        if -fdot > outer.rhs[i] + tol {
            return false;
        }
    }
    true
}

pub const EXACT_DFR_MAX_DIM: usize = 12;

/// Exact maximal decoupled region by corner enumeration: finds the box
/// maximising the sum of log widths whose 2^n corners all satisfy the region
/// rows. Exponential in the dimension; intended as a ground-truth oracle for
/// small n.
pub fn exact_dfr_small(
    fr: &Polyhedron,
    p_lo: Option<&Array1<f64>>,
    p_hi: Option<&Array1<f64>>,
) -> Result<BoxBounds, GeomError> {
    let n = fr.dim();
    if n > EXACT_DFR_MAX_DIM {
        return Err(GeomError::DimensionTooLarge(n, EXACT_DFR_MAX_DIM));
    }
    let u = fr.n_rows();
    // variables: [lo(n), hi(n), w(n)]
    let mut prob = LogConeProblem::new(3 * n);
    prob.log_terms = (2 * n..3 * n).collect();
    for k in 0..n {
        prob.eq_rows
            .push((vec![(2 * n + k, 1.0), (n + k, -1.0), (k, 1.0)], 0.0));
        prob.bounds[2 * n + k] = (LOG_FLOOR, f64::INFINITY);
        if let Some(lo) = p_lo {
            prob.bounds[k] = (lo[k], f64::INFINITY);
        }
        if let Some(hi) = p_hi {
            prob.bounds[n + k] = (f64::NEG_INFINITY, hi[k]);
        }
    }
    for mask in 0..1usize << n {
        for i in 0..u {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(n);
            for j in 0..n {
                let coef = fr.mat[[i, j]];
                if coef == 0.0 {
                    continue;
                }
                if mask >> j & 1 == 1 {
                    row.push((j, coef)); // corner takes lo_j
                } else {
                    row.push((n + j, coef)); // corner takes hi_j
                }
            }
            prob.rows.push((row, fr.rhs[i]));
        }
    }
    match solve_logcone(&prob, SOLVE_TOL)? {
        ConeOutcome::Optimal { point, .. } => {
            BoxBounds::new(point[..n].to_vec(), point[n..2 * n].to_vec())
        }
        ConeOutcome::Infeasible => Err(GeomError::EmptyInterior),
    }
}

const VERTEX_MEMBERSHIP_EPS: f64 = 1e-7;
const VERTEX_DEDUP_EPS: f64 = 1e-9;

/// All vertices of a bounded 2-D or 3-D polyhedron by row-pair (row-triple)
/// intersection plus membership filtering, deduplicated. Detects
/// unboundedness first and refuses.
pub fn enumerate_vertices(p: &Polyhedron) -> Result<Vec<Array1<f64>>, GeomError> {
    let n = p.dim();
    if n != 2 && n != 3 {
        return Err(GeomError::DimensionTooLarge(n, 3));
    }
    for j in 0..n {
        for sign in [1.0, -1.0] {
            let mut lp = LpProblem::new(n);
            lp.maximize[j] = sign;
            for (row, &b) in p.mat.rows().into_iter().zip(p.rhs.iter()) {
                lp.rows.push((
                    row.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(c, v)| (c, *v))
                        .collect(),
                    b,
                ));
            }
            if matches!(solve_lp(&lp, SOLVE_TOL)?, LpOutcome::Unbounded) {
                return Err(GeomError::Unbounded(format!(
                    "{}{}",
                    if sign > 0.0 { "+" } else { "-" },
                    p.var_names[j]
                )));
            }
        }
    }

    let m = p.n_rows();
    let scale = p.rhs.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let mut verts: Vec<Array1<f64>> = Vec::new();
    let mut push_candidate = |x: Array1<f64>| {
        if !p.contains_point(&x, VERTEX_MEMBERSHIP_EPS * scale.max(1.0)) {
            return;
        }
        if verts.iter().any(|v| {
            v.iter()
                .zip(x.iter())
                .all(|(a, b)| (a - b).abs() <= VERTEX_DEDUP_EPS)
        }) {
            return;
        }
        verts.push(x);
    };

    let combos: Vec<Vec<usize>> = if n == 2 {
        (0..m)
            .flat_map(|i| ((i + 1)..m).map(move |j| vec![i, j]))
            .collect()
    } else {
        let mut out = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                for k in j + 1..m {
                    out.push(vec![i, j, k]);
                }
            }
        }
        out
    };
    for combo in combos {
        let mut a = Array2::zeros((n, n));
        let mut b = Array1::zeros(n);
        for (r, &ri) in combo.iter().enumerate() {
            for c in 0..n {
                a[[r, c]] = p.mat[[ri, c]];
            }
            b[r] = p.rhs[ri];
        }
        if let Ok(f) = crate::linalg::LuFactors::new(&a) {
            push_candidate(f.solve(&b));
        }
    }
    verts.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(verts)
}

/// Counterclockwise ordering of 2-D points around their centroid, closed
/// (first point repeated) when `close` is set. Used for polygon emission.
pub fn ccw_polygon(points: &[Array1<f64>], close: bool) -> Vec<Array1<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / points.len() as f64;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / points.len() as f64;
    let mut ordered: Vec<Array1<f64>> = points.to_vec();
    ordered.sort_by(|a, b| {
        let ta = (a[1] - cy).atan2(a[0] - cx);
        let tb = (b[1] - cy).atan2(b[0] - cx);
        ta.partial_cmp(&tb).unwrap()
    });
    if close {
        if let Some(first) = ordered.first().cloned() {
            ordered.push(first);
        }
    }
    ordered
}
