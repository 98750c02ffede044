//! Linear unbalanced three-phase power-flow model and its reduction to a
//! polyhedral feasible region over active-customer powers.
//!
//! Customer currents are linearised by freezing the voltage in their
//! denominators at a nominal profile (no-load by default), which makes every
//! bus voltage affine in the active powers p and reactive powers q:
//! A p + B q + C v = d, with v stacking real and imaginary parts of all
//! non-reference bus-phase voltages. Operational limits become E v <= f:
//! voltage magnitudes by projection onto the nominal phase direction (first
//! order accurate), ampere limits by a regular octagonal inner approximation
//! of the current disc, which preserves safety.
//!
//! Eliminating v = C^{-1}(d - A p - B q) yields the region
//! {p | -M p <= r - N q} with M = E C^{-1} A, N = E C^{-1} B,
//! r = f - E C^{-1} d, to which the raw power box rows are appended.

use crate::linalg::{invert_complex, LuFactors};
use crate::netmodel::{CustomerKind, NetworkModel, Phase};
use crate::polytope::Polyhedron;
use ndarray::{Array1, Array2};
use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum LinError {
    #[error("nominal voltage is zero at bus '{0}' phase {1}")]
    ZeroNominal(String, char),
    #[error("voltage coefficient matrix is singular: {0}")]
    SingularC(#[from] crate::linalg::LinalgError),
    #[error("q[{idx}] = {value} outside [{lo}, {hi}]")]
    QOutOfBounds {
        idx: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Geom(#[from] crate::polytope::GeomError),
}

/// Linearised power-flow equations A p + B q + C v = d plus operational rows
/// E v <= f, with box bounds on p and q. Columns of A/B follow the active
/// customer order of the network.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub d: Array1<f64>,
    pub e: Array2<f64>,
    pub f: Array1<f64>,
    pub p_lo: Array1<f64>,
    pub p_hi: Array1<f64>,
    pub q_lo: Array1<f64>,
    pub q_hi: Array1<f64>,
    /// Customer id per p/q coordinate.
    pub coord_ids: Vec<String>,
    /// Provenance per E row ("v_upper:b2:a", "i_oct:b0->b1:c:5", ...).
    pub row_tags: Vec<String>,
}

impl LinearModel {
    pub fn n_p(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_q(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_v(&self) -> usize {
        self.c.ncols()
    }

    /// Reconstructs the voltage variable vector for given powers by solving
    /// C v = d - A p - B q.
    pub fn reconstruct_v(&self, p: &Array1<f64>, q: &Array1<f64>) -> Result<Array1<f64>, LinError> {
        let rhs = &self.d - &self.a.dot(p) - &self.b.dot(q);
        let lu = LuFactors::new(&self.c)?;
        Ok(lu.solve(&rhs))
    }

    /// Direct membership check of the un-eliminated system: E v <= f with v
    /// reconstructed from (p, q), plus the p box.
    pub fn satisfied_directly(
        &self,
        p: &Array1<f64>,
        q: &Array1<f64>,
        tol: f64,
    ) -> Result<bool, LinError> {
        for (k, &pk) in p.iter().enumerate() {
            if pk > self.p_hi[k] + tol || pk < self.p_lo[k] - tol {
                return Ok(false);
            }
        }
        let v = self.reconstruct_v(p, q)?;
        Ok(self
            .e
            .dot(&v)
            .iter()
            .zip(self.f.iter())
            .all(|(lhs, rhs)| *lhs <= rhs + tol))
    }
}

/// Feasible region in precomputed parametric form
/// {p | g_p p + q_coef q <= r}, box bounds excluded (they are appended on
/// instantiation). `q_coef` carries the left-hand-side reactive coefficients,
/// so instantiating at a fixed q shifts the right-hand side by -q_coef q.
#[derive(Debug, Clone)]
pub struct ParametricFR {
    pub g_p: Array2<f64>,
    pub q_coef: Array2<f64>,
    pub r: Array1<f64>,
    pub p_lo: Array1<f64>,
    pub p_hi: Array1<f64>,
    pub q_lo: Array1<f64>,
    pub q_hi: Array1<f64>,
    pub row_tags: Vec<String>,
    pub coord_ids: Vec<String>,
}

impl ParametricFR {
    pub fn n_p(&self) -> usize {
        self.g_p.ncols()
    }

    pub fn n_q(&self) -> usize {
        self.q_coef.ncols()
    }

    /// Wraps a plain polyhedron (fixture-driven path): no reactive coupling,
    /// no extra box rows.
    pub fn from_polyhedron(poly: &Polyhedron) -> Result<Self, LinError> {
        let n = poly.dim();
        Ok(Self {
            g_p: poly.mat.clone(),
            q_coef: Array2::zeros((poly.n_rows(), 0)),
            r: poly.rhs.clone(),
            p_lo: Array1::from_elem(n, f64::NEG_INFINITY),
            p_hi: Array1::from_elem(n, f64::INFINITY),
            q_lo: Array1::zeros(0),
            q_hi: Array1::zeros(0),
            row_tags: poly
                .tags
                .clone()
                .unwrap_or_else(|| (0..poly.n_rows()).map(|i| format!("row:{i}")).collect()),
            coord_ids: poly.var_names.clone(),
        })
    }

    /// Stacked [g_p | q_coef] rows scaled to unit norm, with rhs scaled along.
    pub fn normalized_rows(&self) -> (Array2<f64>, Array1<f64>) {
        let m = self.g_p.nrows();
        let (np, nq) = (self.n_p(), self.n_q());
        let mut rows = Array2::zeros((m, np + nq));
        let mut rhs = Array1::zeros(m);
        for i in 0..m {
            let mut norm = 0.0;
            for j in 0..np {
                norm += self.g_p[[i, j]] * self.g_p[[i, j]];
            }
            for j in 0..nq {
                norm += self.q_coef[[i, j]] * self.q_coef[[i, j]];
            }
            let norm = norm.sqrt().max(1e-300);
            for j in 0..np {
                rows[[i, j]] = self.g_p[[i, j]] / norm;
            }
            for j in 0..nq {
                rows[[i, np + j]] = self.q_coef[[i, j]] / norm;
            }
            rhs[i] = self.r[i] / norm;
        }
        (rows, rhs)
    }

    /// Instantiates the region at a fixed q, appending the p box rows.
    pub fn at_q(&self, q: &Array1<f64>) -> Result<Polyhedron, LinError> {
        if q.len() != self.n_q() {
            return Err(LinError::Shape(format!(
                "q has {} entries, want {}",
                q.len(),
                self.n_q()
            )));
        }
        for (idx, &value) in q.iter().enumerate() {
            if value < self.q_lo[idx] - 1e-9 || value > self.q_hi[idx] + 1e-9 {
                return Err(LinError::QOutOfBounds {
                    idx,
                    value,
                    lo: self.q_lo[idx],
                    hi: self.q_hi[idx],
                });
            }
        }
        let n = self.n_p();
        let m = self.g_p.nrows();
        let mut mat = Array2::zeros((m + 2 * n, n));
        let mut rhs = Array1::zeros(m + 2 * n);
        let mut tags = Vec::with_capacity(m + 2 * n);
        let shift = self.q_coef.dot(q);
        for i in 0..m {
            for j in 0..n {
                mat[[i, j]] = self.g_p[[i, j]];
            }
            rhs[i] = self.r[i] - shift[i];
            tags.push(self.row_tags[i].clone());
        }
        for k in 0..n {
            mat[[m + 2 * k, k]] = 1.0;
            rhs[m + 2 * k] = self.p_hi[k];
            tags.push(format!("box_upper:{}", self.coord_ids[k]));
            mat[[m + 2 * k + 1, k]] = -1.0;
            rhs[m + 2 * k + 1] = -self.p_lo[k];
            tags.push(format!("box_lower:{}", self.coord_ids[k]));
        }
        let mut poly = Polyhedron::new(mat, rhs)?;
        poly.var_names = self.coord_ids.clone();
        poly.tags = Some(tags);
        Ok(poly)
    }

    /// Midpoints of the q box, the fixed setpoint used when reactive powers
    /// are not optimised.
    pub fn q_midpoint(&self) -> Array1<f64> {
        Array1::from_iter(
            self.q_lo
                .iter()
                .zip(self.q_hi.iter())
                .map(|(l, h)| 0.5 * (l + h)),
        )
    }
}

const OCTAGON_SIDES: usize = 8;

/// Builds the linear model around a nominal voltage profile (per bus, three
/// phases). `v_nominal = None` uses the no-load profile: the reference
/// voltage replicated at every bus.
pub fn linearize(
    net: &NetworkModel,
    v_nominal: Option<&[[Complex64; 3]]>,
) -> Result<LinearModel, LinError> {
    let nb = net.n_buses();
    let v_ref = net.v_ref();
    let default_prof: Vec<[Complex64; 3]>;
    let prof: &[[Complex64; 3]] = match v_nominal {
        Some(p) => {
            if p.len() != nb {
                return Err(LinError::Shape(format!(
                    "nominal profile has {} buses",
                    p.len()
                )));
            }
            p
        }
        None => {
            default_prof = vec![v_ref; nb];
            &default_prof
        }
    };
    for (bi, bus) in net.doc.buses.iter().enumerate() {
        for &ph in &bus.phases {
            if prof[bi][ph.index()].norm() < 1e-9 {
                return Err(LinError::ZeroNominal(bus.id.clone(), ph.letter()));
            }
        }
    }

    let acts = net.active_customers();
    let n_p = acts.len();
    let s_base = net.doc.base.s_kva;

    // voltage variables: non-reference buses, all three phases, Re then Im
    let mut v_pairs = Vec::new();
    let mut pair_of = vec![[usize::MAX; 3]; nb];
    for bi in 0..nb {
        if bi == net.reference_bus() {
            continue;
        }
        for ph in 0..3 {
            pair_of[bi][ph] = v_pairs.len();
            v_pairs.push((bi, ph));
        }
    }
    let npairs = v_pairs.len();
    let nv = 2 * npairs;

    // shared-path impedance between the reference->bus and reference->site walks
    let paths: Vec<Vec<usize>> = (0..nb).map(|b| net.path_lines(b)).collect();
    let z_lines: Vec<[[Complex64; 3]; 3]> = (0..net.doc.lines.len())
        .map(|li| net.line_z_pu(li))
        .collect();
    let shared_z = |bus_a: usize, bus_b: usize| -> [[Complex64; 3]; 3] {
        let mut acc = [[Complex64::new(0.0, 0.0); 3]; 3];
        for (la, lb) in paths[bus_a].iter().zip(paths[bus_b].iter()) {
            if la != lb {
                break;
            }
            let z = &z_lines[*la];
            for r in 0..3 {
                for c in 0..3 {
                    acc[r][c] += z[r][c];
                }
            }
        }
        acc
    };

    // gamma[(pair, customer)] : complex coefficient of (P - jQ) in V
    let cust_sites: Vec<(usize, usize)> = net
        .doc
        .customers
        .iter()
        .map(|c| (net.bus_idx(&c.bus).expect("validated"), c.phase.index()))
        .collect();
    let gamma = |pair: usize, cust: usize| -> Complex64 {
        let (bi, ph) = v_pairs[pair];
        let (cb, cph) = cust_sites[cust];
        let z = shared_z(bi, cb);
        z[ph][cph] / prof[cb][cph].conj()
    };

    // equations: V + sum_m gamma_m (P_m - j Q_m) = Vref, split into Re / Im
    let mut a = Array2::zeros((nv, n_p));
    let mut b = Array2::zeros((nv, n_p));
    let mut c_mat = Array2::eye(nv);
    let mut d = Array1::zeros(nv);
    for pair in 0..npairs {
        let (_, ph) = v_pairs[pair];
        d[pair] = v_ref[ph].re;
        d[npairs + pair] = v_ref[ph].im;
        for (slot, &ci) in acts.iter().enumerate() {
            let g = gamma(pair, ci);
            a[[pair, slot]] = g.re;
            b[[pair, slot]] = g.im;
            a[[npairs + pair, slot]] = g.im;
            b[[npairs + pair, slot]] = -g.re;
        }
        for (ci, cust) in net.doc.customers.iter().enumerate() {
            if let CustomerKind::Passive { p_kw, q_kvar } = cust.kind {
                let g = gamma(pair, ci);
                let (p_pu, q_pu) = (p_kw / s_base, q_kvar / s_base);
                d[pair] -= g.re * p_pu + g.im * q_pu;
                d[npairs + pair] -= g.im * p_pu - g.re * q_pu;
            }
        }
    }
    let _ = &mut c_mat; // identity in this construction; kept general downstream

    // operational rows over v
    let mut e_rows: Vec<Vec<f64>> = Vec::new();
    let mut f_vals: Vec<f64> = Vec::new();
    let mut row_tags: Vec<String> = Vec::new();
    let mut push_row = |row: Vec<f64>, rhs: f64, tag: String| {
        e_rows.push(row);
        f_vals.push(rhs);
        row_tags.push(tag);
    };

    // |V| ~ Re(V e^{-j theta_nominal}) within [vmin, vmax]
    for (bi, bus) in net.doc.buses.iter().enumerate() {
        if bi == net.reference_bus() {
            continue;
        }
        for &ph in &bus.phases {
            let pair = pair_of[bi][ph.index()];
            let theta = prof[bi][ph.index()].arg();
            let (cos_t, sin_t) = (theta.cos(), theta.sin());
            let mut upper = vec![0.0; nv];
            upper[pair] = cos_t;
            upper[npairs + pair] = sin_t;
            push_row(
                upper,
                bus.vmax_pu,
                format!("v_upper:{}:{}", bus.id, ph.letter()),
            );
            let mut lower = vec![0.0; nv];
            lower[pair] = -cos_t;
            lower[npairs + pair] = -sin_t;
            push_row(
                lower,
                -bus.vmin_pu,
                format!("v_lower:{}:{}", bus.id, ph.letter()),
            );
        }
    }

    // ampere limits: I = Z^{-1}(V_from - V_to), octagonal inner approximation
    // of |I| <= imax per phase
    let i_base = net.i_base_a();
    for (li, line) in net.doc.lines.iter().enumerate() {
        let Some(imax_a) = line.imax_a else { continue };
        let imax_pu = imax_a / i_base;
        let z = z_lines[li];
        let zv: Vec<Vec<Complex64>> = z.iter().map(|r| r.to_vec()).collect();
        let w = invert_complex(&zv)?;
        let fi = net.bus_idx(&line.from).unwrap();
        let ti = net.bus_idx(&line.to).unwrap();
        for ph in 0..3 {
            let theta0 = v_ref[ph].arg();
            for k in 0..OCTAGON_SIDES {
                let ang = (2 * k + 1) as f64 * std::f64::consts::PI / OCTAGON_SIDES as f64 + theta0;
                let dir = Complex64::from_polar(1.0, -ang);
                let mut row = vec![0.0; nv];
                let mut rhs = imax_pu * (std::f64::consts::PI / OCTAGON_SIDES as f64).cos();
                for psi in 0..3 {
                    let coef = dir * w[ph][psi];
                    for (bus, sign) in [(fi, 1.0), (ti, -1.0)] {
                        if bus == net.reference_bus() {
                            rhs -= sign * (coef * v_ref[psi]).re;
                        } else {
                            let pair = pair_of[bus][psi];
                            row[pair] += sign * coef.re;
                            row[npairs + pair] -= sign * coef.im;
                        }
                    }
                }
                push_row(
                    row,
                    rhs,
                    format!(
                        "i_oct:{}->{}:{}:{}",
                        line.from,
                        line.to,
                        Phase::ALL[ph].letter(),
                        k
                    ),
                );
            }
        }
    }

    let n_e = e_rows.len();
    let mut e = Array2::zeros((n_e, nv));
    for (i, row) in e_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            e[[i, j]] = *v;
        }
    }
    let f = Array1::from_vec(f_vals);

    let mut p_lo = Array1::zeros(n_p);
    let mut p_hi = Array1::zeros(n_p);
    let mut q_lo = Array1::zeros(n_p);
    let mut q_hi = Array1::zeros(n_p);
    let mut coord_ids = Vec::with_capacity(n_p);
    for (slot, &ci) in acts.iter().enumerate() {
        let cust = &net.doc.customers[ci];
        coord_ids.push(cust.id.clone());
        if let CustomerKind::Active {
            plo_kw,
            phi_kw,
            qlo_kvar,
            qhi_kvar,
            ..
        } = cust.kind
        {
            p_lo[slot] = plo_kw / s_base;
            p_hi[slot] = phi_kw / s_base;
            q_lo[slot] = qlo_kvar / s_base;
            q_hi[slot] = qhi_kvar / s_base;
        }
    }

    Ok(LinearModel {
        a,
        b,
        c: c_mat,
        d,
        e,
        f,
        p_lo,
        p_hi,
        q_lo,
        q_hi,
        coord_ids,
        row_tags,
    })
}

/// Eliminates the voltage variables. With M = E C^{-1} A, N = E C^{-1} B and
/// r = f - E C^{-1} d the region reads -M p <= r + N q, i.e. rows
/// g_p = -M and left-hand-side reactive coefficients q_coef = -N.
pub fn parametric_fr(lm: &LinearModel) -> Result<ParametricFR, LinError> {
    let lu = LuFactors::new(&lm.c)?;
    let ci_a = lu.solve_matrix(&lm.a);
    let ci_b = lu.solve_matrix(&lm.b);
    let ci_d = lu.solve(&lm.d);
    let m = lm.e.dot(&ci_a);
    let n = lm.e.dot(&ci_b);
    let r = &lm.f - &lm.e.dot(&ci_d);
    Ok(ParametricFR {
        g_p: -m,
        q_coef: -n,
        r,
        p_lo: lm.p_lo.clone(),
        p_hi: lm.p_hi.clone(),
        q_lo: lm.q_lo.clone(),
        q_hi: lm.q_hi.clone(),
        row_tags: lm.row_tags.clone(),
        coord_ids: lm.coord_ids.clone(),
    })
}

/// Feasible region over p at a fixed reactive vector: operational rows plus
/// the power box. Row count is rows(E) + 2 n.
pub fn build_fr(lm: &LinearModel, q: &Array1<f64>) -> Result<Polyhedron, LinError> {
    parametric_fr(lm)?.at_q(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_bus() -> NetworkModel {
        NetworkModel::parse(include_str!("../tests/fixtures/two_bus.json")).unwrap()
    }

    #[test]
    fn two_bus_has_six_voltage_rows() {
        let lm = linearize(&two_bus(), None).unwrap();
        assert_eq!(lm.e.nrows(), 6);
        assert_eq!(lm.n_p(), 2);
        assert_eq!(lm.n_v(), 6); // 1 non-reference bus, 3 phases, Re+Im
        assert!(lm.row_tags.iter().all(|t| t.starts_with("v_")));
    }

    #[test]
    fn build_fr_row_count_and_membership() {
        let net = two_bus();
        let lm = linearize(&net, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // nonzero q exercises the reactive-coupling sign
        for q in [array![0.0, 0.0], array![1.5, -2.0], array![-0.7, 2.9]] {
            let fr = build_fr(&lm, &q).unwrap();
            assert_eq!(fr.n_rows(), lm.e.nrows() + 2 * lm.n_p());
            // membership agreement with the direct (un-eliminated) system
            for _ in 0..1000 {
                let p = array![rng.gen::<f64>() * 14.0 - 7.0, rng.gen::<f64>() * 14.0 - 7.0];
                let reduced = fr.contains_point(&p, 1e-10);
                let direct = lm.satisfied_directly(&p, &q, 1e-10).unwrap();
                assert_eq!(reduced, direct, "disagreement at {p}, q {q}");
            }
        }
    }

    #[test]
    fn near_zero_impedance_region_is_the_box() {
        let mut doc = two_bus().doc;
        for line in &mut doc.lines {
            for row in &mut line.z_ohm {
                for e in row.iter_mut() {
                    e[0] *= 1e-7;
                    e[1] *= 1e-7;
                }
            }
        }
        let net = NetworkModel::from_doc(doc).unwrap();
        let lm = linearize(&net, None).unwrap();
        let pfr = parametric_fr(&lm).unwrap();
        // voltage rows have negligible coefficients: region = box
        assert!(pfr.g_p.iter().all(|v| v.abs() < 1e-6));
        let fr = pfr.at_q(&array![0.0, 0.0]).unwrap();
        assert!(fr.contains_point(&array![-5.0, 6.0], 1e-6));
        assert!(!fr.contains_point(&array![-5.1, 0.0], 1e-6));
    }

    #[test]
    fn empty_e_gives_pure_box() {
        let lm = LinearModel {
            a: Array2::zeros((2, 2)),
            b: Array2::zeros((2, 2)),
            c: Array2::eye(2),
            d: Array1::zeros(2),
            e: Array2::zeros((0, 2)),
            f: Array1::zeros(0),
            p_lo: array![-1.0, -2.0],
            p_hi: array![3.0, 4.0],
            q_lo: array![0.0, 0.0],
            q_hi: array![0.0, 0.0],
            coord_ids: vec!["c1".into(), "c2".into()],
            row_tags: vec![],
        };
        let fr = build_fr(&lm, &array![0.0, 0.0]).unwrap();
        assert_eq!(fr.n_rows(), 4);
        assert!(fr.contains_point(&array![3.0, -2.0], 1e-12));
        assert!(!fr.contains_point(&array![3.1, 0.0], 1e-12));
    }

    #[test]
    fn parametric_matches_direct_instantiation() {
        let net = two_bus();
        let lm = linearize(&net, None).unwrap();
        let pfr = parametric_fr(&lm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut qs: Vec<Array1<f64>> = (0..10)
            .map(|_| array![rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0])
            .collect();
        // include the reactive setpoint of the optimised case
        qs.push(array![0.98, -1.02]);
        for q in qs {
            let from_param = pfr.at_q(&q).unwrap();
            let from_build = build_fr(&lm, &q).unwrap();
            assert_eq!(from_param.n_rows(), from_build.n_rows());
            for i in 0..from_param.n_rows() {
                assert!((from_param.rhs[i] - from_build.rhs[i]).abs() < 1e-12);
                for j in 0..from_param.dim() {
                    assert!((from_param.mat[[i, j]] - from_build.mat[[i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn q_out_of_bounds_rejected() {
        let net = two_bus();
        let lm = linearize(&net, None).unwrap();
        let err = build_fr(&lm, &array![5.0, 0.0]).unwrap_err();
        assert!(matches!(err, LinError::QOutOfBounds { idx: 0, .. }));
    }

    #[test]
    fn no_reactive_coupling_zeroes_n() {
        let net = two_bus();
        let mut lm = linearize(&net, None).unwrap();
        lm.b.fill(0.0);
        let pfr = parametric_fr(&lm).unwrap();
        assert!(pfr.q_coef.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_nominal_voltage_rejected() {
        let net = two_bus();
        let zero = [[Complex64::new(0.0, 0.0); 3]; 2];
        assert!(matches!(
            linearize(&net, Some(&zero)),
            Err(LinError::ZeroNominal(_, _))
        ));
    }

    #[test]
    fn synthetic_feeder_has_current_rows() {
        let net = crate::netmodel::synth_feeder(6, 3, 1).unwrap();
        let lm = linearize(&net, None).unwrap();
        let v_rows = lm.row_tags.iter().filter(|t| t.starts_with("v_")).count();
        let i_rows = lm
            .row_tags
            .iter()
            .filter(|t| t.starts_with("i_oct"))
            .count();
        assert_eq!(v_rows, 2 * 3 * 5);
        assert_eq!(i_rows, 8 * 3 * 5);
    }
}
