//! Network data model: buses, three-phase lines with complex impedance
//! matrices, customers with phase attachment and power bounds. Parses and
//! validates network description documents and synthesises desk-scale radial
//! feeders for testing.
//!
//! Internally all computation runs in per-unit (default base 1 kVA per phase,
//! nominal phase-to-neutral volts); file I/O stays in kW / kVar / ohms.
//! Customer active power is signed demand: P > 0 imports, P < 0 exports.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("synthesis: {0}")]
    Synth(String),
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> NetError {
    NetError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

/// One of the three phases of a three-phase system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }
}

/// Import/export status of an active customer for the upcoming interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Importing,
    Exporting,
    #[default]
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub phases: Vec<Phase>,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
}

fn pair_to_complex(p: [f64; 2]) -> Complex64 {
    Complex64::new(p[0], p[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: String,
    pub to: String,
    /// 3x3 series impedance in ohms, entries as [re, im] pairs.
    pub z_ohm: [[[f64; 2]; 3]; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imax_a: Option<f64>,
}

impl Line {
    pub fn z(&self) -> [[Complex64; 3]; 3] {
        let mut out = [[Complex64::new(0.0, 0.0); 3]; 3];
        for (i, row) in self.z_ohm.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                out[i][j] = pair_to_complex(*p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CustomerKind {
    /// Fixed forecast connection: consumes exactly the stated powers.
    Passive { p_kw: f64, q_kvar: f64 },
    /// Flexible connection managed by an envelope.
    Active {
        plo_kw: f64,
        phi_kw: f64,
        qlo_kvar: f64,
        qhi_kvar: f64,
        #[serde(default)]
        status: Status,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Customer {
    pub id: String,
    pub bus: String,
    pub phase: Phase,
    #[serde(flatten)]
    pub kind: CustomerKind,
}

impl Customer {
    pub fn is_active(&self) -> bool {
        matches!(self.kind, CustomerKind::Active { .. })
    }

    pub fn status(&self) -> Status {
        match self.kind {
            CustomerKind::Active { status, .. } => status,
            CustomerKind::Passive { .. } => Status::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub bus: String,
    /// Reference phase voltages in per-unit, [re, im] per phase.
    pub v_ref_pu: [[f64; 2]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseQuantities {
    /// Per-phase apparent power base in kVA.
    pub s_kva: f64,
    /// Phase-to-neutral voltage base in volts.
    pub v_volts: f64,
}

/// Raw document shape of a network description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub customers: Vec<Customer>,
    pub source: Source,
    pub base: BaseQuantities,
}

/// Validated network with derived radial topology and customer indexing.
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub doc: NetworkDoc,
    bus_index: HashMap<String, usize>,
    reference: usize,
    /// parent[b] = (parent bus index, line index) for every non-reference bus.
    parent: Vec<Option<(usize, usize)>>,
    /// Buses ordered root-first by breadth-first traversal.
    bfs_order: Vec<usize>,
    /// Indices into `doc.customers` of active customers, in file order.
    active: Vec<usize>,
}

impl NetworkModel {
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    pub fn from_doc(doc: NetworkDoc) -> Result<Self, NetError> {
        let mut bus_index = HashMap::new();
        for (i, b) in doc.buses.iter().enumerate() {
            let path = format!("buses[{}] ({})", i, b.id);
            if bus_index.insert(b.id.clone(), i).is_some() {
                return Err(invalid(path, "duplicate bus id"));
            }
            if b.phases.is_empty() {
                return Err(invalid(path, "bus has no phases"));
            }
            let mut seen = HashSet::new();
            if !b.phases.iter().all(|p| seen.insert(*p)) {
                return Err(invalid(path, "repeated phase"));
            }
            if !(b.vmin_pu > 0.0 && b.vmin_pu < b.vmax_pu) {
                return Err(invalid(path, "requires 0 < vmin_pu < vmax_pu"));
            }
        }

        let mut cust_ids = HashSet::new();
        for (i, c) in doc.customers.iter().enumerate() {
            let path = format!("customers[{}] ({})", i, c.id);
            if !cust_ids.insert(c.id.clone()) {
                return Err(invalid(path, "duplicate customer id"));
            }
            let bi = *bus_index
                .get(&c.bus)
                .ok_or_else(|| invalid(&path, format!("unknown bus '{}'", c.bus)))?;
            if !doc.buses[bi].phases.contains(&c.phase) {
                return Err(invalid(
                    path,
                    format!("phase {} not present on bus '{}'", c.phase.letter(), c.bus),
                ));
            }
            if let CustomerKind::Active {
                plo_kw,
                phi_kw,
                qlo_kvar,
                qhi_kvar,
                ..
            } = c.kind
            {
                if plo_kw > phi_kw {
                    return Err(invalid(path, "plo_kw > phi_kw"));
                }
                if qlo_kvar > qhi_kvar {
                    return Err(invalid(path, "qlo_kvar > qhi_kvar"));
                }
            }
        }

        let nb = doc.buses.len();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
        for (li, l) in doc.lines.iter().enumerate() {
            let path = format!("lines[{}] ({}->{})", li, l.from, l.to);
            let fi = *bus_index
                .get(&l.from)
                .ok_or_else(|| invalid(&path, format!("unknown bus '{}'", l.from)))?;
            let ti = *bus_index
                .get(&l.to)
                .ok_or_else(|| invalid(&path, format!("unknown bus '{}'", l.to)))?;
            if fi == ti {
                return Err(invalid(path, "self loop"));
            }
            let z = l.z();
            for r in 0..3 {
                if z[r][r].re <= 0.0 {
                    return Err(invalid(
                        &path,
                        "diagonal impedance must have positive real part",
                    ));
                }
                for c in 0..3 {
                    if (z[r][c] - z[c][r]).norm() > 1e-9 {
                        return Err(invalid(&path, "impedance matrix must be symmetric"));
                    }
                }
            }
            if let Some(imax) = l.imax_a {
                if imax <= 0.0 {
                    return Err(invalid(path, "imax_a must be positive"));
                }
            }
            adj[fi].push((ti, li));
            adj[ti].push((fi, li));
        }

        let reference = *bus_index
            .get(&doc.source.bus)
            .ok_or_else(|| invalid("source", format!("unknown bus '{}'", doc.source.bus)))?;

        if doc.lines.len() + 1 != nb {
            return Err(invalid(
                "lines",
                format!("{} lines for {} buses: not a tree", doc.lines.len(), nb),
            ));
        }
        let mut parent = vec![None; nb];
        let mut visited = vec![false; nb];
        let mut bfs_order = vec![reference];
        visited[reference] = true;
        let mut head = 0;
        while head < bfs_order.len() {
            let b = bfs_order[head];
            head += 1;
            for &(nb2, li) in &adj[b] {
                if !visited[nb2] {
                    visited[nb2] = true;
                    parent[nb2] = Some((b, li));
                    bfs_order.push(nb2);
                }
            }
        }
        if bfs_order.len() != nb {
            return Err(invalid("lines", "network is not connected"));
        }

        if doc.base.s_kva <= 0.0 || doc.base.v_volts <= 0.0 {
            return Err(invalid("base", "bases must be positive"));
        }

        let active = doc
            .customers
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_active())
            .map(|(i, _)| i)
            .collect();

        Ok(Self {
            doc,
            bus_index,
            reference,
            parent,
            bfs_order,
            active,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("network serialises")
    }

    pub fn n_buses(&self) -> usize {
        self.doc.buses.len()
    }

    pub fn reference_bus(&self) -> usize {
        self.reference
    }

    pub fn bus_idx(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn parent_of(&self, bus: usize) -> Option<(usize, usize)> {
        self.parent[bus]
    }

    pub fn bfs_order(&self) -> &[usize] {
        &self.bfs_order
    }

    /// Indices (into `doc.customers`) of active customers in file order; this
    /// order defines the p/q coordinate layout used by the linear model.
    pub fn active_customers(&self) -> &[usize] {
        &self.active
    }

    pub fn customer_idx(&self, id: &str) -> Option<usize> {
        self.doc.customers.iter().position(|c| c.id == id)
    }

    pub fn v_ref(&self) -> [Complex64; 3] {
        let v = &self.doc.source.v_ref_pu;
        [
            pair_to_complex(v[0]),
            pair_to_complex(v[1]),
            pair_to_complex(v[2]),
        ]
    }

    /// Impedance base in ohms for per-unit conversion.
    pub fn z_base_ohm(&self) -> f64 {
        self.doc.base.v_volts * self.doc.base.v_volts / (self.doc.base.s_kva * 1e3)
    }

    /// Current base in amperes.
    pub fn i_base_a(&self) -> f64 {
        self.doc.base.s_kva * 1e3 / self.doc.base.v_volts
    }

    /// Per-unit series impedance of a line.
    pub fn line_z_pu(&self, line: usize) -> [[Complex64; 3]; 3] {
        let zb = self.z_base_ohm();
        let mut z = self.doc.lines[line].z();
        for row in z.iter_mut() {
            for e in row.iter_mut() {
                *e /= zb;
            }
        }
        z
    }

    /// Line indices on the path from the reference bus to `bus`, root-first.
    pub fn path_lines(&self, bus: usize) -> Vec<usize> {
        let mut lines = Vec::new();
        let mut b = bus;
        while let Some((p, li)) = self.parent[b] {
            lines.push(li);
            b = p;
        }
        lines.reverse();
        lines
    }
}

/// Deterministic synthetic radial feeder: an unloaded trunk feeding a short
/// loaded tail, phases attached round-robin. Stands in for field networks in
/// tests and benchmarks.
///
/// Active customers default to 5 kW export / 6 kW import and +/-3 kVar;
/// passive customers are fixed at -1 kW. Segment impedances jitter around a
/// common three-phase block so feeders differ across seeds but stay radial
/// and validated.
pub fn synth_feeder(n_buses: usize, n_active: usize, seed: u64) -> Result<NetworkModel, NetError> {
    if n_buses < 2 {
        return Err(NetError::Synth("need at least 2 buses".into()));
    }
    if n_active < 1 {
        return Err(NetError::Synth("need at least 1 active customer".into()));
    }
    let tail = (n_buses / 8).clamp(1, n_buses - 1);
    let slots = 3 * tail * 4;
    if n_active > slots {
        return Err(NetError::Synth(format!(
            "{} active customers exceed {} attachable slots",
            n_active, slots
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Config-601-style unbalanced block, scaled per segment.
    let z_block = [
        [(0.3465, 1.0179), (0.1560, 0.5017), (0.1580, 0.4236)],
        [(0.1560, 0.5017), (0.3375, 1.0478), (0.1535, 0.3849)],
        [(0.1580, 0.4236), (0.1535, 0.3849), (0.3414, 1.0348)],
    ];
    let seg_scale = 0.05;

    let buses: Vec<Bus> = (0..n_buses)
        .map(|i| Bus {
            id: format!("b{}", i),
            phases: vec![Phase::A, Phase::B, Phase::C],
            vmin_pu: 0.95,
            vmax_pu: 1.05,
        })
        .collect();

    let mut lines = Vec::new();
    for i in 0..n_buses - 1 {
        let len: f64 = seg_scale * (0.8 + 0.4 * rng.gen::<f64>());
        let mut z_ohm = [[[0.0; 2]; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                z_ohm[r][c] = [z_block[r][c].0 * len, z_block[r][c].1 * len];
            }
        }
        lines.push(Line {
            from: format!("b{}", i),
            to: format!("b{}", i + 1),
            z_ohm,
            imax_a: Some(150.0),
        });
    }

    let mut customers = Vec::new();
    for i in 0..n_active {
        let bus = n_buses - tail + (i % tail);
        let phase = Phase::ALL[(i / tail) % 3];
        customers.push(Customer {
            id: format!("c{}", i + 1),
            bus: format!("b{}", bus),
            phase,
            kind: CustomerKind::Active {
                plo_kw: -5.0,
                phi_kw: 6.0,
                qlo_kvar: -3.0,
                qhi_kvar: 3.0,
                status: Status::Free,
            },
        });
    }
    let trunk = n_buses - tail;
    for j in 0..3usize.min(trunk.max(1)) {
        let bus = (((j + 1) * trunk) / 4).max(1).min(n_buses - 1);
        customers.push(Customer {
            id: format!("p{}", j + 1),
            bus: format!("b{}", bus),
            phase: Phase::ALL[j % 3],
            kind: CustomerKind::Passive {
                p_kw: -1.0,
                q_kvar: 0.0,
            },
        });
    }

    let half = 3f64.sqrt() / 2.0;
    let doc = NetworkDoc {
        buses,
        lines,
        customers,
        source: Source {
            bus: "b0".into(),
            v_ref_pu: [[1.0, 0.0], [-0.5, -half], [-0.5, half]],
        },
        base: BaseQuantities {
            s_kva: 1.0,
            v_volts: 230.0,
        },
    };
    NetworkModel::from_doc(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_doc(phase_c2: &str) -> String {
        format!(
            r#"{{
  "buses": [
    {{"id": "b1", "phases": ["a","b","c"], "vmin_pu": 0.95, "vmax_pu": 1.05}},
    {{"id": "b2", "phases": ["a","b","c"], "vmin_pu": 0.95, "vmax_pu": 1.05}}
  ],
  "lines": [
    {{"from": "b1", "to": "b2", "z_ohm": [
      [[0.3465,1.0179],[0.1560,0.5017],[0.1580,0.4236]],
      [[0.1560,0.5017],[0.3375,1.0478],[0.1535,0.3849]],
      [[0.1580,0.4236],[0.1535,0.3849],[0.3414,1.0348]]
    ]}}
  ],
  "customers": [
    {{"id": "c1", "bus": "b2", "phase": "b", "kind": "active",
      "plo_kw": -5.0, "phi_kw": 6.0, "qlo_kvar": -3.0, "qhi_kvar": 3.0}},
    {{"id": "c2", "bus": "b2", "phase": "{}", "kind": "passive", "p_kw": -2.0, "q_kvar": 0.0}},
    {{"id": "c3", "bus": "b2", "phase": "c", "kind": "active",
      "plo_kw": -5.0, "phi_kw": 6.0, "qlo_kvar": -3.0, "qhi_kvar": 3.0}}
  ],
  "source": {{"bus": "b1", "v_ref_pu": [[1.0,0.0],[-0.5,-0.8660254037844386],[-0.5,0.8660254037844386]]}},
  "base": {{"s_kva": 1.0, "v_volts": 230.0}}
}}"#,
            phase_c2
        )
    }

    #[test]
    fn parses_two_bus_document() {
        let net = NetworkModel::parse(&two_bus_doc("a")).unwrap();
        assert_eq!(net.doc.lines.len(), 1);
        assert_eq!(net.doc.customers.len(), 3);
        assert_eq!(net.active_customers().len(), 2);
        assert_eq!(net.reference_bus(), net.bus_idx("b1").unwrap());
    }

    #[test]
    fn rejects_customer_on_missing_phase() {
        let text = two_bus_doc("a").replace(
            r#""phases": ["a","b","c"], "vmin_pu": 0.95, "vmax_pu": 1.05}"#,
            r#""phases": ["a","b"], "vmin_pu": 0.95, "vmax_pu": 1.05}"#,
        );
        // both buses now lack phase c; customer c3 sits on phase c of b2
        let err = NetworkModel::parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("phase c"), "unexpected error: {msg}");
        assert!(
            msg.contains("c3"),
            "error should name the offending element: {msg}"
        );
    }

    #[test]
    fn roundtrip_preserves_model() {
        let net = NetworkModel::parse(&two_bus_doc("a")).unwrap();
        let again = NetworkModel::parse(&net.to_json()).unwrap();
        assert_eq!(net.doc, again.doc);
    }

    #[test]
    fn rejects_non_radial_topology() {
        let mut doc = NetworkModel::parse(&two_bus_doc("a")).unwrap().doc;
        let extra = doc.lines[0].clone();
        doc.lines.push(extra);
        let err = NetworkModel::from_doc(doc).unwrap_err();
        assert!(err.to_string().contains("not a tree"));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = two_bus_doc("a").replace(r#""id": "c3""#, r#""id": "c1""#);
        let err = NetworkModel::parse(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate customer id"));
    }

    #[test]
    fn synth_minimal_feeder() {
        let net = synth_feeder(2, 2, 0).unwrap();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.active_customers().len(), 2);
    }

    #[test]
    fn synth_field_scale_feeder() {
        let net = synth_feeder(33, 30, 7).unwrap();
        assert_eq!(net.n_buses(), 33);
        assert_eq!(net.active_customers().len(), 30);
        // output always passes parse-level validation (round-trip)
        let again = NetworkModel::parse(&net.to_json()).unwrap();
        assert_eq!(net.doc, again.doc);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_feeder(33, 30, 7).unwrap();
        let b = synth_feeder(33, 30, 7).unwrap();
        assert_eq!(a.doc, b.doc);
        let c = synth_feeder(33, 30, 8).unwrap();
        assert_ne!(a.doc, c.doc);
    }

    #[test]
    fn synth_rejects_overfull() {
        assert!(synth_feeder(2, 200, 0).is_err());
    }
}
