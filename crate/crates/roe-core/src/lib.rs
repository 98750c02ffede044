//! Robust operating envelopes (ROEs) for unbalanced three-phase distribution
//! networks.
//!
//! An operating envelope is a per-customer import/export power range issued by
//! a network operator. The envelopes computed here are *robust*: the box they
//! span is certified to lie inside the polyhedral feasible region of a linear
//! unbalanced three-phase power flow model, so any combination of customer
//! behaviours within the envelopes keeps the network inside its voltage and
//! thermal limits.
//!
//! The computation runs in three stages:
//!
//! 1. inscribe the maximum-volume axis-aligned ellipsoid in the feasible
//!    region (optionally optimising customer reactive setpoints and
//!    exploiting known import/export statuses), and extract the largest box
//!    inside it ([`polytope::max_inscribed_ellipsoid`],
//!    [`polytope::ellipsoid_to_box`]);
//! 2. fix the reactive setpoints, rebuild the feasible region and strip its
//!    redundant rows ([`polytope::remove_redundant`]);
//! 3. grow the box inside the stripped region via a containment-certificate
//!    program ([`expand::expand_dfr`]).
//!
//! [`pipeline::compute_roe`] orchestrates the stages;
//! [`pipeline::monte_carlo_validate`] replays random utilisation scenarios
//! against the exact (nonlinear) power flow in [`utpf`] to audit the result.

pub mod expand;
pub mod linalg;
pub mod linfr;
pub mod netmodel;
pub mod optbackend;
pub mod pipeline;
pub mod polytope;
pub mod utpf;

pub use netmodel::{Bus, Customer, CustomerKind, Line, NetworkModel, Phase, Status};
pub use pipeline::{EnvelopeSet, RoeConfig, ValidationReport};
pub use polytope::{BoxBounds, Ellipsoid, Polyhedron, StatusConfig};
