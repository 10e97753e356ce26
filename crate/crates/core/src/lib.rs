//! Core library for lcaforge: a versioned registry, dependency resolver,
//! integrity checker, and computation engine for composable life-cycle
//! assessment models.
//!
//! The crate is organized around the lifecycle of a model assessment:
//!
//! * [`units`] and [`expr`] provide the dimensional unit system and the
//!   checked arithmetic expression language used throughout model bodies.
//! * [`manifest`] defines the versioned model manifest schema, its canonical
//!   serialization, and content hashing.
//! * [`registry`] is the content-addressed, append-only model store with
//!   publish/yank/advisory semantics and deterministic dependency resolution.
//! * [`graph`] builds the typed dependency graph from a lockfile and answers
//!   lineage, cycle, taint, and support-level queries.
//! * [`integrity`] runs the two-pass validation pipeline and emits
//!   standardized validation records.
//! * [`compute`] evaluates a resolved graph for a demanded functional unit.
//! * [`uncertainty`] infers pedigree-based distributions and propagates
//!   parameter uncertainty with seeded Monte Carlo.

pub mod canon;
pub mod compute;
pub mod expr;
pub mod graph;
pub mod integrity;
pub mod manifest;
pub mod registry;
#[doc(hidden)]
pub mod testkit;
pub mod uncertainty;
pub mod units;
pub mod version;

pub use manifest::{ContentHash, ModelKind, ModelManifest};
pub use registry::{Lockfile, Registry};
pub use units::{Dimension, Quantity, Unit, UnitTable};
pub use version::{Version, VersionReq};
