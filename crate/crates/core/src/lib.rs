//! Compact CNN design exploration and inference for surface-defect
//! inspection.
//!
//! * [`archdsl`] parses `.tdn` architecture descriptions into shape-checked graphs.
//! * [`complexity`] counts parameters, FLOPs and activation memory.
//! * [`objective`] scores architectures and gates them on a FLOP budget.
//! * [`genesis`] runs the generator/inquisitor design loop.
//! * [`runtime`] compiles graphs into fused, arena-backed CPU execution plans.
//! * [`train`] fits models with SGD and evaluates them.
//! * [`data`] loads NEU-format defect images and renders synthetic ones.
//! * [`explain`] audits predictions with occlusion attribution.
//! * [`cli`] wires the modules into the `tdn` command.

pub mod archdsl;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod explain;
pub mod genesis;
pub mod kernels;
pub mod objective;
pub mod runtime;
pub mod train;
