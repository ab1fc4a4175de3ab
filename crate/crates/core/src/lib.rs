//! Field boundary and field semantic inference from byte-level taint traces.
//!
//! The crate is organised as a pipeline:
//!
//! * [`trace`] holds the message / execution-trace data model shared by all stages.
//! * [`vm`] is a small deterministic interpreter for parser scripts. It stands in
//!   for a binary instrumentation tool: running a script over a message yields an
//!   [`trace::ExecutionTrace`] with byte-level taint.
//! * [`format`] segments a message into fields by merging adjacent candidates whose
//!   operator sequences align well (Needleman-Wunsch), plus the classic
//!   one-instruction-one-field baseline.
//! * [`semantics`] is the library of atomic detectors assigning a type and
//!   functions to every field.
//! * [`refine`] clusters messages on the best command-field position, refines
//!   types with per-cluster Shannon entropy and prunes functions with the
//!   function/type constraint table.
//! * [`eval`] scores formats and semantics against ground truth.
//! * [`pipeline`] wires the stages together; [`template`] turns final
//!   annotations into a generation-fuzzer template model.
//!
//! Everything here is `no_std` + `alloc`. File formats, IO and the command-line
//! driver live in the `fieldscope` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

pub mod align;
pub mod eval;
pub mod format;
pub mod pipeline;
pub mod refine;
pub mod semantics;
pub mod template;
pub mod trace;
pub mod vm;

pub use align::AlignmentParams;
pub use eval::{GroundTruth, MetricsReport, TrueField};
pub use format::{extract_format, extract_format_baseline, OperatorSequence};
pub use refine::{Clustering, ConstraintTable};
pub use semantics::{FieldAnnotation, SemanticFunction, SemanticType};
pub use trace::{ExecutionTrace, Field, FormatResult, InstructionRecord, Message, OffsetSet};
