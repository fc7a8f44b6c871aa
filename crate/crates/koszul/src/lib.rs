//! Exact computer algebra over ℚ for symmetric-sequence composition products,
//! properads, bar/cobar constructions of modules relative to twisting
//! morphisms, and modular operads with their edge-contraction complexes.
//!
//! Everything is computed inside finite windows (arity, weight, homological
//! degree bounds) with exact rational arithmetic; there is no floating point
//! anywhere in the crate.

pub mod bimodule;
pub mod compose;
pub mod graphs;
pub mod linalg;
pub mod modcalc;
pub mod modular;
pub mod properad;

pub use linalg::{Rat, SparseMat};

/// Errors shared across the higher-level modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    Linalg(linalg::LinalgError),
    /// A validation report failed; the strings name the violated relations.
    Invalid(Vec<String>),
    /// The requested window would require infinitely many cells.
    InfiniteClosure(String),
    /// An exact computation would exceed the configured resource budget.
    ResourceBound { what: String, size: usize, budget: usize },
    /// Malformed input (parse errors, incompatible shapes, bad presentations).
    BadInput(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Linalg(e) => write!(f, "{e}"),
            Error::Invalid(v) => write!(f, "validation failed: {}", v.join("; ")),
            Error::InfiniteClosure(s) => write!(f, "window closure is infinite: {s}"),
            Error::ResourceBound { what, size, budget } => {
                write!(f, "resource bound exceeded: {what} needs {size} > budget {budget}")
            }
            Error::BadInput(s) => write!(f, "bad input: {s}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<linalg::LinalgError> for Error {
    fn from(e: linalg::LinalgError) -> Self {
        Error::Linalg(e)
    }
}

/// Per-cell basis budget for exact materialization. Cells larger than this
/// raise [`Error::ResourceBound`] instead of attempting a computation that
/// cannot finish; callers may raise it explicitly for extended runs.
pub const DEFAULT_CELL_BUDGET: usize = 150_000;
