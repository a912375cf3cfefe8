#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod expr;
pub mod grid;
pub mod harness;
pub mod potentials;
pub mod pucci;
pub mod report;
pub mod scenario;
pub mod solver;
pub mod spaces;
pub mod symmat;

pub use error::{Error, Result};
pub use expr::Expr;
pub use grid::{Ball, BoxDomain, FieldKind, Grid, GridField};
pub use pucci::{EllipticityPair, OperatorForm, OperatorSpec};
pub use report::AuditReport;
pub use symmat::{SymEigen, SymMatrix};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/spaces.md")]
    mod spaces {}
    #[doc = include_str!("../../../book/src/potentials.md")]
    mod potentials {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/audits.md")]
    mod audits {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
