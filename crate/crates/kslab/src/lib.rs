//! Numerical laboratory for stochastic null control of a coupled
//! fourth-order / second-order parabolic system on (0, 1).

pub mod basis;
pub mod control;
pub mod error;
pub mod experiment;
pub mod nonlinear;
pub mod obsprobe;
pub mod report;
pub mod sde;
pub mod sourceterm;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/sourceterm.md")]
    mod sourceterm {}
    #[doc = include_str!("../../../book/src/nonlinear.md")]
    mod nonlinear {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
