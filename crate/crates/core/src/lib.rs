//! Parallel-in-time integration with micro-macro Parareal.
//!
//! * [`engine`]: generic Parareal drivers over propagator and coupling traits.
//! * [`msode`]: the two-scale linear ODE, its exact propagators and the
//!   computable convergence bounds.
//! * [`mcmoments`]: Monte Carlo-moments Parareal for SDEs, with an
//!   Euler-Maruyama particle fine solver and a moment-ODE coarse solver.
//! * [`smallmat`]: dense kernels for small matrices.
//! * [`rng`]: counter-addressed random streams.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod engine;
pub mod mcmoments;
pub mod msode;
pub mod rng;
pub mod smallmat;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/ode.md")]
    mod ode {}
    #[doc = include_str!("../../../book/src/sde.md")]
    mod sde {}
    #[doc = include_str!("../../../book/src/randomness.md")]
    mod randomness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
