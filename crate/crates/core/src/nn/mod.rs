//! Neural network primitives with hand-written forward/backward passes.
//! Everything runs in f64 on the CPU; layers accumulate gradients into
//! their [`param::Param`]s and return input gradients.

pub mod act;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod param;

pub use init::{derive, seeded, Prng};
pub use linear::Linear;
pub use param::{Param, Parameterized};
