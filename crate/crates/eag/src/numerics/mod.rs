//! Deterministic numeric substrate: seeded random streams, dense tensors,
//! reverse-mode differentiation, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use rng::{ln_factorial, ln_gamma, RandomStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
