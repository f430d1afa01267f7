//! Deterministic f64 numeric kernel: tensors, seeded RNG, named parameter
//! slots, tape-based reverse-mode autodiff, Adam, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, FD_STEP};
pub use params::{Init, ParamKind, ParamRegistry, SlotId};
pub use rng::Rng;
pub use tape::{sigmoid_scalar, BnMode, NodeId, Tape};
pub use tensor::Tensor2;
