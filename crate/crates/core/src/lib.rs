//! Desk-scale laboratory for strong-stability-preserving (SSP) residual
//! networks: a minimal f64 tensor engine with reverse-mode autodiff, the five
//! residual block combinators (ResBlock, SSP2, SSP3, mid-RK2, Ark), FGSM/PGD
//! attacks and adversarial training, a WENO3 Burgers' solver with TV
//! monitoring, and the metrics (total variation, perturbation growth ratio,
//! variance harness) used to study them.

pub mod attacks;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod network;
pub mod pde;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
