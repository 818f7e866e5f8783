//! Sign-of-gradient attacks in the ℓ∞ ball: one-shot and iterated variants
//! with projection onto {‖x′ − x_nat‖∞ ≤ ε} ∩ [0,1] after every move.
//! Batched attacks sum the per-sample losses so each example's gradient is
//! exactly what it would be attacked alone.

use crate::network::{network_forward, Network};
use crate::rng::SeededRng;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("non-finite input gradient")]
    NonFiniteGradient,
}

/// ℓ∞ attack parameters, in normalized pixel units.
#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn validate(&self) {
        assert!(self.epsilon > 0.0, "epsilon must be positive");
        assert!(self.alpha > 0.0, "alpha must be positive");
        assert!(self.iterations >= 1, "need at least one iteration");
    }
}

/// Elementwise sign with sign(0) = 0.
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `x` into the ε-box around `x_nat`, then into the pixel range [0,1].
/// Idempotent.
pub fn project(x: &mut Tensor, x_nat: &Tensor, epsilon: f64) {
    assert!(x.same_shape(x_nat), "projection needs matching shapes");
    for (v, &nat) in x.data.iter_mut().zip(&x_nat.data) {
        *v = v.clamp(nat - epsilon, nat + epsilon).clamp(0.0, 1.0);
    }
}

/// Gradient of the summed cross-entropy loss with respect to the input batch.
pub fn input_gradient(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor, AttackError> {
    let mut t = Tape::new();
    let staged = net.stage(&mut t, false);
    let xv = t.leaf(x.clone(), true);
    let logits = network_forward(&mut t, net, &staged, xv);
    let loss = t.softmax_cross_entropy(logits, labels, Reduction::Sum);
    t.backward(loss);
    let g = t.grad(xv).expect("input requires a gradient").to_vec();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(AttackError::NonFiniteGradient);
    }
    Ok(Tensor::new(x.shape.clone(), g))
}

/// One ascent move: `x ← project(x + α·sign(∇ℒ))`.
pub fn pgd_step(
    net: &Network,
    x: &mut Tensor,
    x_nat: &Tensor,
    labels: &[usize],
    alpha: f64,
    epsilon: f64,
) -> Result<(), AttackError> {
    let g = input_gradient(net, x, labels)?;
    for (v, gv) in x.data.iter_mut().zip(&g.data) {
        *v += alpha * sign0(*gv);
    }
    project(x, x_nat, epsilon);
    Ok(())
}

/// One-shot sign attack: `project(x + ε·sign(∇ℒ))`; exactly one gradient
/// evaluation.
pub fn fgsm(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor, AttackError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut adv = x.clone();
    pgd_step(net, &mut adv, x, labels, epsilon, epsilon)?;
    Ok(adv)
}

/// Iterated sign attack from `x_nat` (optionally noise-started), projecting
/// after every step; the loss is evaluated on the current iterate each time.
pub fn pgd(
    net: &Network,
    x_nat: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Tensor, AttackError> {
    config.validate();
    let mut x = x_nat.clone();
    if config.random_start {
        for v in &mut x.data {
            *v += rng.uniform(-config.epsilon, config.epsilon);
        }
        project(&mut x, x_nat, config.epsilon);
    }
    for _ in 0..config.iterations {
        pgd_step(net, &mut x, x_nat, labels, config.alpha, config.epsilon)?;
    }
    Ok(x)
}
