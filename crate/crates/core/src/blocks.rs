//! Residual block combinators.
//!
//! Every block maps `x` to `y` through one shared residual branch `F`,
//! differing only in how many times `F` is evaluated and how the stage
//! results are convexly recombined. The weights of the adaptive block are
//! derived from a learnable `beta10` on the tape itself, so its gradient
//! includes the dependence of the recombination on that parameter.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which recombination a network's residual blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// `y = x + F(x)`
    Res,
    /// Two-stage recombination with halved stage weights.
    Ssp2,
    /// Three-stage recombination.
    Ssp3,
    /// Midpoint rule: `y = x + F(x + F(x)/2)`.
    MidRk2,
    /// Two-register adaptive recombination with learnable `beta10`.
    Ark,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] =
        [BlockKind::Res, BlockKind::Ssp2, BlockKind::Ssp3, BlockKind::MidRk2, BlockKind::Ark];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Res => "res",
            BlockKind::Ssp2 => "ssp2",
            BlockKind::Ssp3 => "ssp3",
            BlockKind::MidRk2 => "midrk2",
            BlockKind::Ark => "ark",
        }
    }

    pub fn parse(name: &str) -> Option<BlockKind> {
        BlockKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// How many times one block evaluates its residual branch.
    pub fn f_evals(self) -> usize {
        match self {
            BlockKind::Res => 1,
            BlockKind::Ssp2 | BlockKind::MidRk2 | BlockKind::Ark => 2,
            BlockKind::Ssp3 => 3,
        }
    }
}

/// `y = x + F(x)`
pub fn res_block_forward<F>(t: &mut Tape, x: Var, mut f: F) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let fx = f(t, x);
    t.add(x, fx)
}

/// `x1 = x + F(x); y = x/2 + x1/2 + F(x1)/2`
pub fn ssp2_block_forward<F>(t: &mut Tape, x: Var, mut f: F) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let fx = f(t, x);
    let x1 = t.add(x, fx);
    let fx1 = f(t, x1);
    let a = t.scale(x, 0.5);
    let b = t.scale(x1, 0.5);
    let c = t.scale(fx1, 0.5);
    let ab = t.add(a, b);
    t.add(ab, c)
}

/// `x1 = x + F(x); x2 = 3x/4 + x1/4 + F(x1)/4; y = x/3 + 2·x2/3 + 2·F(x2)/3`
pub fn ssp3_block_forward<F>(t: &mut Tape, x: Var, mut f: F) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let fx = f(t, x);
    let x1 = t.add(x, fx);
    let fx1 = f(t, x1);
    let sx = t.scale(x, 0.75);
    let sx1 = t.scale(x1, 0.25);
    let sfx1 = t.scale(fx1, 0.25);
    let tmp = t.add(sx, sx1);
    let x2 = t.add(tmp, sfx1);
    let fx2 = f(t, x2);
    let a = t.scale(x, 1.0 / 3.0);
    let b = t.scale(x2, 2.0 / 3.0);
    let c = t.scale(fx2, 2.0 / 3.0);
    let ab = t.add(a, b);
    t.add(ab, c)
}

/// `y = x + F(x + F(x)/2)`
pub fn midrk2_block_forward<F>(t: &mut Tape, x: Var, mut f: F) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let fx = f(t, x);
    let half = t.scale(fx, 0.5);
    let xm = t.add(x, half);
    let fxm = f(t, xm);
    t.add(x, fxm)
}

/// Recombination weights of the adaptive block for a given `beta10` and
/// `alpha21`, plus whether all four are non-negative (the easy sufficient
/// condition for the recombination to be a convex update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RalstonCoefficients {
    pub alpha20: f64,
    pub beta20: f64,
    pub beta21: f64,
    pub ssp_sufficient: bool,
}

/// Solve the second-order conditions for the two-register scheme:
/// `beta21 = 1/(2·beta10)`, `beta20 = 1 − beta21 − alpha21·beta10`,
/// `alpha20 = 1 − alpha21`.
pub fn ralston_coefficients(beta10: f64, alpha21: f64) -> RalstonCoefficients {
    assert!(beta10 != 0.0, "beta10 must be nonzero");
    let beta21 = 1.0 / (2.0 * beta10);
    // operation order matches the on-tape version bit for bit
    let beta20 = (1.0 - beta21) - alpha21 * beta10;
    let alpha20 = 1.0 - alpha21;
    let ssp_sufficient = alpha20 >= 0.0 && alpha21 >= 0.0 && beta20 >= 0.0 && beta21 >= 0.0;
    RalstonCoefficients { alpha20, beta20, beta21, ssp_sufficient }
}

/// Adaptive two-register block:
/// `x1 = x + beta10·F(x);
///  y = alpha20·x + beta20·F(x) + alpha21·x1 + beta21·F(x1)`
/// with `F(x)` evaluated once and reused, and the derived weights computed
/// on the tape so `beta10` receives their gradient contributions.
pub fn ark_block_forward<F>(t: &mut Tape, x: Var, beta10: Var, alpha21: f64, mut f: F) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    assert_eq!(t.value(beta10).numel(), 1, "beta10 must be a single-element tensor");
    let fx = f(t, x);
    let bfx = t.scale_by(fx, beta10);
    let x1 = t.add(x, bfx);
    let fx1 = f(t, x1);

    let one = t.constant(Tensor::scalar(1.0));
    let two_b = t.scale(beta10, 2.0);
    let beta21 = t.div(one, two_b);
    let tmp = t.sub(one, beta21);
    let ab = t.scale(beta10, alpha21);
    let beta20 = t.sub(tmp, ab);
    let alpha20 = 1.0 - alpha21;

    let t1 = t.scale(x, alpha20);
    let t2 = t.scale_by(fx, beta20);
    let t3 = t.scale(x1, alpha21);
    let t4 = t.scale_by(fx1, beta21);
    let s1 = t.add(t1, t2);
    let s2 = t.add(t3, t4);
    t.add(s1, s2)
}

/// Downsampling block: `y = S(x) + F(x)` where the shortcut `S` reshapes
/// `x` (1×1 strided convolution) instead of passing it through.
pub fn resblock_e_forward<S, F>(t: &mut Tape, x: Var, mut shortcut: S, mut f: F) -> Var
where
    S: FnMut(&mut Tape, Var) -> Var,
    F: FnMut(&mut Tape, Var) -> Var,
{
    let sx = shortcut(t, x);
    let fx = f(t, x);
    t.add(sx, fx)
}

/// Forward one block of `kind`. `beta10` is required for (and only for)
/// the adaptive kind.
pub fn block_forward<F>(
    t: &mut Tape,
    kind: BlockKind,
    x: Var,
    beta10: Option<Var>,
    alpha21: f64,
    f: F,
) -> Var
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    match kind {
        BlockKind::Res => res_block_forward(t, x, f),
        BlockKind::Ssp2 => ssp2_block_forward(t, x, f),
        BlockKind::Ssp3 => ssp3_block_forward(t, x, f),
        BlockKind::MidRk2 => midrk2_block_forward(t, x, f),
        BlockKind::Ark => {
            let b = beta10.expect("the adaptive block needs beta10");
            ark_block_forward(t, x, b, alpha21, f)
        }
    }
}
