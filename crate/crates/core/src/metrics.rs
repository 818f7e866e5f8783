//! Experiment metrics: total variation of grid functions, perturbation
//! growth ratios of network groups, and a Monte-Carlo harness measuring how
//! much each residual block inflates the variance of a white-noise input.

use crate::blocks::BlockKind;
use crate::network::{network_forward_features, Network};
use crate::pde::{self, Scheme};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("pair {index} has zero distance between x and x'")]
    ZeroDistancePair { index: usize },
    #[error("norm order must be 1 or 2, got {0}")]
    UnsupportedNorm(u32),
}

/// One named scalar measurement with its index keys, e.g. a TV value at a
/// step or a growth ratio at a group.
#[derive(Clone, Debug)]
pub struct MetricRecord {
    pub name: String,
    pub keys: Vec<(String, String)>,
    pub value: f64,
    pub norm_order: Option<u32>,
}

impl MetricRecord {
    pub fn new(name: &str, keys: &[(&str, String)], value: f64) -> Self {
        assert!(value.is_finite(), "metric {name} is not finite: {value}");
        MetricRecord {
            name: name.to_string(),
            keys: keys.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            value,
            norm_order: None,
        }
    }

    pub fn with_norm(mut self, p: u32) -> Self {
        self.norm_order = Some(p);
        self
    }
}

/// `Σ_j |u_{j+1} − u_j|`, plus the wraparound difference when periodic.
pub fn total_variation(u: &[f64], periodic: bool) -> f64 {
    assert!(u.len() >= 2, "total variation needs at least two samples");
    let mut tv: f64 = u.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    if periodic {
        tv += (u[0] - u[u.len() - 1]).abs();
    }
    tv
}

fn lp_distance(a: &[f64], b: &[f64], p: u32) -> f64 {
    match p {
        1 => a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum(),
        2 => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        _ => unreachable!("validated by caller"),
    }
}

/// Mean over pairs of `‖f(x) − f(x')‖_p / ‖x − x'‖_p`, tensors flattened.
pub fn perturbation_growth_ratio<F>(
    mut f: F,
    pairs: &[(Tensor, Tensor)],
    p: u32,
) -> Result<f64, MetricsError>
where
    F: FnMut(&Tensor) -> Tensor,
{
    if p != 1 && p != 2 {
        return Err(MetricsError::UnsupportedNorm(p));
    }
    assert!(!pairs.is_empty(), "growth ratio needs at least one pair");
    let mut total = 0.0;
    for (index, (x, x_prime)) in pairs.iter().enumerate() {
        let denom = lp_distance(&x.data, &x_prime.data, p);
        if denom == 0.0 {
            return Err(MetricsError::ZeroDistancePair { index });
        }
        let num = lp_distance(&f(x).data, &f(x_prime).data, p);
        total += num / denom;
    }
    Ok(total / pairs.len() as f64)
}

fn row_distances(a: &Tensor, b: &Tensor, batch: usize, p: u32) -> Vec<f64> {
    let stride = a.data.len() / batch;
    (0..batch)
        .map(|i| {
            lp_distance(
                &a.data[i * stride..(i + 1) * stride],
                &b.data[i * stride..(i + 1) * stride],
                p,
            )
        })
        .collect()
}

/// Stage-by-stage growth of a perturbation through a network: entry `g` is
/// the batch mean of `‖Δh_g‖_p / ‖Δh_{g-1}‖_p`, where `Δh_g` is the
/// difference between the group-`g` outputs under `x` and `x_prime` and the
/// reference for the first group is the raw network input. With a single
/// sample the entries multiply out to the end-to-end growth ratio.
pub fn group_perturbation_ratios(
    net: &Network,
    x: &Tensor,
    x_prime: &Tensor,
    p: u32,
) -> Result<Vec<f64>, MetricsError> {
    if p != 1 && p != 2 {
        return Err(MetricsError::UnsupportedNorm(p));
    }
    assert_eq!(x.shape, x_prime.shape, "inputs must share a shape");
    let batch = x.shape[0];
    assert!(batch > 0, "need at least one sample");

    let mut t = Tape::new();
    let staged = net.stage(&mut t, false);
    let xa = t.leaf(x.clone(), false);
    let xb = t.leaf(x_prime.clone(), false);
    let (_, feats_a) = network_forward_features(&mut t, net, &staged, xa);
    let (_, feats_b) = network_forward_features(&mut t, net, &staged, xb);

    let mut prev = row_distances(x, x_prime, batch, p);
    let mut ratios = Vec::with_capacity(feats_a.len());
    for (&fa, &fb) in feats_a.iter().zip(&feats_b) {
        let cur = row_distances(t.value(fa), t.value(fb), batch, p);
        let mut total = 0.0;
        for (index, (&num, &den)) in cur.iter().zip(&prev).enumerate() {
            if den == 0.0 {
                return Err(MetricsError::ZeroDistancePair { index });
            }
            total += num / den;
        }
        ratios.push(total / batch as f64);
        prev = cur;
    }
    Ok(ratios)
}

/// Monte-Carlo estimate of `Var[block(x)] / Var[x]` with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct VarianceEstimate {
    pub ratio: f64,
    pub stderr: f64,
}

fn scheme_for(kind: BlockKind) -> Scheme {
    match kind {
        BlockKind::Res => Scheme::Euler,
        BlockKind::Ssp2 => Scheme::Ssp2,
        BlockKind::Ssp3 => Scheme::Ssp3,
        BlockKind::MidRk2 => Scheme::MidRk2,
        BlockKind::Ark => Scheme::Ark { beta10: 1.0, alpha21: 0.5 },
    }
}

/// Variance inflation of `kind` with a caller-supplied branch. The branch is
/// invoked once per stage with the stage input and may draw fresh randomness
/// on every call.
pub fn variance_harness_with<B>(
    kind: BlockKind,
    d: usize,
    samples: usize,
    rng: &mut SeededRng,
    mut branch: B,
) -> VarianceEstimate
where
    B: FnMut(&mut SeededRng, &[f64]) -> Vec<f64>,
{
    assert!(d >= 2, "dimension must be at least 2");
    assert!(samples >= 100, "too few samples for a variance estimate");
    let scheme = scheme_for(kind);
    let batches = 100.min(samples);
    let per_batch = samples / batches;

    let mut batch_ratios = Vec::with_capacity(batches);
    let mut tot_in = (0.0, 0.0); // (sum, sum of squares)
    let mut tot_out = (0.0, 0.0);
    let mut n_total = 0usize;
    for _ in 0..batches {
        let mut acc_in = (0.0, 0.0);
        let mut acc_out = (0.0, 0.0);
        for _ in 0..per_batch {
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let y = pde::step(scheme, &x, 1.0, &mut |v: &[f64]| branch(rng, v));
            for &v in &x {
                acc_in.0 += v;
                acc_in.1 += v * v;
            }
            for &v in &y {
                acc_out.0 += v;
                acc_out.1 += v * v;
            }
        }
        let n = (per_batch * d) as f64;
        let var_in = (acc_in.1 - acc_in.0 * acc_in.0 / n) / (n - 1.0);
        let var_out = (acc_out.1 - acc_out.0 * acc_out.0 / n) / (n - 1.0);
        batch_ratios.push(var_out / var_in);
        tot_in.0 += acc_in.0;
        tot_in.1 += acc_in.1;
        tot_out.0 += acc_out.0;
        tot_out.1 += acc_out.1;
        n_total += per_batch * d;
    }

    let n = n_total as f64;
    let var_in = (tot_in.1 - tot_in.0 * tot_in.0 / n) / (n - 1.0);
    let var_out = (tot_out.1 - tot_out.0 * tot_out.0 / n) / (n - 1.0);
    let ratio = var_out / var_in;

    let b = batch_ratios.len() as f64;
    let mean = batch_ratios.iter().sum::<f64>() / b;
    let var_b =
        batch_ratios.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / (b - 1.0);
    VarianceEstimate { ratio, stderr: (var_b / b).sqrt() }
}

/// Variance inflation of `kind` with the reference branch: a fresh uniform
/// signed permutation per stage per sample, which preserves variance and is
/// uncorrelated with its input.
pub fn variance_harness(
    kind: BlockKind,
    d: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> VarianceEstimate {
    let mut perm: Vec<usize> = (0..d).collect();
    variance_harness_with(kind, d, samples, rng, move |rng, v| {
        rng.shuffle(&mut perm);
        perm.iter().map(|&j| rng.sign() * v[j]).collect()
    })
}
