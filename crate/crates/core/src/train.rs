//! Minibatch training: SGD with Nesterov momentum and Adam, a piecewise
//! learning-rate schedule, plain training with uniform noise augmentation,
//! and robust training whose optimizer steps see only attacked inputs.
//! Every run is a pure function of (config, seed).

use crate::attacks::{self, AttackConfig, AttackError};
use crate::data::Dataset;
use crate::network::{network_forward, Network, Topology};
use crate::rng::SeededRng;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;
use thiserror::Error;

pub const ADAM_EPS: f64 = 1e-8;

/// Independent random substreams, one per consumer, so adding a consumer
/// never shifts another's draws.
const TAG_SHUFFLE: &str = "shuffle";
const TAG_NOISE: &str = "noise";
const TAG_ATTACK: &str = "attack";
const TAG_EVAL: &str = "eval";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("dataset does not fit the network: {0}")]
    Mismatch(String),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("attack failed: {0}")]
    Attack(#[from] AttackError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    Adversarial,
}

#[derive(Clone, Copy, Debug)]
pub enum OptimizerKind {
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Half-width of the uniform noise augmentation in standard mode.
    pub noise_epsilon: f64,
    /// Attack used to build training inputs in adversarial mode.
    pub attack: Option<AttackConfig>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("decay factor must lie in (0,1)");
        }
        if self.weight_decay < 0.0 || self.noise_epsilon < 0.0 {
            return bad("weight decay and noise width must be nonnegative");
        }
        match (self.mode, &self.attack) {
            (TrainMode::Adversarial, None) => bad("adversarial mode needs an attack config"),
            (TrainMode::Adversarial, Some(a)) => {
                if a.epsilon < 0.0 || !(a.alpha > 0.0) || a.iterations == 0 {
                    bad("attack needs epsilon ≥ 0, alpha > 0, iterations ≥ 1")
                } else {
                    Ok(())
                }
            }
            (TrainMode::Standard, _) => Ok(()),
        }
    }
}

/// Piecewise-constant schedule: the base rate times the decay factor once
/// per milestone already reached.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.lr_decay_epochs.iter().filter(|&&m| epoch >= m).count();
    config.learning_rate * config.lr_decay_factor.powi(decays as i32)
}

/// Per-parameter moment buffers. The Nesterov update keeps one velocity
/// buffer; Adam keeps two moments plus the shared step counter.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, network: &Network) -> Self {
        let zeros: Vec<Vec<f64>> =
            network.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdNesterov { .. } => Vec::new(),
        };
        Optimizer { kind, weight_decay, steps: 0, m: zeros, v }
    }

    /// Apply one update. Decay is added to the gradient (not decoupled) and
    /// skipped for parameters flagged decay-exempt; clamped parameters are
    /// clamped after the move. No parameter changes if any gradient is bad.
    pub fn step(
        &mut self,
        network: &mut Network,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), network.params.len(), "one gradient per parameter");
        for (p, g) in network.params.iter().zip(grads) {
            assert!(p.value.same_shape(&g), "gradient shape mismatch at {}", p.name);
            if !g.data.iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { name: p.name.clone() });
            }
        }
        self.steps += 1;
        for (i, p) in network.params.iter_mut().enumerate() {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            match self.kind {
                OptimizerKind::SgdNesterov { momentum } => {
                    for (j, w) in p.value.data.iter_mut().enumerate() {
                        let g = grads[i].data[j] + wd * *w;
                        let buf = momentum * self.m[i][j] + g;
                        self.m[i][j] = buf;
                        *w -= lr * (g + momentum * buf);
                    }
                }
                OptimizerKind::Adam { beta1, beta2 } => {
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    for (j, w) in p.value.data.iter_mut().enumerate() {
                        let g = grads[i].data[j] + wd * *w;
                        self.m[i][j] = beta1 * self.m[i][j] + (1.0 - beta1) * g;
                        self.v[i][j] = beta2 * self.v[i][j] + (1.0 - beta2) * g * g;
                        *w -= lr * (self.m[i][j] / bc1) / ((self.v[i][j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            if let Some((lo, hi)) = p.clamp {
                for w in &mut p.value.data {
                    *w = w.clamp(lo, hi);
                }
            }
        }
        Ok(())
    }
}

/// One row of the per-epoch metrics stream.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss of the optimizer steps.
    pub loss: f64,
    /// Accuracy on the natural inputs of each training batch.
    pub clean_acc: f64,
    /// Accuracy on the attacked training batches (adversarial mode only).
    pub adv_acc: Option<f64>,
    /// (name, value, all-stage-coefficients-nonnegative) per adaptive block.
    pub stage_coefficients: Vec<(String, f64, bool)>,
}

/// Index of the largest entry; ties break toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(&logits.data[i * classes..(i + 1) * classes]) == l)
        .count()
}

fn check_dataset(network: &Network, data: &Dataset) -> Result<(), TrainError> {
    let want: Vec<usize> = match &network.spec.topology {
        Topology::Image { in_channels, height, width, .. } => {
            vec![*in_channels, *height, *width]
        }
        Topology::Vector { input_dim, .. } => vec![*input_dim],
    };
    if data.sample_shape() != want {
        return Err(TrainError::Mismatch(format!(
            "sample shape {:?}, network expects {:?}",
            data.sample_shape(),
            want
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= network.spec.classes) {
        return Err(TrainError::Mismatch(format!(
            "label {l} outside the network's {} classes",
            network.spec.classes
        )));
    }
    Ok(())
}

/// Add uniform noise of half-width `epsilon`, then clamp to the pixel range.
pub fn noise_augment(x: &mut Tensor, epsilon: f64, rng: &mut SeededRng) {
    for v in &mut x.data {
        *v = (*v + rng.uniform(-epsilon, epsilon)).clamp(0.0, 1.0);
    }
}

/// Forward pass without taping gradients; returns the logits tensor.
pub fn forward_logits(network: &Network, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let staged = network.stage(&mut t, false);
    let xv = t.leaf(x.clone(), false);
    let logits = network_forward(&mut t, network, &staged, xv);
    t.value(logits).clone()
}

/// Tape one forward/backward on `x` and take an optimizer step. Returns the
/// mean per-sample loss and the number of correct predictions on `x`.
fn optimize_batch(
    network: &mut Network,
    optimizer: &mut Optimizer,
    x: Tensor,
    labels: &[usize],
    lr: f64,
    at: (usize, usize),
) -> Result<(f64, usize), TrainError> {
    let mut t = Tape::new();
    let staged = network.stage(&mut t, true);
    let xv = t.leaf(x, false);
    let logits = network_forward(&mut t, network, &staged, xv);
    let correct = count_correct(t.value(logits), labels);
    let loss = t.softmax_cross_entropy(logits, labels, Reduction::Mean);
    let loss_val = t.value(loss).data[0];
    if !loss_val.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: at.0, batch: at.1 });
    }
    t.backward(loss);
    let grads: Vec<Tensor> = staged
        .vars
        .iter()
        .zip(&network.params)
        .map(|(&v, p)| {
            Tensor::new(p.value.shape.clone(), t.grad(v).expect("trainable leaf").to_vec())
        })
        .collect();
    optimizer.step(network, &grads, lr)?;
    Ok((loss_val, correct))
}

fn run_loop(
    network: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    check_dataset(network, data)?;
    assert!(!data.is_empty(), "cannot train on an empty dataset");
    let n = data.len();
    let batches = n.div_ceil(config.batch_size);
    let adversarial = config.mode == TrainMode::Adversarial;
    let mut optimizer = Optimizer::new(config.optimizer, config.weight_decay, network);
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::substream(config.seed, TAG_SHUFFLE, epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut clean_correct = 0usize;
        let mut adv_correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x_nat, labels) = data.batch(chunk);
            let step_index = (epoch * batches + b) as u64;
            let (loss_val, correct) = if adversarial {
                let atk = config.attack.as_ref().expect("validated");
                let x_adv = if atk.epsilon == 0.0 {
                    x_nat.clone()
                } else {
                    // noisy start, then the iterated attack
                    let mut rng = SeededRng::substream(config.seed, TAG_ATTACK, step_index);
                    let start = AttackConfig { random_start: true, ..*atk };
                    attacks::pgd(network, &x_nat, &labels, &start, &mut rng)?
                };
                clean_correct += count_correct(&forward_logits(network, &x_nat), &labels);
                optimize_batch(network, &mut optimizer, x_adv, &labels, lr, (epoch, b))?
            } else {
                let mut x = x_nat;
                if config.noise_epsilon > 0.0 {
                    let mut rng = SeededRng::substream(config.seed, TAG_NOISE, step_index);
                    noise_augment(&mut x, config.noise_epsilon, &mut rng);
                }
                optimize_batch(network, &mut optimizer, x, &labels, lr, (epoch, b))?
            };
            loss_sum += loss_val * chunk.len() as f64;
            if adversarial {
                adv_correct += correct;
            } else {
                clean_correct += correct;
            }
        }
        records.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            clean_acc: clean_correct as f64 / n as f64,
            adv_acc: adversarial.then(|| adv_correct as f64 / n as f64),
            stage_coefficients: network
                .beta10_values()
                .into_iter()
                .map(|(name, b10)| {
                    let c = crate::blocks::ralston_coefficients(b10, network.spec.alpha21);
                    (name, b10, c.ssp_sufficient)
                })
                .collect(),
        });
    }
    Ok(records)
}

/// Plain minibatch training; inputs get uniform noise of width
/// `noise_epsilon` (clamped to [0,1]) before every step.
pub fn standard_train(
    network: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    assert_eq!(config.mode, TrainMode::Standard);
    run_loop(network, data, config)
}

/// Robust training: every minibatch is replaced by attacked inputs built
/// from a noisy start, and the optimizer sees only those.
pub fn adversarial_train(
    network: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    assert_eq!(config.mode, TrainMode::Adversarial);
    run_loop(network, data, config)
}

/// Fraction of argmax-correct predictions, on clean inputs or under the
/// given attack. Argmax ties resolve to the lowest class index.
pub fn evaluate(
    network: &Network,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    batch_size: usize,
    seed: u64,
) -> Result<f64, AttackError> {
    assert!(batch_size > 0);
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for (b, chunk) in idx.chunks(batch_size).enumerate() {
        let (x, labels) = data.batch(chunk);
        let x = match attack {
            None => x,
            Some(cfg) => {
                let mut rng = SeededRng::substream(seed, TAG_EVAL, b as u64);
                attacks::pgd(network, &x, &labels, cfg, &mut rng)?
            }
        };
        correct += count_correct(&forward_logits(network, &x), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}
