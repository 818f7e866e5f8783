//! One runner per subcommand: each resolves its settings, logs them to the
//! output directory, runs the corresponding library pipeline, and writes CSV
//! artifacts that are byte-identical across reruns with the same config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use ssplab_core::attacks::{self, AttackConfig};
use ssplab_core::blocks::BlockKind;
use ssplab_core::checkpoint::{self, Checkpoint};
use ssplab_core::data::{self, Dataset};
use ssplab_core::metrics;
use ssplab_core::network::{network_forward, Network};
use ssplab_core::pde::{self, Grid, Scheme, SchemeSpec};
use ssplab_core::rng::SeededRng;
use ssplab_core::tape::{finite_difference_gradient, max_relative_error, Reduction, Tape};
use ssplab_core::train::{
    self, argmax_row, forward_logits, OptimizerKind, TrainConfig, TrainMode,
};

use crate::config::{
    default_out_dir, fnv1a64, parse_kv, write_resolved, Settings,
};

fn out_dir_or_default(flag: &Option<PathBuf>, subcommand: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| default_out_dir(subcommand))
}

fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(data_dir: &Path, split: &str) -> Result<Dataset> {
    let (images, labels) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        _ => ("test-images-idx3-ubyte", "test-labels-idx1-ubyte"),
    };
    data::load_idx(&data_dir.join(images), &data_dir.join(labels))
        .map_err(|e| anyhow!("loading {split} split from {}: {e}", data_dir.display()))
}

fn maybe_subset(set: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Ok(set.clone());
    }
    data::subset(set, per_class, seed).map_err(|e| anyhow!("drawing subset: {e}"))
}

const DEFAULT_DATA_DIR: &str = "data/mnist";

// ---------------------------------------------------------------- train ----

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config file's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding the IDX image/label files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad list entry {p:?}: {e}"))
        })
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

/// Column-safe version of a parameter name: `g1.b0.beta10` -> `g1_b0`.
fn coeff_column_base(name: &str) -> String {
    name.trim_end_matches(".beta10").replace('.', "_")
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut map = parse_kv(&text)?;
    if let Some(seed) = args.seed {
        map.insert("seed".to_string(), seed.to_string());
    }
    if let Some(dir) = &args.data_dir {
        map.insert("data_dir".to_string(), dir.display().to_string());
    }

    let spec = checkpoint::decode_spec_map(&mut map).map_err(|e| anyhow!("config: {e}"))?;
    let mut s = Settings(map);
    let seed: u64 = s.take_parse("seed")?.unwrap_or(0);
    let data_dir: PathBuf =
        s.take("data_dir").unwrap_or_else(|| DEFAULT_DATA_DIR.to_string()).into();
    let mode = match s.take("mode").as_deref() {
        None | Some("standard") => TrainMode::Standard,
        Some("adversarial") => TrainMode::Adversarial,
        Some(m) => bail!("config key \"mode\": expected standard|adversarial, got {m:?}"),
    };
    let optimizer = match s.take("optimizer").as_deref() {
        None | Some("adam") => OptimizerKind::Adam {
            beta1: s.take_parse("beta1")?.unwrap_or(0.9),
            beta2: s.take_parse("beta2")?.unwrap_or(0.999),
        },
        Some("sgd-nesterov") => OptimizerKind::SgdNesterov {
            momentum: s.take_parse("momentum")?.unwrap_or(0.9),
        },
        Some(m) => bail!("config key \"optimizer\": expected adam|sgd-nesterov, got {m:?}"),
    };
    let learning_rate: f64 = s.require("learning_rate")?;
    let weight_decay: f64 = s.take_parse("weight_decay")?.unwrap_or(0.0);
    let batch_size: usize = s.require("batch_size")?;
    let epochs: usize = s.require("epochs")?;
    let lr_decay_epochs =
        parse_usize_list(&s.take("lr_decay_epochs").unwrap_or_default())?;
    let lr_decay_factor: f64 = s.take_parse("lr_decay_factor")?.unwrap_or(0.1);
    let noise_epsilon: f64 = s.take_parse("noise_epsilon")?.unwrap_or(0.0);
    let attack = match mode {
        TrainMode::Standard => None,
        TrainMode::Adversarial => Some(AttackConfig {
            epsilon: s.require("attack_epsilon")?,
            alpha: s.require("attack_alpha")?,
            iterations: s.require("attack_iterations")?,
            // the training loop always restarts from a noisy point
            random_start: true,
        }),
    };
    let train_per_class: usize = s.take_parse("train_per_class")?.unwrap_or(0);
    s.finish()?;

    let mut resolved = parse_kv(&checkpoint::encode_spec(&spec))?;
    resolved.insert("subcommand".into(), "train".into());
    resolved.insert("seed".into(), seed.to_string());
    resolved.insert("data_dir".into(), data_dir.display().to_string());
    resolved.insert(
        "mode".into(),
        match mode {
            TrainMode::Standard => "standard".into(),
            TrainMode::Adversarial => "adversarial".into(),
        },
    );
    match optimizer {
        OptimizerKind::Adam { beta1, beta2 } => {
            resolved.insert("optimizer".into(), "adam".into());
            resolved.insert("beta1".into(), beta1.to_string());
            resolved.insert("beta2".into(), beta2.to_string());
        }
        OptimizerKind::SgdNesterov { momentum } => {
            resolved.insert("optimizer".into(), "sgd-nesterov".into());
            resolved.insert("momentum".into(), momentum.to_string());
        }
    }
    resolved.insert("learning_rate".into(), learning_rate.to_string());
    resolved.insert("weight_decay".into(), weight_decay.to_string());
    resolved.insert("batch_size".into(), batch_size.to_string());
    resolved.insert("epochs".into(), epochs.to_string());
    resolved.insert("lr_decay_epochs".into(), join_list(&lr_decay_epochs));
    resolved.insert("lr_decay_factor".into(), lr_decay_factor.to_string());
    resolved.insert("noise_epsilon".into(), noise_epsilon.to_string());
    if let Some(atk) = &attack {
        resolved.insert("attack_epsilon".into(), atk.epsilon.to_string());
        resolved.insert("attack_alpha".into(), atk.alpha.to_string());
        resolved.insert("attack_iterations".into(), atk.iterations.to_string());
    }
    resolved.insert("train_per_class".into(), train_per_class.to_string());

    let out_dir = out_dir_or_default(&args.out_dir, "train");
    let resolved_text = write_resolved(&out_dir, &resolved)?;
    let config_hash = fnv1a64(&resolved_text);

    let full_train = load_split(&data_dir, "train")?;
    let train_set = maybe_subset(&full_train, train_per_class, seed)?;

    let cfg = TrainConfig {
        mode,
        optimizer,
        learning_rate,
        weight_decay,
        batch_size,
        epochs,
        lr_decay_epochs,
        lr_decay_factor,
        noise_epsilon,
        attack,
        seed,
    };
    let mut net = Network::init(spec, &mut SeededRng::new(seed));
    let records = match mode {
        TrainMode::Standard => train::standard_train(&mut net, &train_set, &cfg),
        TrainMode::Adversarial => train::adversarial_train(&mut net, &train_set, &cfg),
    }
    .map_err(|e| anyhow!("training failed: {e}"))?;

    let coeff_bases: Vec<String> = records
        .first()
        .map(|r| r.stage_coefficients.iter().map(|(n, _, _)| coeff_column_base(n)).collect())
        .unwrap_or_default();
    let mut csv = String::from("epoch,lr,loss,clean_acc,adv_acc");
    for base in &coeff_bases {
        csv.push_str(&format!(",beta10_{base},ssp_ok_{base}"));
    }
    csv.push('\n');
    for r in &records {
        let adv = r.adv_acc.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{adv}", r.epoch, r.lr, r.loss, r.clean_acc));
        for (_, b10, ok) in &r.stage_coefficients {
            csv.push_str(&format!(",{b10},{ok}"));
        }
        csv.push('\n');
    }
    write_artifact(&out_dir, "metrics.csv", &csv)?;

    let ckpt = Checkpoint {
        network: net,
        epoch: epochs,
        rng: SeededRng::new(seed).state(),
        config_hash,
    };
    checkpoint::save(&out_dir.join("model.ckpt"), &ckpt)
        .map_err(|e| anyhow!("saving checkpoint: {e}"))?;

    if let Some(last) = records.last() {
        println!(
            "trained {} for {} epochs on {} samples: loss {:.4}, batch accuracy {:.4}",
            ckpt.network.spec.kind.name(),
            epochs,
            train_set.len(),
            last.loss,
            last.clean_acc,
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

// --------------------------------------------------------------- attack ----

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Trained model to attack.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Perturbation budget in data units.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Per-iteration step size.
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    /// Iteration count; 1 with `--alpha` = `--eps` and no random start is the
    /// one-shot sign attack.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Start from a uniform point inside the budget ball.
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_DATA_DIR)]
    pub data_dir: PathBuf,
    /// Test samples per class (0 = the whole split).
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run_attack(args: &AttackArgs) -> Result<()> {
    if args.eps <= 0.0 || args.alpha <= 0.0 || args.iters == 0 {
        bail!("attack needs eps > 0, alpha > 0 and iters >= 1");
    }
    if args.batch == 0 {
        bail!("batch must be positive");
    }
    let ckpt = checkpoint::load(&args.checkpoint)
        .map_err(|e| anyhow!("loading {}: {e}", args.checkpoint.display()))?;
    let net = ckpt.network;

    let mut resolved = BTreeMap::new();
    resolved.insert("subcommand".to_string(), "attack".to_string());
    resolved.insert("checkpoint".into(), args.checkpoint.display().to_string());
    resolved.insert("eps".into(), args.eps.to_string());
    resolved.insert("alpha".into(), args.alpha.to_string());
    resolved.insert("iters".into(), args.iters.to_string());
    resolved.insert("random_start".into(), args.random_start.to_string());
    resolved.insert("seed".into(), args.seed.to_string());
    resolved.insert("data_dir".into(), args.data_dir.display().to_string());
    resolved.insert("per_class".into(), args.per_class.to_string());
    resolved.insert("batch".into(), args.batch.to_string());
    let out_dir = out_dir_or_default(&args.out_dir, "attack");
    write_resolved(&out_dir, &resolved)?;

    let test = load_split(&args.data_dir, "test")?;
    let set = maybe_subset(&test, args.per_class, args.seed)?;
    let cfg = AttackConfig {
        epsilon: args.eps,
        alpha: args.alpha,
        iterations: args.iters,
        random_start: args.random_start,
    };

    let classes = net.spec.classes;
    let mut csv = String::from("sample,label,clean_correct,adv_correct\n");
    let (mut clean_total, mut adv_total) = (0usize, 0usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for (b, chunk) in idx.chunks(args.batch).enumerate() {
        let (x, labels) = set.batch(chunk);
        let mut rng = SeededRng::substream(args.seed, "attack", b as u64);
        let x_adv = attacks::pgd(&net, &x, &labels, &cfg, &mut rng)
            .map_err(|e| anyhow!("attack failed: {e}"))?;
        let logits = forward_logits(&net, &x);
        let logits_adv = forward_logits(&net, &x_adv);
        for (i, (&sample, &label)) in chunk.iter().zip(&labels).enumerate() {
            let clean = argmax_row(&logits.data[i * classes..(i + 1) * classes]) == label;
            let adv = argmax_row(&logits_adv.data[i * classes..(i + 1) * classes]) == label;
            clean_total += clean as usize;
            adv_total += adv as usize;
            csv.push_str(&format!("{sample},{label},{},{}\n", clean as u8, adv as u8));
        }
    }
    write_artifact(&out_dir, "attack.csv", &csv)?;

    let n = set.len();
    println!(
        "clean {}/{} ({:.4}), attacked {}/{} ({:.4})",
        clean_total,
        n,
        clean_total as f64 / n as f64,
        adv_total,
        n,
        adv_total as f64 / n as f64,
    );
    println!("wrote {}", out_dir.display());
    Ok(())
}

// ------------------------------------------------------------------ pgr ----

#[derive(Args, Debug)]
pub struct PgrArgs {
    /// Trained model to measure.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Start the adversary from a uniform point inside the budget ball.
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_DATA_DIR)]
    pub data_dir: PathBuf,
    /// Test samples per class (0 = the whole split).
    #[arg(long, default_value_t = 25)]
    pub per_class: usize,
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run_pgr(args: &PgrArgs) -> Result<()> {
    if args.eps <= 0.0 || args.alpha <= 0.0 || args.iters == 0 {
        bail!("attack needs eps > 0, alpha > 0 and iters >= 1");
    }
    if args.batch == 0 {
        bail!("batch must be positive");
    }
    let ckpt = checkpoint::load(&args.checkpoint)
        .map_err(|e| anyhow!("loading {}: {e}", args.checkpoint.display()))?;
    let net = ckpt.network;

    let mut resolved = BTreeMap::new();
    resolved.insert("subcommand".to_string(), "pgr".to_string());
    resolved.insert("checkpoint".into(), args.checkpoint.display().to_string());
    resolved.insert("eps".into(), args.eps.to_string());
    resolved.insert("alpha".into(), args.alpha.to_string());
    resolved.insert("iters".into(), args.iters.to_string());
    resolved.insert("random_start".into(), args.random_start.to_string());
    resolved.insert("seed".into(), args.seed.to_string());
    resolved.insert("data_dir".into(), args.data_dir.display().to_string());
    resolved.insert("per_class".into(), args.per_class.to_string());
    resolved.insert("batch".into(), args.batch.to_string());
    resolved.insert("norms".into(), "1,2".to_string());
    let out_dir = out_dir_or_default(&args.out_dir, "pgr");
    write_resolved(&out_dir, &resolved)?;

    let test = load_split(&args.data_dir, "test")?;
    let set = maybe_subset(&test, args.per_class, args.seed)?;
    let cfg = AttackConfig {
        epsilon: args.eps,
        alpha: args.alpha,
        iterations: args.iters,
        random_start: args.random_start,
    };

    // per norm order, per group: sample-count-weighted mean ratio
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for (b, chunk) in idx.chunks(args.batch).enumerate() {
        let (x, labels) = set.batch(chunk);
        let mut rng = SeededRng::substream(args.seed, "attack", b as u64);
        let x_adv = attacks::pgd(&net, &x, &labels, &cfg, &mut rng)
            .map_err(|e| anyhow!("attack failed: {e}"))?;
        for p in [1u32, 2] {
            let ratios = metrics::group_perturbation_ratios(&net, &x, &x_adv, p)
                .map_err(|e| anyhow!("growth ratio failed: {e}"))?;
            let entry = sums.entry(p).or_insert_with(|| vec![0.0; ratios.len()]);
            for (acc, r) in entry.iter_mut().zip(&ratios) {
                *acc += r * chunk.len() as f64;
            }
        }
    }

    let kind = net.spec.kind.name();
    let n = set.len() as f64;
    let mut csv = String::from("model,group,p,ratio\n");
    for (&p, groups) in &sums {
        for (g, sum) in groups.iter().enumerate() {
            csv.push_str(&format!("{kind},{},{p},{}\n", g + 1, sum / n));
        }
    }
    write_artifact(&out_dir, "pgr.csv", &csv)?;

    for (&p, groups) in &sums {
        let rendered: Vec<String> =
            groups.iter().enumerate().map(|(g, s)| format!("g{}={:.4}", g + 1, s / n)).collect();
        println!("p={p}: {}", rendered.join(" "));
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

// ------------------------------------------------------------- variance ----

#[derive(Args, Debug)]
pub struct VarianceArgs {
    /// Block kind to measure, or `all`.
    #[arg(long, default_value = "all")]
    pub block: String,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Width of the white-noise input.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run_variance(args: &VarianceArgs) -> Result<()> {
    let kinds: Vec<BlockKind> = if args.block == "all" {
        BlockKind::ALL.to_vec()
    } else {
        vec![BlockKind::parse(&args.block)
            .ok_or_else(|| anyhow!("unknown block kind {:?}", args.block))?]
    };

    let mut resolved = BTreeMap::new();
    resolved.insert("subcommand".to_string(), "variance".to_string());
    resolved.insert("block".into(), args.block.clone());
    resolved.insert("samples".into(), args.samples.to_string());
    resolved.insert("dim".into(), args.dim.to_string());
    resolved.insert("seed".into(), args.seed.to_string());
    let out_dir = out_dir_or_default(&args.out_dir, "variance");
    write_resolved(&out_dir, &resolved)?;

    let mut csv = String::from("block,dim,samples,ratio,stderr\n");
    for kind in kinds {
        // substream index = position in the full kind list, so a single-kind
        // run reproduces exactly its row from an `all` run
        let stream = BlockKind::ALL.iter().position(|&k| k == kind).unwrap() as u64;
        let mut rng = SeededRng::substream(args.seed, "variance", stream);
        let est = metrics::variance_harness(kind, args.dim, args.samples, &mut rng);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            kind.name(),
            args.dim,
            args.samples,
            est.ratio,
            est.stderr
        ));
        println!("{}: ratio {:.4} ± {:.4}", kind.name(), est.ratio, est.stderr);
    }
    write_artifact(&out_dir, "variance.csv", &csv)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

// -------------------------------------------------------------- burgers ----

#[derive(Args, Debug)]
pub struct BurgersArgs {
    /// Time integration scheme (euler|ssp2|ssp3|midrk2|nontvd2).
    #[arg(long)]
    pub scheme: String,
    /// Number of grid cells.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Step size; default 0.8/n.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub t_final: f64,
    /// Also emit the squashed view of the final state.
    #[arg(long)]
    pub sigmoid: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run_burgers(args: &BurgersArgs) -> Result<()> {
    let scheme = Scheme::parse(&args.scheme)
        .ok_or_else(|| anyhow!("unknown scheme {:?}", args.scheme))?;
    if args.n < 8 {
        bail!("need at least 8 grid cells");
    }
    let grid = Grid::new(args.n);
    let mut spec = SchemeSpec::with_defaults(scheme, grid);
    if let Some(dt) = args.dt {
        if dt <= 0.0 {
            bail!("dt must be positive");
        }
        spec.dt = dt;
    }
    if args.t_final <= 0.0 {
        bail!("t-final must be positive");
    }
    spec.t_final = args.t_final;

    let mut resolved = BTreeMap::new();
    resolved.insert("subcommand".to_string(), "burgers".to_string());
    resolved.insert("scheme".into(), scheme.name().to_string());
    resolved.insert("n".into(), args.n.to_string());
    resolved.insert("dt".into(), spec.dt.to_string());
    resolved.insert("t_final".into(), spec.t_final.to_string());
    resolved.insert("sigmoid".into(), args.sigmoid.to_string());
    let out_dir = out_dir_or_default(&args.out_dir, "burgers");
    write_resolved(&out_dir, &resolved)?;

    let run = pde::run_burgers(spec, grid, args.sigmoid);

    let mut tv_csv = String::from("step,t,tv\n");
    for (step, (&t, &tv)) in run.times.iter().zip(&run.tv).enumerate() {
        tv_csv.push_str(&format!("{step},{t},{tv}\n"));
    }
    write_artifact(&out_dir, "tv.csv", &tv_csv)?;

    let mut sol_csv = String::from(if args.sigmoid { "x,u,u_squashed\n" } else { "x,u\n" });
    let u = run.final_state();
    for (j, x) in grid.centers().iter().enumerate() {
        if let Some(sig) = &run.sigmoid_final {
            sol_csv.push_str(&format!("{x},{},{}\n", u[j], sig[j]));
        } else {
            sol_csv.push_str(&format!("{x},{}\n", u[j]));
        }
    }
    write_artifact(&out_dir, "solution.csv", &sol_csv)?;

    let last_tv = run.tv.last().copied().unwrap_or(f64::NAN);
    if run.blew_up {
        println!(
            "{} blew up after {} steps (last finite TV {:.4})",
            scheme.name(),
            run.times.len() - 1,
            last_tv
        );
    } else {
        println!(
            "{}: {} steps to t={}, final TV {:.6}",
            scheme.name(),
            run.times.len() - 1,
            spec.t_final,
            last_tv
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

// ------------------------------------------------------------ gradcheck ----

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Number of random small networks to audit.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn mean_loss(net: &Network, x: &ssplab_core::tensor::Tensor, labels: &[usize]) -> f64 {
    let mut t = Tape::new();
    let staged = net.stage(&mut t, false);
    let xv = t.leaf(x.clone(), false);
    let logits = network_forward(&mut t, net, &staged, xv);
    let loss = t.softmax_cross_entropy(logits, labels, Reduction::Mean);
    t.value(loss).data[0]
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.cases == 0 {
        bail!("need at least one case");
    }
    let mut resolved = BTreeMap::new();
    resolved.insert("subcommand".to_string(), "gradcheck".to_string());
    resolved.insert("cases".into(), args.cases.to_string());
    resolved.insert("seed".into(), args.seed.to_string());
    let out_dir = out_dir_or_default(&args.out_dir, "gradcheck");
    write_resolved(&out_dir, &resolved)?;

    let mut csv = String::from("case,block,params,max_rel_err\n");
    let mut worst = 0.0f64;
    for case in 0..args.cases {
        let mut rng = SeededRng::substream(args.seed, "gradcheck", case as u64);
        let kind = BlockKind::ALL[case % BlockKind::ALL.len()];
        let input_dim = 3 + case % 3;
        let spec = ssplab_core::network::NetworkSpec {
            kind,
            topology: ssplab_core::network::Topology::Vector {
                input_dim,
                width: input_dim + (case % 2) * 2,
                blocks: 1 + case % 2,
            },
            classes: 2 + case % 3,
            alpha21: 0.5,
        };
        let net = Network::init(spec, &mut rng);
        let batch = 2;
        let x = ssplab_core::tensor::Tensor::gaussian(vec![batch, input_dim], 1.0, &mut rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(net.spec.classes)).collect();

        let mut t = Tape::new();
        let staged = net.stage(&mut t, true);
        let xv = t.leaf(x.clone(), false);
        let logits = network_forward(&mut t, &net, &staged, xv);
        let loss = t.softmax_cross_entropy(logits, &labels, Reduction::Mean);
        t.backward(loss);

        let mut case_err = 0.0f64;
        let mut coords = 0usize;
        for (j, &pv) in staged.vars.iter().enumerate() {
            let ad = t.grad(pv).expect("all parameters are trainable here");
            let fd = finite_difference_gradient(
                |probe| {
                    let mut probed = net.clone();
                    probed.params[j].value = probe.clone();
                    mean_loss(&probed, &x, &labels)
                },
                &net.params[j].value,
                1e-5,
            );
            case_err = case_err.max(max_relative_error(ad, &fd.data));
            coords += fd.data.len();
        }
        worst = worst.max(case_err);
        csv.push_str(&format!("{case},{},{coords},{case_err}\n", kind.name()));
    }
    write_artifact(&out_dir, "gradcheck.csv", &csv)?;
    println!("max relative error over {} cases: {:.3e}", args.cases, worst);
    println!("wrote {}", out_dir.display());
    Ok(())
}
