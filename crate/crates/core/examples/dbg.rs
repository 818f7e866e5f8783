use ssplab_core::attacks::AttackConfig;
use ssplab_core::blocks::BlockKind;
use ssplab_core::data;
use ssplab_core::network::{GroupSpec, Network, NetworkSpec, Topology};
use ssplab_core::rng::SeededRng;
use ssplab_core::train::{self, evaluate, OptimizerKind, TrainConfig, TrainMode};
use std::time::Instant;

fn desk_spec(kind: BlockKind, stem: Vec<(usize, usize)>) -> NetworkSpec {
    NetworkSpec {
        kind,
        topology: Topology::Image {
            in_channels: 1,
            height: 28,
            width: 28,
            stem,
            groups: vec![
                GroupSpec { blocks: 3, channels: 16 },
                GroupSpec { blocks: 3, channels: 32 },
            ],
        },
        classes: 10,
        alpha21: 0.5,
    }
}

fn main() {
    // args: kind epochs seed batch wd lr stem_mode decay_mode
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(|s| s.as_str()) {
        Some("res") | None => BlockKind::Res,
        Some("ssp2") => BlockKind::Ssp2,
        Some("ssp3") => BlockKind::Ssp3,
        Some("ark") => BlockKind::Ark,
        Some(k) => panic!("unknown kind {k}"),
    };
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(27);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(11);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let wd: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let stem_mode: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0);
    let decay_mode: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0);
    let stem = match stem_mode {
        0 => vec![(16, 2)],
        1 => vec![(8, 1), (16, 2)],
        2 => vec![(16, 1), (16, 2)],
        _ => panic!("stem_mode"),
    };
    let lr_decay_epochs = match decay_mode {
        0 => vec![(epochs * 4) / 5],
        1 => vec![(epochs * 2) / 3, (epochs * 8) / 9],
        _ => panic!("decay_mode"),
    };

    let full_train = data::load_idx(
        "data/mnist/train-images-idx3-ubyte".as_ref(),
        "data/mnist/train-labels-idx1-ubyte".as_ref(),
    )
    .unwrap();
    let full_test = data::load_idx(
        "data/mnist/test-images-idx3-ubyte".as_ref(),
        "data/mnist/test-labels-idx1-ubyte".as_ref(),
    )
    .unwrap();
    let train_set = data::subset(&full_train, 200, 1000 + seed).unwrap();
    let test_set = data::subset(&full_test, 100, 2000 + seed).unwrap();

    let spec = desk_spec(kind, stem);
    let mut net = Network::init(spec, &mut SeededRng::new(seed));
    let cfg = TrainConfig {
        mode: TrainMode::Standard,
        optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
        learning_rate: lr,
        weight_decay: wd,
        batch_size: batch,
        epochs,
        lr_decay_epochs,
        lr_decay_factor: 0.1,
        noise_epsilon: 0.3,
        attack: None,
        seed,
    };
    let t0 = Instant::now();
    let recs = train::standard_train(&mut net, &train_set, &cfg).unwrap();
    let t_train = t0.elapsed().as_secs_f64();
    for r in recs.iter().rev().take(3).collect::<Vec<_>>().iter().rev() {
        println!("epoch {:2} lr {:.5} loss {:.4} acc {:.4}", r.epoch, r.lr, r.loss, r.clean_acc);
    }

    let t1 = Instant::now();
    let clean = evaluate(&mut net, &test_set, None, 100, 900).unwrap();
    let t_clean = t1.elapsed().as_secs_f64();
    let fgsm_cfg = AttackConfig { epsilon: 0.1, alpha: 0.1, iterations: 1, random_start: false };
    let t2 = Instant::now();
    let fgsm = evaluate(&mut net, &test_set, Some(&fgsm_cfg), 100, 901).unwrap();
    let t_fgsm = t2.elapsed().as_secs_f64();
    let pgd_cfg = AttackConfig { epsilon: 0.1, alpha: 0.02, iterations: 20, random_start: true };
    let t3 = Instant::now();
    let pgd = evaluate(&mut net, &test_set, Some(&pgd_cfg), 100, 902).unwrap();
    let t_pgd = t3.elapsed().as_secs_f64();

    println!(
        "{kind:?} seed {seed} b{batch} wd{wd} lr{lr} stem{stem_mode} dec{decay_mode} ep{epochs}: clean {:.4} fgsm {:.4} pgd20 {:.4}",
        clean, fgsm, pgd
    );
    println!(
        "times: train {:.1}s ({:.2}s/epoch), clean {:.1}s fgsm {:.1}s pgd {:.1}s",
        t_train,
        t_train / epochs as f64,
        t_clean,
        t_fgsm,
        t_pgd
    );
}
