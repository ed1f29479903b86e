use maseg_core::imagecore::{BinaryMask, MultiChannelImage, RngStream};
use maseg_core::metrics::dice;
use maseg_core::nnet::*;
use maseg_core::postproc::binarize;

fn random_batch(n: usize, c: usize, size: usize, seed: u64) -> (Tensor<f64>, Vec<BinaryMask>) {
    let mut rng = RngStream::new(seed, 0);
    let x: Vec<f64> = (0..n * c * size * size).map(|_| rng.uniform()).collect();
    let masks = (0..n)
        .map(|_| BinaryMask::from_fn(size, size, |_, _| rng.bernoulli(0.4)))
        .collect();
    (Tensor::new([n, c, size, size], x).unwrap(), masks)
}

/// Central differences of the probability-space loss, one coordinate at a
/// time; returns the fraction of parameters within `tol` relative error.
fn gradcheck_pass_rate(
    net: &UNet<f64>,
    x: &Tensor<f64>,
    masks: &[BinaryMask],
    alpha: f64,
    tol: f64,
) -> f64 {
    let (_, analytic) = net.loss_and_gradients(x, masks, alpha, 0.0).unwrap();
    let h = 1e-4;
    let (mut pass, mut total) = (0usize, 0usize);
    for (b, block) in net.params.iter().enumerate() {
        for j in 0..block.len() {
            let eval = |d: f64| {
                let mut probe = net.clone();
                probe.params[b].data_mut()[j] += d;
                let p = probe.forward(x).unwrap();
                bce_dice(&p, masks, alpha).unwrap().0.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[b].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            if rel < tol {
                pass += 1;
            }
        }
    }
    pass as f64 / total as f64
}

#[test]
fn unet_gradients_match_finite_differences() {
    let cfg = UNetConfig {
        in_channels: 2,
        depth: 2,
        base_channels: 4,
        ..UNetConfig::default()
    };
    let mut net: UNet<f64> = UNet::init(&cfg, &mut RngStream::new(5, 1)).unwrap();
    // Nonzero biases so no ReLU sits exactly at its kink.
    let mut rng = RngStream::new(5, 2);
    for (i, p) in net.params.iter_mut().enumerate() {
        if i % 2 == 1 {
            for v in p.data_mut() {
                *v = rng.uniform_range(-0.1, 0.1);
            }
        }
    }
    let (x, masks) = random_batch(2, 2, 8, 11);
    let rate = gradcheck_pass_rate(&net, &x, &masks, 0.2, 1e-4);
    assert!(rate >= 0.99, "pass rate {rate}");
}

fn disk_sample(
    size: usize,
    cx: f64,
    cy: f64,
    r: f64,
    seed: u64,
) -> (MultiChannelImage, BinaryMask) {
    let mut rng = RngStream::new(seed, 0);
    let mask = BinaryMask::from_fn(size, size, |x, y| {
        (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
    });
    let data = mask
        .data()
        .iter()
        .map(|&m| (0.3 + 0.4 * m as f64 + 0.1 * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();
    (MultiChannelImage::new(size, size, 1, data).unwrap(), mask)
}

fn disk_dataset(n: usize, size: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = RngStream::new(seed, 1);
    (0..n)
        .map(|g| {
            let r = rng.uniform_range(4.0, 8.0);
            let cx = rng.uniform_range(r + 1.0, size as f64 - r - 2.0);
            let cy = rng.uniform_range(r + 1.0, size as f64 - r - 2.0);
            let (image, mask) = disk_sample(size, cx, cy, r, seed + g as u64);
            TrainSample {
                group: g,
                augmented: false,
                image,
                mask,
            }
        })
        .collect()
}

fn small_net() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        depth: 2,
        base_channels: 8,
        ..UNetConfig::default()
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs: epochs,
        kfolds: 2,
        ensemble_top: 1,
        seed: 3,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_eight_pairs() {
    // 16 groups in 2 folds: each fold trains on 8 pairs.
    let samples = disk_dataset(16, 24, 40);
    let mut trainer = FoldTrainer::new(&samples, &small_net(), &small_train(30), 0).unwrap();
    assert_eq!(trainer.train_len(), 8);
    trainer.run().unwrap();
    let log = trainer.log();
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
    let net = trainer.model();
    let trained: Vec<usize> = (0..16)
        .filter(|i| !trainer_val_groups(&samples, 0).contains(i))
        .collect();
    let mut total = 0.0;
    for &i in &trained {
        let p = predict(net, &samples[i].image).unwrap();
        total += dice(&binarize(&p, 0.5).unwrap(), &samples[i].mask).unwrap();
    }
    let mean = total / trained.len() as f64;
    assert!(mean >= 0.95, "training Dice {mean}");
}

/// Groups held out for validation in `fold`, as the trainer splits them.
fn trainer_val_groups(samples: &[TrainSample], fold: usize) -> Vec<usize> {
    let folds = kfold_split(samples.len(), 2, 3).unwrap();
    folds[fold].clone()
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let samples = disk_dataset(6, 16, 8);
    let run = || {
        let mut t = FoldTrainer::new(&samples, &small_net(), &small_train(3), 1).unwrap();
        t.run().unwrap();
        (t.log().to_vec(), t.model().params.clone())
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let samples = disk_dataset(6, 16, 9);
    let mut t = FoldTrainer::new(&samples, &small_net(), &small_train(4), 0).unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let ckpt = t.checkpoint();
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let samples = disk_dataset(6, 16, 10);
    let mut straight = FoldTrainer::new(&samples, &small_net(), &small_train(4), 0).unwrap();
    straight.run().unwrap();

    let mut first = FoldTrainer::new(&samples, &small_net(), &small_train(4), 0).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut second = FoldTrainer::resume(&samples, &ckpt).unwrap();
    second.run().unwrap();

    assert_eq!(straight.log(), second.log());
    assert_eq!(straight.model().params, second.model().params);
}

#[test]
fn adam_runs_are_identical_from_same_state() {
    let cfg = small_net();
    let base: UNet<f32> = UNet::init(&cfg, &mut RngStream::new(1, 1)).unwrap();
    let (x, masks) = random_batch(2, 1, 8, 4);
    let x: Tensor<f32> = x.cast();
    let run = || {
        let mut net = base.clone();
        let mut st = AdamState::new(&net.params);
        let names = cfg.param_names();
        for _ in 0..10 {
            let (_, g) = net.loss_and_gradients(&x, &masks, 0.2, 0.0).unwrap();
            adam_step(&mut net.params, &g, &names, &mut st, 1e-3, 1e-8).unwrap();
        }
        net.params
    };
    assert_eq!(run(), run());
}

#[test]
fn predict_is_deterministic_and_checks_channels() {
    let net: UNet<f32> = UNet::init(&small_net(), &mut RngStream::new(2, 2)).unwrap();
    let (img, _) = disk_sample(19, 9.0, 9.0, 5.0, 1);
    let a = predict(&net, &img).unwrap();
    let b = predict(&net, &img).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.width(), a.height()), (19, 19));
    let two = MultiChannelImage::new(19, 19, 2, vec![0.5; 2 * 19 * 19]).unwrap();
    assert!(predict(&net, &two).is_err());
}

#[test]
fn hausdorff_term_changes_the_loss_log() {
    let samples = disk_dataset(6, 16, 12);
    let plain = {
        let mut t = FoldTrainer::new(&samples, &small_net(), &small_train(2), 0).unwrap();
        t.run().unwrap();
        t.log().to_vec()
    };
    let cfg = TrainConfig {
        hausdorff_weight: 0.1,
        ..small_train(2)
    };
    let mut t = FoldTrainer::new(&samples, &small_net(), &cfg, 0).unwrap();
    t.run().unwrap();
    assert_ne!(plain[0].train_loss, t.log()[0].train_loss);
}

#[test]
fn train_returns_one_result_per_fold() {
    let samples = disk_dataset(6, 16, 13);
    let cfg = TrainConfig {
        kfolds: 3,
        ..small_train(1)
    };
    let results = train(&samples, &small_net(), &cfg, None).unwrap();
    assert_eq!(results.len(), 3);
    for (k, r) in results.iter().enumerate() {
        assert_eq!(r.fold, k);
        assert_eq!(r.last.log.len(), 1);
        assert!(r.best.best.is_some());
    }
}

fn roll(samples: &[TrainSample], dx: usize, dy: usize) -> Vec<TrainSample> {
    samples
        .iter()
        .map(|s| {
            let (w, h) = (s.mask.width(), s.mask.height());
            let src = |x: usize, y: usize| ((x + w - dx) % w, (y + h - dy) % h);
            let data = (0..w * h)
                .map(|i| {
                    let (sx, sy) = src(i % w, i / w);
                    s.image.data()[sy * w + sx]
                })
                .collect();
            TrainSample {
                group: s.group,
                augmented: s.augmented,
                image: MultiChannelImage::new(w, h, 1, data).unwrap(),
                mask: BinaryMask::from_fn(w, h, |x, y| {
                    let (sx, sy) = src(x, y);
                    s.mask.get(sx, sy)
                }),
            }
        })
        .collect()
}

#[test]
fn translation_changes_converged_loss_little() {
    let samples = disk_dataset(16, 24, 41);
    let shifted = roll(&samples, 2, 2);
    let converged = |s: &[TrainSample]| {
        let mut t = FoldTrainer::new(s, &small_net(), &small_train(30), 0).unwrap();
        t.run().unwrap();
        t.log().last().unwrap().train_loss
    };
    let (a, b) = (converged(&samples), converged(&shifted));
    assert!((a - b).abs() < 0.1 * a.max(b), "{a} vs {b}");
}

#[test]
fn resume_with_restored_best_matches_uninterrupted_best() {
    let samples = disk_dataset(6, 16, 14);
    let mut straight = FoldTrainer::new(&samples, &small_net(), &small_train(5), 1).unwrap();
    straight.run().unwrap();

    let mut first = FoldTrainer::new(&samples, &small_net(), &small_train(5), 1).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let last = first.checkpoint();
    let best = first.best_checkpoint();
    let mut second = FoldTrainer::resume(&samples, &last).unwrap();
    second.restore_best(&best).unwrap();
    second.run().unwrap();
    assert_eq!(straight.best_checkpoint(), second.best_checkpoint());

    // A best checkpoint from another fold is refused.
    let other = FoldTrainer::new(&samples, &small_net(), &small_train(5), 0).unwrap();
    let mut third = FoldTrainer::resume(&samples, &last).unwrap();
    assert!(third.restore_best(&other.best_checkpoint()).is_err());
}
