use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitguard::attacks::*;
use splitguard::data::{generate_synthetic, SynthConfig};
use splitguard::metrics::{ssim, top1_accuracy};
use splitguard::pipeline::{DefenseMode, PipelineConfig, SplitPipeline};
use splitguard::training::PrivacyMode;
use splitguard::Tensor;

fn images(n: usize) -> Tensor {
    let d = generate_synthetic(&SynthConfig::default(), n).unwrap();
    d.images(&(0..n).collect::<Vec<_>>())
}

#[test]
fn decoder_learns_the_identity_map() {
    let x = images(8);
    let cfg = AttackConfig {
        kind: AttackKind::Decoder,
        epochs: 300,
        batch_size: 8,
        ..Default::default()
    };
    let (dec, hist) = train_supervised_decoder(&x, &x, &cfg).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);
    let out = predict_batched(&dec, &x).unwrap();
    for i in 0..8 {
        let s = ssim(&x.index(i).unwrap(), &out.index(i).unwrap(), 1.0).unwrap();
        assert!(s > 0.8, "sample {i}: {s}");
    }
}

#[test]
fn constant_activation_decodes_to_the_common_image() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let base = images(1).index(0).unwrap();
    let n = 16;
    let mut xs = Vec::new();
    for _ in 0..n {
        let jitter: Vec<f32> = base.data().iter().map(|&v| (v + r.gen_range(-0.02..0.02)).clamp(0.0, 1.0)).collect();
        xs.push(Tensor::new(base.shape(), jitter).unwrap());
    }
    let x = Tensor::stack(&xs).unwrap();
    let z = Tensor::ones(&[n, 2, 4, 4]);
    let cfg = AttackConfig {
        kind: AttackKind::Decoder,
        epochs: 200,
        batch_size: 16,
        ..Default::default()
    };
    let (dec, _) = train_supervised_decoder(&z, &x, &cfg).unwrap();
    let out = predict_batched(&dec, &z.select(&[0]).unwrap()).unwrap().index(0).unwrap();
    let err = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / base.len() as f64;
    assert!(err < 0.05, "{err}");
}

#[test]
fn shuffled_labels_leave_the_classifier_at_chance() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::uniform(&[800, 4, 4, 4], 1.0, &mut r);
    let labels: Vec<usize> = (0..800).map(|_| r.gen_range(0..2)).collect();
    let cfg = AttackConfig {
        mode: PrivacyMode::Sa,
        kind: AttackKind::Decoder,
        epochs: 5,
        ..Default::default()
    };
    let tr: Vec<usize> = (0..400).collect();
    let te: Vec<usize> = (400..800).collect();
    let (cls, _) = train_leakage_classifier(&z.select(&tr).unwrap(), &labels[..400], 2, &cfg).unwrap();
    let acc = top1_accuracy(&predict_batched(&cls, &z.select(&te).unwrap()).unwrap(), &labels[400..]).unwrap();
    assert!((acc - 0.5).abs() < 0.1, "{acc}");
}

#[test]
fn fully_pruned_target_has_zero_objective() {
    let p = SplitPipeline::new(PipelineConfig::default()).unwrap();
    let x = images(1);
    let zhat = p.client_forward(&x).unwrap();
    let z = p
        .apply_defense_as(&zhat, DefenseMode::Disco, 1.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let cfg = AttackConfig {
        iterations: 5,
        ..Default::default()
    };
    let res = likelihood_maximization_attack(&z, &p.client, [3, 16, 16], &cfg).unwrap();
    assert_eq!(res.best_loss.len(), 6);
    assert!(res.best_loss.iter().all(|&l| l == 0.0));
}

#[test]
fn zero_iterations_returns_the_initial_generator_output() {
    let p = SplitPipeline::new(PipelineConfig::default()).unwrap();
    let z = p.client_forward(&images(1)).unwrap();
    let cfg = AttackConfig {
        iterations: 0,
        ..Default::default()
    };
    let res = likelihood_maximization_attack(&z, &p.client, [3, 16, 16], &cfg).unwrap();
    assert_eq!(res.best_loss.len(), 1);
    assert_eq!(res.image.shape(), &[3, 16, 16]);
    assert!(res.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn best_loss_is_monotone_and_improves() {
    let p = SplitPipeline::new(PipelineConfig::default()).unwrap();
    let z = p.client_forward(&images(1)).unwrap();
    let cfg = AttackConfig {
        iterations: 60,
        ..Default::default()
    };
    let res = likelihood_maximization_attack(&z, &p.client, [3, 16, 16], &cfg).unwrap();
    assert!(res.failure.is_none());
    for w in res.best_loss.windows(2) {
        assert!(w[1] <= w[0]);
    }
    assert!(res.best_loss.last().unwrap() < &res.best_loss[0]);
}

#[test]
fn invalid_attack_configs_are_rejected() {
    let sa_lm = AttackConfig {
        mode: PrivacyMode::Sa,
        ..Default::default()
    };
    assert!(sa_lm.validate().is_err());
    let no_budget = AttackConfig {
        kind: AttackKind::Decoder,
        budget: 0,
        ..Default::default()
    };
    assert!(no_budget.validate().is_err());
}
