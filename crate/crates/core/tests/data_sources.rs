use std::collections::HashMap;

use splitguard::data::*;
use splitguard::Error;

fn conditional_entropy_bits(a: &[usize], b: &[usize]) -> f64 {
    // H(b | a) from empirical counts
    let n = a.len() as f64;
    let mut ja: HashMap<usize, f64> = HashMap::new();
    let mut jab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ja.entry(x).or_default() += 1.0;
        *jab.entry((x, y)).or_default() += 1.0;
    }
    jab.iter()
        .map(|(&(x, _), &c)| -(c / n) * (c / ja[&x]).log2())
        .sum()
}

fn mi_bits(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut cb: HashMap<usize, f64> = HashMap::new();
    for &y in b {
        *cb.entry(y).or_default() += 1.0;
    }
    let hb: f64 = cb.values().map(|&c| -(c / n) * (c / n).log2()).sum();
    hb - conditional_entropy_bits(a, b)
}

#[test]
fn full_correlation_makes_attribute_a_function_of_task() {
    let cfg = SynthConfig {
        correlation: 1.0,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, 400).unwrap();
    assert_eq!(conditional_entropy_bits(ds.task_labels(), ds.sensitive_labels()), 0.0);
}

#[test]
fn zero_correlation_leaves_labels_nearly_independent() {
    let ds = generate_synthetic(&SynthConfig::default(), 4000).unwrap();
    let mi = mi_bits(ds.task_labels(), ds.sensitive_labels());
    assert!(mi < 0.01, "{mi}");
}

#[test]
fn task_labels_are_balanced_and_pixels_in_range() {
    let cfg = SynthConfig::default();
    let ds = generate_synthetic(&cfg, 400).unwrap();
    let mut counts = vec![0; cfg.task_classes];
    for &y in ds.task_labels() {
        counts[y] += 1;
    }
    assert!(counts.iter().all(|&c| c == 100), "{counts:?}");
    for i in 0..ds.len() {
        assert!(ds.pixels(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        seed: 9,
        ..Default::default()
    };
    let a = generate_synthetic(&cfg, 20).unwrap();
    let b = generate_synthetic(&cfg, 20).unwrap();
    let c = generate_synthetic(&SynthConfig { seed: 10, ..cfg }, 20).unwrap();
    assert_eq!(a.images(&[0, 5, 19]).data(), b.images(&[0, 5, 19]).data());
    assert_ne!(a.images(&[0, 5, 19]).data(), c.images(&[0, 5, 19]).data());
}

#[test]
fn invalid_synth_config_is_rejected() {
    let bad = SynthConfig {
        correlation: 1.5,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic(&bad, 10), Err(Error::Config(_))));
}

#[test]
fn cifar_records_round_trip() {
    let mut bytes = Vec::new();
    for label in [0u8, 3, 9] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| ((i * 7 + label as usize) % 256) as u8));
    }
    let ds = parse_cifar_binary(&bytes).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.task_labels(), &[0, 3, 9]);
    assert_eq!(ds.sensitive_labels(), &[0, 1, 0]);
    let px = ds.pixels(1);
    // red plane first, then green, then blue
    assert_eq!(px[0], 3.0 / 255.0);
    assert_eq!(px[1024], ((1024 * 7 + 3) % 256) as f32 / 255.0);
    let back: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
    assert_eq!(&back[..], &bytes[3074..3074 + 3072]);
}

#[test]
fn cifar_bad_length_and_label_are_format_errors() {
    assert!(matches!(parse_cifar_binary(&[0u8; 100]), Err(Error::Format { .. })));
    let mut rec = vec![12u8];
    rec.extend(std::iter::repeat_n(0, 3072));
    assert!(matches!(parse_cifar_binary(&rec), Err(Error::Format { offset: 0, .. })));
}
