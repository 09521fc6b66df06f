use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitguard::models::{PreprocessConfig, Preprocessor};
use splitguard::nn::{Forward, ParamSet};
use splitguard::pipeline::*;
use splitguard::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ratio_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Independent top-k: sort (score desc, index asc).
fn oracle_keep(row: &[f32], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; row.len()];
    for &i in &idx[..k] {
        keep[i] = true;
    }
    keep
}

#[test]
fn eight_channel_example() {
    let scores = Tensor::new(&[1, 8], vec![8., 7., 6., 5., 4., 3., 2., 1.]).unwrap();
    let m = hard_mask(&scores, 0.6).unwrap();
    assert_eq!(m.data(), &[1., 1., 1., 0., 0., 0., 0., 0.]);
}

#[test]
fn hard_masks_have_exact_cardinality_and_zero_pruned_channels() {
    let mut r = rng(3);
    let (n, c, h, w) = (5, 16, 3, 3);
    let scores = Tensor::uniform(&[n, c], 1.0, &mut r);
    let z = Tensor::uniform(&[n, c, h, w], 1.0, &mut r).map(|v| v + 2.0);
    for ratio in ratio_grid() {
        let want = ((1.0 - ratio) * c as f64).round() as usize;
        let m = hard_mask(&scores, ratio).unwrap();
        let zp = mask_channels(&z, &m).unwrap();
        for i in 0..n {
            let row = &m.data()[i * c..(i + 1) * c];
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), want, "R={ratio}");
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            let oracle = oracle_keep(&scores.data()[i * c..(i + 1) * c], want);
            for ch in 0..c {
                assert_eq!(row[ch] == 1.0, oracle[ch]);
                let plane = &zp.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                if row[ch] == 0.0 {
                    assert!(plane.iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(plane, &z.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w]);
                }
            }
        }
    }
}

#[test]
fn ties_go_to_lower_index() {
    let scores = Tensor::new(&[1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    assert_eq!(hard_mask(&scores, 0.5).unwrap().data(), &[1., 1., 0., 0.]);
}

#[test]
fn soft_mask_approaches_sign_indicator() {
    let scores = Tensor::new(&[1, 6], vec![-0.3, 0.2, -0.01, 0.05, 1.0, -2.0]).unwrap();
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let m = soft_mask_var(&mut tape, s, 1e-4, None).unwrap();
    for (v, s) in tape.value(m).data().iter().zip(scores.data()) {
        let want = if *s > 0.0 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-6);
    }
}

#[test]
fn pipeline_disco_output_matches_mask_count() {
    let p = SplitPipeline::new(PipelineConfig::default()).unwrap();
    let x = Tensor::uniform(&[3, 3, 16, 16], 1.0, &mut rng(1)).map(|v| (v + 1.0) / 2.0);
    let zhat = p.client_forward(&x).unwrap();
    let [c, h, w] = p.activation_shape();
    assert_eq!(zhat.shape(), &[3, c, h, w]);
    for ratio in ratio_grid() {
        let z = p.apply_defense_as(&zhat, DefenseMode::Disco, ratio, &mut rng(0)).unwrap();
        let want = active_channels(c, ratio);
        for i in 0..3 {
            let zero_planes = (0..c)
                .filter(|&ch| z.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w].iter().all(|&v| v == 0.0))
                .count();
            // a kept channel may be all zero after ReLU, never the reverse
            assert!(zero_planes >= c - want);
        }
    }
}

fn preprocess_outputs(cfg: PreprocessConfig, x: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let mut set = ParamSet::new();
    let pre = Preprocessor::new(&mut set, cfg, 3, &mut rng(seed)).unwrap();
    let mut tape = Tape::new();
    let bound = set.bind(&mut tape, false);
    let mut f = Forward::new(&mut tape, &set, &bound, false);
    let xv = f.tape.constant(x.clone());
    let a = pre.forward(&mut f, xv).unwrap();
    let b = pre.forward_unfused(&mut f, xv).unwrap();
    (tape.value(a).clone(), tape.value(b).clone())
}

#[test]
fn fused_preprocess_equals_literal_pipeline() {
    for seed in 0..3 {
        let x = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut rng(seed + 10));
        let (a, b) = preprocess_outputs(PreprocessConfig::default(), &x, seed);
        assert_eq!(a.shape(), &[2, 16, 16, 16]);
        let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn toggle_preserves_output_shape() {
    let x = Tensor::uniform(&[1, 3, 16, 16], 1.0, &mut rng(4));
    let on = preprocess_outputs(PreprocessConfig::default(), &x, 0).0;
    let off = preprocess_outputs(
        PreprocessConfig {
            enabled: false,
            ..Default::default()
        },
        &x,
        0,
    )
    .0;
    assert_eq!(on.shape(), off.shape());
}

#[test]
fn unit_filters_give_quadrant_channel_means() {
    // constant quadrants, so resizing leaves each tile constant
    let cfg = PreprocessConfig {
        d: 2,
        filters: 4,
        enabled: true,
        input_size: 4,
        kernel: 1,
    };
    let vals = [[0.1f32, 0.4, 0.7], [0.2, 0.2, 0.2], [0.9, 0.0, 0.3], [0.5, 0.6, 1.0]];
    let mut data = vec![0.0f32; 3 * 16];
    for ch in 0..3 {
        for y in 0..4 {
            for xx in 0..4 {
                let q = (y / 2) * 2 + xx / 2;
                data[ch * 16 + y * 4 + xx] = vals[q][ch];
            }
        }
    }
    let x = Tensor::new(&[1, 3, 4, 4], data).unwrap();
    let mut set = ParamSet::new();
    let pre = Preprocessor::new(&mut set, cfg, 3, &mut rng(0)).unwrap();
    for p in set.params_mut() {
        let v = if p.name.ends_with("weight") { 1.0 / 3.0 } else { 0.0 };
        p.value = Tensor::full(p.value.shape(), v);
    }
    let mut tape = Tape::new();
    let bound = set.bind(&mut tape, false);
    let mut f = Forward::new(&mut tape, &set, &bound, false);
    let xv = f.tape.constant(x);
    let a = pre.forward(&mut f, xv).unwrap();
    let a = tape.value(a);
    assert_eq!(a.shape(), &[1, 4, 4, 4]);
    for (q, v) in vals.iter().enumerate() {
        let mean = v.iter().sum::<f32>() / 3.0;
        for &got in &a.data()[q * 16..(q + 1) * 16] {
            assert!((got - mean).abs() < 1e-6, "quadrant {q}: {got} vs {mean}");
        }
    }
}

proptest! {
    #[test]
    fn decouple_then_recouple_is_identity(d in 1usize..5, m in 1usize..4, seed in 0u64..1000) {
        let size = d * m;
        let x = Tensor::uniform(&[3, size, size], 1.0, &mut rng(seed));
        let tiles = spatial_decouple(&x, d).unwrap();
        prop_assert_eq!(tiles.len(), d * d);
        for t in &tiles {
            prop_assert_eq!(t.shape(), &[3, m, m]);
        }
        let back = spatial_recouple(&tiles, d).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn mask_cardinality_for_any_scores(c in 1usize..24, ratio in 0.0f64..=1.0, seed in 0u64..1000) {
        let s = Tensor::uniform(&[2, c], 1.0, &mut rng(seed));
        let m = hard_mask(&s, ratio).unwrap();
        let want = active_channels(c, ratio);
        prop_assert_eq!(want as f64, ((1.0 - ratio) * c as f64).round());
        for i in 0..2 {
            let n = m.data()[i * c..(i + 1) * c].iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(n, want);
        }
    }
}
