//! Attacks on transmitted activations: a supervised decoder and an attribute
//! classifier trained on intercepted pairs, and white-box likelihood
//! maximisation through the client network with an image generator prior.
//!
//! Attack functions only see activations, their declared pairs and (for
//! likelihood maximisation) the client network; never the server, the
//! filter or the proxy adversary.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{l1_distance, mean_std, psnr, ssim, top1_accuracy};
use crate::models::{infer, run, ConvClassifier, Decoder, Generator, Module, GENERATOR_NOISE_CHANNELS};
use crate::nn::Optimizer;
use crate::pipeline::{DefenseMode, SplitPipeline};
use crate::tensor::Tensor;
use crate::training::{encode_dataset, PrivacyMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Decoder,
    LikelihoodMax,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Decoder => "decoder",
            AttackKind::LikelihoodMax => "likelihood_max",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(AttackKind::Decoder),
            "likelihood_max" => Ok(AttackKind::LikelihoodMax),
            _ => Err(Error::Config(format!("unknown attack kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: PrivacyMode,
    pub kind: AttackKind,
    /// Intercepted `(z, target)` pairs available to learned attacks.
    pub budget: usize,
    /// Passes over the pairs for learned attacks.
    pub epochs: usize,
    /// Optimisation steps of likelihood maximisation.
    pub iterations: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub hidden: usize,
    /// Test samples attacked (likelihood maximisation attacks one at a time).
    pub eval_samples: usize,
    /// Run the client's batch norm with its stored running statistics.
    pub bn_running_stats: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: PrivacyMode::Si,
            kind: AttackKind::LikelihoodMax,
            budget: 1000,
            epochs: 10,
            iterations: 500,
            lr: 0.01,
            batch_size: 32,
            hidden: 16,
            eval_samples: 8,
            bn_running_stats: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == AttackKind::Decoder && self.budget == 0 {
            return Err(Error::Config("decoder attacks need a budget of at least 1".into()));
        }
        if self.kind == AttackKind::LikelihoodMax && self.mode == PrivacyMode::Sa {
            return Err(Error::Config(
                "likelihood maximisation reconstructs inputs; use mode si".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch_size and hidden must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Reconstruction quality of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
}

impl SampleScore {
    pub fn between(reference: &Tensor, candidate: &Tensor) -> Result<Self> {
        Ok(SampleScore {
            ssim: ssim(reference, candidate, 1.0)?,
            psnr: psnr(reference, candidate, 1.0)?,
            l1: l1_distance(reference, candidate)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub mode: PrivacyMode,
    pub defense: String,
    pub ratio: f64,
    /// Per-sample scores (input reconstruction).
    pub samples: Vec<SampleScore>,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub l1_mean: f64,
    pub l1_std: f64,
    /// Top-1 accuracy on the sensitive label (attribute leakage).
    pub accuracy: Option<f64>,
    /// Final objective of likelihood maximisation, per sample.
    pub final_loss: Vec<f64>,
    /// Set when an optimisation produced non-finite values.
    pub failure: Option<String>,
    /// Reconstructed images, in sample order (input reconstruction).
    #[serde(skip)]
    pub reconstructions: Vec<Tensor>,
}

impl AttackReport {
    fn empty(cfg: &AttackConfig, defense: &str, ratio: f64) -> Self {
        AttackReport {
            kind: cfg.kind,
            mode: cfg.mode,
            defense: defense.to_string(),
            ratio,
            samples: Vec::new(),
            ssim_mean: 0.0,
            ssim_std: 0.0,
            psnr_mean: 0.0,
            psnr_std: 0.0,
            l1_mean: 0.0,
            l1_std: 0.0,
            accuracy: None,
            final_loss: Vec::new(),
            failure: None,
            reconstructions: Vec::new(),
        }
    }

    fn set_samples(&mut self, samples: Vec<SampleScore>) {
        let col = |f: fn(&SampleScore) -> f64| mean_std(&samples.iter().map(f).collect::<Vec<_>>());
        (self.ssim_mean, self.ssim_std) = col(|s| s.ssim);
        (self.psnr_mean, self.psnr_std) = col(|s| s.psnr);
        (self.l1_mean, self.l1_std) = col(|s| s.l1);
        self.samples = samples;
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// Trains a transpose-convolution decoder on `(z, x)` pairs with `ℓ1` loss.
/// Returns the decoder and its per-epoch mean training loss.
pub fn train_supervised_decoder(
    z: &Tensor,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Decoder, Vec<f64>)> {
    let n = check_pairs(z, x.shape().first().copied())?;
    let (zs, xs) = (z.shape(), x.shape());
    if xs.len() != 4 || xs[2] != xs[3] || zs[2] != zs[3] {
        return Err(Error::Dimension("decoder pairs must be square NCHW".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(zs[1], zs[2], xs[1], xs[2], cfg.hidden, &mut rng)?;
    let opt = Optimizer::adam(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in idx.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let zv = tape.constant(z.select(batch)?);
            let p = run(&dec, &mut tape, zv, true, true)?;
            let target = tape.constant(x.select(batch)?);
            let loss = tape.l1_loss(p.out, target)?;
            let grads = tape.backward(loss)?;
            p.accumulate(&mut dec, &grads);
            p.commit_stats(&mut dec);
            opt.step(dec.params_mut());
            total += tape.value(loss).item() as f64 * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok((dec, history))
}

/// Trains a classifier from activations to sensitive labels with cross-entropy.
pub fn train_leakage_classifier(
    z: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &AttackConfig,
) -> Result<(ConvClassifier, Vec<f64>)> {
    let n = check_pairs(z, Some(labels.len()))?;
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Parameter("label outside the declared classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cls = ConvClassifier::new(z.shape()[1], cfg.hidden.max(8), classes, &mut rng);
    let opt = Optimizer::adam(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in idx.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let zv = tape.constant(z.select(batch)?);
            let p = run(&cls, &mut tape, zv, true, true)?;
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(p.out, &yb)?;
            let grads = tape.backward(loss)?;
            p.accumulate(&mut cls, &grads);
            p.commit_stats(&mut cls);
            opt.step(cls.params_mut());
            total += tape.value(loss).item() as f64 * batch.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok((cls, history))
}

fn check_pairs(z: &Tensor, targets: Option<usize>) -> Result<usize> {
    if z.rank() != 4 {
        return Err(Error::Dimension(format!("activations must be NCHW, got {:?}", z.shape())));
    }
    let n = z.shape()[0];
    if n == 0 {
        return Err(Error::Config("attack needs at least one pair".into()));
    }
    if targets != Some(n) {
        return Err(Error::Dimension("pair counts differ".into()));
    }
    Ok(n)
}

/// Evaluation-mode predictions of a trained attack model, batched.
pub fn predict_batched<M: Module>(m: &M, z: &Tensor) -> Result<Tensor> {
    let n = z.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut parts = Vec::new();
    for batch in idx.chunks(256) {
        parts.push(infer(m, &z.select(batch)?)?);
    }
    let item: Vec<usize> = parts
        .first()
        .map(|p| p.shape()[1..].to_vec())
        .unwrap_or_default();
    crate::training::concat_batches(&parts, &item)
}

#[derive(Clone, Debug)]
pub struct LikelihoodResult {
    /// Best reconstruction, `[C, H, W]`.
    pub image: Tensor,
    /// Best-so-far objective after each iteration (the first entry is the
    /// untrained generator).
    pub best_loss: Vec<f64>,
    pub failure: Option<String>,
}

/// Optimises a freshly initialised generator so that the client's
/// activation of its image matches `z` (`[1, C'', H'', W'']`) in `ℓ2`.
///
/// Channels that are identically zero in `z` are treated as pruned and
/// excluded from the objective.
pub fn likelihood_maximization_attack<M: Module + ?Sized>(
    z: &Tensor,
    client: &M,
    image_shape: [usize; 3],
    cfg: &AttackConfig,
) -> Result<LikelihoodResult> {
    let [1, c, h, w] = *z.shape() else {
        return Err(Error::Dimension(format!("target must be [1,C,H,W], got {:?}", z.shape())));
    };
    let [in_channels, size, width] = image_shape;
    if size != width || size % 4 != 0 {
        return Err(Error::Config(
            "likelihood maximisation needs square images with a side divisible by 4".into(),
        ));
    }
    let hw = h * w;
    let observed: Vec<f32> = (0..c)
        .map(|ch| {
            let on = z.data()[ch * hw..(ch + 1) * hw].iter().any(|&v| v != 0.0);
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let observed = Tensor::new(&[1, c], observed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::new(in_channels, cfg.hidden, &mut rng);
    let noise = Tensor::uniform(&[1, GENERATOR_NOISE_CHANNELS, size / 4, size / 4], 1.0, &mut rng);
    let opt = Optimizer::adam(cfg.lr);

    let mut best: Option<(f64, Tensor)> = None;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut failure = None;
    for it in 0..=cfg.iterations {
        let mut tape = Tape::new();
        let nv = tape.constant(noise.clone());
        let step = (|| -> Result<(f64, Tensor, Option<crate::autograd::Gradients>, crate::models::Pass)> {
            let gp = run(&gen, &mut tape, nv, it < cfg.iterations, true)?;
            let cp = run(client, &mut tape, gp.out, false, !cfg.bn_running_stats)?;
            let mv = tape.constant(observed.clone());
            let zm = tape.mul_channel(cp.out, mv)?;
            let target = tape.constant(z.clone());
            let loss = tape.l2_loss(zm, target)?;
            let value = tape.value(loss).item() as f64;
            let image = tape.value(gp.out).clone();
            let grads = if it < cfg.iterations {
                Some(tape.backward(loss)?)
            } else {
                None
            };
            Ok((value, image, grads, gp))
        })();
        match step {
            Ok((value, image, grads, gp)) => {
                if best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, image));
                }
                history.push(best.as_ref().map(|b| b.0).unwrap_or(value));
                if let Some(g) = grads {
                    gp.accumulate(&mut gen, &g);
                    opt.step(gen.params_mut());
                }
            }
            Err(Error::NonFinite { op }) => {
                failure = Some(format!("non-finite value in {op} at iteration {it}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let image = match best {
        Some((_, img)) => img.reshape(&[in_channels, size, size])?,
        None => Tensor::full(&[in_channels, size, size], 0.5),
    };
    Ok(LikelihoodResult {
        image,
        best_loss: history,
        failure,
    })
}

/// Data an attack suite runs on: the attacker's auxiliary pairs and the
/// evaluation samples, both encoded under `defense`.
pub struct AttackTarget<'a> {
    pub pipeline: &'a SplitPipeline,
    pub defense: DefenseMode,
    pub ratio: f64,
    pub aux: &'a Dataset,
    pub test: &'a Dataset,
    /// Seed for the defense's own randomness.
    pub seed: u64,
}

/// Runs every attack configuration against one defended pipeline.
pub fn evaluate_attack_suite(target: &AttackTarget<'_>, configs: &[AttackConfig]) -> Result<Vec<AttackReport>> {
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    let p = target.pipeline;
    let z_test = encode_dataset(p, target.test, target.defense, target.ratio, target.seed)?;
    let mut z_aux = None;
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        cfg.validate()?;
        let mut report = AttackReport::empty(cfg, target.defense.as_str(), target.ratio);
        match cfg.kind {
            AttackKind::LikelihoodMax => {
                let image_shape = [target.test.channels, target.test.height, target.test.width];
                let n = cfg.eval_samples.min(target.test.len());
                let mut scores = Vec::with_capacity(n);
                for i in 0..n {
                    let zi = z_test.select(&[i])?;
                    let res = likelihood_maximization_attack(&zi, &p.client, image_shape, cfg)?;
                    if report.failure.is_none() {
                        report.failure = res.failure.clone();
                    }
                    report.final_loss.push(res.best_loss.last().copied().unwrap_or(f64::NAN));
                    scores.push(SampleScore::between(&target.test.get(i).image, &res.image)?);
                    report.reconstructions.push(res.image);
                }
                report.set_samples(scores);
            }
            AttackKind::Decoder => {
                let budget = cfg.budget.min(target.aux.len());
                if budget == 0 {
                    return Err(Error::Config("attacker has no auxiliary samples".into()));
                }
                let za = z_aux.get_or_insert(encode_dataset(
                    p,
                    &target.aux.slice(0..target.aux.len()),
                    target.defense,
                    target.ratio,
                    target.seed.wrapping_add(1),
                )?);
                let pairs: Vec<usize> = (0..budget).collect();
                let zb = za.select(&pairs)?;
                match cfg.mode {
                    PrivacyMode::Si => {
                        let xb = target.aux.images(&pairs);
                        let (dec, _) = train_supervised_decoder(&zb, &xb, cfg)?;
                        let n = cfg.eval_samples.min(target.test.len());
                        let idx: Vec<usize> = (0..n).collect();
                        let recon = predict_batched(&dec, &z_test.select(&idx)?)?;
                        let mut scores = Vec::with_capacity(n);
                        for i in 0..n {
                            let xi = target.test.get(i).image;
                            let ri = recon.index(i)?;
                            scores.push(SampleScore::between(&xi, &ri)?);
                            report.reconstructions.push(ri);
                        }
                        report.set_samples(scores);
                    }
                    PrivacyMode::Sa => {
                        let labels = target.aux.sensitive_batch(&pairs);
                        let (cls, _) =
                            train_leakage_classifier(&zb, &labels, target.aux.sensitive_classes, cfg)?;
                        let logits = predict_batched(&cls, &z_test)?;
                        report.accuracy = Some(top1_accuracy(&logits, target.test.sensitive_labels())?);
                    }
                }
            }
        }
        out.push(report);
    }
    Ok(out)
}
