//! Training: utility pre-training of client and server, then the min-max
//! schedule that trains the channel filter against a proxy adversary.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{evaluate_attack_suite, AttackConfig, AttackTarget};
use crate::autograd::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::top1_accuracy;
use crate::models::{infer, run, ConvClassifier, Decoder, Module};
use crate::nn::{Forward, Optimizer, ParamSet};
use crate::pipeline::{soft_mask_var, DefenseMode, SplitPipeline};
use crate::tensor::Tensor;

/// What the proxy adversary tries to recover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    /// Sensitive input: reconstruct the image, `ℓ1` loss.
    Si,
    /// Sensitive attribute: classify the sensitive label, cross-entropy.
    Sa,
}

impl fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivacyMode::Si => "si",
            PrivacyMode::Sa => "sa",
        })
    }
}

impl FromStr for PrivacyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" => Ok(PrivacyMode::Si),
            "sa" => Ok(PrivacyMode::Sa),
            _ => Err(Error::Config(format!("unknown privacy mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight `ρ` of the utility loss in the filter objective.
    pub rho: f32,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Steps of adversary, task and filter updates per batch.
    pub adversary_steps: usize,
    pub task_steps: usize,
    pub filter_steps: usize,
    /// Keep the client parameters fixed during filter training.
    pub freeze_client: bool,
    /// Centre the training mask on the threshold implied by the pruning
    /// ratio; when false the sigmoid is centred at zero.
    pub ratio_threshold: bool,
    pub mode: PrivacyMode,
    pub adversary_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 1.0,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            phase1_epochs: 3,
            phase2_epochs: 3,
            adversary_steps: 1,
            task_steps: 1,
            filter_steps: 1,
            freeze_client: true,
            ratio_threshold: true,
            mode: PrivacyMode::Sa,
            adversary_hidden: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(Error::Config("rho must be non-negative".into()));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) {
            return Err(Error::Config("lr and momentum must be non-negative".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("adversary_steps", self.adversary_steps),
            ("task_steps", self.task_steps),
            ("filter_steps", self.filter_steps),
            ("adversary_hidden", self.adversary_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer::sgd(self.lr, self.momentum)
    }
}

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: u8,
    pub epoch: usize,
    pub step: usize,
    pub l_util: f64,
    pub l_priv: f64,
    /// `ρ·L_util − L_priv`.
    pub l_joint: f64,
}

/// Per-epoch means over the training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: u8,
    pub epoch: usize,
    pub step: usize,
    pub l_util: f64,
    pub l_priv: f64,
    pub l_joint: f64,
    pub util_acc: f64,
    /// Adversary accuracy (attribute mode) or `ℓ1` error (input mode).
    pub adv_metric: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub fn extend(&mut self, other: TrainReport) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
    }

    /// `phase,epoch,step,l_util,l_priv,l_joint,util_acc,adv_metric` rows.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("phase,epoch,step,l_util,l_priv,l_joint,util_acc,adv_metric\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                e.phase, e.epoch, e.step, e.l_util, e.l_priv, e.l_joint, e.util_acc, e.adv_metric
            ));
        }
        s
    }
}

/// Proxy adversary `f3(θ3)`.
#[derive(Clone, Debug)]
pub enum Adversary {
    Classifier(ConvClassifier),
    Decoder(Decoder),
}

impl Adversary {
    pub fn new(pipeline: &SplitPipeline, cfg: &TrainConfig, sensitive_classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad5e_7a11);
        let [c, h, _] = pipeline.activation_shape();
        Ok(match cfg.mode {
            PrivacyMode::Sa => Adversary::Classifier(ConvClassifier::new(
                c,
                cfg.adversary_hidden,
                sensitive_classes,
                &mut rng,
            )),
            PrivacyMode::Si => Adversary::Decoder(Decoder::new(
                c,
                h,
                pipeline.cfg.in_channels,
                pipeline.cfg.preprocess.input_size,
                cfg.adversary_hidden,
                &mut rng,
            )?),
        })
    }

    fn inner(&self) -> &dyn Module {
        match self {
            Adversary::Classifier(m) => m,
            Adversary::Decoder(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module {
        match self {
            Adversary::Classifier(m) => m,
            Adversary::Decoder(m) => m,
        }
    }
}

impl Module for Adversary {
    fn params(&self) -> &ParamSet {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        self.inner_mut().params_mut()
    }
    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.inner().forward(f, x)
    }
}

/// Adversary loss on an adversary output: cross-entropy against sensitive
/// labels, or `ℓ1` against the input images.
fn privacy_loss(
    tape: &mut Tape,
    mode: PrivacyMode,
    out: Var,
    images: &Tensor,
    sensitive: &[usize],
) -> Result<Var> {
    match mode {
        PrivacyMode::Sa => tape.softmax_cross_entropy(out, sensitive),
        PrivacyMode::Si => {
            let target = tape.constant(images.clone());
            tape.l1_loss(out, target)
        }
    }
}

fn adversary_metric(tape: &Tape, mode: PrivacyMode, out: Var, loss: f64, sensitive: &[usize]) -> Result<f64> {
    match mode {
        PrivacyMode::Sa => top1_accuracy(tape.value(out), sensitive),
        PrivacyMode::Si => Ok(loss),
    }
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        e => e,
    }
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[derive(Default)]
struct Running {
    util: f64,
    privacy: f64,
    joint: f64,
    acc: f64,
    adv: f64,
    n: usize,
}

impl Running {
    fn summary(&self, phase: u8, epoch: usize, step: usize) -> EpochSummary {
        let d = self.n.max(1) as f64;
        EpochSummary {
            phase,
            epoch,
            step,
            l_util: self.util / d,
            l_priv: self.privacy / d,
            l_joint: self.joint / d,
            util_acc: self.acc / d,
            adv_metric: self.adv / d,
        }
    }
}

/// Trains client and task network for utility alone (no pruning).
pub fn phase1_train_utility(
    pipeline: &mut SplitPipeline,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.phase1_epochs {
        let mut acc = Running::default();
        for batch in shuffled(data.len(), &mut rng).chunks(cfg.batch_size) {
            let x = data.images(batch);
            let y = data.task_batch(batch);
            let (loss, accuracy) = utility_step(pipeline, &x, &y, opt).map_err(|e| with_step(step, e))?;
            report.steps.push(LossRecord {
                phase: 1,
                epoch,
                step,
                l_util: loss,
                l_priv: 0.0,
                l_joint: cfg.rho as f64 * loss,
            });
            acc.util += loss;
            acc.joint += cfg.rho as f64 * loss;
            acc.acc += accuracy;
            acc.n += 1;
            step += 1;
        }
        report.epochs.push(acc.summary(1, epoch, step));
    }
    Ok(report)
}

fn utility_step(pipeline: &mut SplitPipeline, x: &Tensor, y: &[usize], opt: Optimizer) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cp = run(&pipeline.client, &mut tape, xv, true, true)?;
    let tp = run(&pipeline.task, &mut tape, cp.out, true, true)?;
    let loss = tape.softmax_cross_entropy(tp.out, y)?;
    let grads = tape.backward(loss)?;
    cp.accumulate(&mut pipeline.client, &grads);
    cp.commit_stats(&mut pipeline.client);
    tp.accumulate(&mut pipeline.task, &grads);
    tp.commit_stats(&mut pipeline.task);
    opt.step(pipeline.client.params_mut());
    opt.step(pipeline.task.params_mut());
    let acc = top1_accuracy(tape.value(tp.out), y)?;
    Ok((tape.value(loss).item() as f64, acc))
}

/// Training-time mask: soft, optionally centred on the ratio threshold.
fn training_mask(tape: &mut Tape, pipeline: &SplitPipeline, scores: Var, ratio_threshold: bool) -> Result<Var> {
    let ratio = ratio_threshold.then_some(pipeline.cfg.ratio);
    soft_mask_var(tape, scores, pipeline.cfg.temperature, ratio)
}

/// Current soft-masked activation for a batch, as a constant.
fn masked_activation(pipeline: &SplitPipeline, zhat: &Tensor, ratio_threshold: bool) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let zv = tape.constant(zhat.clone());
    let fp = run(&pipeline.filter, &mut tape, zv, false, false)?;
    let m = training_mask(&mut tape, pipeline, fp.out, ratio_threshold)?;
    let z = tape.mul_channel(zv, m)?;
    Ok((tape.value(z).clone(), tape.value(m).clone()))
}

/// One round on a batch: adversary step(s), task step(s), filter step(s).
/// Returns `(L_util, L_priv, util_acc, adv_metric)` of the last filter step.
pub fn phase2_round(
    pipeline: &mut SplitPipeline,
    adversary: &mut Adversary,
    x: &Tensor,
    y: &[usize],
    s: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, f64)> {
    let opt = cfg.optimizer();
    let zhat = pipeline.client_forward(x)?;

    for _ in 0..cfg.adversary_steps {
        let (z, _) = masked_activation(pipeline, &zhat, cfg.ratio_threshold)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let ap = run(adversary, &mut tape, zv, true, true)?;
        let loss = privacy_loss(&mut tape, cfg.mode, ap.out, x, s)?;
        let grads = tape.backward(loss)?;
        ap.accumulate(adversary, &grads);
        ap.commit_stats(adversary);
        opt.step(adversary.params_mut());
    }

    for _ in 0..cfg.task_steps {
        let (_, mask) = masked_activation(pipeline, &zhat, cfg.ratio_threshold)?;
        let mut tape = Tape::new();
        let client_pass;
        let zin = if cfg.freeze_client {
            client_pass = None;
            tape.constant(zhat.clone())
        } else {
            let xv = tape.constant(x.clone());
            let cp = run(&pipeline.client, &mut tape, xv, true, true)?;
            let out = cp.out;
            client_pass = Some(cp);
            out
        };
        let mv = tape.constant(mask);
        let z = tape.mul_channel(zin, mv)?;
        let tp = run(&pipeline.task, &mut tape, z, true, true)?;
        let loss = tape.softmax_cross_entropy(tp.out, y)?;
        let grads = tape.backward(loss)?;
        tp.accumulate(&mut pipeline.task, &grads);
        tp.commit_stats(&mut pipeline.task);
        opt.step(pipeline.task.params_mut());
        if let Some(cp) = client_pass {
            cp.accumulate(&mut pipeline.client, &grads);
            cp.commit_stats(&mut pipeline.client);
            opt.step(pipeline.client.params_mut());
        }
    }

    let zhat = if cfg.freeze_client {
        zhat
    } else {
        pipeline.client_forward(x)?
    };
    let mut last = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..cfg.filter_steps {
        let mut tape = Tape::new();
        let zv = tape.constant(zhat.clone());
        let fp = run(&pipeline.filter, &mut tape, zv, true, false)?;
        let m = training_mask(&mut tape, pipeline, fp.out, cfg.ratio_threshold)?;
        let z = tape.mul_channel(zv, m)?;
        let tp = run(&pipeline.task, &mut tape, z, false, true)?;
        let l_util = tape.softmax_cross_entropy(tp.out, y)?;
        let ap = run(adversary, &mut tape, z, false, true)?;
        let l_priv = privacy_loss(&mut tape, cfg.mode, ap.out, x, s)?;
        let weighted = tape.scale(l_util, cfg.rho)?;
        let objective = tape.sub(weighted, l_priv)?;
        let grads = tape.backward(objective)?;
        fp.accumulate(&mut pipeline.filter, &grads);
        opt.step(pipeline.filter.params_mut());
        let lp = tape.value(l_priv).item() as f64;
        last = (
            tape.value(l_util).item() as f64,
            lp,
            top1_accuracy(tape.value(tp.out), y)?,
            adversary_metric(&tape, cfg.mode, ap.out, lp, s)?,
        );
    }
    Ok(last)
}

/// Alternating min-max training of the filter (and server, adversary).
/// Returns the report and the trained proxy adversary.
pub fn phase2_train_filter(
    pipeline: &mut SplitPipeline,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainReport, Adversary)> {
    cfg.validate()?;
    let mut adversary = Adversary::new(pipeline, cfg, data.sensitive_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.phase2_epochs {
        let mut acc = Running::default();
        for batch in shuffled(data.len(), &mut rng).chunks(cfg.batch_size) {
            let x = data.images(batch);
            let y = data.task_batch(batch);
            let s = data.sensitive_batch(batch);
            let (lu, lp, ua, am) = phase2_round(pipeline, &mut adversary, &x, &y, &s, cfg)
                .map_err(|e| with_step(step, e))?;
            let lj = cfg.rho as f64 * lu - lp;
            report.steps.push(LossRecord {
                phase: 2,
                epoch,
                step,
                l_util: lu,
                l_priv: lp,
                l_joint: lj,
            });
            acc.util += lu;
            acc.privacy += lp;
            acc.joint += lj;
            acc.acc += ua;
            acc.adv += am;
            acc.n += 1;
            step += 1;
        }
        report.epochs.push(acc.summary(2, epoch, step));
    }
    Ok((report, adversary))
}

/// Encodes a whole dataset with the given defense, in batches.
pub fn encode_dataset(
    pipeline: &SplitPipeline,
    data: &Dataset,
    mode: DefenseMode,
    ratio: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for batch in idx.chunks(128) {
        let zhat = pipeline.client_forward(&data.images(batch))?;
        parts.push(pipeline.apply_defense_as(&zhat, mode, ratio, &mut rng)?);
    }
    concat_batches(&parts, &pipeline.activation_shape())
}

/// Concatenates `[B_i, ...]` tensors along the first axis.
pub fn concat_batches(parts: &[Tensor], item_shape: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    Tensor::new(&shape, data)
}

/// Task accuracy of the server on pre-computed activations.
pub fn utility_on(pipeline: &SplitPipeline, z: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = z.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut hits = 0.0;
    for batch in idx.chunks(256) {
        let logits = pipeline.task_forward(&z.select(batch)?)?;
        let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        hits += top1_accuracy(&logits, &yb)? * batch.len() as f64;
    }
    Ok(if n == 0 { 0.0 } else { hits / n as f64 })
}

/// Task accuracy under a defense.
pub fn evaluate_utility(
    pipeline: &SplitPipeline,
    data: &Dataset,
    mode: DefenseMode,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let z = encode_dataset(pipeline, data, mode, ratio, seed)?;
    utility_on(pipeline, &z, data.task_labels())
}

/// Fine-tunes only the server on hard-masked activations for one ratio.
pub fn finetune_server(
    pipeline: &mut SplitPipeline,
    data: &Dataset,
    ratio: f64,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let opt = cfg.optimizer();
    let z = encode_dataset(pipeline, data, DefenseMode::Disco, ratio, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    for _ in 0..epochs {
        for batch in shuffled(data.len(), &mut rng).chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let zv = tape.constant(z.select(batch)?);
            let tp = run(&pipeline.task, &mut tape, zv, true, true)?;
            let loss = tape.softmax_cross_entropy(tp.out, &data.task_batch(batch))?;
            let grads = tape.backward(loss)?;
            tp.accumulate(&mut pipeline.task, &grads);
            tp.commit_stats(&mut pipeline.task);
            opt.step(pipeline.task.params_mut());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub train_joint: f64,
    pub holdout_joint: f64,
    pub gap: f64,
}

/// Mean `L_J = ρ·L_util − L_priv` over a dataset, evaluation mode, with the
/// training mask.
pub fn joint_loss(
    pipeline: &SplitPipeline,
    adversary: &Adversary,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for batch in idx.chunks(128) {
        let x = data.images(batch);
        let zhat = pipeline.client_forward(&x)?;
        let (z, _) = masked_activation(pipeline, &zhat, cfg.ratio_threshold)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let tp = run(&pipeline.task, &mut tape, zv, false, false)?;
        let lu = tape.softmax_cross_entropy(tp.out, &data.task_batch(batch))?;
        let ap = run(adversary, &mut tape, zv, false, false)?;
        let lp = privacy_loss(&mut tape, cfg.mode, ap.out, &x, &data.sensitive_batch(batch))?;
        let lj = cfg.rho as f64 * tape.value(lu).item() as f64 - tape.value(lp).item() as f64;
        total += lj * batch.len() as f64;
    }
    Ok(if data.is_empty() { 0.0 } else { total / data.len() as f64 })
}

/// `|E_train(L_J) − E_holdout(L_J)|`.
pub fn measure_generalization_gap(
    pipeline: &SplitPipeline,
    adversary: &Adversary,
    train: &Dataset,
    holdout: &Dataset,
    cfg: &TrainConfig,
) -> Result<GapReport> {
    let a = joint_loss(pipeline, adversary, train, cfg)?;
    let b = joint_loss(pipeline, adversary, holdout, cfg)?;
    Ok(GapReport {
        train_joint: a,
        holdout_joint: b,
        gap: (a - b).abs(),
    })
}

/// Logits of the server for a batch of images under a defense (helper for tests).
pub fn predict(pipeline: &SplitPipeline, x: &Tensor, mode: DefenseMode, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zhat = pipeline.client_forward(x)?;
    let z = pipeline.apply_defense_as(&zhat, mode, pipeline.cfg.ratio, &mut rng)?;
    infer(&pipeline.task, &z)
}

/// One point of the pruning-ratio trade-off.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub utility: f64,
    pub ssim_mean: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub leakage: Option<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "ratio,utility,ssim_mean,psnr_mean,leakage";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.4},{:.6},{},{},{}",
            self.ratio,
            self.utility,
            opt(self.ssim_mean),
            opt(self.psnr_mean),
            opt(self.leakage)
        )
    }
}

/// Server fine-tuning applied per ratio before evaluation.
#[derive(Clone, Debug)]
pub struct Retrain<'a> {
    pub data: &'a Dataset,
    pub epochs: usize,
    pub cfg: &'a TrainConfig,
}

/// Evaluates utility and the given attacks under DISCO for each ratio.
/// Leakage and reconstruction columns come from the first attack of each type.
/// With `retrain`, a copy of the server is fine-tuned on each ratio first.
pub fn sweep_pruning_ratio(
    pipeline: &SplitPipeline,
    aux: &Dataset,
    test: &Dataset,
    grid: &[f64],
    attacks: &[AttackConfig],
    retrain: Option<&Retrain<'_>>,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &ratio in grid {
        let tuned;
        let p = match retrain {
            Some(r) => {
                let mut q = pipeline.clone();
                finetune_server(&mut q, r.data, ratio, r.epochs, r.cfg)?;
                tuned = q;
                &tuned
            }
            None => pipeline,
        };
        let utility = evaluate_utility(p, test, DefenseMode::Disco, ratio, seed)?;
        let target = AttackTarget {
            pipeline: p,
            defense: DefenseMode::Disco,
            ratio,
            aux,
            test,
            seed,
        };
        let mut row = SweepRow {
            ratio,
            utility,
            ssim_mean: None,
            psnr_mean: None,
            leakage: None,
        };
        for rep in evaluate_attack_suite(&target, attacks)? {
            match rep.accuracy {
                Some(a) => row.leakage = row.leakage.or(Some(a)),
                None if row.ssim_mean.is_none() => {
                    row.ssim_mean = Some(rep.ssim_mean);
                    row.psnr_mean = Some(rep.psnr_mean);
                }
                None => {}
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
