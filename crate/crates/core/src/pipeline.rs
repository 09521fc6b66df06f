//! The split pipeline: pre-processor and client network on the device, a
//! per-sample channel filter, and the server task network, plus the
//! defense variants applied to the transmitted activation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::models::{infer, ClientNet, FilterGen, PreprocessConfig, TaskNet};
use crate::tensor::Tensor;

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Channels kept by a hard mask: `round((1 - R) · C)`.
pub fn active_channels(channels: usize, ratio: f64) -> usize {
    (round_half_away((1.0 - ratio) * channels as f64) as usize).min(channels)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("pruning ratio {ratio} outside [0,1]")));
    }
    Ok(())
}

/// Splits a `[C,H,W]` image into `d²` tiles in row-major order.
pub fn spatial_decouple(x: &Tensor, d: usize) -> Result<Vec<Tensor>> {
    let [c, h, w] = *x.shape() else {
        return dim_err(format!("expected [C,H,W] image, got {:?}", x.shape()));
    };
    if d == 0 || h % d != 0 || w % d != 0 {
        return dim_err(format!("{h}x{w} image is not divisible into {d}x{d} tiles"));
    }
    let (th, tw) = (h / d, w / d);
    let src = x.data();
    let mut tiles = Vec::with_capacity(d * d);
    for ty in 0..d {
        for tx in 0..d {
            let mut data = Vec::with_capacity(c * th * tw);
            for ch in 0..c {
                for y in 0..th {
                    let row = ch * h * w + (ty * th + y) * w + tx * tw;
                    data.extend_from_slice(&src[row..row + tw]);
                }
            }
            tiles.push(Tensor::new(&[c, th, tw], data)?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`spatial_decouple`].
pub fn spatial_recouple(tiles: &[Tensor], d: usize) -> Result<Tensor> {
    if d == 0 || tiles.len() != d * d {
        return dim_err(format!("{} tiles do not form a {d}x{d} grid", tiles.len()));
    }
    let [c, th, tw] = *tiles[0].shape() else {
        return dim_err("tiles must be [C,H,W]");
    };
    if tiles.iter().any(|t| t.shape() != tiles[0].shape()) {
        return dim_err("tiles differ in shape");
    }
    let (h, w) = (th * d, tw * d);
    let mut out = vec![0.0f32; c * h * w];
    for (k, t) in tiles.iter().enumerate() {
        let (ty, tx) = (k / d, k % d);
        for ch in 0..c {
            for y in 0..th {
                let dst = ch * h * w + (ty * th + y) * w + tx * tw;
                let src = (ch * th + y) * tw;
                out[dst..dst + tw].copy_from_slice(&t.data()[src..src + tw]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Per-sample channel scores together with their soft and hard masks, all `[N, C'']`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningMask {
    pub scores: Tensor,
    pub soft: Tensor,
    pub hard: Tensor,
    pub ratio: f64,
    pub temperature: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Soft,
    Hard,
}

impl PruningMask {
    pub fn from_scores(scores: Tensor, temperature: f32, ratio: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature {temperature} must be positive")));
        }
        check_ratio(ratio)?;
        let soft = scores.map(|s| crate::autograd::sigmoid(s / temperature));
        let hard = hard_mask(&scores, ratio)?;
        Ok(PruningMask {
            scores,
            soft,
            hard,
            ratio,
            temperature,
        })
    }

    pub fn get(&self, mode: MaskMode) -> &Tensor {
        match mode {
            MaskMode::Soft => &self.soft,
            MaskMode::Hard => &self.hard,
        }
    }
}

/// Channel order by descending score, ties to the lower index.
fn ranking(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Keeps the top `round((1-R)·C)` channels of every row of `[N, C]` scores.
pub fn hard_mask(scores: &Tensor, ratio: f64) -> Result<Tensor> {
    check_ratio(ratio)?;
    let [n, c] = *scores.shape() else {
        return dim_err(format!("scores must be [N,C], got {:?}", scores.shape()));
    };
    let k = active_channels(c, ratio);
    let mut out = vec![0.0f32; n * c];
    for i in 0..n {
        for &j in ranking(&scores.data()[i * c..(i + 1) * c]).iter().take(k) {
            out[i * c + j] = 1.0;
        }
    }
    Tensor::new(&[n, c], out)
}

/// Per-row threshold halfway between the last kept and first dropped score,
/// so that `sigmoid((s - τ)/T)` approximates the hard mask for ratio `R`.
pub fn ratio_thresholds(scores: &Tensor, ratio: f64, temperature: f32) -> Result<Vec<f32>> {
    check_ratio(ratio)?;
    let [n, c] = *scores.shape() else {
        return dim_err(format!("scores must be [N,C], got {:?}", scores.shape()));
    };
    let k = active_channels(c, ratio);
    let margin = 50.0 * temperature;
    Ok((0..n)
        .map(|i| {
            let row = &scores.data()[i * c..(i + 1) * c];
            let r = ranking(row);
            match k {
                0 => row[r[0]] + margin,
                k if k == c => row[r[c - 1]] - margin,
                k => 0.5 * (row[r[k - 1]] + row[r[k]]),
            }
        })
        .collect())
}

/// Differentiable training mask `sigmoid((s - τ)/T)` with `τ` from
/// [`ratio_thresholds`] (held constant) or zero.
pub fn soft_mask_var(
    tape: &mut Tape,
    scores: Var,
    temperature: f32,
    ratio: Option<f64>,
) -> Result<Var> {
    let centred = match ratio {
        Some(r) => {
            let s = tape.value(scores);
            let c = s.shape()[1];
            let tau = ratio_thresholds(s, r, temperature)?;
            let full: Vec<f32> = tau.iter().flat_map(|&t| std::iter::repeat_n(t, c)).collect();
            let t = tape.constant(Tensor::new(s.shape(), full)?);
            tape.sub(scores, t)?
        }
        None => scores,
    };
    tape.sigmoid_temperature(centred, temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    None,
    Disco,
    RandomPrune,
    GaussianNoise,
}

impl DefenseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseMode::None => "none",
            DefenseMode::Disco => "disco",
            DefenseMode::RandomPrune => "random_prune",
            DefenseMode::GaussianNoise => "gaussian_noise",
        }
    }
}

impl fmt::Display for DefenseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefenseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DefenseMode::None),
            "disco" => Ok(DefenseMode::Disco),
            "random_prune" => Ok(DefenseMode::RandomPrune),
            "gaussian_noise" => Ok(DefenseMode::GaussianNoise),
            _ => Err(Error::Config(format!("unknown defense mode {s:?}"))),
        }
    }
}

/// Parameters of the baseline defenses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mean: f32,
    pub std: f32,
    /// Probability that the random baseline drops a channel.
    pub prune_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mean: 0.0,
            std: 1.0,
            prune_prob: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub in_channels: usize,
    /// Number of client blocks, `1..=7`.
    pub split: usize,
    pub task_classes: usize,
    pub filter_hidden: usize,
    /// Standard deviation of the per-sample standardised channel scores.
    pub score_scale: f32,
    pub temperature: f32,
    pub ratio: f64,
    pub defense: DefenseMode,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preprocess: PreprocessConfig::default(),
            in_channels: 3,
            split: 2,
            task_classes: 4,
            filter_hidden: 16,
            score_scale: 0.1,
            temperature: 0.03,
            ratio: 0.6,
            defense: DefenseMode::Disco,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if !(self.score_scale > 0.0) {
            return Err(Error::Config("score scale must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} outside [0,1]", self.ratio)));
        }
        if !(self.noise.std >= 0.0) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.prune_prob) {
            return Err(Error::Config("prune probability outside [0,1]".into()));
        }
        if self.filter_hidden == 0 || self.task_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("widths and class counts must be positive".into()));
        }
        Ok(())
    }
}

/// Client stack `θ1`, filter generator `φ` and task network `θ2`.
#[derive(Clone, Debug)]
pub struct SplitPipeline {
    pub cfg: PipelineConfig,
    pub client: ClientNet,
    pub filter: FilterGen,
    pub task: TaskNet,
}

impl SplitPipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let client = ClientNet::new(cfg.preprocess.clone(), cfg.in_channels, cfg.split, &mut rng)?;
        let [c, _, _] = client.output_shape();
        let filter = FilterGen::new(c, cfg.filter_hidden, cfg.score_scale, &mut rng);
        let task = TaskNet::new(&cfg.preprocess, cfg.split, cfg.task_classes, &mut rng)?;
        Ok(SplitPipeline {
            cfg,
            client,
            filter,
            task,
        })
    }

    /// `[C'', H'', W'']` of the transmitted activation.
    pub fn activation_shape(&self) -> [usize; 3] {
        self.client.output_shape()
    }

    /// Unpruned client activation `ẑ` of a batch, evaluation mode.
    pub fn client_forward(&self, x: &Tensor) -> Result<Tensor> {
        infer(&self.client, x)
    }

    pub fn generate_mask(&self, zhat: &Tensor) -> Result<PruningMask> {
        self.generate_mask_with(zhat, self.cfg.ratio)
    }

    pub fn generate_mask_with(&self, zhat: &Tensor, ratio: f64) -> Result<PruningMask> {
        let scores = infer(&self.filter, zhat)?;
        PruningMask::from_scores(scores, self.cfg.temperature, ratio)
    }

    /// Applies the configured defense to `ẑ`. `rng` drives the stochastic baselines.
    pub fn apply_defense<R: Rng + ?Sized>(&self, zhat: &Tensor, rng: &mut R) -> Result<Tensor> {
        self.apply_defense_as(zhat, self.cfg.defense, self.cfg.ratio, rng)
    }

    pub fn apply_defense_as<R: Rng + ?Sized>(
        &self,
        zhat: &Tensor,
        mode: DefenseMode,
        ratio: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let [n, c, _, _] = *zhat.shape() else {
            return dim_err(format!("activation must be [N,C,H,W], got {:?}", zhat.shape()));
        };
        match mode {
            DefenseMode::None => Ok(zhat.clone()),
            DefenseMode::Disco => {
                let mask = self.generate_mask_with(zhat, ratio)?;
                mask_channels(zhat, &mask.hard)
            }
            DefenseMode::RandomPrune => {
                let p = self.cfg.noise.prune_prob;
                let keep: Vec<f32> = (0..n * c)
                    .map(|_| if rng.gen_bool(p) { 0.0 } else { 1.0 })
                    .collect();
                mask_channels(zhat, &Tensor::new(&[n, c], keep)?)
            }
            DefenseMode::GaussianNoise => {
                let NoiseConfig { mean, std, .. } = self.cfg.noise;
                add_gaussian(zhat, mean, std, rng)
            }
        }
    }

    /// Device-side encoding: client forward followed by the defense.
    pub fn encode<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let zhat = self.client_forward(x)?;
        self.apply_defense(&zhat, rng)
    }

    /// Server-side logits for an activation.
    pub fn task_forward(&self, z: &Tensor) -> Result<Tensor> {
        infer(&self.task, z)
    }
}

/// `z[n, c, :, :] = ẑ[n, c, :, :] · mask[n, c]`.
pub fn mask_channels(zhat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *zhat.shape() else {
        return dim_err("activation must be [N,C,H,W]");
    };
    if mask.shape() != [n, c] {
        return dim_err(format!("mask {:?} does not fit activation {:?}", mask.shape(), zhat.shape()));
    }
    let hw = h * w;
    let mut out = zhat.clone();
    for (plane, &m) in out.data_mut().chunks_mut(hw).zip(mask.data()) {
        if m == 0.0 {
            plane.fill(0.0);
        } else {
            plane.iter_mut().for_each(|v| *v *= m);
        }
    }
    Ok(out)
}

pub fn add_gaussian<R: Rng + ?Sized>(z: &Tensor, mean: f32, std: f32, rng: &mut R) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(z.map(|v| v + mean));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut out = z.clone();
    out.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
    Ok(out)
}

/// Numerically stable row-wise softmax of `[N, K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = *logits.shape() else {
        return dim_err("logits must be [N,K]");
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)).take(n) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let s: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
        row.iter_mut().for_each(|v| *v = (((*v - m) as f64).exp() / s) as f32);
    }
    Ok(out)
}
