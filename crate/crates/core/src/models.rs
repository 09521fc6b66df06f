//! Network architectures: the client stack with its pre-processor, the
//! channel filter generator, the server task network, and the convolutional
//! classifier, decoder and image generator used by adversaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Bound, Conv2d, ConvTranspose2d, Forward, Linear, ParamSet};
use crate::tensor::Tensor;

/// A network owning its parameters.
pub trait Module {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var>;
}

/// Output of one forward pass plus what is needed to apply its gradients.
pub struct Pass {
    pub out: Var,
    pub bound: Bound,
    pub stats: Vec<(usize, BatchStats)>,
}

/// Runs `m` on `x`. `trainable` puts the parameters on the tape as variables;
/// `batch_stats` normalises with batch statistics instead of running ones.
pub fn run<M: Module + ?Sized>(
    m: &M,
    tape: &mut Tape,
    x: Var,
    trainable: bool,
    batch_stats: bool,
) -> Result<Pass> {
    let bound = m.params().bind(tape, trainable);
    let mut f = Forward::new(tape, m.params(), &bound, batch_stats);
    let out = m.forward(&mut f, x)?;
    let stats = std::mem::take(&mut f.stats);
    Ok(Pass { out, bound, stats })
}

impl Pass {
    /// Accumulates this pass's gradients into `m`.
    pub fn accumulate<M: Module + ?Sized>(&self, m: &mut M, grads: &Gradients) {
        m.params_mut().accumulate(&self.bound, grads);
    }

    /// Folds the recorded batch statistics into the running averages.
    pub fn commit_stats<M: Module + ?Sized>(&self, m: &mut M) {
        m.params_mut().commit(&self.stats);
    }
}

/// Evaluation-mode forward of `m` on a constant input.
pub fn infer<M: Module + ?Sized>(m: &M, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = run(m, &mut tape, xv, false, false)?;
    Ok(tape.value(p.out).clone())
}

/// Channel widths of the seven residual blocks.
pub const BLOCK_WIDTHS: [usize; 7] = [8, 16, 16, 32, 32, 64, 64];
/// Strides of the seven blocks; every second block halves the extent.
pub const BLOCK_STRIDES: [usize; 7] = [1, 2, 1, 2, 1, 2, 1];
pub const NUM_BLOCKS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial extent after the block.
    pub out_size: usize,
}

/// Shape table of the full seven-block stack for a square input.
pub fn block_table(in_channels: usize, input_size: usize) -> Vec<BlockSpec> {
    let mut size = input_size;
    let mut cin = in_channels;
    (0..NUM_BLOCKS)
        .map(|i| {
            size = size.div_ceil(BLOCK_STRIDES[i]);
            let spec = BlockSpec {
                in_channels: cin,
                out_channels: BLOCK_WIDTHS[i],
                stride: BLOCK_STRIDES[i],
                out_size: size,
            };
            cin = BLOCK_WIDTHS[i];
            spec
        })
        .collect()
}

/// conv3×3 → batch norm → ReLU, with an identity skip when shapes allow.
#[derive(Clone, Debug)]
pub struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    residual: bool,
}

impl Block {
    fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, spec: &BlockSpec, rng: &mut R) -> Self {
        Block {
            conv: Conv2d::new(
                set,
                &format!("{name}.conv"),
                spec.in_channels,
                spec.out_channels,
                3,
                spec.stride,
                1,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(set, &format!("{name}.bn"), spec.out_channels),
            residual: spec.stride == 1 && spec.in_channels == spec.out_channels,
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = f.conv(&self.conv, x)?;
        let h = self.bn.forward(f, h)?;
        let h = f.tape.relu(h)?;
        if self.residual {
            f.tape.add(x, h)
        } else {
            Ok(h)
        }
    }
}

/// Settings of the spatial-decoupling pre-processor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Partitions per image axis.
    pub d: usize,
    /// Convolution filters; must equal `d²`.
    pub filters: usize,
    /// When false the image is convolved directly, without tiling.
    pub enabled: bool,
    pub input_size: usize,
    pub kernel: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            d: 4,
            filters: 16,
            enabled: true,
            input_size: 16,
            kernel: 3,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.input_size.is_multiple_of(self.d) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by d={}",
                self.input_size, self.d
            )));
        }
        if self.d * self.d != self.filters {
            return Err(Error::Config(format!(
                "pre-processor needs d² = filters, got d={} and {} filters",
                self.d, self.filters
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("pre-processor kernel must be odd".into()));
        }
        Ok(())
    }

    /// Channels of the aggregated map `A`.
    pub fn out_channels(&self) -> usize {
        self.d * self.d
    }
}

/// Tiles, resizes, convolves and channel-averages the input image.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub cfg: PreprocessConfig,
    pub conv: Conv2d,
    in_channels: usize,
}

impl Preprocessor {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        cfg: PreprocessConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let conv = Conv2d::new(
            set,
            "pre.conv",
            in_channels,
            cfg.filters,
            cfg.kernel,
            1,
            cfg.kernel / 2,
            true,
            rng,
        );
        Ok(Preprocessor {
            cfg,
            conv,
            in_channels,
        })
    }

    /// Channels of the input image.
    pub fn conv_in_channels(&self) -> usize {
        self.in_channels
    }

    /// `[N,3,H,W] -> [N,d²,H,W]`.
    ///
    /// With the decoupler on, the `F` filters followed by a channel mean are
    /// evaluated as one convolution with the mean filter and mean bias.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (n, h, w) = match *f.tape.shape(x) {
            [n, _, h, w] => (n, h, w),
            ref s => return Err(Error::Dimension(format!("pre-processor input {s:?}"))),
        };
        let d = self.cfg.d;
        if !self.cfg.enabled {
            let y = f.conv(&self.conv, x)?;
            return f.tape.channel_group_mean(y, d * d);
        }
        let t = f.tape.tiles(x, d)?;
        let t = f.tape.bilinear_resize(t, h, w)?;
        let (wm, bm) = self.mean_filter(f)?;
        let k = self.cfg.kernel;
        let a = f.tape.conv2d(t, wm, Some(bm), 1, k / 2)?;
        f.tape.reshape(a, &[n, d * d, h, w])
    }

    /// Literal form: all `F` filters on every resized tile, then the channel mean.
    pub fn forward_unfused(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (n, h, w) = match *f.tape.shape(x) {
            [n, _, h, w] => (n, h, w),
            ref s => return Err(Error::Dimension(format!("pre-processor input {s:?}"))),
        };
        let d = self.cfg.d;
        let t = f.tape.tiles(x, d)?;
        let t = f.tape.bilinear_resize(t, h, w)?;
        let y = f.conv(&self.conv, t)?;
        let a = f.tape.channel_group_mean(y, 1)?;
        f.tape.reshape(a, &[n, d * d, h, w])
    }

    fn mean_filter(&self, f: &mut Forward<'_>) -> Result<(Var, Var)> {
        let w = f.bound.var(self.conv.weight);
        let [fo, ci, kh, kw] = *f.tape.shape(w) else {
            unreachable!("conv weight is rank 4")
        };
        let wr = f.tape.reshape(w, &[1, fo, ci * kh * kw, 1])?;
        let wm = f.tape.channel_group_mean(wr, 1)?;
        let wm = f.tape.reshape(wm, &[1, ci, kh, kw])?;
        let b = f.bound.var(self.conv.bias.expect("pre-processor conv has a bias"));
        let br = f.tape.reshape(b, &[1, fo, 1, 1])?;
        let bm = f.tape.channel_group_mean(br, 1)?;
        let bm = f.tape.reshape(bm, &[1])?;
        Ok((wm, bm))
    }
}

/// Client network `f1`: pre-processor plus the first `split` blocks.
#[derive(Clone, Debug)]
pub struct ClientNet {
    params: ParamSet,
    pub pre: Preprocessor,
    blocks: Vec<Block>,
    pub split: usize,
}

impl ClientNet {
    pub fn new<R: Rng + ?Sized>(
        cfg: PreprocessConfig,
        in_channels: usize,
        split: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=NUM_BLOCKS).contains(&split) {
            return Err(Error::Config(format!("split index {split} outside 1..=7")));
        }
        let mut params = ParamSet::new();
        let table = block_table(cfg.out_channels(), cfg.input_size);
        let pre = Preprocessor::new(&mut params, cfg, in_channels, rng)?;
        let blocks = table[..split]
            .iter()
            .enumerate()
            .map(|(i, s)| Block::new(&mut params, &format!("client.block{}", i + 1), s, rng))
            .collect();
        Ok(ClientNet {
            params,
            pre,
            blocks,
            split,
        })
    }

    /// `[C'', H'', W'']` of the client output.
    pub fn output_shape(&self) -> [usize; 3] {
        let spec = block_table(self.pre.cfg.out_channels(), self.pre.cfg.input_size)[self.split - 1];
        [spec.out_channels, spec.out_size, spec.out_size]
    }

    /// Client blocks only, starting from an aggregated map.
    pub fn forward_blocks(&self, f: &mut Forward<'_>, a: Var) -> Result<Var> {
        self.blocks.iter().try_fold(a, |h, b| b.forward(f, h))
    }
}

impl Module for ClientNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let a = self.pre.forward(f, x)?;
        self.forward_blocks(f, a)
    }
}

/// Server task network `f2`: the remaining blocks, global pooling and a
/// linear classifier.
#[derive(Clone, Debug)]
pub struct TaskNet {
    params: ParamSet,
    blocks: Vec<Block>,
    fc: Linear,
}

impl TaskNet {
    pub fn new<R: Rng + ?Sized>(
        pre: &PreprocessConfig,
        split: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=NUM_BLOCKS).contains(&split) || classes == 0 {
            return Err(Error::Config("task network needs a valid split and classes".into()));
        }
        let mut params = ParamSet::new();
        let table = block_table(pre.out_channels(), pre.input_size);
        let blocks = table[split..]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Block::new(&mut params, &format!("task.block{}", split + i + 1), s, rng)
            })
            .collect();
        let fc = Linear::new(&mut params, "task.fc", BLOCK_WIDTHS[NUM_BLOCKS - 1], classes, rng);
        Ok(TaskNet { params, blocks, fc })
    }
}

impl Module for TaskNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let h = self.blocks.iter().try_fold(z, |h, b| b.forward(f, h))?;
        let g = f.tape.global_avg_pool(h)?;
        f.linear(&self.fc, g)
    }
}

/// Filter generator `g(φ, ẑ)`: scores one value per client channel.
#[derive(Clone, Debug)]
pub struct FilterGen {
    params: ParamSet,
    c1: Conv2d,
    c2: Conv2d,
    fc: Linear,
    score_scale: f32,
}

impl FilterGen {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, score_scale: f32, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let c1 = Conv2d::new(&mut params, "filter.conv1", channels, hidden, 3, 1, 1, true, rng);
        let c2 = Conv2d::new(&mut params, "filter.conv2", hidden, hidden, 3, 2, 1, true, rng);
        let fc = Linear::new(&mut params, "filter.fc", hidden, channels, rng);
        FilterGen {
            params,
            c1,
            c2,
            fc,
            score_scale,
        }
    }
}

impl Module for FilterGen {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let h = f.conv(&self.c1, z)?;
        let h = f.tape.relu(h)?;
        let h = f.conv(&self.c2, h)?;
        let h = f.tape.relu(h)?;
        let g = f.tape.global_avg_pool(h)?;
        let s = f.linear(&self.fc, g)?;
        standardize_rows(f.tape, s, self.score_scale)
    }
}

/// Per-row zero mean and unit (population) variance, times `scale`.
pub fn standardize_rows(tape: &mut Tape, x: Var, scale: f32) -> Result<Var> {
    let [n, c] = *tape.shape(x) else {
        return Err(Error::Dimension(format!("standardize_rows expects [N,C], got {:?}", tape.shape(x))));
    };
    let v = tape.reshape(x, &[1, n, c, 1])?;
    let gamma = tape.constant(Tensor::full(&[n], scale));
    let beta = tape.constant(Tensor::zeros(&[n]));
    let (y, _) = tape.batch_norm_train(v, gamma, beta, 1e-5)?;
    tape.reshape(y, &[n, c])
}

/// Small convolutional classifier on activations; used as proxy adversary
/// and as the attribute-leakage attacker.
#[derive(Clone, Debug)]
pub struct ConvClassifier {
    params: ParamSet,
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    fc: Linear,
}

impl ConvClassifier {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let c1 = Conv2d::new(&mut p, "cls.conv1", channels, hidden, 3, 1, 1, false, rng);
        let bn1 = BatchNorm2d::new(&mut p, "cls.bn1", hidden);
        let c2 = Conv2d::new(&mut p, "cls.conv2", hidden, hidden, 3, 2, 1, false, rng);
        let bn2 = BatchNorm2d::new(&mut p, "cls.bn2", hidden);
        let fc = Linear::new(&mut p, "cls.fc", hidden, classes, rng);
        ConvClassifier {
            params: p,
            c1,
            bn1,
            c2,
            bn2,
            fc,
        }
    }
}

impl Module for ConvClassifier {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let h = f.conv(&self.c1, z)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = f.conv(&self.c2, h)?;
        let h = self.bn2.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let g = f.tape.global_avg_pool(h)?;
        f.linear(&self.fc, g)
    }
}

/// Transpose-convolution decoder from activations back to images in `[0,1]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    params: ParamSet,
    head: Conv2d,
    ups: Vec<ConvTranspose2d>,
    out: Conv2d,
}

impl Decoder {
    /// Decoder for `[channels, in_size, in_size]` inputs producing
    /// `[out_channels, out_size, out_size]`; `out_size / in_size` must be a
    /// power of two.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        in_size: usize,
        out_channels: usize,
        out_size: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_size == 0 || !out_size.is_multiple_of(in_size) || !(out_size / in_size).is_power_of_two() {
            return Err(Error::Config(format!(
                "decoder cannot upsample {in_size} to {out_size}"
            )));
        }
        let stages = (out_size / in_size).trailing_zeros() as usize;
        let mut p = ParamSet::new();
        let head = Conv2d::new(&mut p, "dec.head", channels, hidden, 3, 1, 1, true, rng);
        let ups = (0..stages)
            .map(|i| ConvTranspose2d::new(&mut p, &format!("dec.up{i}"), hidden, hidden, 4, 2, 1, rng))
            .collect();
        let out = Conv2d::new(&mut p, "dec.out", hidden, out_channels, 3, 1, 1, true, rng);
        Ok(Decoder {
            params: p,
            head,
            ups,
            out,
        })
    }
}

impl Module for Decoder {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let mut h = f.conv(&self.head, z)?;
        h = f.tape.relu(h)?;
        for up in &self.ups {
            h = f.conv_t(up, h)?;
            h = f.tape.relu(h)?;
        }
        let o = f.conv(&self.out, h)?;
        f.tape.sigmoid_temperature(o, 1.0)
    }
}

/// Image generator for likelihood maximisation: a fixed noise code of
/// `[noise_channels, S/4, S/4]` through two upsampling stages.
#[derive(Clone, Debug)]
pub struct Generator {
    params: ParamSet,
    head: Conv2d,
    bn0: BatchNorm2d,
    up1: ConvTranspose2d,
    bn1: BatchNorm2d,
    up2: ConvTranspose2d,
    bn2: BatchNorm2d,
    out: Conv2d,
}

pub const GENERATOR_NOISE_CHANNELS: usize = 8;

impl Generator {
    pub fn new<R: Rng + ?Sized>(out_channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let nc = GENERATOR_NOISE_CHANNELS;
        let head = Conv2d::new(&mut p, "gen.head", nc, hidden, 3, 1, 1, false, rng);
        let bn0 = BatchNorm2d::new(&mut p, "gen.bn0", hidden);
        let up1 = ConvTranspose2d::new(&mut p, "gen.up1", hidden, hidden, 4, 2, 1, rng);
        let bn1 = BatchNorm2d::new(&mut p, "gen.bn1", hidden);
        let up2 = ConvTranspose2d::new(&mut p, "gen.up2", hidden, hidden, 4, 2, 1, rng);
        let bn2 = BatchNorm2d::new(&mut p, "gen.bn2", hidden);
        let out = Conv2d::new(&mut p, "gen.out", hidden, out_channels, 3, 1, 1, true, rng);
        Generator {
            params: p,
            head,
            bn0,
            up1,
            bn1,
            up2,
            bn2,
            out,
        }
    }
}

impl Module for Generator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&self, f: &mut Forward<'_>, noise: Var) -> Result<Var> {
        let h = f.conv(&self.head, noise)?;
        let h = self.bn0.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = f.conv_t(&self.up1, h)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = f.conv_t(&self.up2, h)?;
        let h = self.bn2.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let o = f.conv(&self.out, h)?;
        f.tape.sigmoid_temperature(o, 1.0)
    }
}
