//! Labelled image datasets: a synthetic generator with separately
//! controllable task and sensitive cues, and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its task label `y` and sensitive label `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub y: usize,
    pub s: usize,
}

/// Images stored contiguously as `[N, C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub task_classes: usize,
    pub sensitive_classes: usize,
    pixels: Vec<f32>,
    y: Vec<usize>,
    s: Vec<usize>,
}

impl Dataset {
    pub fn empty(
        channels: usize,
        height: usize,
        width: usize,
        task_classes: usize,
        sensitive_classes: usize,
    ) -> Self {
        Dataset {
            channels,
            height,
            width,
            task_classes,
            sensitive_classes,
            pixels: Vec::new(),
            y: Vec::new(),
            s: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push(&mut self, image: &[f32], y: usize, s: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::Dimension(format!(
                "image of {} values, dataset expects {}",
                image.len(),
                self.image_len()
            )));
        }
        if y >= self.task_classes || s >= self.sensitive_classes {
            return Err(Error::Parameter(format!("labels ({y}, {s}) out of range")));
        }
        self.pixels.extend_from_slice(image);
        self.y.push(y);
        self.s.push(s);
        Ok(())
    }

    pub fn task_labels(&self) -> &[usize] {
        &self.y
    }

    pub fn sensitive_labels(&self) -> &[usize] {
        &self.s
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            image: Tensor::new(
                &[self.channels, self.height, self.width],
                self.pixels(i).to_vec(),
            )
            .expect("stored image has the dataset shape"),
            y: self.y[i],
            s: self.s[i],
        }
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch shape matches data")
    }

    pub fn task_batch(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.y[i]).collect()
    }

    pub fn sensitive_batch(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.s[i]).collect()
    }

    /// Copy of the samples in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let n = self.image_len();
        Dataset {
            pixels: self.pixels[range.start * n..range.end * n].to_vec(),
            y: self.y[range.clone()].to_vec(),
            s: self.s[range].to_vec(),
            ..self.header()
        }
    }

    /// Splits into the first `n_first` samples and the rest.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let k = n_first.min(self.len());
        (self.slice(0..k), self.slice(k..self.len()))
    }

    /// Same images with task labels replaced.
    pub fn with_task_labels(&self, y: Vec<usize>) -> Result<Dataset> {
        if y.len() != self.len() || y.iter().any(|&v| v >= self.task_classes) {
            return Err(Error::Parameter("replacement labels do not fit".into()));
        }
        Ok(Dataset {
            y,
            ..self.clone()
        })
    }

    fn header(&self) -> Dataset {
        Dataset::empty(
            self.channels,
            self.height,
            self.width,
            self.task_classes,
            self.sensitive_classes,
        )
    }
}

/// Parameters of the synthetic generator.
///
/// The task label is drawn as a bright grey shape, the sensitive label as a
/// colour, striped for odd labels. `overlap` sets how much of the colour sits on the shape itself;
/// the rest is painted on a separate patch that never touches the shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub task_classes: usize,
    pub sensitive_classes: usize,
    /// Probability that the sensitive label is a function of the task label.
    pub correlation: f64,
    /// Fraction of the colour cue on the shape, in `[0, 1]`.
    pub overlap: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 16,
            task_classes: 4,
            sensitive_classes: 2,
            correlation: 0.0,
            overlap: 0.0,
            noise: 0.03,
            seed: 0,
        }
    }
}

pub const MAX_SHAPES: usize = 6;

// alternating dark and light colours, so that the cue also shows up in
// brightness
const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.1, 0.1],
    [0.55, 0.9, 1.0],
    [0.1, 0.6, 0.1],
    [1.0, 1.0, 0.5],
    [0.45, 0.1, 0.6],
    [0.7, 1.0, 0.85],
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("synthetic image size must be at least 8".into()));
        }
        if !(1..=MAX_SHAPES).contains(&self.task_classes) {
            return Err(Error::Config(format!(
                "task classes must be in 1..={MAX_SHAPES}"
            )));
        }
        if !(1..=PALETTE.len()).contains(&self.sensitive_classes) {
            return Err(Error::Config(format!(
                "sensitive classes must be in 1..={}",
                PALETTE.len()
            )));
        }
        for (name, v) in [("correlation", self.correlation), ("overlap", self.overlap)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whether pixel `(r, c)` (relative to the shape box of side `n`) is inside shape `kind`.
fn in_shape(kind: usize, r: usize, c: usize, n: usize) -> bool {
    let (r, c, n) = (r as i64, c as i64, n as i64);
    let mid = n / 2;
    let t = (n / 4).max(1);
    let (dr, dc) = (2 * r - (n - 1), 2 * c - (n - 1));
    match kind {
        // filled square
        0 => true,
        // horizontal bar
        1 => r >= mid - t && r < mid + t,
        // vertical bar
        2 => c >= mid - t && c < mid + t,
        // disc
        3 => dr * dr + dc * dc <= n * n,
        // cross
        4 => {
            let arm = t / 2 + 1;
            (r >= mid - arm && r < mid + arm) || (c >= mid - arm && c < mid + arm)
        }
        // diagonal
        _ => (r - c).abs() <= t / 2 + 1,
    }
}

/// Renders `n` samples; identical configs give bit-identical datasets.
pub fn generate_synthetic(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size;
    let mut ds = Dataset::empty(3, size, size, cfg.task_classes, cfg.sensitive_classes);

    // balanced task labels in shuffled order
    let mut ys: Vec<usize> = (0..n).map(|i| i % cfg.task_classes).collect();
    ys.shuffle(&mut rng);

    let noise = rand_distr::Normal::new(0.0, cfg.noise.max(0.0) as f32)
        .map_err(|e| Error::Config(e.to_string()))?;
    let shape_side = size / 2;
    let patch_side = (size / 4).max(2);
    let hw = size * size;
    let mut img = vec![0.0f32; 3 * hw];
    for &y in &ys {
        let s = if rng.gen_bool(cfg.correlation) {
            y % cfg.sensitive_classes
        } else {
            rng.gen_range(0..cfg.sensitive_classes)
        };

        // the shape lives in one half of the image, the patch in the other
        let left = rng.gen_bool(0.5);
        let half = size / 2;
        let r0 = rng.gen_range(0..=size - shape_side);
        let c0 = if left { 0 } else { half } + rng.gen_range(0..=half - shape_side);
        let pr = rng.gen_range(0..=size - patch_side);
        let pc = if left { half } else { 0 } + rng.gen_range(0..=half - patch_side);

        let bg = rng.gen_range(0.15f32..0.35);
        let fg = rng.gen_range(0.75f32..0.95);
        let color = PALETTE[s];
        let striped = s % 2 == 1;
        let alpha = 0.8f32;
        let on_shape = alpha * cfg.overlap as f32;
        let on_patch = alpha * (1.0 - cfg.overlap as f32);

        for r in 0..size {
            for c in 0..size {
                let mut px = [bg; 3];
                let inside = r >= r0
                    && r < r0 + shape_side
                    && c >= c0
                    && c < c0 + shape_side
                    && in_shape(y, r - r0, c - c0, shape_side);
                let in_patch = r >= pr && r < pr + patch_side && c >= pc && c < pc + patch_side;
                // odd sensitive classes are striped, so the cue survives any
                // mixing of the colour channels
                let stripe = if striped && r % 2 == 1 { 0.0 } else { 1.0 };
                if inside {
                    px = [fg; 3];
                    let a = on_shape * stripe;
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v = (1.0 - a) * *v + a * color[ch];
                    }
                } else if in_patch {
                    let a = on_patch * stripe;
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v = (1.0 - a) * *v + a * color[ch];
                    }
                }
                for (ch, v) in px.iter().enumerate() {
                    let e = if cfg.noise > 0.0 { rng.sample(noise) } else { 0.0 };
                    img[ch * hw + r * size + c] = (v + e).clamp(0.0, 1.0);
                }
            }
        }
        ds.push(&img, y, s)?;
    }
    Ok(ds)
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// 1 for animals, 0 for vehicles.
pub fn living_nonliving(label: usize) -> Result<usize> {
    match label {
        2..=7 => Ok(1),
        0 | 1 | 8 | 9 => Ok(0),
        _ => Err(Error::Parameter(format!("CIFAR-10 label {label} out of range"))),
    }
}

/// Parses CIFAR-10 binary records: one label byte followed by the red, green
/// and blue 32×32 planes. Pixels are scaled to `[0, 1]`; the sensitive label
/// is [`living_nonliving`].
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset: whole,
            detail: format!(
                "length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let mut ds = Dataset::empty(3, 32, 32, 10, 2);
    let mut img = vec![0.0f32; 3072];
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        let s = living_nonliving(label).map_err(|_| Error::Format {
            offset: (k * CIFAR_RECORD) as u64,
            detail: format!("label byte {label} is not a CIFAR-10 class"),
        })?;
        for (dst, &b) in img.iter_mut().zip(&rec[1..]) {
            *dst = b as f32 / 255.0;
        }
        ds.push(&img, label, s)?;
    }
    Ok(ds)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar_binary(&fs::read(path)?)
}
