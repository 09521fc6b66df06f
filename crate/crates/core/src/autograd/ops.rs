use super::kernels::{bilinear_taps, col2im, conv_out, gemm, im2col, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode batch norm.
///
/// `var` is the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        [n, c] => Ok((n, c, 1, 1)),
        _ => dim_err(format!("{op} expects NCHW input, got {shape:?}")),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl Tape {
    /// 2-D cross-correlation. `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.shape(x), "conv2d")?;
        let &[o, wc, kh, kw] = self.shape(w) else {
            return dim_err(format!("conv2d weight must be OIKK, got {:?}", self.shape(w)));
        };
        if wc != c {
            return dim_err(format!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return dim_err("conv2d bias must have one entry per output channel");
            }
        }
        let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad))
        else {
            return dim_err("conv2d kernel larger than padded input");
        };
        let g = ConvGeom {
            channels: c,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0f32; n * o * oh * ow];
        let mut cols = vec![0.0f32; g.col_rows() * g.col_cols()];
        let in_sz = c * h * wd;
        let out_sz = o * oh * ow;
        for i in 0..n {
            im2col(&xs[i * in_sz..(i + 1) * in_sz], &g, &mut cols);
            gemm(
                o,
                g.col_rows(),
                g.col_cols(),
                ws,
                false,
                &cols,
                false,
                &mut out[i * out_sz..(i + 1) * out_sz],
                0.0,
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] geometry.
    ///
    /// `x: [N,Cin,H,W]`, `w: [Cin,Cout,kh,kw]`, output extent
    /// `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = nchw(self.shape(x), "conv_transpose2d")?;
        let &[wcin, cout, kh, kw] = self.shape(w) else {
            return dim_err("conv_transpose2d weight must be [Cin,Cout,kh,kw]");
        };
        if wcin != cin {
            return dim_err(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv_transpose2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err("conv_transpose2d bias must have one entry per output channel");
            }
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return dim_err("conv_transpose2d padding too large");
        };
        if oh == 0 || ow == 0 {
            return dim_err("conv_transpose2d produces an empty output");
        }
        let g = ConvGeom {
            channels: cout,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0f32; n * cout * oh * ow];
        let mut cols = vec![0.0f32; g.col_rows() * g.col_cols()];
        let in_sz = cin * h * wd;
        let out_sz = cout * oh * ow;
        for i in 0..n {
            gemm(
                g.col_rows(),
                cin,
                g.col_cols(),
                ws,
                true,
                &xs[i * in_sz..(i + 1) * in_sz],
                false,
                &mut cols,
                0.0,
            );
            col2im(&cols, &g, &mut out[i * out_sz..(i + 1) * out_sz]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, cout, oh * ow);
        }
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            "conv_transpose2d",
        )
    }

    /// `x: [N,D] · w: [D,K] + b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let &[n, d] = self.shape(x) else {
            return dim_err(format!("linear input must be [N,D], got {:?}", self.shape(x)));
        };
        let &[wd, k] = self.shape(w) else {
            return dim_err("linear weight must be [D,K]");
        };
        if wd != d {
            return dim_err(format!("linear: input width {d}, weight expects {wd}"));
        }
        let mut out = vec![0.0f32; n * k];
        gemm(
            n,
            d,
            k,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bs = self.value(b).data();
            if bs.len() != k {
                return dim_err("linear bias must have K entries");
            }
            for row in out.chunks_mut(k) {
                for (v, &bb) in row.iter_mut().zip(bs) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), "relu")
    }

    /// Elementwise `1 / (1 + exp(-s / T))`.
    pub fn sigmoid_temperature(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "sigmoid temperature must be > 0, got {temperature}"
            )));
        }
        let value = self.value(x).map(|s| sigmoid(s / temperature));
        self.push(value, Op::Sigmoid { x, temperature }, "sigmoid_temperature")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Multiplies every spatial position of channel `c` in sample `n` by `mask[n, c]`.
    pub fn mul_channel(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "mul_channel")?;
        if self.shape(mask) != [n, c] {
            return dim_err(format!(
                "mul_channel: mask {:?} does not match [{n}, {c}]",
                self.shape(mask)
            ));
        }
        let hw = h * w;
        let m = self.value(mask).data();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let s = m[i];
            for v in plane {
                *v *= s;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::MulChannel { x, mask }, "mul_channel")
    }

    /// Batch normalisation using statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return dim_err("batch_norm in training mode needs more than one value per channel");
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut mean = vec![0.0f32; c];
        let mut var_b = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                s += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for i in 0..n {
                ss += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var_b[ch] = (ss / m as f64) as f32;
        }
        let inv_std: Vec<f32> = var_b.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var_b
                .iter()
                .map(|&v| v * m as f32 / (m - 1) as f32)
                .collect(),
        };
        let value = Tensor::new(self.shape(x), out)?;
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return dim_err("batch_norm running statistics must have one entry per channel");
        }
        let hw = h * w;
        let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for v in &mut out[base..base + hw] {
                    *v = gs[ch] * (*v - running_mean[ch]) * inv_std[ch] + bs[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            "batch_norm",
        )
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("batch_norm gamma/beta must have one entry per channel");
        }
        Ok(())
    }

    /// Bilinear resampling of the spatial axes to `out_h × out_w`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return dim_err("bilinear_resize needs non-empty extents");
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push(value, Op::Bilinear(x), "bilinear_resize")
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        self.push(value, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Averages contiguous groups of channels: `[N,C,H,W] -> [N,G,H,W]`.
    pub fn channel_group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "channel_group_mean")?;
        if groups == 0 || c % groups != 0 {
            return dim_err(format!("{c} channels cannot form {groups} equal groups"));
        }
        let gs = c / groups;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * groups * hw];
        for i in 0..n {
            for g in 0..groups {
                let dst = &mut out[(i * groups + g) * hw..(i * groups + g + 1) * hw];
                for ch in g * gs..(g + 1) * gs {
                    let src = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= gs as f32;
                }
            }
        }
        let value = Tensor::new(&[n, groups, h, w], out)?;
        self.push(value, Op::GroupMean { x, groups }, "channel_group_mean")
    }

    /// Splits every image into `d × d` disjoint tiles, row-major:
    /// `[N,C,H,W] -> [N·d², C, H/d, W/d]`.
    pub fn tiles(&mut self, x: Var, d: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "tiles")?;
        if d == 0 || h % d != 0 || w % d != 0 {
            return dim_err(format!("{h}x{w} image is not divisible into {d}x{d} tiles"));
        }
        let (th, tw) = (h / d, w / d);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(xs.len());
        for i in 0..n {
            for ty in 0..d {
                for tx in 0..d {
                    for ch in 0..c {
                        let plane = &xs[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                        for y in 0..th {
                            let row = (ty * th + y) * w + tx * tw;
                            out.extend_from_slice(&plane[row..row + tw]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n * d * d, c, th, tw], out)?;
        self.push(value, Op::Tiles { x, d }, "tiles")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() {
            return dim_err("flatten of a scalar");
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return dim_err("mean of an empty tensor");
        }
        let value = Tensor::scalar(t.mean() as f32);
        self.push(value, Op::MeanAll(x), "mean_all")
    }

    /// Mean softmax cross-entropy of `logits: [N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return dim_err("softmax_cross_entropy expects [N,K] logits");
        };
        if labels.len() != n || n == 0 {
            return dim_err(format!("{} labels for {} rows", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return dim_err(format!("label {bad} out of range for {k} classes"));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &ls[i * k..(i + 1) * k];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = ((row[j] as f64 - mx).exp() / z) as f32;
            }
            total += z.ln() + mx - row[labels[i]] as f64;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "l1_loss")?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum();
        let value = Tensor::scalar((s / ta.len().max(1) as f64) as f32);
        self.push(value, Op::L1(a, b), "l1_loss")
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "l2_loss")?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum();
        let value = Tensor::scalar((s / ta.len().max(1) as f64) as f32);
        self.push(value, Op::L2(a, b), "l2_loss")
    }

    /// Computes `(parent, gradient)` pairs for the inputs of `op`.
    pub(super) fn op_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let rg = |v: Var| self.requires_grad(v);
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, c, h, wd) = nchw(xt.shape(), "").unwrap();
                let &[o, _, kh, kw] = wt.shape() else { unreachable!() };
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let geom = ConvGeom {
                    channels: c,
                    in_h: h,
                    in_w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: oh,
                    out_w: ow,
                };
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_sz = c * h * wd;
                let out_sz = o * oh * ow;
                let mut dw = vec![0.0f32; wt.len()];
                let mut dx = vec![0.0f32; xt.len()];
                let mut cols = vec![0.0f32; rows * ncols];
                for i in 0..n {
                    let gi = &g.data()[i * out_sz..(i + 1) * out_sz];
                    if rg(*w) {
                        im2col(&xt.data()[i * in_sz..(i + 1) * in_sz], &geom, &mut cols);
                        gemm(o, ncols, rows, gi, false, &cols, true, &mut dw, 1.0);
                    }
                    if rg(*x) {
                        gemm(rows, o, ncols, wt.data(), true, gi, false, &mut cols, 0.0);
                        col2im(&cols, &geom, &mut dx[i * in_sz..(i + 1) * in_sz]);
                    }
                }
                if rg(*x) {
                    res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
                }
                if rg(*w) {
                    res.push((*w, Tensor::new(wt.shape(), dw).unwrap()));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    res.push((b, channel_bias_grad(g.data(), n, o, oh * ow)));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, cin, h, wd) = nchw(xt.shape(), "").unwrap();
                let &[_, cout, kh, kw] = wt.shape() else { unreachable!() };
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let geom = ConvGeom {
                    channels: cout,
                    in_h: oh,
                    in_w: ow,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: h,
                    out_w: wd,
                };
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_sz = cin * h * wd;
                let out_sz = cout * oh * ow;
                let mut dw = vec![0.0f32; wt.len()];
                let mut dx = vec![0.0f32; xt.len()];
                let mut cols = vec![0.0f32; rows * ncols];
                for i in 0..n {
                    im2col(&g.data()[i * out_sz..(i + 1) * out_sz], &geom, &mut cols);
                    if rg(*x) {
                        gemm(
                            cin,
                            rows,
                            ncols,
                            wt.data(),
                            false,
                            &cols,
                            false,
                            &mut dx[i * in_sz..(i + 1) * in_sz],
                            0.0,
                        );
                    }
                    if rg(*w) {
                        gemm(
                            cin,
                            ncols,
                            rows,
                            &xt.data()[i * in_sz..(i + 1) * in_sz],
                            false,
                            &cols,
                            true,
                            &mut dw,
                            1.0,
                        );
                    }
                }
                if rg(*x) {
                    res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
                }
                if rg(*w) {
                    res.push((*w, Tensor::new(wt.shape(), dw).unwrap()));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    res.push((b, channel_bias_grad(g.data(), n, cout, oh * ow)));
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let k = wt.shape()[1];
                if rg(*x) {
                    let mut dx = vec![0.0f32; n * d];
                    gemm(n, k, d, g.data(), false, wt.data(), true, &mut dx, 0.0);
                    res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
                }
                if rg(*w) {
                    let mut dw = vec![0.0f32; d * k];
                    gemm(d, n, k, xt.data(), true, g.data(), false, &mut dw, 0.0);
                    res.push((*w, Tensor::new(wt.shape(), dw).unwrap()));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    res.push((b, channel_bias_grad(g.data(), n, k, 1)));
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                res.push((*x, Tensor::new(g.shape(), data).unwrap()));
            }
            Op::Sigmoid { x, temperature } => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y) / temperature)
                    .collect();
                res.push((*x, Tensor::new(g.shape(), data).unwrap()));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                if rg(*b) {
                    res.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    res.push((*a, Tensor::new(g.shape(), d).unwrap()));
                }
                if rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    res.push((*b, Tensor::new(g.shape(), d).unwrap()));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * c))),
            Op::MulChannel { x, mask } => {
                let xt = self.value(*x);
                let mt = self.value(*mask);
                let plane = xt.len() / mt.len().max(1);
                if rg(*x) {
                    let mut dx = g.data().to_vec();
                    for (i, p) in dx.chunks_mut(plane).enumerate() {
                        let s = mt.data()[i];
                        for v in p {
                            *v *= s;
                        }
                    }
                    res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
                }
                if rg(*mask) {
                    let dm = g
                        .data()
                        .chunks(plane)
                        .zip(xt.data().chunks(plane))
                        .map(|(gp, xp)| {
                            gp.iter()
                                .zip(xp)
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    res.push((*mask, Tensor::new(mt.shape(), dm).unwrap()));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(g.shape(), "").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dbeta[ch] += g.data()[j] as f64;
                            dgamma[ch] += g.data()[j] as f64 * xhat[j] as f64;
                        }
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gs[ch] as f64 * inv_std[ch] as f64 / m;
                            for j in base..base + hw {
                                dx[j] = (k
                                    * (m * g.data()[j] as f64
                                        - dbeta[ch]
                                        - xhat[j] as f64 * dgamma[ch]))
                                    as f32;
                            }
                        }
                    }
                    res.push((*x, Tensor::new(g.shape(), dx).unwrap()));
                }
                push_affine_grads(&mut res, rg, *gamma, *beta, &dgamma, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(g.shape(), "").unwrap();
                let hw = h * w;
                let gs = self.value(*gamma).data();
                let xs = self.value(*x).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = vec![0.0f32; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            let gv = g.data()[j];
                            dbeta[ch] += gv as f64;
                            dgamma[ch] += gv as f64 * ((xs[j] - mean[ch]) * inv_std[ch]) as f64;
                            dx[j] = gv * gs[ch] * inv_std[ch];
                        }
                    }
                }
                if rg(*x) {
                    res.push((*x, Tensor::new(g.shape(), dx).unwrap()));
                }
                push_affine_grads(&mut res, rg, *gamma, *beta, &dgamma, &dbeta);
            }
            Op::Bilinear(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = nchw(xt.shape(), "").unwrap();
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut dx = vec![0.0f32; xt.len()];
                for p in 0..n * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dp[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
            }
            Op::GlobalAvgPool(x) => {
                let xt = self.value(*x);
                let hw = xt.len() / g.len().max(1);
                let mut dx = Vec::with_capacity(xt.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f32, hw));
                }
                res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
            }
            Op::GroupMean { x, groups } => {
                let xt = self.value(*x);
                let (n, c, h, w) = nchw(xt.shape(), "").unwrap();
                let gsz = c / groups;
                let hw = h * w;
                let mut dx = vec![0.0f32; xt.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let gi = i * groups + ch / gsz;
                        let src = &g.data()[gi * hw..(gi + 1) * hw];
                        for (d, &s) in dx[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter_mut()
                            .zip(src)
                        {
                            *d = s / gsz as f32;
                        }
                    }
                }
                res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
            }
            Op::Tiles { x, d } => {
                let xt = self.value(*x);
                let (n, c, h, w) = nchw(xt.shape(), "").unwrap();
                let (th, tw) = (h / d, w / d);
                let mut dx = vec![0.0f32; xt.len()];
                let mut k = 0;
                for i in 0..n {
                    for ty in 0..*d {
                        for tx in 0..*d {
                            for ch in 0..c {
                                let plane = (i * c + ch) * h * w;
                                for y in 0..th {
                                    let row = plane + (ty * th + y) * w + tx * tw;
                                    dx[row..row + tw].copy_from_slice(&g.data()[k..k + tw]);
                                    k += tw;
                                }
                            }
                        }
                    }
                }
                res.push((*x, Tensor::new(xt.shape(), dx).unwrap()));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                res.push((*x, g.clone().reshape(&shape).unwrap()));
            }
            Op::MeanAll(x) => {
                let xt = self.value(*x);
                let v = g.item() / xt.len() as f32;
                res.push((*x, Tensor::full(xt.shape(), v)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let s = g.item() / n as f32;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= s;
                }
                res.push((*logits, Tensor::new(&[n, k], d).unwrap()));
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = g.item() / ta.len().max(1) as f32;
                let d = Tensor::new(
                    ta.shape(),
                    ta.data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| {
                            if x > y {
                                s
                            } else if x < y {
                                -s
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .unwrap();
                if rg(*b) {
                    res.push((*b, d.map(|v| -v)));
                }
                res.push((*a, d));
            }
            Op::L2(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / ta.len().max(1) as f32;
                let d = Tensor::new(
                    ta.shape(),
                    ta.data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| s * (x - y))
                        .collect(),
                )
                .unwrap();
                if rg(*b) {
                    res.push((*b, d.map(|v| -v)));
                }
                res.push((*a, d));
            }
        }
        res
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_bias_grad(g: &[f32], n: usize, c: usize, plane: usize) -> Tensor {
    let mut db = vec![0.0f64; c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (i * c + ch) * plane;
            *acc += g[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::new(&[c], db.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn push_affine_grads(
    res: &mut Vec<(Var, Tensor)>,
    rg: impl Fn(Var) -> bool,
    gamma: Var,
    beta: Var,
    dgamma: &[f64],
    dbeta: &[f64],
) {
    let c = dgamma.len();
    if rg(gamma) {
        let d = dgamma.iter().map(|&v| v as f32).collect();
        res.push((gamma, Tensor::new(&[c], d).unwrap()));
    }
    if rg(beta) {
        let d = dbeta.iter().map(|&v| v as f32).collect();
        res.push((beta, Tensor::new(&[c], d).unwrap()));
    }
}
