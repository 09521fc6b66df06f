//! Trainable parameters, layers and optimizers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor together with its accumulated gradient and optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Momentum buffer for SGD, first moment for Adam.
    pub momentum: Tensor,
    /// Second moment, only touched by Adam.
    pub second: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            grad: z.clone(),
            momentum: z.clone(),
            second: z,
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnBuffers {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// All parameters and buffers of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    buffers: Vec<BnBuffers>,
    step: u64,
}

/// Tape variables for every parameter of a [`ParamSet`], in registration order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_buffers(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.buffers.push(BnBuffers {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        self.buffers.len() - 1
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffers] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffers] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `tape`. Frozen bindings are constants and
    /// cost nothing in the backward pass.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound { vars, trainable }
    }

    /// Adds the gradients of a bound pass into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Updates batch-norm running statistics with exponential averaging.
    pub(crate) fn commit_stats(&mut self, updates: &[(usize, BatchStats)], momentum: f32) {
        for (idx, st) in updates {
            let b = &mut self.buffers[*idx];
            for c in 0..b.mean.len() {
                b.mean[c] = (1.0 - momentum) * b.mean[c] + momentum * st.mean[c];
                b.var[c] = (1.0 - momentum) * b.var[c] + momentum * st.var[c];
            }
        }
    }

    /// Order-sensitive FNV-1a hash over parameter and buffer bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f32| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            p.value.data().iter().for_each(|&v| eat(v));
        }
        for b in &self.buffers {
            b.mean.iter().chain(&b.var).for_each(|&v| eat(v));
        }
        h
    }

    /// Named tensors for serialisation: parameters, then `<bn>.running_mean/var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for b in &self.buffers {
            let c = b.mean.len();
            out.push((
                format!("{}.running_mean", b.name),
                Tensor::new(&[c], b.mean.clone()).unwrap(),
            ));
            out.push((
                format!("{}.running_var", b.name),
                Tensor::new(&[c], b.var.clone()).unwrap(),
            ));
        }
        out
    }

    /// Overwrites values from named tensors produced by [`ParamSet::named_tensors`].
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
        };
        for p in &mut self.params {
            let t = find(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "{}: stored {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for b in &mut self.buffers {
            let m = find(&format!("{}.running_mean", b.name))?;
            let v = find(&format!("{}.running_var", b.name))?;
            if m.len() != b.mean.len() || v.len() != b.var.len() {
                return Err(Error::Dimension(format!("{}: buffer size", b.name)));
            }
            b.mean = m.data().to_vec();
            b.var = v.data().to_vec();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `v <- m·v + g; p <- p - lr·v`
    Sgd { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn adam(lr: f32) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&self, set: &mut ParamSet) {
        set.step += 1;
        match *self {
            Optimizer::Sgd { lr, momentum } => sgd_momentum_step(set, lr, momentum),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = set.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for p in &mut set.params {
                    let g = p.grad.data();
                    let m = p.momentum.data_mut();
                    for (mi, &gi) in m.iter_mut().zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    }
                    let s = p.second.data_mut();
                    for (si, &gi) in s.iter_mut().zip(g) {
                        *si = beta2 * *si + (1.0 - beta2) * gi * gi;
                    }
                    let (m, s) = (p.momentum.data(), p.second.data());
                    let upd: Vec<f32> = m
                        .iter()
                        .zip(s)
                        .map(|(&mi, &si)| lr * (mi / c1) / ((si / c2).sqrt() + eps))
                        .collect();
                    for (v, u) in p.value.data_mut().iter_mut().zip(upd) {
                        *v -= u;
                    }
                }
                set.zero_grad();
            }
        }
    }
}

/// Heavy-ball SGD: `v <- m·v + g; p <- p - lr·v`. Clears the gradients.
pub fn sgd_momentum_step(set: &mut ParamSet, lr: f32, momentum: f32) {
    for p in &mut set.params {
        let g = p.grad.data();
        let v = p.momentum.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + gi;
        }
        let v = p.momentum.data();
        for (w, &vi) in p.value.data_mut().iter_mut().zip(v) {
            *w -= lr * vi;
        }
    }
    set.zero_grad();
}

/// He-style uniform initialisation bound for a fan-in.
fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in.max(1) as f32).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::uniform(&[cout, cin, k, k], he_bound(cin * k * k), rng);
        let weight = set.add(format!("{name}.weight"), w);
        let bias = bias.then(|| set.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            b.var(self.weight),
            self.bias.map(|p| b.var(p)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel receives roughly cin·(k/stride)² contributions
        let fan = cin * (k / stride.max(1)).max(1).pow(2);
        let w = Tensor::uniform(&[cin, cout, k, k], he_bound(fan), rng);
        let weight = set.add(format!("{name}.weight"), w);
        let bias = Some(set.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(
            x,
            b.var(self.weight),
            self.bias.map(|p| b.var(p)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / din.max(1) as f32).sqrt();
        let weight = set.add(
            format!("{name}.weight"),
            Tensor::uniform(&[din, dout], bound, rng),
        );
        let bias = set.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, b.var(self.weight), Some(b.var(self.bias)))
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffers: usize,
}

impl BatchNorm2d {
    pub fn new(set: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = set.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = set.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let buffers = set.add_buffers(name, channels);
        BatchNorm2d {
            gamma,
            beta,
            buffers,
        }
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.bound.var(self.gamma), ctx.bound.var(self.beta));
        if ctx.train_stats {
            let (y, st) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
            ctx.stats.push((self.buffers, st));
            Ok(y)
        } else {
            let buf = &ctx.set.buffers()[self.buffers];
            ctx.tape
                .batch_norm_eval(x, g, b, &buf.mean, &buf.var, BN_EPS)
        }
    }
}

/// One forward pass of a network over a tape.
///
/// `train_stats` selects batch statistics for batch norm (and records them
/// for a later running-average update) versus the stored running statistics.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub set: &'a ParamSet,
    pub bound: &'a Bound,
    pub train_stats: bool,
    pub stats: Vec<(usize, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, set: &'a ParamSet, bound: &'a Bound, train_stats: bool) -> Self {
        Forward {
            tape,
            set,
            bound,
            train_stats,
            stats: Vec::new(),
        }
    }

    pub fn conv(&mut self, layer: &Conv2d, x: Var) -> Result<Var> {
        layer.forward(self.tape, self.bound, x)
    }

    pub fn conv_t(&mut self, layer: &ConvTranspose2d, x: Var) -> Result<Var> {
        layer.forward(self.tape, self.bound, x)
    }

    pub fn linear(&mut self, layer: &Linear, x: Var) -> Result<Var> {
        layer.forward(self.tape, self.bound, x)
    }
}

impl ParamSet {
    /// Applies batch statistics gathered by a [`Forward`] pass.
    pub fn commit(&mut self, stats: &[(usize, BatchStats)]) {
        self.commit_stats(stats, BN_MOMENTUM);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(p: f32) -> ParamSet {
        let mut s = ParamSet::new();
        s.add("p", Tensor::new(&[1], vec![p]).unwrap());
        s
    }

    /// loss = p², grad = 2p
    fn grad_step(set: &mut ParamSet, opt: Optimizer) {
        let mut tape = Tape::new();
        let b = set.bind(&mut tape, true);
        let p = b.var(ParamId(0));
        let sq = tape.mul(p, p).unwrap();
        let l = tape.mean_all(sq).unwrap();
        let g = tape.backward(l).unwrap();
        set.accumulate(&b, &g);
        opt.step(set);
    }

    #[test]
    fn sgd_on_square_shrinks_by_two_lr() {
        let mut s = scalar_set(1.5);
        grad_step(&mut s, Optimizer::sgd(0.1, 0.0));
        // p - 0.1 * 2p = 0.8p
        assert!((s.params()[0].value.item() - 1.2).abs() < 1e-6);
    }

    #[test]
    fn zero_momentum_matches_plain_sgd() {
        let mut a = scalar_set(0.7);
        let mut b = scalar_set(0.7);
        for _ in 0..3 {
            grad_step(&mut a, Optimizer::sgd(0.05, 0.0));
            // plain SGD by hand
            let p = b.params()[0].value.item();
            b.params_mut()[0].value.data_mut()[0] = p - 0.05 * 2.0 * p;
        }
        assert_eq!(a.params()[0].value, b.params()[0].value);
    }

    #[test]
    fn momentum_two_steps_follow_recurrence() {
        let (lr, m) = (0.1f32, 0.9f32);
        let mut s = scalar_set(1.0);
        grad_step(&mut s, Optimizer::sgd(lr, m));
        grad_step(&mut s, Optimizer::sgd(lr, m));
        // v1 = 2; p1 = 1 - 0.2 = 0.8; v2 = 0.9*2 + 1.6 = 3.4; p2 = 0.8 - 0.34
        let p = s.params()[0].value.item();
        assert!((p - 0.46).abs() < 1e-6, "{p}");
        assert!((s.params()[0].momentum.item() - 3.4).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut s = scalar_set(0.3);
        let before = s.checksum();
        grad_step(&mut s, Optimizer::sgd(0.0, 0.9));
        assert_eq!(before, s.checksum());
    }

    #[test]
    fn named_tensors_round_trip() {
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        let mut s = ParamSet::new();
        let _ = Conv2d::new(&mut s, "c", 2, 3, 3, 1, 1, true, &mut rng);
        let _ = BatchNorm2d::new(&mut s, "bn", 3);
        s.buffers_mut()[0].mean[1] = 0.25;
        let named = s.named_tensors();
        let mut t = s.clone();
        t.params_mut()[0].value.data_mut()[0] = 9.0;
        t.buffers_mut()[0].mean[1] = 0.0;
        t.load_named(&named).unwrap();
        assert_eq!(s.checksum(), t.checksum());
    }
}
