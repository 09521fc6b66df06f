//! Exact information measures on small discrete systems.
//!
//! A [`DiscreteSystem`] is an input pmf pushed through deterministic layer
//! maps, with the last layer's output multiplied by Bernoulli pruning. All
//! quantities are computed by enumerating the full joint distribution, in
//! bits, with `0 log 0 = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Slack used for every exact comparison in this module.
pub const TOL: f64 = 1e-12;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

fn check_pmf(pmf: &[f64]) -> Result<()> {
    if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Parameter("pmf has a negative or non-finite entry".into()));
    }
    let s: f64 = pmf.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("pmf sums to {s}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in bits.
pub fn entropy(pmf: &[f64]) -> Result<f64> {
    check_pmf(pmf)?;
    Ok(pmf.iter().map(|&p| plogp(p)).sum())
}

/// Entropy of a Bernoulli variable with success probability `p`.
pub fn bernoulli_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("probability {p} outside [0,1]")));
    }
    Ok(plogp(p) + plogp(1.0 - p))
}

/// Joint pmf of two discrete variables `(a, b)`, stored row-major by `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub rows: usize,
    pub cols: usize,
    pub p: Vec<f64>,
}

impl Joint {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Joint {
            rows,
            cols,
            p: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "joint table of {} entries for {rows}x{cols}",
                p.len()
            )));
        }
        check_pmf(&p)?;
        Ok(Joint { rows, cols, p })
    }

    /// Independent product of two marginals.
    pub fn product(a: &[f64], b: &[f64]) -> Result<Self> {
        check_pmf(a)?;
        check_pmf(b)?;
        let p = a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect();
        Ok(Joint {
            rows: a.len(),
            cols: b.len(),
            p,
        })
    }

    pub fn add(&mut self, a: usize, b: usize, mass: f64) {
        self.p[a * self.cols + b] += mass;
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.p[a * self.cols + b]
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|a| self.p[a * self.cols..(a + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for a in 0..self.rows {
            for (b, mb) in m.iter_mut().enumerate() {
                *mb += self.get(a, b);
            }
        }
        m
    }

    pub fn entropy(&self) -> f64 {
        self.p.iter().map(|&p| plogp(p)).sum()
    }

    /// The same joint viewed as `(b, a)`.
    pub fn transpose(&self) -> Joint {
        let mut t = Joint::zeros(self.cols, self.rows);
        for a in 0..self.rows {
            for b in 0..self.cols {
                t.p[b * self.rows + a] = self.get(a, b);
            }
        }
        t
    }
}

fn h(pmf: &[f64]) -> f64 {
    pmf.iter().map(|&p| plogp(p)).sum()
}

/// `H(b | a)` for a joint over `(a, b)`.
pub fn conditional_entropy(joint: &Joint) -> f64 {
    joint.entropy() - h(&joint.marginal_a())
}

/// `I(a; b) = H(a) + H(b) - H(a, b)`.
pub fn mutual_information(joint: &Joint) -> f64 {
    h(&joint.marginal_a()) + h(&joint.marginal_b()) - joint.entropy()
}

/// A deterministic map between finite alphabets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMap {
    pub table: Vec<usize>,
    pub codomain: usize,
}

impl LayerMap {
    pub fn new(table: Vec<usize>, codomain: usize) -> Result<Self> {
        if let Some(&bad) = table.iter().find(|&&s| s >= codomain) {
            return Err(Error::Parameter(format!(
                "layer map output {bad} outside codomain of size {codomain}"
            )));
        }
        Ok(LayerMap { table, codomain })
    }

    pub fn identity(n: usize) -> Self {
        LayerMap {
            table: (0..n).collect(),
            codomain: n,
        }
    }
}

/// How the Bernoulli variable multiplies the last layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneMode {
    /// One Bernoulli variable gates the whole output; a drop yields ZERO.
    WholeLayer,
    /// The output symbol is a vector of `channels` digits in base `alphabet`;
    /// each digit is independently kept or replaced by its own ZERO.
    PerChannel { channels: usize, alphabet: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteSystem {
    pub pmf: Vec<f64>,
    pub layers: Vec<LayerMap>,
    /// Success probability `p` of the Bernoulli variable (1 keeps the value).
    pub keep_prob: f64,
    pub mode: PruneMode,
}

impl DiscreteSystem {
    pub fn new(pmf: Vec<f64>, layers: Vec<LayerMap>, keep_prob: f64, mode: PruneMode) -> Result<Self> {
        check_pmf(&pmf)?;
        if layers.is_empty() {
            return Err(Error::Parameter("a system needs at least one layer".into()));
        }
        if !(0.0..=1.0).contains(&keep_prob) {
            return Err(Error::Parameter(format!("keep probability {keep_prob} outside [0,1]")));
        }
        let mut dom = pmf.len();
        for (i, l) in layers.iter().enumerate() {
            if l.table.len() != dom {
                return Err(Error::Parameter(format!(
                    "layer {i} defined on {} symbols, previous alphabet has {dom}",
                    l.table.len()
                )));
            }
            if l.table.iter().any(|&s| s >= l.codomain) {
                return Err(Error::Parameter(format!("layer {i} leaves its codomain")));
            }
            dom = l.codomain;
        }
        if let PruneMode::PerChannel { channels, alphabet } = mode {
            let size = alphabet.checked_pow(channels as u32);
            if channels == 0 || size != Some(dom) {
                return Err(Error::Parameter(format!(
                    "per-channel pruning needs a last-layer alphabet of {alphabet}^{channels}, got {dom}"
                )));
            }
        }
        Ok(DiscreteSystem {
            pmf,
            layers,
            keep_prob,
            mode,
        })
    }

    /// A random system: `|X| ≤ max_x`, between 1 and `max_layers` layers, a
    /// random keep probability and prune mode.
    pub fn random(seed: u64, max_x: usize, max_layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = rng.gen_range(1..=max_x.max(1));
        let raw: Vec<f64> = (0..nx).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let pmf: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let depth = rng.gen_range(1..=max_layers.max(1));
        let per_channel = rng.gen_bool(0.5);
        let mut layers = Vec::with_capacity(depth);
        let mut dom = nx;
        for i in 0..depth {
            let codomain = if i + 1 == depth && per_channel {
                4
            } else {
                rng.gen_range(1..=max_x.max(1))
            };
            let table = (0..dom).map(|_| rng.gen_range(0..codomain)).collect();
            layers.push(LayerMap { table, codomain });
            dom = codomain;
        }
        let keep_prob = match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.gen(),
        };
        let mode = if per_channel {
            PruneMode::PerChannel {
                channels: 2,
                alphabet: 2,
            }
        } else {
            PruneMode::WholeLayer
        };
        DiscreteSystem {
            pmf,
            layers,
            keep_prob,
            mode,
        }
    }

    /// Output symbol of layer `j` (0-based) for input `x`.
    pub fn layer_output(&self, j: usize, x: usize) -> usize {
        self.layers[..=j].iter().fold(x, |s, l| l.table[s])
    }

    fn last_codomain(&self) -> usize {
        self.layers.last().map_or(0, |l| l.codomain)
    }

    /// Alphabet size of the pruned output, ZERO symbols included.
    pub fn pruned_alphabet(&self) -> usize {
        match self.mode {
            PruneMode::WholeLayer => self.last_codomain() + 1,
            PruneMode::PerChannel { channels, alphabet } => (alphabet + 1).pow(channels as u32),
        }
    }

    /// Distribution of the pruned output given the unpruned symbol `f`.
    pub fn prune_distribution(&self, f: usize) -> Vec<(usize, f64)> {
        let (p, q) = (self.keep_prob, 1.0 - self.keep_prob);
        match self.mode {
            PruneMode::WholeLayer => vec![(f, p), (self.last_codomain(), q)],
            PruneMode::PerChannel { channels, alphabet } => {
                let mut out = Vec::with_capacity(1 << channels);
                for pattern in 0..(1usize << channels) {
                    let mut sym = 0;
                    let mut mass = 1.0;
                    let mut rest = f;
                    let mut weight = 1;
                    for c in 0..channels {
                        let digit = rest % alphabet;
                        rest /= alphabet;
                        let kept = pattern >> c & 1 == 1;
                        sym += weight * if kept { digit } else { alphabet };
                        mass *= if kept { p } else { q };
                        weight *= alphabet + 1;
                    }
                    out.push((sym, mass));
                }
                out
            }
        }
    }

    /// Joint of the input and layer `j`'s output.
    pub fn joint_x_layer(&self, j: usize) -> Joint {
        let mut t = Joint::zeros(self.pmf.len(), self.layers[j].codomain);
        for (x, &px) in self.pmf.iter().enumerate() {
            t.add(x, self.layer_output(j, x), px);
        }
        t
    }

    /// Joints `(x, f·P)` and `(f, f·P)` for the last layer.
    pub fn pruned_joints(&self) -> (Joint, Joint) {
        let k = self.layers.len() - 1;
        let m = self.pruned_alphabet();
        let mut xj = Joint::zeros(self.pmf.len(), m);
        let mut fj = Joint::zeros(self.last_codomain(), m);
        for (x, &px) in self.pmf.iter().enumerate() {
            let f = self.layer_output(k, x);
            for (s, mass) in self.prune_distribution(f) {
                xj.add(x, s, px * mass);
                fj.add(f, s, px * mass);
            }
        }
        (xj, fj)
    }

    /// Entropy of the pruning variables themselves.
    pub fn pruning_entropy(&self) -> f64 {
        let hb = plogp(self.keep_prob) + plogp(1.0 - self.keep_prob);
        match self.mode {
            PruneMode::WholeLayer => hb,
            PruneMode::PerChannel { channels, .. } => channels as f64 * hb,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DpiReport {
    /// `I(x; f^j)` per layer.
    pub mutual_information: Vec<f64>,
    /// `H(f^j)` per layer.
    pub entropy: Vec<f64>,
    pub chain_holds: bool,
    pub identity_holds: bool,
}

impl DpiReport {
    pub fn passed(&self) -> bool {
        self.chain_holds && self.identity_holds
    }
}

/// Checks `I(x; f^k) ≤ … ≤ I(x; f^1)` and `I(x; f^j) = H(f^j)`.
pub fn check_dpi_chain(sys: &DiscreteSystem) -> DpiReport {
    let mut mi = Vec::with_capacity(sys.layers.len());
    let mut ent = Vec::with_capacity(sys.layers.len());
    for j in 0..sys.layers.len() {
        let joint = sys.joint_x_layer(j);
        mi.push(mutual_information(&joint));
        ent.push(h(&joint.marginal_b()));
    }
    let chain_holds = mi.windows(2).all(|w| w[1] <= w[0] + TOL);
    let identity_holds = mi.iter().zip(&ent).all(|(i, e)| (i - e).abs() <= TOL);
    DpiReport {
        mutual_information: mi,
        entropy: ent,
        chain_holds,
        identity_holds,
    }
}

/// Every entropy term of the post-pruning analysis, in bits.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyReport {
    pub p: f64,
    pub q: f64,
    pub h_x: f64,
    pub h_f: f64,
    pub h_fp: f64,
    pub h_p: f64,
    pub h_fp_given_f: f64,
    pub h_f_given_fp: f64,
    pub i_x_f: f64,
    pub i_x_fp: f64,
    pub i_f_fp: f64,
    /// `I(x; f) - I(x; f·P)`, computed exactly.
    pub decrease: f64,
    /// `H(f·P | f) - H(f) + p log p + q log q`, the closed-form decrease
    /// as written in the original derivation.
    pub stated_decrease: f64,
    /// `H(f·P | f) + p log p + q log q`, the closed-form upper bound as
    /// written in the original derivation.
    pub stated_bound: f64,
    /// `I(x; f·P) ≤ I(f; f·P)`.
    pub dpi_holds: bool,
    /// `I(x; f·P) ≤ I(x; f)`.
    pub no_gain_holds: bool,
    /// `I(x; f) - I(x; f·P) = H(f | f·P)`.
    pub decrease_identity_holds: bool,
    pub stated_bound_holds: bool,
    /// Joint table of `(x, f·P)`, attached whenever the stated bound fails.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_joint: Option<Vec<Vec<f64>>>,
}

impl EntropyReport {
    /// The exact inequalities; the stated closed-form bound is reported
    /// separately and does not affect the verdict.
    pub fn passed(&self) -> bool {
        self.dpi_holds && self.no_gain_holds && self.decrease_identity_holds
    }
}

pub fn check_post_pruning_bound(sys: &DiscreteSystem) -> EntropyReport {
    let k = sys.layers.len() - 1;
    let xf = sys.joint_x_layer(k);
    let (xfp, ffp) = sys.pruned_joints();
    let h_x = h(&sys.pmf);
    let h_f = h(&xf.marginal_b());
    let h_fp = h(&xfp.marginal_b());
    let h_p = sys.pruning_entropy();
    let h_fp_given_f = conditional_entropy(&ffp);
    let h_f_given_fp = conditional_entropy(&ffp.transpose());
    let i_x_f = mutual_information(&xf);
    let i_x_fp = mutual_information(&xfp);
    let i_f_fp = mutual_information(&ffp);
    let decrease = i_x_f - i_x_fp;
    let stated_bound = h_fp_given_f - h_p;
    let stated_decrease = h_fp_given_f - h_f - h_p;
    let stated_bound_holds = i_x_fp <= stated_bound + TOL;
    let violation_joint = (!stated_bound_holds).then(|| {
        (0..xfp.rows)
            .map(|r| xfp.p[r * xfp.cols..(r + 1) * xfp.cols].to_vec())
            .collect()
    });
    EntropyReport {
        p: sys.keep_prob,
        q: 1.0 - sys.keep_prob,
        h_x,
        h_f,
        h_fp,
        h_p,
        h_fp_given_f,
        h_f_given_fp,
        i_x_f,
        i_x_fp,
        i_f_fp,
        decrease,
        stated_decrease,
        stated_bound,
        dpi_holds: i_x_fp <= i_f_fp + TOL,
        no_gain_holds: i_x_fp <= i_x_f + TOL,
        decrease_identity_holds: (decrease - h_f_given_fp).abs() <= TOL,
        stated_bound_holds,
        violation_joint,
    }
}
