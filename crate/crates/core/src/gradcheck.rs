//! Central finite-difference gradient checking.
//!
//! The scalar objective is a fixed random projection `Σ r·y` of the op output,
//! so the analytic side uses a single `backward_from` and the numeric side only
//! ever evaluates forward values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Index of the input and element where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor of the guarded relative error; keeps near-zero
/// derivatives from turning `f32` rounding into spurious failures.
pub const REL_FLOOR: f64 = 1.0;

/// Checks the gradient of `build` with respect to every tensor in `inputs`.
///
/// `build` receives one tape variable per input, in order, and returns the
/// op output.
pub fn check<F>(build: F, inputs: &[Tensor], eps: f32, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor::uniform(tape.shape(out), 1.0, &mut rng);
    let grads = tape.backward_from(out, proj.clone())?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).dot(&proj))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            let (hi, lo) = (orig + eps, orig - eps);
            work[k].data_mut()[i] = hi;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = lo;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (hi as f64 - lo as f64);
            let a = analytic.data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`op_suite`].
pub const SUITE_EPS: f32 = 1e-3;

/// Checks every differentiable tape op once on small shapes drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(1..=2);
    let c = r.gen_range(1..=3);
    let co = r.gen_range(1..=3);
    let h = r.gen_range(3..=5);
    let w = r.gen_range(3..=5);
    let k = [1usize, 3][r.gen_range(0..2)];
    let stride = r.gen_range(1..=2);
    let x = Tensor::uniform(&[n, c, h, w], 1.0, &mut r);
    let wt = Tensor::uniform(&[co, c, k, k], 0.5, &mut r);
    let wtt = Tensor::uniform(&[c, co, k, k], 0.5, &mut r);
    let b = Tensor::uniform(&[co], 0.5, &mut r);
    let x2 = Tensor::uniform(&[n, c, h, w], 1.0, &mut r);
    let mask = Tensor::uniform(&[n, c], 1.0, &mut r);
    let din = r.gen_range(2..=5);
    let dout = r.gen_range(1..=4);
    let rows = Tensor::uniform(&[n + 1, din], 1.0, &mut r);
    let lw = Tensor::uniform(&[din, dout], 0.5, &mut r);
    let lb = Tensor::uniform(&[dout], 0.5, &mut r);
    let labels: Vec<usize> = (0..n + 1).map(|_| r.gen_range(0..dout)).collect();
    let logits = Tensor::uniform(&[n + 1, dout], 2.0, &mut r);
    let gamma = Tensor::uniform(&[c], 0.5, &mut r).map(|v| v + 1.0);
    let beta = Tensor::uniform(&[c], 0.5, &mut r);
    let rmean: Vec<f32> = (0..c).map(|_| r.gen_range(-0.3..0.3)).collect();
    let rvar: Vec<f32> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    let bn_x = Tensor::uniform(&[n + 1, c, h, w], 1.0, &mut r);
    let away = |t: &Tensor| t.map(|v| if v.abs() < 0.05 { 0.5 } else { v });
    let x_relu = away(&x);
    // keep |a - b| clear of the l1 kink
    let x_l1 = x2.map(|v| v + 3.0);
    let d = [1usize, h.min(w)].into_iter().find(|&d| d > 1 && h % d == 0 && w % d == 0).unwrap_or(1);
    let groups = c;
    let (oh, ow) = (r.gen_range(2..=7), r.gen_range(2..=7));
    let temp = r.gen_range(0.5f32..2.0);
    let seed = seed.wrapping_mul(31);

    let mut out = Vec::new();
    macro_rules! chk {
        ($name:expr, $f:expr, $ins:expr) => {
            out.push(($name, check($f, $ins, SUITE_EPS, seed)?));
        };
    }
    chk!("conv2d", |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2), &[x.clone(), wt.clone(), b.clone()]);
    chk!(
        "conv_transpose2d",
        |t: &mut Tape, v: &[Var]| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, k / 2),
        &[x.clone(), wtt, b]
    );
    chk!("linear", |t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2])), &[rows.clone(), lw, lb]);
    chk!("relu", |t: &mut Tape, v: &[Var]| t.relu(v[0]), &[x_relu]);
    chk!("sigmoid_temperature", |t: &mut Tape, v: &[Var]| t.sigmoid_temperature(v[0], temp), std::slice::from_ref(&mask));
    chk!("add", |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]), &[x.clone(), x2.clone()]);
    chk!("sub", |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]), &[x.clone(), x2.clone()]);
    chk!("mul", |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]), &[x.clone(), x2.clone()]);
    chk!("scale", |t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7), std::slice::from_ref(&x));
    chk!("mul_channel", |t: &mut Tape, v: &[Var]| t.mul_channel(v[0], v[1]), &[x.clone(), mask.clone()]);
    chk!(
        "batch_norm_train",
        |t: &mut Tape, v: &[Var]| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y),
        &[bn_x.clone(), gamma.clone(), beta.clone()]
    );
    chk!(
        "batch_norm_eval",
        |t: &mut Tape, v: &[Var]| t.batch_norm_eval(v[0], v[1], v[2], &rmean, &rvar, 1e-5),
        &[bn_x, gamma, beta]
    );
    chk!("bilinear_resize", |t: &mut Tape, v: &[Var]| t.bilinear_resize(v[0], oh, ow), std::slice::from_ref(&x));
    chk!("global_avg_pool", |t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]), std::slice::from_ref(&x));
    chk!("channel_group_mean", |t: &mut Tape, v: &[Var]| t.channel_group_mean(v[0], groups), std::slice::from_ref(&x));
    chk!("tiles", |t: &mut Tape, v: &[Var]| t.tiles(v[0], d), std::slice::from_ref(&x));
    chk!("reshape", |t: &mut Tape, v: &[Var]| t.reshape(v[0], &[n, c * h * w]), std::slice::from_ref(&x));
    chk!("flatten", |t: &mut Tape, v: &[Var]| t.flatten(v[0]), std::slice::from_ref(&x));
    chk!("mean_all", |t: &mut Tape, v: &[Var]| t.mean_all(v[0]), std::slice::from_ref(&x));
    chk!("softmax_cross_entropy", |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels), &[logits]);
    chk!("l1_loss", |t: &mut Tape, v: &[Var]| t.l1_loss(v[0], v[1]), &[x.clone(), x_l1]);
    chk!("l2_loss", |t: &mut Tape, v: &[Var]| t.l2_loss(v[0], v[1]), &[x, x2]);
    chk!(
        "standardize_rows",
        |t: &mut Tape, v: &[Var]| crate::models::standardize_rows(t, v[0], 0.1),
        &[rows]
    );
    Ok(out)
}
