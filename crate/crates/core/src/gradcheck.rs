//! Finite-difference oracle for the tape.
//!
//! Each check builds a random instance, takes the tape's `f32` gradient of
//! `L = Σ r·out` for a random projection `r`, and compares it with central
//! differences of a separate `f64` reference forward (naive loops, no
//! shared code with the operators under test).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-2;

/// Keeps kinked operators (relu, max) away from their switching points.
const KINK_MARGIN: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

// ---------------------------------------------------------------- reference

struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    fn of(t: &Tensor) -> Self {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn ref_conv(x: &Arr, k: &Arr, stride: usize, pad: usize) -> Arr {
    let (ci, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as isize - pad as isize;
                            let xx = (j * stride + b) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += k.data[((o * ci + c) * kh + a) * kw + b]
                                    * x.data[(c * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    Arr {
        shape: vec![co, oh, ow],
        data: out,
    }
}

fn ref_bias(x: &Arr, b: &Arr) -> Arr {
    let plane = x.shape[1] * x.shape[2];
    Arr {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data[i / plane])
            .collect(),
    }
}

fn ref_relu(x: &Arr) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

fn ref_maxpool(x: &Arr, win: usize, stride: usize) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = ((h - win) / stride + 1, (w - win) / stride + 1);
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for a in 0..win {
                    for b in 0..win {
                        m = m.max(x.data[(ch * h + i * stride + a) * w + j * stride + b]);
                    }
                }
                out.push(m);
            }
        }
    }
    Arr {
        shape: vec![c, oh, ow],
        data: out,
    }
}

fn ref_gap(x: &Arr) -> Arr {
    let plane = x.shape[1] * x.shape[2];
    Arr {
        shape: vec![x.shape[0]],
        data: x
            .data
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect(),
    }
}

fn ref_dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let d = x.data.len();
    Arr {
        shape: vec![w.shape[0]],
        data: (0..w.shape[0])
            .map(|k| (0..d).map(|j| w.data[k * d + j] * x.data[j]).sum::<f64>() + b.data[k])
            .collect(),
    }
}

fn ref_softmax(z: &Arr) -> Arr {
    let m = z.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.data.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Arr {
        shape: z.shape.clone(),
        data: e.iter().map(|v| v / s).collect(),
    }
}

fn ref_xent(p: &Arr, y: usize) -> f64 {
    -p.data[y].ln()
}

fn ref_softmax_xent(z: &Arr, y: usize) -> f64 {
    let m = z.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z.data[y]
}

// ------------------------------------------------------------------ harness

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero by [`KINK_MARGIN`].
fn rand_away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(KINK_MARGIN as f32 * 2.0..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values separated by more than the FD step, randomly placed.
fn rand_distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        data.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` with respect to every entry of `inputs[which]`.
fn numeric_grad(inputs: &[Arr], which: usize, f: &dyn Fn(&[Arr]) -> f64) -> Vec<f64> {
    let n = inputs[which].data.len();
    let mut work: Vec<Arr> = inputs
        .iter()
        .map(|a| Arr {
            shape: a.shape.clone(),
            data: a.data.clone(),
        })
        .collect();
    (0..n)
        .map(|i| {
            let orig = work[which].data[i];
            work[which].data[i] = orig + FD_STEP;
            let up = f(&work);
            work[which].data[i] = orig - FD_STEP;
            let down = f(&work);
            work[which].data[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn project(out: &Arr, r: &[f64]) -> f64 {
    out.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

type Reference = Box<dyn Fn(&[Arr]) -> Arr>;

struct Instance {
    tape: Tape,
    inputs: Vec<NodeId>,
    output: NodeId,
    reference: Reference,
}

/// Max relative error over all inputs of one instance.
fn check_instance(inst: Instance, r: &mut ChaCha8Rng) -> f64 {
    let out_len = inst.tape.value(inst.output).len();
    let upstream: Vec<f32> = (0..out_len).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let up64: Vec<f64> = upstream.iter().map(|&v| v as f64).collect();
    let grads = inst.tape.backward_from(inst.output, &upstream);
    let arrs: Vec<Arr> = inst
        .inputs
        .iter()
        .map(|&i| Arr::of(inst.tape.value(i)))
        .collect();
    let reference = &inst.reference;
    let loss = |a: &[Arr]| project(&reference(a), &up64);
    inst.inputs
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let analytic = grads.get_or_zeros(id);
            let numeric = numeric_grad(&arrs, k, &loss);
            relative_error(analytic.data(), &numeric)
        })
        .fold(0.0, f64::max)
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Option<Instance>>;

fn conv_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let ci = r.gen_range(1..=3);
    let co = r.gen_range(1..=3);
    let k = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=1);
    let h = r.gen_range(k.max(3)..=6);
    let w = r.gen_range(k.max(3)..=6);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &[ci, h, w], -1.0, 1.0));
    let kern = tape.leaf(rand_tensor(r, &[co, ci, k, k], -1.0, 1.0));
    let y = tape.conv2d(x, kern, stride, pad)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![x, kern],
        output: y,
        reference: Box::new(move |a| ref_conv(&a[0], &a[1], stride, pad)),
    }))
}

fn bias_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let c = r.gen_range(1..=4);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &[c, 3, 2], -1.0, 1.0));
    let b = tape.leaf(rand_tensor(r, &[c], -1.0, 1.0));
    let y = tape.add_channel_bias(x, b)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![x, b],
        output: y,
        reference: Box::new(|a| ref_bias(&a[0], &a[1])),
    }))
}

fn relu_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let n = r.gen_range(1..=20);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_away_from_zero(r, &[n]));
    let y = tape.relu(x);
    Ok(Some(Instance {
        tape,
        inputs: vec![x],
        output: y,
        reference: Box::new(|a| ref_relu(&a[0])),
    }))
}

fn maxpool_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let c = r.gen_range(1..=2);
    let win = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let h = r.gen_range(win..=5);
    let w = r.gen_range(win..=5);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_distinct(r, &[c, h, w]));
    let y = tape.maxpool2d(x, win, stride)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![x],
        output: y,
        reference: Box::new(move |a| ref_maxpool(&a[0], win, stride)),
    }))
}

fn gap_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let shape = [r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5)];
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &shape, -1.0, 1.0));
    let y = tape.global_avg_pool(x)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![x],
        output: y,
        reference: Box::new(|a| ref_gap(&a[0])),
    }))
}

fn dense_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let d = r.gen_range(1..=8);
    let k = r.gen_range(1..=5);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &[d], -1.0, 1.0));
    let w = tape.leaf(rand_tensor(r, &[k, d], -1.0, 1.0));
    let b = tape.leaf(rand_tensor(r, &[k], -1.0, 1.0));
    let y = tape.dense(x, w, b)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![x, w, b],
        output: y,
        reference: Box::new(|a| ref_dense(&a[0], &a[1], &a[2])),
    }))
}

fn softmax_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let k = r.gen_range(2..=8);
    let mut tape = Tape::new();
    let z = tape.leaf(rand_tensor(r, &[k], -3.0, 3.0));
    let p = tape.softmax(z);
    Ok(Some(Instance {
        tape,
        inputs: vec![z],
        output: p,
        reference: Box::new(|a| ref_softmax(&a[0])),
    }))
}

fn scalar(v: f64) -> Arr {
    Arr {
        shape: vec![1],
        data: vec![v],
    }
}

fn cross_entropy_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let k = r.gen_range(2..=8);
    let y = r.gen_range(0..k);
    let raw: Vec<f32> = (0..k).map(|_| r.gen_range(0.2f32..1.0)).collect();
    let s: f32 = raw.iter().sum();
    let probs = Tensor::from_vec(raw.iter().map(|v| v / s).collect());
    let mut tape = Tape::new();
    let p = tape.leaf(probs);
    let loss = tape.cross_entropy(p, y)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![p],
        output: loss,
        reference: Box::new(move |a| scalar(ref_xent(&a[0], y))),
    }))
}

fn softmax_cross_entropy_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let k = r.gen_range(2..=8);
    let y = r.gen_range(0..k);
    let mut tape = Tape::new();
    let z = tape.leaf(rand_tensor(r, &[k], -4.0, 4.0));
    let loss = tape.softmax_cross_entropy(z, y)?;
    Ok(Some(Instance {
        tape,
        inputs: vec![z],
        output: loss,
        reference: Box::new(move |a| scalar(ref_softmax_xent(&a[0], y))),
    }))
}

fn sum_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let n = r.gen_range(1..=30);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &[n], -1.0, 1.0));
    let s = tape.sum(x);
    Ok(Some(Instance {
        tape,
        inputs: vec![x],
        output: s,
        reference: Box::new(|a| scalar(a[0].data.iter().sum())),
    }))
}

fn mean_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let n = r.gen_range(1..=6);
    let mut tape = Tape::new();
    let xs: Vec<NodeId> = (0..n)
        .map(|_| tape.leaf(rand_tensor(r, &[1], -1.0, 1.0)))
        .collect();
    let m = tape.mean(&xs)?;
    Ok(Some(Instance {
        tape,
        inputs: xs,
        output: m,
        reference: Box::new(move |a| scalar(a.iter().map(|v| v.data[0]).sum::<f64>() / n as f64)),
    }))
}

/// conv → bias → relu → maxpool → conv → relu → gap → dense → softmax-xent.
fn composed_instance(r: &mut ChaCha8Rng) -> Result<Option<Instance>> {
    let (c1, c2, k) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=4));
    let y = r.gen_range(0..k);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(r, &[1, 7, 7], 0.0, 1.0));
    let k1 = tape.leaf(rand_tensor(r, &[c1, 1, 3, 3], -0.7, 0.7));
    let b1 = tape.leaf(rand_tensor(r, &[c1], -0.3, 0.3));
    let k2 = tape.leaf(rand_tensor(r, &[c2, c1, 2, 2], -0.7, 0.7));
    let w = tape.leaf(rand_tensor(r, &[k, c2], -1.0, 1.0));
    let b = tape.leaf(rand_tensor(r, &[k], -0.5, 0.5));

    let z1 = tape.conv2d(x, k1, 1, 1)?;
    let z1 = tape.add_channel_bias(z1, b1)?;
    let a1 = tape.relu(z1);
    let p1 = tape.maxpool2d(a1, 2, 2)?;
    let z2 = tape.conv2d(p1, k2, 1, 0)?;
    let a2 = tape.relu(z2);
    let e = tape.global_avg_pool(a2)?;
    let logits = tape.dense(e, w, b)?;
    let loss = tape.softmax_cross_entropy(logits, y)?;

    // reject instances with a pre-activation or pooling tie inside the FD band
    let near_kink = |t: &Tensor| t.data().iter().any(|v| (v.abs() as f64) < KINK_MARGIN);
    if near_kink(tape.value(z1)) || near_kink(tape.value(z2)) {
        return Ok(None);
    }
    let pool_in = tape.value(a1).data();
    let (_, ph, pw) = tape.value(a1).dims3()?;
    for plane in pool_in.chunks(ph * pw) {
        for i in 0..ph / 2 {
            for j in 0..pw / 2 {
                let mut vals: Vec<f32> = (0..4)
                    .map(|q| plane[(2 * i + q / 2) * pw + 2 * j + q % 2])
                    .filter(|&v| v > 0.0)
                    .collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals.len() > 1 && ((vals[0] - vals[1]) as f64) < KINK_MARGIN {
                    return Ok(None);
                }
            }
        }
    }

    Ok(Some(Instance {
        tape,
        inputs: vec![x, k1, b1, k2, w, b],
        output: loss,
        reference: Box::new(move |a| {
            let z1 = ref_bias(&ref_conv(&a[0], &a[1], 1, 1), &a[2]);
            let p1 = ref_maxpool(&ref_relu(&z1), 2, 2);
            let e = ref_gap(&ref_relu(&ref_conv(&p1, &a[3], 1, 0)));
            scalar(ref_softmax_xent(&ref_dense(&e, &a[4], &a[5]), y))
        }),
    }))
}

const CHECKS: [(&str, Builder); 12] = [
    ("conv2d", conv_instance),
    ("add_channel_bias", bias_instance),
    ("relu", relu_instance),
    ("maxpool2d", maxpool_instance),
    ("global_avg_pool", gap_instance),
    ("dense", dense_instance),
    ("softmax", softmax_instance),
    ("cross_entropy", cross_entropy_instance),
    ("softmax_cross_entropy", softmax_cross_entropy_instance),
    ("sum", sum_instance),
    ("mean", mean_instance),
    ("composed", composed_instance),
];

pub fn op_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs `instances` accepted random cases of one operator.
pub fn check_op(name: &str, instances: usize, seed: u64) -> Result<GradCheckReport> {
    let (op, build) = CHECKS
        .iter()
        .find(|(n, _)| *n == name)
        .copied()
        .ok_or_else(|| crate::Error::InvalidConfig(format!("no gradient check named `{name}`")))?;
    let tag = name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut r = rng::stream(seed, &[tag]);
    let mut report = GradCheckReport {
        op,
        instances: 0,
        failures: 0,
        max_rel_error: 0.0,
    };
    while report.instances < instances {
        let Some(inst) = build(&mut r)? else { continue };
        let err = check_instance(inst, &mut r);
        report.instances += 1;
        report.max_rel_error = report.max_rel_error.max(err);
        if err.is_nan() || err >= REL_TOLERANCE {
            report.failures += 1;
        }
    }
    Ok(report)
}

pub fn check_all(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    op_names()
        .into_iter()
        .map(|n| check_op(n, instances, seed))
        .collect()
}
