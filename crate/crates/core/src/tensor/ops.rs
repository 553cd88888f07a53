//! Forward operators. Convolution is zero-padded cross-correlation with
//! floor output geometry.

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to this before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    "input [C,H,W]",
                    format!("{input:?}"),
                ))
            }
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    "kernel [C_out,C_in,kH,kW]",
                    format!("{kernel:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", format!("C_in = {c_in}"), kc));
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::InvalidGeometry {
                op: "conv2d",
                detail: format!("{kh}x{kw} kernel on {ph}x{pw} padded input"),
            });
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `[C_in·kH·kW, H'·W']` patch matrix.
pub(crate) fn im2col(data: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p_len = g.out_len();
    let mut cols = vec![0.0f32; g.patch_len() * p_len];
    for ci in 0..g.c_in {
        let plane = &data[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * p_len..(r + 1) * p_len];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn conv2d_cols(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f32>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let cols = im2col(input.data(), &g);
    let (r_len, p_len) = (g.patch_len(), g.out_len());
    let k = kernel.data();
    let mut out = Vec::with_capacity(g.c_out * p_len);
    let mut acc = vec![0.0f64; p_len];
    for co in 0..g.c_out {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for r in 0..r_len {
            let wv = k[co * r_len + r] as f64;
            let row = &cols[r * p_len..(r + 1) * p_len];
            for (a, &c) in acc.iter_mut().zip(row) {
                *a += wv * c as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    let out = Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)?;
    Ok((out, cols, g))
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    kernel: &Tensor,
    cols: &[f32],
    g: &ConvGeometry,
    grad_out: &[f32],
) -> (Tensor, Tensor) {
    let (r_len, p_len) = (g.patch_len(), g.out_len());
    let k = kernel.data();

    let mut grad_k = Vec::with_capacity(g.c_out * r_len);
    for co in 0..g.c_out {
        let go = &grad_out[co * p_len..(co + 1) * p_len];
        for r in 0..r_len {
            let row = &cols[r * p_len..(r + 1) * p_len];
            let s: f64 = go.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
            grad_k.push(s as f32);
        }
    }

    let mut grad_cols = vec![0.0f64; r_len * p_len];
    for co in 0..g.c_out {
        let go = &grad_out[co * p_len..(co + 1) * p_len];
        for r in 0..r_len {
            let wv = k[co * r_len + r] as f64;
            for (gc, &o) in grad_cols[r * p_len..(r + 1) * p_len].iter_mut().zip(go) {
                *gc += wv * o as f64;
            }
        }
    }

    let mut grad_in = vec![0.0f64; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            grad_in[(ci * g.h + iy as usize) * g.w + ix as usize] +=
                                grad_cols[r * p_len + oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }

    let grad_in = Tensor {
        shape: vec![g.c_in, g.h, g.w],
        data: grad_in.into_iter().map(|v| v as f32).collect(),
    };
    let grad_k = Tensor {
        shape: vec![g.c_out, g.c_in, g.kh, g.kw],
        data: grad_k,
    };
    (grad_in, grad_k)
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, zero_pad: usize) -> Result<Tensor> {
    conv2d_cols(input, kernel, stride, zero_pad).map(|(out, _, _)| out)
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if bias.shape() != [c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("[{c}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let mut out = input.clone();
    for (plane, &b) in out.data.chunks_mut(h * w).zip(bias.data()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub(crate) fn maxpool_indices(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::InvalidGeometry {
            op: "maxpool2d",
            detail: format!("window {window}, stride {stride} on {h}x{w}"),
        });
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    maxpool_indices(input, window, stride).map(|(t, _)| t)
}

/// Spatial mean per channel: `[C,H,W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f64;
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(vec![c], data)
}

/// `weight · input + bias` for `weight: [K, D]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = input.len();
    let k = match *weight.shape() {
        [k, wd] if wd == d => k,
        _ => {
            return Err(Error::shape(
                "dense",
                format!("weight [K, {d}]"),
                format!("{:?}", weight.shape()),
            ))
        }
    };
    if bias.shape() != [k] {
        return Err(Error::shape(
            "dense",
            format!("bias [{k}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let data = weight
        .data()
        .chunks(d)
        .zip(bias.data())
        .map(|(row, &b)| {
            let s: f64 = row
                .iter()
                .zip(input.data())
                .map(|(&a, &x)| a as f64 * x as f64)
                .sum();
            (s + b as f64) as f32
        })
        .collect();
    Tensor::new(vec![k], data)
}

pub fn log_sum_exp(logits: &[f32]) -> f64 {
    let m = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let s: f64 = logits.iter().map(|&v| (v as f64 - m).exp()).sum();
    m + s.ln()
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// Log-softmax of `f64` logits, no clamping.
pub fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Max-subtracted softmax over a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let z = logits.data();
    let m = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Tensor {
        shape: logits.shape().to_vec(),
        data: e.iter().map(|&v| (v / s) as f32).collect(),
    }
}

/// `-ln(probs[label])` with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    let p = probs.data().get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok(-(*p as f64).max(PROB_FLOOR).ln())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_sum_kernel() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), t(&[1, 1, 1], &[10.]));
    }

    #[test]
    fn conv_hand_evaluated_cross_correlation() {
        let x = t(&[1, 3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let k = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        // sliding-window oracle: out[i][j] = sum k[a][b] * x[i + a][j + b]
        let xs = [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]];
        let ks = [[1., 2.], [3., 4.]];
        let mut expect = vec![];
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0f32;
                for a in 0..2 {
                    for b in 0..2 {
                        s += ks[a][b] * xs[i + a][j + b];
                    }
                }
                expect.push(s);
            }
        }
        assert_eq!(expect, vec![5., 3., 2., 5.]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), t(&[1, 2, 2], &expect));
    }

    #[test]
    fn conv_geometry_with_padding_and_stride() {
        let x = Tensor::full(&[2, 7, 5], 1.0);
        let k = Tensor::full(&[3, 2, 3, 3], 1.0);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
        // top-left output sees a 2x2 patch of ones in each of 2 channels
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 4, 4]), 1, 0),
            Err(Error::InvalidGeometry { .. })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), 0, 0),
            Err(Error::InvalidGeometry { .. })
        ));
    }

    #[test]
    fn small_layer_examples() {
        assert_eq!(
            relu(&Tensor::from_vec(vec![-1., 0., 2.])).data(),
            &[0., 0., 2.]
        );
        let x = t(&[2, 2, 2], &[3., 3., 3., 3., -1., -1., -1., -1.]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3., -1.]);
        let y = dense(
            &Tensor::from_vec(vec![1., 2.]),
            &t(&[2, 2], &[1., 0., 0., 1.]),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1., 2.]);
        assert!(dense(
            &Tensor::from_vec(vec![1., 2., 3.]),
            &t(&[2, 2], &[1., 0., 0., 1.]),
            &Tensor::zeros(&[2])
        )
        .is_err());
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = t(&[1, 2, 4], &[1., 5., 2., 2., 3., 4., 9., 0.]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[5., 9.]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_vec(vec![0., 0.]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::from_vec(vec![1000., 1000., 1000.]));
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax(&Tensor::from_vec(vec![2., 0.]));
        assert!((p.data()[0] - 0.880797).abs() < 1e-6);
        assert!((p.data()[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let u = Tensor::full(&[10], 0.1);
        assert!((cross_entropy(&u, 3).unwrap() - 10f64.ln()).abs() < 1e-6);
        assert_eq!(
            cross_entropy(&Tensor::from_vec(vec![1., 0.]), 0).unwrap(),
            0.0
        );
        let ce = cross_entropy(&Tensor::from_vec(vec![0.880797, 0.119203]), 1).unwrap();
        assert!((ce - 2.126928).abs() < 1e-5);
        assert!(matches!(
            cross_entropy(&u, 10),
            Err(Error::LabelOutOfRange {
                label: 10,
                classes: 10
            })
        ));
        // clamped, not infinite
        assert!(cross_entropy(&Tensor::from_vec(vec![1., 0.]), 1)
            .unwrap()
            .is_finite());
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn reductions_are_bitwise_repeatable() {
        let x: Vec<f32> = (0..4096)
            .map(|i| ((i * 7919) % 1000) as f32 * 1e-3 - 0.37)
            .collect();
        let x = Tensor::new(vec![4, 32, 32], x).unwrap();
        let k = Tensor::new(
            vec![3, 4, 3, 3],
            (0..108).map(|i| (i as f32).sin()).collect(),
        )
        .unwrap();
        let a = conv2d(&x, &k, 1, 1).unwrap();
        let b = conv2d(&x, &k, 1, 1).unwrap();
        assert!(a.bits_eq(&b));
        assert!(global_avg_pool(&x)
            .unwrap()
            .bits_eq(&global_avg_pool(&x).unwrap()));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f32..50.0, 1..12), shift in -100.0f32..100.0) {
            let p = softmax(&Tensor::from_vec(z.clone()));
            let s: f64 = p.data().iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            let shifted: Vec<f32> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&Tensor::from_vec(shifted));
            prop_assert_eq!(argmax(p.data()), argmax(q.data()));
        }

        #[test]
        fn cross_entropy_matches_log_sum_exp(z in prop::collection::vec(-10.0f32..10.0, 2..10), y in 0usize..10) {
            let y = y % z.len();
            let ce = cross_entropy(&softmax(&Tensor::from_vec(z.clone())), y).unwrap();
            let direct = log_sum_exp(&z) - z[y] as f64;
            prop_assert!((ce - direct).abs() < 1e-5, "{} vs {}", ce, direct);
        }
    }
}
