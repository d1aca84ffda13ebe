//! Helpers shared by the integration tests: brute-force reference
//! implementations, random instance generators and gradient checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acat_core::defense::{
    binarize, compute_heatmap, update_threshold, update_trace, AdversarialTrace, DefenseFlags, DefenseParams,
    MarginCenter,
};
use acat_core::net::{GradientTape, Layer, SlicedNetwork};
use acat_core::tensor::{expand_mask, percentile, ActivationTensor, BinaryMask, ConvKernel, ExpandMode, Heatmap};
use acat_core::AcatError;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| <= tol * max(|a|, |b|)`, with exact equality required at zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub mod oracle {
    use super::*;

    /// Sort, then interpolate between the neighbouring ranks of `(n-1)v/100`.
    pub fn percentile(values: &[f64], v: f64) -> f64 {
        let mut s = values.to_vec();
        // Insertion sort keeps this independent of the library's sort.
        for i in 1..s.len() {
            let mut j = i;
            while j > 0 && s[j - 1] > s[j] {
                s.swap(j - 1, j);
                j -= 1;
            }
        }
        let pos = (s.len() - 1) as f64 * v / 100.0;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        s[lo] + frac * (s[hi] - s[lo])
    }

    /// Direct `k x k` all-ones convolution with zero padding, then `> t`.
    pub fn expand_mask(adv: &BinaryMask, k: usize, t: f64) -> Vec<u8> {
        let (h, w) = adv.dims();
        let r = (k / 2) as i64;
        let mut out = vec![0u8; h * w];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut sum = 0.0;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, x) = (i + di, j + dj);
                        if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                            sum += f64::from(adv.get(y as usize, x as usize));
                        }
                    }
                }
                out[(i * w as i64 + j) as usize] = u8::from(sum > t);
            }
        }
        out
    }

    /// Full 2-D Gaussian with `sigma = k / 4`, replicate edges.
    pub fn gaussian(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
        if k == 1 {
            return map.to_vec();
        }
        let sigma = k as f64 / 4.0;
        let r = (k / 2) as i64;
        let mut norm = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                norm += (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut acc = 0.0;
                for a in -r..=r {
                    for b in -r..=r {
                        let y = (i + a).clamp(0, h as i64 - 1) as usize;
                        let x = (j + b).clamp(0, w as i64 - 1) as usize;
                        let g = (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                        acc += g * map[y * w + x];
                    }
                }
                out[(i * w as i64 + j) as usize] = acc;
            }
        }
        out
    }

    pub fn heatmap(h: &ActivationTensor, sigma: &[f64], params: &DefenseParams) -> Vec<f64> {
        let (c, hh, ww) = h.dims();
        let attention = params.flags.att_plus || params.flags.att_minus;
        let mut map = vec![0.0; hh * ww];
        for i in 0..hh {
            for j in 0..ww {
                let mut acc = 0.0;
                for ch in 0..c {
                    let weight = if attention { sigma[ch].powf(params.tau) } else { 1.0 };
                    acc += weight * h.get(ch, i, j);
                }
                map[i * ww + j] = acc;
            }
        }
        if params.flags.nf {
            gaussian(&map, hh, ww, params.gaussian_kernel)
        } else {
            map
        }
    }

    pub fn binarize(map: &[f64], xi: f64) -> Vec<u8> {
        map.iter().map(|&v| if v > xi { 0 } else { 1 }).collect()
    }

    /// `None` for a degenerate mask.
    pub fn trace(h: &ActivationTensor, mask: &BinaryMask, flags: &DefenseFlags) -> Option<Vec<f64>> {
        let (c, hh, ww) = h.dims();
        let mut d = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut sa, mut na, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..hh {
                for j in 0..ww {
                    if mask.get(i, j) == 0 {
                        sa += h.get(ch, i, j);
                        na += 1;
                    } else {
                        sc += h.get(ch, i, j);
                        nc += 1;
                    }
                }
            }
            if na == 0 || nc == 0 {
                return None;
            }
            let mut v = 0.0;
            if flags.att_plus {
                v += sa / na as f64;
            }
            if flags.att_minus {
                v -= sc / nc as f64;
            }
            d.push(if v > 0.0 { v } else { 0.0 });
        }
        let mut lo = d[0];
        let mut hi = d[0];
        for &v in &d {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Some(if hi == lo {
            vec![if hi > 0.0 { 1.0 } else { 0.0 }; c]
        } else {
            d.iter().map(|v| (v - lo) / (hi - lo)).collect()
        })
    }

    pub fn threshold(map: &[f64], mask: &BinaryMask, params: &DefenseParams) -> Option<f64> {
        let excluded = expand_mask(&mask.complement(), params.dilation_kernel, 0.5);
        let clean: Vec<f64> = map
            .iter()
            .zip(&excluded)
            .filter(|(_, &e)| e == 0)
            .map(|(&v, _)| v)
            .collect();
        if clean.is_empty() {
            return None;
        }
        let mut max = clean[0];
        for &v in &clean {
            if v > max {
                max = v;
            }
        }
        let center = match params.margin_center {
            MarginCenter::Median => percentile(&clean, 50.0),
            MarginCenter::Mean => clean.iter().sum::<f64>() / clean.len() as f64,
        };
        Some(max + (percentile(&clean, params.percentile_v) - center))
    }
}

/// Random activation with some repeated values so ties are exercised.
pub fn random_activation(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ActivationTensor {
    let quantized = rng.gen_bool(0.3);
    ActivationTensor::from_fn(c, h, w, |_, _, _| {
        if quantized {
            f64::from(rng.gen_range(0..4u8)) * 0.5
        } else if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(0.0..3.0)
        }
    })
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p_adv: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| !rng.gen_bool(p_adv))
}

/// A mask with at least one pixel of each kind.
pub fn random_mixed_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    assert!(h * w >= 2);
    loop {
        let p = rng.gen_range(0.1..0.6);
        let m = random_mask(rng, h, w, p);
        if m.count_zeros() > 0 && m.count_ones() > 0 {
            return m;
        }
    }
}

pub fn random_flags(rng: &mut impl Rng) -> DefenseFlags {
    DefenseFlags {
        att_plus: rng.gen(),
        att_minus: rng.gen(),
        upd: rng.gen(),
        nf: rng.gen(),
    }
}

pub fn random_params(rng: &mut impl Rng) -> DefenseParams {
    let odd = |rng: &mut ChaCha8Rng| [1, 3, 5][rng.gen_range(0..3)];
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    DefenseParams {
        tau: r.gen_range(1.0..3.0),
        gaussian_kernel: odd(&mut r),
        dilation_kernel: odd(&mut r),
        percentile_v: if r.gen_bool(0.2) { [0.0, 50.0, 100.0][r.gen_range(0..3)] } else { r.gen_range(0.0..100.0) },
        margin_center: if r.gen_bool(0.5) { MarginCenter::Median } else { MarginCenter::Mean },
        flags: random_flags(&mut r),
        ..DefenseParams::default()
    }
}

/// Outcome of one operation's comparison against its oracle.
#[derive(Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub failures: Vec<String>,
}

impl OracleReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok && self.failures.len() < 5 {
            self.failures.push(what());
        }
    }
}

fn all_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| rel_close(*x, *y, tol))
}

/// Compares the six defense primitives with their oracles on `n` random
/// instances each (at most 4 channels and 8x8).
pub fn run_oracles(seed: u64, n: usize, tol: f64) -> Vec<OracleReport> {
    let mut r = rng(seed);
    let mut reports: Vec<OracleReport> = [
        "percentile",
        "expand_mask",
        "binarize",
        "compute_heatmap",
        "update_trace",
        "update_threshold",
    ]
    .into_iter()
    .map(OracleReport::new)
    .collect();

    for k in 0..n {
        let c = r.gen_range(1..=4);
        let (h, w) = loop {
            let d = (r.gen_range(1..=8), r.gen_range(1..=8));
            if d.0 * d.1 >= 2 {
                break d;
            }
        };
        let act = random_activation(&mut r, c, h, w);
        let mask = random_mixed_mask(&mut r, h, w);
        let params = random_params(&mut r);

        // percentile
        let len = r.gen_range(1..=64);
        let values: Vec<f64> = (0..len).map(|_| r.gen_range(-5.0..5.0)).collect();
        let v = params.percentile_v;
        let got = percentile(&values, v).unwrap();
        let want = oracle::percentile(&values, v);
        reports[0].check(rel_close(got, want, tol), || format!("instance {k}: {got} vs {want}"));

        // expand_mask
        let kernel = [1, 3, 5, 7][r.gen_range(0..4)];
        let t = [0.5, 0.5, 1.5, 2.5][r.gen_range(0..4)];
        let adv = random_mask(&mut r, h, w, 0.2);
        let got = expand_mask(&adv, kernel, t, ExpandMode::Dilate).unwrap();
        let want = oracle::expand_mask(&adv, kernel, t);
        reports[1].check(got.data() == want.as_slice(), || format!("instance {k}: kernel {kernel}"));

        // binarize
        let map_vals: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..4.0)).collect();
        let map = Heatmap::new(h, w, map_vals.clone()).unwrap();
        let xi = if r.gen_bool(0.3) { map_vals[r.gen_range(0..h * w)] } else { r.gen_range(-1.0..5.0) };
        let got = binarize(&map, xi);
        reports[2].check(got.data() == oracle::binarize(&map_vals, xi).as_slice(), || {
            format!("instance {k}: xi {xi}")
        });

        // compute_heatmap with a random trace
        let sigma: Vec<f64> = (0..c).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..=1.0) }).collect();
        let trace = AdversarialTrace::new(sigma.clone()).unwrap();
        let got = compute_heatmap(&act, &trace, &params).unwrap();
        let want = oracle::heatmap(&act, &sigma, &params);
        reports[3].check(all_close(got.data(), &want, tol), || format!("instance {k}: {params:?}"));

        // update_trace
        let got = update_trace(&act, &mask, &params.flags).unwrap();
        let want = oracle::trace(&act, &mask, &params.flags).expect("mixed mask");
        reports[4].check(all_close(got.weights(), &want, tol), || {
            format!("instance {k}: {:?} vs {want:?}", got.weights())
        });
        let empty = BinaryMask::ones(h, w);
        reports[4].check(
            matches!(update_trace(&act, &empty, &params.flags), Err(AcatError::DegenerateMask(_))),
            || format!("instance {k}: all-clean mask accepted"),
        );

        // update_threshold, both sides fed the same heatmap
        let map = oracle::heatmap(&act, &want, &params);
        let got = update_threshold(&Heatmap::new(h, w, map.clone()).unwrap(), &mask, &params)
            .unwrap()
            .map(|t| t.xi);
        let want = oracle::threshold(&map, &mask, &params);
        reports[5].check(
            match (got, want) {
                (Some(a), Some(b)) => rel_close(a, b, tol),
                (None, None) => true,
                _ => false,
            },
            || format!("instance {k}: {got:?} vs {want:?}"),
        );

        for rep in &mut reports {
            rep.instances += 1;
        }
    }
    reports
}

/// Largest elementwise relative error between analytic and central
/// finite-difference gradients of `L = sum(r * f(x))` for a one-layer net.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub input_err: f64,
    pub param_err: f64,
}

fn grad_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Builds a conv layer whose pre-activations stay at least `margin` away
/// from zero on `x`, so ReLU kinks cannot distort central differences.
fn conv_away_from_kinks(
    rng: &mut ChaCha8Rng,
    x: &ActivationTensor,
    out_c: usize,
    k: usize,
    stride: usize,
    relu: bool,
    margin: f64,
) -> Layer {
    let in_c = x.channels();
    loop {
        let kernel = ConvKernel::new(out_c, in_c, k, k, (0..out_c * in_c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let bias: Vec<f64> = (0..out_c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let linear = Layer::Conv {
            kernel: kernel.clone(),
            bias: bias.clone(),
            stride,
            padding: k / 2,
            relu: false,
        };
        if relu {
            let pre = SlicedNetwork::new(vec![linear]).unwrap().forward(x).unwrap();
            if pre.data().iter().any(|v| v.abs() < margin) {
                continue;
            }
        }
        return Layer::Conv {
            kernel,
            bias,
            stride,
            padding: k / 2,
            relu,
        };
    }
}

fn with_params(layer: &Layer, params: &[f64]) -> Layer {
    match layer {
        Layer::Conv {
            kernel,
            bias,
            stride,
            padding,
            relu,
        } => {
            let nw = kernel.weights.len();
            Layer::Conv {
                kernel: ConvKernel::new(
                    kernel.out_channels,
                    kernel.in_channels,
                    kernel.kernel_h,
                    kernel.kernel_w,
                    params[..nw].to_vec(),
                )
                .unwrap(),
                bias: params[nw..nw + bias.len()].to_vec(),
                stride: *stride,
                padding: *padding,
                relu: *relu,
            }
        }
        other => other.clone(),
    }
}

/// Finite-difference check of one layer.
pub fn check_layer(layer: Layer, x: &ActivationTensor, rng: &mut ChaCha8Rng, step: f64) -> GradCheck {
    // Networks must open with a conv, so an identity 1x1 sits in front and
    // only the slice 1 -> 2 is differentiated.
    let c = x.channels();
    let eye: Vec<f64> = (0..c * c).map(|k| if k / c == k % c { 1.0 } else { 0.0 }).collect();
    let identity = Layer::Conv {
        kernel: ConvKernel::new(c, c, 1, 1, eye).unwrap(),
        bias: vec![0.0; c],
        stride: 1,
        padding: 0,
        relu: false,
    };
    let build = |l: Layer| SlicedNetwork::new(vec![identity.clone(), l]).unwrap();
    let slice_sum = |net: &SlicedNetwork, x: &ActivationTensor, r: &ActivationTensor| -> f64 {
        let y = net.forward_slice(x, 1, 2).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let net = build(layer.clone());
    let y = net.forward_slice(x, 1, 2).unwrap();
    let r = ActivationTensor::from_fn(y.channels(), y.height(), y.width(), |_, _, _| rng.gen_range(-1.0..1.0));
    let mut tape = GradientTape::new();
    net.forward_recorded(x, 1, 2, &mut tape).unwrap();
    net.backward(&mut tape, &r, &[]).unwrap();
    let gx = tape.input_grad().unwrap().clone();

    let mut input_err: f64 = 0.0;
    let (ch, h, w) = x.dims();
    for idx in 0..x.data().len() {
        let mut plus = x.clone().into_data();
        let mut minus = plus.clone();
        plus[idx] += step;
        minus[idx] -= step;
        let lp = slice_sum(&net, &ActivationTensor::new(ch, h, w, plus).unwrap(), &r);
        let lm = slice_sum(&net, &ActivationTensor::new(ch, h, w, minus).unwrap(), &r);
        input_err = input_err.max(grad_err(gx.data()[idx], (lp - lm) / (2.0 * step)));
    }

    let mut param_err: f64 = 0.0;
    let params = net.params().split_off(c * c + c);
    if !params.is_empty() {
        let pg = &tape.param_grads()[1];
        let analytic: Vec<f64> = pg.weights.iter().chain(&pg.bias).copied().collect();
        for idx in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let np = build(with_params(&layer, &plus));
            let nm = build(with_params(&layer, &minus));
            let fd = (slice_sum(&np, x, &r) - slice_sum(&nm, x, &r)) / (2.0 * step);
            param_err = param_err.max(grad_err(analytic[idx], fd));
        }
    }
    GradCheck { input_err, param_err }
}

/// The layer kinds of the toy network, each checked on a random instance.
pub fn layer_gradient_checks(seed: u64, step: f64) -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let x = random_activation(&mut r, 3, 8, 8);
    let x = ActivationTensor::from_fn(3, 8, 8, |c, i, j| x.get(c, i, j) + r.gen_range(-0.1..0.1));
    for (name, stride, relu, k) in [
        ("conv3x3+relu", 1, true, 3),
        ("conv3x3/2+relu", 2, true, 3),
        ("conv1x1", 1, false, 1),
    ] {
        let layer = conv_away_from_kinks(&mut r, &x, 4, k, stride, relu, 1e-3);
        out.push((name, check_layer(layer, &x, &mut r, step)));
    }
    out.push((
        "upsample x4",
        check_layer(Layer::Upsample { factor: 4 }, &x, &mut r, step),
    ));
    out
}

/// True when every slice split reproduces the full forward bit for bit.
pub fn slicing_identity_holds(net: &SlicedNetwork, x: &ActivationTensor) -> bool {
    let full = net.forward(x).unwrap();
    let bits = |t: &ActivationTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    (0..=net.num_layers()).all(|j| {
        let mid = net.forward_slice(x, 0, j).unwrap();
        let out = net.forward_slice(&mid, j, net.num_layers()).unwrap();
        out.dims() == full.dims() && bits(&out) == bits(&full)
    })
}
