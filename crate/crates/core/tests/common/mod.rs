//! Independent oracles used by the integration tests. Everything here is
//! deliberately written as plain nested loops in f64, with no code shared
//! with the library implementations it checks.
#![allow(dead_code)]

use mecam_core::tensor::{Tape, Tensor};
use mecam_core::SplitMix64;

/// Direct cross-correlation, zero padding.
pub fn naive_conv2d(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    b: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wid] = xs;
    let [oc, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wid + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o] as f64;
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = yo * stride + ky;
                                let ix = xo * stride + kx;
                                if iy < pad || ix < pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                if iy >= h || ix >= wid {
                                    continue;
                                }
                                acc += x[((ni * cin + i) * h + iy) * wid + ix] as f64
                                    * w[((o * cin + i) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + yo) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, oc, oh, ow])
}

/// Brute-force window max for 2x2/2 pooling.
pub fn naive_max_pool(x: &[f32], xs: [usize; 4]) -> Vec<f32> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for ni in 0..n {
        for ch in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[((ni * c + ch) * h + yo * 2 + dy) * w + xo * 2 + dx];
                            best = best.max(v);
                        }
                    }
                    out[((ni * c + ch) * oh + yo) * ow + xo] = best;
                }
            }
        }
    }
    out
}

/// Naive summation mean over the spatial plane.
pub fn naive_gap(x: &[f32], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0f64; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for p in 0..h * w {
                acc += x[(ni * c + ch) * h * w + p] as f64;
            }
            out[ni * c + ch] = acc / (h * w) as f64;
        }
    }
    out
}

/// Scalar softmax over one lane.
pub fn scalar_softmax(lane: &[f32]) -> Vec<f64> {
    let m = lane.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let exps: Vec<f64> = lane.iter().map(|&v| (v as f64 - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Closed-form align-corners-false bilinear sampling of a single-channel map.
pub fn bilinear_ref(src: &[f32], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; th * tw];
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    for y in 0..th {
        for x in 0..tw {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let dy = fy - y0 as f64;
            let dx = fx - x0 as f64;
            let v00 = src[y0 * sw + x0] as f64;
            let v01 = src[y0 * sw + x1] as f64;
            let v10 = src[y1 * sw + x0] as f64;
            let v11 = src[y1 * sw + x1] as f64;
            out[y * tw + x] = v00 * (1.0 - dy) * (1.0 - dx)
                + v01 * (1.0 - dy) * dx
                + v10 * dy * (1.0 - dx)
                + v11 * dy * dx;
        }
    }
    out
}

/// Pairwise Mann-Whitney count with half-weight ties.
pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut num = 0.0f64;
    for &a in id {
        for &b in ood {
            if a > b {
                num += 1.0;
            } else if a == b {
                num += 0.5;
            }
        }
    }
    num / (id.len() as f64 * ood.len() as f64)
}

/// Exhaustive sweep over distinct score values: the largest threshold that
/// keeps at least `target_tpr` of the ID scores at or above it.
pub fn sweep_threshold(id: &[f64], target_tpr: f64) -> f64 {
    let mut distinct: Vec<f64> = id.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let n = id.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for &t in &distinct {
        let pass = id.iter().filter(|&&s| s >= t).count() as f64;
        if pass / n >= target_tpr && t > best {
            best = t;
        }
    }
    best
}

/// Central finite-difference gradient check. `loss_fn` must rebuild the
/// forward graph from the parameters' current values on every call.
///
/// Panics with a description of the first probe that exceeds
/// `max(rel_tol*|fd|, abs_floor)`.
pub fn check_gradients(
    params: &[Tensor],
    loss_fn: &dyn Fn(Option<&Tape>) -> Tensor,
    n_probes: usize,
    rng: &mut SplitMix64,
    rel_tol: f64,
    abs_floor: f64,
) {
    let tape = Tape::new();
    let loss = loss_fn(Some(&tape));
    tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f32>> = params.iter().map(|p| p.grad().expect("grad")).collect();
    for p in params {
        p.zero_grad();
    }

    let eps = 1e-3f32;
    for probe in 0..n_probes {
        let pi = rng.below(params.len());
        let ei = rng.below(params[pi].numel());
        let original = params[pi].to_vec();

        let mut plus = original.clone();
        plus[ei] += eps;
        params[pi].set_data(plus).unwrap();
        let lp = loss_fn(None).item().unwrap() as f64;

        let mut minus = original.clone();
        minus[ei] -= eps;
        params[pi].set_data(minus).unwrap();
        let lm = loss_fn(None).item().unwrap() as f64;

        params[pi].set_data(original).unwrap();

        let fd = (lp - lm) / (2.0 * eps as f64);
        let an = analytic[pi][ei] as f64;
        let tol = (rel_tol * fd.abs()).max(abs_floor);
        assert!(
            (an - fd).abs() <= tol,
            "probe {probe}: param {pi} elem {ei}: analytic {an} vs fd {fd} (tol {tol})"
        );
    }
}
