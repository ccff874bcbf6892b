//! Scalar-loop reference implementations shared by the integration tests.
//! Nothing here goes through the tape or the matmul kernel.
#![allow(dead_code)]

use stact_core::attention::{sinusoidal_pe, AttentionParams, StactConfig, StactParams};
use stact_core::encoders::EncoderParams;
use stact_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `x·W + b` with `W` stored row-major as `in × out`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = w.cols();
    let mut y = b.data().to_vec();
    for (o, yo) in y.iter_mut().enumerate().take(out) {
        for (i, xi) in x.iter().enumerate() {
            *yo += xi * w.at(i, o);
        }
    }
    y
}

/// Multi-head attention, one query row at a time.
pub fn attention(xq: &Mat, xkv: &Mat, p: &AttentionParams, cfg: &StactConfig) -> (Mat, Vec<Mat>) {
    let m = xq.len();
    let d = xq[0].len();
    let dk = d / p.heads;
    let q: Mat = xq.iter().map(|r| affine(r, &p.w_q, &p.b_q)).collect();
    let k: Mat = xkv.iter().map(|r| affine(r, &p.w_k, &p.b_k)).collect();
    let v: Mat = xkv.iter().map(|r| affine(r, &p.w_v, &p.b_v)).collect();
    let mut merged = vec![vec![0.0; d]; m];
    let mut weights = Vec::new();
    for h in 0..p.heads {
        let cols = h * dk..(h + 1) * dk;
        let mut w_h = vec![vec![0.0; m]; m];
        for a in 0..m {
            let mut scores: Vec<f64> = (0..m)
                .map(|b| cols.clone().map(|c| q[a][c] * k[b][c]).sum::<f64>())
                .collect();
            if cfg.use_scale {
                scores.iter_mut().for_each(|s| *s /= (dk as f64).sqrt());
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for b in 0..m {
                w_h[a][b] = exps[b] / z;
                for c in cols.clone() {
                    merged[a][c] += w_h[a][b] * v[b][c];
                }
            }
        }
        weights.push(w_h);
    }
    let mut out: Mat = merged.iter().map(|r| affine(r, &p.w_o, &p.b_o)).collect();
    if cfg.use_residual {
        for (o, x) in out.iter_mut().zip(xq) {
            o.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    (out, weights)
}

fn add_pe(x: &Mat, on: bool) -> Mat {
    if !on {
        return x.clone();
    }
    let pe = sinusoidal_pe(x.len(), x[0].len()).unwrap();
    x.iter()
        .enumerate()
        .map(|(r, row)| row.iter().zip(pe.row(r)).map(|(a, b)| a + b).collect())
        .collect()
}

/// Full decoder logit.
pub fn stact_logit(i: &Mat, s: &Mat, p: &StactParams) -> f64 {
    let cfg = p.config;
    let (i, s) = (add_pe(i, cfg.pe_enabled), add_pe(s, cfg.pe_enabled));
    let (a, _) = attention(&i, &i, &p.self_block, &cfg);
    let (c, _) = attention(&i, &s, &p.cross_block, &cfg);
    let m = i.len() as f64;
    let mut pooled = vec![0.0; a[0].len() + c[0].len()];
    for (ra, rc) in a.iter().zip(&c) {
        for (j, v) in ra.iter().chain(rc).enumerate() {
            pooled[j] += v / m;
        }
    }
    affine(&pooled, &p.head_w, &p.head_b)[0]
}

/// Stride-2, padding-1, 3×3 convolution followed by ReLU. `input[c][y][x]`;
/// `row(c, ky, kx)` selects the weight row for an input channel and tap.
fn conv(input: &[Mat], w: &Tensor, b: &Tensor, row: impl Fn(usize, usize, usize) -> usize) -> Vec<Mat> {
    let side = input[0].len();
    let out = (side - 1) / 2 + 1;
    (0..w.cols())
        .map(|f| {
            let mut plane = vec![vec![0.0; out]; out];
            for (oy, prow) in plane.iter_mut().enumerate() {
                for (ox, px) in prow.iter_mut().enumerate() {
                    let mut acc = b.data()[f];
                    for (c, ch) in input.iter().enumerate() {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < side && (ix as usize) < side {
                                    acc += ch[iy as usize][ix as usize] * w.at(row(c, ky, kx), f);
                                }
                            }
                        }
                    }
                    *px = acc.max(0.0);
                }
            }
            plane
        })
        .collect()
}

/// Two-layer CNN encoder on a `3 × side × side` stack: `(embedding, logit)`.
pub fn cnn(stack: &Tensor, p: &EncoderParams) -> (Vec<f64>, f64) {
    let side = stack.shape()[1];
    let input: Vec<Mat> = (0..3)
        .map(|c| {
            (0..side)
                .map(|y| (0..side).map(|x| stack.data()[c * side * side + y * side + x]).collect())
                .collect()
        })
        .collect();
    let a1 = conv(&input, &p.conv1_w, &p.conv1_b, |c, ky, kx| c * 9 + ky * 3 + kx);
    let c1 = a1.len();
    let a2 = conv(&a1, &p.conv2_w, &p.conv2_b, |c, ky, kx| (ky * 3 + kx) * c1 + c);
    let pooled: Vec<f64> = a2
        .iter()
        .map(|pl| pl.iter().flatten().sum::<f64>() / (pl.len() * pl.len()) as f64)
        .collect();
    let emb: Vec<f64> = affine(&pooled, &p.embed_w, &p.embed_b).into_iter().map(|v| v.max(0.0)).collect();
    let logit = affine(&emb, &p.head_w, &p.head_b)[0];
    (emb, logit)
}

/// `−α_t (1 − p_t)^γ ln p_t` with `p_t` clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal(logit: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    let (pt, at) = if y == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    let pt = pt.clamp(1e-7, 1.0 - 1e-7);
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

pub struct SgdState {
    pub v: Vec<f64>,
}

pub fn sgd_step(w: &mut [f64], g: &[f64], s: &mut SgdState, lr: f64, mu: f64) {
    for i in 0..w.len() {
        s.v[i] = mu * s.v[i] + g[i];
        w[i] -= lr * s.v[i];
    }
}

pub struct AdamState {
    pub t: i32,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn adamw_step(w: &mut [f64], g: &[f64], s: &mut AdamState, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
    s.t += 1;
    for i in 0..w.len() {
        w[i] *= 1.0 - lr * wd;
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = s.m[i] / (1.0 - b1.powi(s.t));
        let vh = s.v[i] / (1.0 - b2.powi(s.t));
        w[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// AUROC by counting every positive/negative pair, ties scoring one half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            np += 1;
        } else {
            nn += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (np > 0 && nn > 0).then(|| wins / (np * nn) as f64)
}

/// `(tp, fp, tn, fn)` at `prob ≥ threshold`.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}
