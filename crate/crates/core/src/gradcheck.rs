//! Finite-difference verification of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{stact_forward_graph, AttentionParams, StactConfig, StactParams};
use crate::autodiff::{Graph, Var};
use crate::encoders::{ConvEncoder, EncoderParams};
use crate::error::Result;
use crate::params::Parameterized;
use crate::tensor::Tensor;
use crate::training::loss::{focal_loss_graph, FocalLossConfig};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

fn eval<'a, F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = f(&mut g, v)?;
    Ok(g.value(out).data()[0])
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences, over every entry of `x`.
pub fn grad_check<'a, F>(f: F, x: &'a Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    let entries: Vec<usize> = (0..x.len()).collect();
    grad_check_entries(&f, x, eps, &entries)
}

/// Like [`grad_check`] but only probes at most `max_entries` coordinates,
/// chosen by `seed`. Used for the 256×256 projection matrices.
pub fn grad_check_sampled<'a, F>(f: F, x: &'a Tensor, eps: f64, max_entries: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    let entries: Vec<usize> = if x.len() <= max_entries {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, x.len(), max_entries).into_vec();
        idx.sort_unstable();
        idx
    };
    grad_check_entries(&f, x, eps, &entries)
}

fn grad_check_entries<'a, F>(f: &F, x: &'a Tensor, eps: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let v = g.param(x, true);
        let out = f(&mut g, v)?;
        g.backward(out)?;
        g.grad_tensor(v)
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in entries {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// One line of the grad-check report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

type OpCase = (&'static str, fn(&mut Graph<'_>, Var, &Tensor) -> Result<Var>);

/// Every differentiable op, each reduced to a scalar through a weighted sum so
/// that all output entries contribute distinct gradients.
fn op_cases() -> Vec<OpCase> {
    fn reduce(g: &mut Graph<'_>, y: Var, w: &Tensor) -> Result<Var> {
        let n = g.value(y).len();
        let shape = g.value(y).shape().to_vec();
        let weights = g.constant(Tensor::new(&shape, w.data()[..n].to_vec())?);
        let p = g.hadamard(y, weights)?;
        Ok(g.sum(p))
    }
    vec![
        ("matmul", |g, x, w| {
            let (r, c) = g.value(x).dims2()?;
            let other = g.constant(Tensor::new(&[c, r], w.data()[..r * c].to_vec())?);
            let left = g.matmul(x, other)?;
            let right = g.matmul(other, x)?;
            let a = reduce(g, left, w)?;
            let b = reduce(g, right, w)?;
            g.add(a, b)
        }),
        ("transpose", |g, x, w| {
            let t = g.transpose(x)?;
            reduce(g, t, w)
        }),
        ("add_sub", |g, x, w| {
            let sq = g.hadamard(x, x)?;
            let a = g.add(x, sq)?;
            let s = g.sub(a, x)?;
            let s2 = g.sub(s, sq)?;
            let s3 = g.add(s2, sq)?;
            reduce(g, s3, w)
        }),
        ("add_row", |g, x, w| {
            let c = g.value(x).cols();
            let row = g.slice_last(x, 0, c)?;
            let first = g.mean_axis(row, 0)?;
            let y = g.add_row(x, first)?;
            reduce(g, y, w)
        }),
        ("scale_add_scalar", |g, x, w| {
            let s = g.scale(x, -1.7);
            let y = g.add_scalar(s, 0.3);
            reduce(g, y, w)
        }),
        ("hadamard", |g, x, w| {
            let y = g.hadamard(x, x)?;
            reduce(g, y, w)
        }),
        ("relu", |g, x, w| {
            let y = g.relu(x);
            reduce(g, y, w)
        }),
        ("sigmoid", |g, x, w| {
            let y = g.sigmoid(x);
            reduce(g, y, w)
        }),
        ("log", |g, x, w| {
            let sq = g.hadamard(x, x)?;
            let p = g.add_scalar(sq, 0.5);
            let y = g.log(p);
            reduce(g, y, w)
        }),
        ("pow", |g, x, w| {
            let sq = g.hadamard(x, x)?;
            let p = g.add_scalar(sq, 0.5);
            let y = g.pow(p, 2.4);
            reduce(g, y, w)
        }),
        ("clamp", |g, x, w| {
            let y = g.clamp(x, -0.6, 0.6);
            reduce(g, y, w)
        }),
        ("concat_slice", |g, x, w| {
            let c = g.value(x).cols();
            let sq = g.hadamard(x, x)?;
            let cat = g.concat(&[x, sq])?;
            let mid = g.slice_last(cat, c / 2, c)?;
            reduce(g, mid, w)
        }),
        ("mean_axis", |g, x, w| {
            let a = g.mean_axis(x, 0)?;
            let b = g.mean_axis(x, 1)?;
            let ra = reduce(g, a, w)?;
            let sq = g.hadamard(b, b)?;
            let rb = g.sum(sq);
            g.add(ra, rb)
        }),
        ("softmax_rows", |g, x, w| {
            let y = g.softmax_rows(x)?;
            reduce(g, y, w)
        }),
        ("gather_reshape", |g, x, w| {
            let n = g.value(x).len() as u32;
            let map: Vec<u32> = (0..n).rev().chain([crate::autodiff::GATHER_ZERO, 0, 0]).collect();
            let len = map.len();
            let y = g.gather(x, map.into(), &[len])?;
            let r = g.reshape(y, &[1, len])?;
            reduce(g, r, w)
        }),
    ]
}

fn attention_case(seed: u64, m: usize) -> (AttentionParams, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::init(crate::attention::EMBED_DIM, 4, &mut rng);
    let xq = uniform(&mut rng, &[m, crate::attention::EMBED_DIM], 1.0);
    let xkv = uniform(&mut rng, &[m, crate::attention::EMBED_DIM], 1.0);
    (p, xq, xkv)
}

/// Runs the full gradient-check suite: every tape op, the convolutional
/// encoder, both attention blocks and focal loss composed with the full
/// decoder, over 5 derived seeds and sequence lengths {1, 2, 5}.
///
/// Large parameter matrices are probed on `samples_per_tensor` random
/// coordinates each.
pub fn run_suite(seed: u64, samples_per_tensor: usize) -> Result<Vec<CheckResult>> {
    let eps = DEFAULT_EPS;
    let mut results = Vec::new();
    let mut record = |name: String, err: f64| {
        results.push(CheckResult {
            passed: err < PASS_THRESHOLD,
            name,
            max_rel_error: err,
        })
    };
    let seeds: Vec<u64> = (0..5).map(|i| seed.wrapping_mul(1000).wrapping_add(i)).collect();

    for (name, case) in op_cases() {
        let mut worst = 0.0f64;
        for &s in &seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let r = rng.random_range(1..=6);
            let c = rng.random_range(2..=6);
            let x = if name == "log" || name == "pow" {
                positive(&mut rng, &[r, c])
            } else {
                uniform(&mut rng, &[r, c], 1.5)
            };
            let w = uniform(&mut rng, &[128], 1.0);
            worst = worst.max(grad_check(|g, v| case(g, v, &w), &x, eps)?);
        }
        record(format!("op/{name}"), worst);
    }

    // Convolutional encoder: the input stack and every parameter tensor.
    {
        let side = 8;
        let enc = ConvEncoder::new(side)?;
        let mut worst_input = 0.0f64;
        let mut worst_params = 0.0f64;
        for &s in &seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let params = EncoderParams::init(&mut rng);
            let stack = uniform(&mut rng, &[3, side, side], 1.0);
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let focal = FocalLossConfig::default();
            worst_input = worst_input.max(grad_check(
                |g, v| {
                    let bound = params.bind(g, false);
                    let (_, logit) = enc.forward_graph(g, &bound, v)?;
                    focal_loss_graph(g, logit, y, &focal)
                },
                &stack,
                eps,
            )?);
            let names = params.param_names();
            for (k, name) in names.iter().enumerate() {
                let target = params.params()[k].clone();
                let err = grad_check_sampled(
                    |g, v| {
                        let mut leaves = params.bind(g, false);
                        leaves[k] = v;
                        let sv = g.param(&stack, false);
                        let (_, logit) = enc.forward_graph(g, &leaves, sv)?;
                        focal_loss_graph(g, logit, y, &focal)
                    },
                    &target,
                    eps,
                    samples_per_tensor,
                    s ^ k as u64,
                )?;
                log::debug!("encoder param {name}: {err:e}");
                worst_params = worst_params.max(err);
            }
        }
        record("encoder/input".into(), worst_input);
        record("encoder/params".into(), worst_params);
    }

    // Attention blocks, self (X, X) and cross (X, S).
    for &m in &[1usize, 2, 5] {
        let mut worst_self = 0.0f64;
        let mut worst_cross = 0.0f64;
        for &s in &seeds {
            let (p, xq, xkv) = attention_case(s ^ (m as u64) << 8, m);
            let w = {
                let mut rng = ChaCha8Rng::seed_from_u64(s + 17);
                uniform(&mut rng, &[m, crate::attention::EMBED_DIM], 1.0)
            };
            let cfg = StactConfig::default();
            worst_self = worst_self.max(grad_check_sampled(
                |g, v| {
                    let bound = p.bind(g, false);
                    let out = crate::attention::attention_block_graph(g, v, v, &bound, p.heads, &cfg)?.output;
                    let wv = g.constant(w.clone());
                    let h = g.hadamard(out, wv)?;
                    Ok(g.sum(h))
                },
                &xq,
                eps,
                samples_per_tensor,
                s,
            )?);
            worst_cross = worst_cross.max(grad_check_sampled(
                |g, v| {
                    let bound = p.bind(g, false);
                    let q = g.param(&xq, false);
                    let out = crate::attention::attention_block_graph(g, q, v, &bound, p.heads, &cfg)?.output;
                    let wv = g.constant(w.clone());
                    let h = g.hadamard(out, wv)?;
                    Ok(g.sum(h))
                },
                &xkv,
                eps,
                samples_per_tensor,
                s + 1,
            )?);
        }
        record(format!("attention/self/m={m}"), worst_self);
        record(format!("attention/cross/m={m}"), worst_cross);
    }

    // Focal loss composed with the full decoder, w.r.t. every parameter tensor
    // and both input sequences.
    for &m in &[1usize, 2, 5] {
        let mut worst = 0.0f64;
        for &s in &seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(99 + m as u64));
            let params = StactParams::init(StactConfig::default(), &mut rng);
            let i = uniform(&mut rng, &[m, crate::attention::EMBED_DIM], 1.0);
            let sg = uniform(&mut rng, &[m, crate::attention::EMBED_DIM], 1.0);
            let y = if s % 2 == 0 { 1.0 } else { 0.0 };
            let focal = FocalLossConfig::default();
            let n_params = params.params().len();
            for k in 0..n_params + 2 {
                let target = match k {
                    k if k < n_params => params.params()[k].clone(),
                    k if k == n_params => i.clone(),
                    _ => sg.clone(),
                };
                let err = grad_check_sampled(
                    |g, v| {
                        let mut leaves = params.bind(g, false);
                        let (iv, sv) = if k < n_params {
                            leaves[k] = v;
                            (g.param(&i, false), g.param(&sg, false))
                        } else if k == n_params {
                            (v, g.param(&sg, false))
                        } else {
                            (g.param(&i, false), v)
                        };
                        let logit = stact_forward_graph(g, &params, &leaves, iv, sv)?;
                        focal_loss_graph(g, logit, y, &focal)
                    },
                    &target,
                    eps,
                    samples_per_tensor,
                    s.wrapping_mul(31).wrapping_add(k as u64),
                )?;
                worst = worst.max(err);
            }
        }
        record(format!("focal∘stact/m={m}"), worst);
    }
    Ok(results)
}
