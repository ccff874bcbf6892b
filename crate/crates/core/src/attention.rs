//! Segmentation-augmented attention decoder.
//!
//! Both embedding sequences receive a sinusoidal positional encoding. Image
//! embeddings then pass through multi-head self-attention, and a second
//! multi-head block lets image embeddings query the segmentation embeddings.
//! The two `m×256` outputs are concatenated to `m×512`, mean-pooled over time
//! and mapped to a single malignancy logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, zero_bias, Parameterized};
use crate::tensor::Tensor;

/// Width of every per-stack embedding.
pub const EMBED_DIM: usize = 256;
pub const DEFAULT_HEADS: usize = 4;
const PE_BASE: f64 = 10000.0;

/// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(...)`.
pub fn sinusoidal_pe(steps: usize, dim: usize) -> Result<Tensor> {
    if steps == 0 || dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::contract(format!("positional encoding needs steps ≥ 1 and even dim, got {steps}×{dim}")));
    }
    let mut data = vec![0.0; steps * dim];
    for pos in 0..steps {
        for i in 0..dim / 2 {
            let angle = pos as f64 / PE_BASE.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[steps, dim], data)
}

/// Architecture switches shared by every decoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StactConfig {
    pub heads: usize,
    /// Divide attention scores by `√d_k`.
    pub use_scale: bool,
    /// Add the query input to each attention block's output.
    pub use_residual: bool,
    pub pe_enabled: bool,
}

impl Default for StactConfig {
    fn default() -> Self {
        Self {
            heads: DEFAULT_HEADS,
            use_scale: true,
            use_residual: false,
            pe_enabled: true,
        }
    }
}

impl StactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !EMBED_DIM.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("{EMBED_DIM} is not divisible by {} heads", self.heads)));
        }
        Ok(())
    }
}

/// Projections of one attention block. Matrices are `256×256` applied on the
/// right (`X·W + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub heads: usize,
}

const ATTN_NAMES: [&str; 8] = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"];

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            w_q: glorot(rng, dim, dim),
            b_q: zero_bias(dim),
            w_k: glorot(rng, dim, dim),
            b_k: zero_bias(dim),
            w_v: glorot(rng, dim, dim),
            b_v: zero_bias(dim),
            w_o: glorot(rng, dim, dim),
            b_o: zero_bias(dim),
            heads,
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        let m = || Tensor::zeros(&[dim, dim]);
        Self {
            w_q: m(),
            b_q: zero_bias(dim),
            w_k: m(),
            b_k: zero_bias(dim),
            w_v: m(),
            b_v: zero_bias(dim),
            w_o: m(),
            b_o: zero_bias(dim),
            heads,
        }
    }

    pub(crate) fn from_named(tensors: &[(String, Tensor)], prefix: &str, heads: usize) -> Result<Self> {
        let get = |n: &str| named(tensors, &format!("{prefix}{n}"), if n.starts_with('w') { [EMBED_DIM, EMBED_DIM] } else { [1, EMBED_DIM] });
        Ok(Self {
            w_q: get("w_q")?,
            b_q: get("b_q")?,
            w_k: get("w_k")?,
            b_k: get("b_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
            heads,
        })
    }
}

pub(crate) fn named(tensors: &[(String, Tensor)], name: &str, shape: [usize; 2]) -> Result<Tensor> {
    let t = tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::contract(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::contract(format!("{name}: expected shape {shape:?}, found {:?}", t.shape())));
    }
    Ok(t)
}

impl Parameterized for AttentionParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    fn param_names(&self) -> Vec<String> {
        ATTN_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

/// Nodes produced by one attention block.
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `m×m` attention weights, one per head.
    pub weights: Vec<Var>,
}

/// Records multi-head attention with queries from `x_q` and keys/values from
/// `x_kv`. `leaves` are the 8 bound projection tensors in
/// [`Parameterized::params`] order.
pub fn attention_block_graph(
    g: &mut Graph<'_>,
    x_q: Var,
    x_kv: Var,
    leaves: &[Var],
    heads: usize,
    cfg: &StactConfig,
) -> Result<AttentionOutput> {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = leaves else {
        return Err(Error::contract(format!("attention expects 8 parameter leaves, got {}", leaves.len())));
    };
    let (mq, dq) = g.value(x_q).dims2()?;
    let (mk, dk_in) = g.value(x_kv).dims2()?;
    if mq != mk || dq != dk_in {
        return Err(Error::dim("attention_block", g.value(x_q).shape(), g.value(x_kv).shape()));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::contract(format!("{dq} is not divisible by {heads} heads")));
    }
    let dk = dq / heads;
    let q = g.matmul(x_q, *wq)?;
    let q = g.add_row(q, *bq)?;
    let k = g.matmul(x_kv, *wk)?;
    let k = g.add_row(k, *bk)?;
    let v = g.matmul(x_kv, *wv)?;
    let v = g.add_row(v, *bv)?;
    let mut head_out = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(q, h * dk, dk)?;
        let kh = g.slice_last(k, h * dk, dk)?;
        let vh = g.slice_last(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let mut scores = g.matmul(qh, kt)?;
        if cfg.use_scale {
            scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        }
        let attn = g.softmax_rows(scores)?;
        weights.push(attn);
        head_out.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&head_out)?;
    let out = g.matmul(merged, *wo)?;
    let mut out = g.add_row(out, *bo)?;
    if cfg.use_residual {
        out = g.add(out, x_q)?;
    }
    Ok(AttentionOutput { output: out, weights })
}

/// Value-level attention block. Returns the `m×256` output and the per-head
/// attention weights.
pub fn attention_block(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &AttentionParams,
    cfg: &StactConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let leaves = params.bind(&mut g, false);
    let q = g.param(x_q, false);
    let kv = g.param(x_kv, false);
    let out = attention_block_graph(&mut g, q, kv, &leaves, params.heads, cfg)?;
    let weights = out.weights.iter().map(|&w| g.value(w).clone()).collect();
    Ok((g.value(out.output).clone(), weights))
}

/// All learnable weights of the full decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StactParams {
    pub config: StactConfig,
    pub self_block: AttentionParams,
    pub cross_block: AttentionParams,
    /// `512×1`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl StactParams {
    pub fn init<R: Rng + ?Sized>(config: StactConfig, rng: &mut R) -> Self {
        Self {
            config,
            self_block: AttentionParams::init(EMBED_DIM, config.heads, rng),
            cross_block: AttentionParams::init(EMBED_DIM, config.heads, rng),
            head_w: glorot(rng, 2 * EMBED_DIM, 1),
            head_b: zero_bias(1),
        }
    }

    pub fn zeros(config: StactConfig) -> Self {
        Self {
            config,
            self_block: AttentionParams::zeros(EMBED_DIM, config.heads),
            cross_block: AttentionParams::zeros(EMBED_DIM, config.heads),
            head_w: Tensor::zeros(&[2 * EMBED_DIM, 1]),
            head_b: zero_bias(1),
        }
    }

    pub fn from_named(tensors: &[(String, Tensor)], prefix: &str, config: StactConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            self_block: AttentionParams::from_named(tensors, &format!("{prefix}self."), config.heads)?,
            cross_block: AttentionParams::from_named(tensors, &format!("{prefix}cross."), config.heads)?,
            head_w: named(tensors, &format!("{prefix}head.weight"), [2 * EMBED_DIM, 1])?,
            head_b: named(tensors, &format!("{prefix}head.bias"), [1, 1])?,
        })
    }
}

impl Parameterized for StactParams {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.self_block.params();
        v.extend(self.cross_block.params());
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.self_block.params_mut();
        v.extend(self.cross_block.params_mut());
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ATTN_NAMES.iter().map(|n| format!("self.{n}")).collect();
        v.extend(ATTN_NAMES.iter().map(|n| format!("cross.{n}")));
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }
}

/// Adds the positional encoding to `x` when enabled.
pub(crate) fn with_pe(g: &mut Graph<'_>, x: Var, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let (m, d) = g.value(x).dims2()?;
    let pe = g.constant(sinusoidal_pe(m, d)?);
    g.add(x, pe)
}

pub(crate) fn check_sequences(g: &Graph<'_>, i: Var, s: Var) -> Result<()> {
    let (mi, di) = g.value(i).dims2()?;
    let (ms, ds) = g.value(s).dims2()?;
    if g.value(i).rank() != 2 || mi != ms || di != EMBED_DIM || ds != EMBED_DIM {
        return Err(Error::dim("stact_forward", g.value(i).shape(), g.value(s).shape()));
    }
    Ok(())
}

/// Records the full forward pass and returns the `1×1` logit node.
pub fn stact_forward_graph(g: &mut Graph<'_>, params: &StactParams, leaves: &[Var], i: Var, s: Var) -> Result<Var> {
    Ok(stact_forward_detailed(g, params, leaves, i, s)?.logit)
}

pub struct StactNodes {
    pub logit: Var,
    pub self_attention: AttentionOutput,
    pub cross_attention: AttentionOutput,
}

pub fn stact_forward_detailed(
    g: &mut Graph<'_>,
    params: &StactParams,
    leaves: &[Var],
    i: Var,
    s: Var,
) -> Result<StactNodes> {
    if leaves.len() != 18 {
        return Err(Error::contract(format!("decoder expects 18 parameter leaves, got {}", leaves.len())));
    }
    check_sequences(g, i, s)?;
    let cfg = params.config;
    let i_pe = with_pe(g, i, cfg.pe_enabled)?;
    let s_pe = with_pe(g, s, cfg.pe_enabled)?;
    let self_att = attention_block_graph(g, i_pe, i_pe, &leaves[0..8], cfg.heads, &cfg)?;
    let cross_att = attention_block_graph(g, i_pe, s_pe, &leaves[8..16], cfg.heads, &cfg)?;
    let fused = g.concat(&[self_att.output, cross_att.output])?;
    let pooled = g.mean_axis(fused, 0)?;
    let logit = g.matmul(pooled, leaves[16])?;
    let logit = g.add_row(logit, leaves[17])?;
    Ok(StactNodes {
        logit,
        self_attention: self_att,
        cross_attention: cross_att,
    })
}

/// Value-level forward: `(logit, probability)`.
pub fn stact_forward(i: &Tensor, s: &Tensor, params: &StactParams) -> Result<(f64, f64)> {
    if i.rank() != 2 || i.rows() == 0 {
        return Err(Error::contract("stact_forward needs at least one time step"));
    }
    let mut g = Graph::new();
    let leaves = params.bind(&mut g, false);
    let iv = g.param(i, false);
    let sv = g.param(s, false);
    let logit = stact_forward_graph(&mut g, params, &leaves, iv, sv)?;
    let l = g.value(logit).data()[0];
    Ok((l, sigmoid(l)))
}
