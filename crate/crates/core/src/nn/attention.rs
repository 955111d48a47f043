//! Multi-head attention, deformable grid attention and pre-norm stacks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{check_width, Linear, Mlp};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_sample_points: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 64,
            num_heads: 4,
            num_layers: 3,
            num_sample_points: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model.attention.model_dim",
                format!("{} is not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        if self.num_sample_points == 0 {
            return Err(Error::config("model.attention.num_sample_points", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.init_const(format!("{}.gain", self.name), &[self.dim], 1.0)?;
        store.init_const(format!("{}.bias", self.name), &[self.dim], 0.0)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_width(g, x, self.dim, &self.name)?;
        let gain = g.param(&format!("{}.gain", self.name));
        let bias = g.param(&format!("{}.bias", self.name));
        Ok(g.layer_norm_rows(x, gain, bias))
    }
}

/// Scaled dot-product attention with `heads` heads. Keys and values are
/// projections of a shared memory of width `kv_dim`. The key projection is
/// folded into the query side, so logits are `(Q_h W_kᵀ) Xᵀ / √d_h` and the
/// memory is never projected as a whole. Key bias is omitted: it adds the
/// same amount to every logit in a row.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub kv_dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, dim: usize, kv_dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            name: name.into(),
            dim,
            kv_dim,
            heads,
        }
    }

    fn p(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d, kv) = (self.dim, self.kv_dim);
        store.init_uniform(self.p("wq"), &[d, d], d, rng)?;
        store.init_uniform(self.p("bq"), &[d], d, rng)?;
        store.init_uniform(self.p("wk"), &[kv, d], kv, rng)?;
        store.init_uniform(self.p("wv"), &[kv, d], kv, rng)?;
        store.init_uniform(self.p("bv"), &[d], kv, rng)?;
        store.init_uniform(self.p("wo"), &[d, d], d, rng)?;
        store.init_uniform(self.p("bo"), &[d], d, rng)
    }

    pub fn output_params(&self) -> Vec<String> {
        vec![self.p("wo"), self.p("bo")]
    }

    pub fn value_params(&self) -> Vec<String> {
        vec![self.p("wv"), self.p("bv")]
    }

    /// `queries: [Nq × dim]`, `memory: [Nk × kv_dim]`. `mask[i·Nk + j]`
    /// hides key `j` from query `i`. Returns the branch output (before the
    /// residual) and the per-head attention weights.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, mask: Option<&[bool]>) -> Result<(Var, Vec<Var>)> {
        check_width(g, queries, self.dim, &self.name)?;
        check_width(g, memory, self.kv_dim, &self.name)?;
        let (nq, _) = g.dims(queries);
        let (nk, _) = g.dims(memory);
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(Error::shape(
                    &self.name,
                    format!("mask has {} entries for {nq}x{nk} logits", m.len()),
                ));
            }
        }
        let dh = self.dim / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let wq = g.param(&self.p("wq"));
        let bq = g.param(&self.p("bq"));
        let wk = g.param(&self.p("wk"));
        let wv = g.param(&self.p("wv"));
        let bv = g.param(&self.p("bv"));
        let wo = g.param(&self.p("wo"));
        let bo = g.param(&self.p("bo"));

        let qw = g.matmul(queries, wq);
        let q = g.add(qw, bq);
        let mut heads_out = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let wkh = g.slice_cols(wk, h * dh, dh);
            let qk = g.matmul_nt(qh, wkh);
            let raw = g.matmul_nt(qk, memory);
            let logits = g.scale(raw, inv_sqrt);
            if g.value(logits).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{} attention logits", self.name)));
            }
            let a = g.softmax_rows(logits, mask);
            let ax = g.matmul(a, memory);
            let wvh = g.slice_cols(wv, h * dh, dh);
            heads_out.push(g.matmul(ax, wvh));
            weights.push(a);
        }
        let cat = g.concat_cols(&heads_out);
        let v = g.add(cat, bv);
        let o = g.matmul(v, wo);
        Ok((g.add(o, bo), weights))
    }
}

/// Grid attention that samples a few bilinear taps around a reference
/// point per head instead of attending to every cell.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub name: String,
    pub dim: usize,
    pub mem_dim: usize,
    pub heads: usize,
    pub points: usize,
    offsets: Linear,
    logits: Linear,
}

pub struct DeformableOutput {
    pub out: Var,
    /// `[Nq·heads·points × mem_dim]`, row `(q·heads + h)·points + p`.
    pub samples: Var,
    /// `[Nq·heads × points]`, rows sum to one.
    pub weights: Var,
    /// `[Nq·heads·points × 2]` normalized sampling locations.
    pub locations: Var,
}

impl DeformableAttention {
    pub fn new(name: impl Into<String>, dim: usize, mem_dim: usize, heads: usize, points: usize) -> Self {
        let name = name.into();
        DeformableAttention {
            offsets: Linear::new(format!("{name}.offsets"), dim, heads * points * 2),
            logits: Linear::new(format!("{name}.logits"), dim, heads * points),
            name,
            dim,
            mem_dim,
            heads,
            points,
        }
    }

    fn p(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    /// Offset weights start at zero and the bias spreads each head's
    /// points on a ring of growing radius (in cells).
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.offsets.init(store, rng)?;
        store.get_mut(&self.offsets.weight()).unwrap().data_mut().fill(0.0);
        let bias = store.get_mut(&self.offsets.bias()).unwrap().data_mut();
        for h in 0..self.heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / self.heads as f64;
            for pt in 0..self.points {
                let r = (pt + 1) as f64;
                let k = (h * self.points + pt) * 2;
                bias[k] = r * theta.cos();
                bias[k + 1] = r * theta.sin();
            }
        }
        self.logits.init(store, rng)?;
        let (d, m) = (self.dim, self.mem_dim);
        store.init_uniform(self.p("wv"), &[m, d], m, rng)?;
        store.init_uniform(self.p("bv"), &[d], m, rng)?;
        store.init_uniform(self.p("wo"), &[d, d], d, rng)?;
        store.init_uniform(self.p("bo"), &[d], d, rng)
    }

    pub fn output_params(&self) -> Vec<String> {
        vec![self.p("wo"), self.p("bo")]
    }

    pub fn value_params(&self) -> Vec<String> {
        vec![self.p("wv"), self.p("bv")]
    }

    pub fn offset_params(&self) -> Vec<String> {
        vec![self.offsets.weight(), self.offsets.bias()]
    }

    /// `queries: [Nq × dim]`, `refs: [Nq × 2]` in `[0,1]²`,
    /// `memory: [height·width × mem_dim]` in row-major cell order.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        refs: Var,
        memory: Var,
        height: usize,
        width: usize,
    ) -> Result<DeformableOutput> {
        check_width(g, queries, self.dim, &self.name)?;
        check_width(g, memory, self.mem_dim, &self.name)?;
        let (nq, _) = g.dims(queries);
        if g.dims(refs) != (nq, 2) {
            return Err(Error::shape(
                &self.name,
                format!("reference points {:?}, want ({nq}, 2)", g.dims(refs)),
            ));
        }
        if g.dims(memory).0 != height * width {
            return Err(Error::shape(&self.name, "memory rows differ from grid cell count"));
        }
        let (hh, pp) = (self.heads, self.points);
        let off = self.offsets.forward(g, queries)?;
        let off = g.reshape(off, nq * hh * pp, 2);
        let cell = g.constant(1, 2, vec![1.0 / width as f64, 1.0 / height as f64]);
        let off = g.mul(off, cell);
        let rep: Vec<usize> = (0..nq).flat_map(|q| std::iter::repeat(q).take(hh * pp)).collect();
        let base = g.gather_rows(refs, &rep);
        let locations = g.add(base, off);
        let samples = g.bilinear_sample(memory, height, width, locations);

        let lg = self.logits.forward(g, queries)?;
        let lg = g.reshape(lg, nq * hh, pp);
        let weights = g.softmax_rows(lg, None);
        let wcol = g.reshape(weights, nq * hh * pp, 1);
        let weighted = g.mul(samples, wcol);
        let pooled = g.group_sum_rows(weighted, pp);

        let wv = g.param(&self.p("wv"));
        let bv = g.param(&self.p("bv"));
        let wo = g.param(&self.p("wo"));
        let bo = g.param(&self.p("bo"));
        let proj = g.matmul(pooled, wv);
        let per_head = g.head_select(proj, hh);
        let v = g.add(per_head, bv);
        let o = g.matmul(v, wo);
        let out = g.add(o, bo);
        Ok(DeformableOutput {
            out,
            samples,
            weights,
            locations,
        })
    }
}

/// What a stack's cross-attention sublayers read from.
pub enum Memory {
    None,
    Dense(Var),
    Grid {
        memory: Var,
        height: usize,
        width: usize,
        refs: Var,
    },
}

#[derive(Debug, Clone)]
enum Cross {
    Dense(MultiHeadAttention),
    Deformable(DeformableAttention),
}

#[derive(Debug, Clone)]
struct StackLayer {
    self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    cross: Option<(LayerNorm, Cross)>,
    ffn: (LayerNorm, Mlp),
}

/// Pre-norm residual layers: optional self-attention, optional
/// cross-attention, then a tanh feed-forward of width `2·dim`.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub name: String,
    pub cfg: AttentionConfig,
    layers: Vec<StackLayer>,
}

#[derive(Default)]
pub struct StackOutput {
    pub out: Option<Var>,
    /// Per layer, per head.
    pub self_weights: Vec<Vec<Var>>,
    pub cross_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossKind {
    None,
    Dense { mem_dim: usize },
    Deformable { mem_dim: usize },
}

impl AttentionStack {
    pub fn new(name: &str, cfg: AttentionConfig, with_self: bool, cross: CrossKind) -> Self {
        let d = cfg.model_dim;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let pre = format!("{name}.{l}");
                let self_attn = with_self.then(|| {
                    (
                        LayerNorm::new(format!("{pre}.ln_self"), d),
                        MultiHeadAttention::new(format!("{pre}.self"), d, d, cfg.num_heads),
                    )
                });
                let cross = match cross {
                    CrossKind::None => None,
                    CrossKind::Dense { mem_dim } => Some((
                        LayerNorm::new(format!("{pre}.ln_cross"), d),
                        Cross::Dense(MultiHeadAttention::new(
                            format!("{pre}.cross"),
                            d,
                            mem_dim,
                            cfg.num_heads,
                        )),
                    )),
                    CrossKind::Deformable { mem_dim } => Some((
                        LayerNorm::new(format!("{pre}.ln_cross"), d),
                        Cross::Deformable(DeformableAttention::new(
                            format!("{pre}.cross"),
                            d,
                            mem_dim,
                            cfg.num_heads,
                            cfg.num_sample_points,
                        )),
                    )),
                };
                let ffn = (
                    LayerNorm::new(format!("{pre}.ln_ffn"), d),
                    Mlp::new(&format!("{pre}.ffn"), &[d, 2 * d, d]),
                );
                StackLayer { self_attn, cross, ffn }
            })
            .collect();
        AttentionStack {
            name: name.to_string(),
            cfg,
            layers,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for layer in &self.layers {
            if let Some((ln, mha)) = &layer.self_attn {
                ln.init(store)?;
                mha.init(store, rng)?;
            }
            if let Some((ln, cross)) = &layer.cross {
                ln.init(store)?;
                match cross {
                    Cross::Dense(m) => m.init(store, rng)?,
                    Cross::Deformable(m) => m.init(store, rng)?,
                }
            }
            layer.ffn.0.init(store)?;
            layer.ffn.1.init(store, rng)?;
        }
        Ok(())
    }

    /// Parameters whose zeroing turns every residual branch off.
    pub fn residual_output_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            if let Some((_, m)) = &layer.self_attn {
                names.extend(m.output_params());
            }
            if let Some((_, c)) = &layer.cross {
                names.extend(match c {
                    Cross::Dense(m) => m.output_params(),
                    Cross::Deformable(m) => m.output_params(),
                });
            }
            let last = layer.ffn.1.layers.last().unwrap();
            names.push(last.weight());
            names.push(last.bias());
        }
        names
    }

    /// Value projections of the cross-attention sublayers.
    pub fn cross_value_params(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| l.cross.as_ref())
            .flat_map(|(_, c)| match c {
                Cross::Dense(m) => m.value_params(),
                Cross::Deformable(m) => m.value_params(),
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: &Memory, self_mask: Option<&[bool]>) -> Result<StackOutput> {
        check_width(g, x, self.cfg.model_dim, &self.name)?;
        let mut x = x;
        let mut out = StackOutput::default();
        for layer in &self.layers {
            if let Some((ln, mha)) = &layer.self_attn {
                let xn = ln.forward(g, x)?;
                let (branch, w) = mha.forward(g, xn, xn, self_mask)?;
                x = g.add(x, branch);
                out.self_weights.push(w);
            }
            if let Some((ln, cross)) = &layer.cross {
                let xn = ln.forward(g, x)?;
                let branch = match (cross, memory) {
                    (Cross::Dense(m), Memory::Dense(mem)) => {
                        let (b, w) = m.forward(g, xn, *mem, None)?;
                        out.cross_weights.push(w);
                        b
                    }
                    (
                        Cross::Deformable(m),
                        Memory::Grid {
                            memory,
                            height,
                            width,
                            refs,
                        },
                    ) => {
                        let r = m.forward(g, xn, *refs, *memory, *height, *width)?;
                        out.cross_weights.push(vec![r.weights]);
                        r.out
                    }
                    _ => {
                        return Err(Error::shape(
                            &self.name,
                            "memory kind does not match the cross-attention layers",
                        ))
                    }
                };
                x = g.add(x, branch);
            }
            let xn = layer.ffn.0.forward(g, x)?;
            let f = layer.ffn.1.forward(g, xn)?;
            x = g.add(x, f);
        }
        out.out = Some(x);
        Ok(out)
    }
}

impl StackOutput {
    pub fn tokens(&self) -> Var {
        self.out.expect("stack output")
    }
}
