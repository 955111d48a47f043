use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

pub(crate) fn check_width(g: &Graph, x: Var, want: usize, layer: &str) -> Result<()> {
    let (_, c) = g.dims(x);
    if c != want {
        return Err(Error::shape(layer, format!("expected width {want}, got {c}")));
    }
    Ok(())
}

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_uniform(self.weight(), &[self.in_dim, self.out_dim], self.in_dim, rng)?;
        store.init_uniform(self.bias(), &[self.out_dim], self.in_dim, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_width(g, x, self.in_dim, &self.name)?;
        let w = g.param(&self.weight());
        let b = g.param(&self.bias());
        let xw = g.matmul(x, w);
        Ok(g.add(xw, b))
    }
}

/// Stack of linear layers with tanh between them and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`; layers are named `{name}.{i}`.
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with reset, update and candidate gates packed in
/// that order along the columns of `w_ih: [in × 3H]` and `w_hh: [H × 3H]`.
///
/// `h' = (1 − u) ⊙ n + u ⊙ h`
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        GruCell {
            name: name.into(),
            input,
            hidden,
        }
    }

    fn p(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let h3 = 3 * self.hidden;
        store.init_uniform(self.p("w_ih"), &[self.input, h3], self.hidden, rng)?;
        store.init_uniform(self.p("w_hh"), &[self.hidden, h3], self.hidden, rng)?;
        store.init_uniform(self.p("b_ih"), &[h3], self.hidden, rng)?;
        store.init_uniform(self.p("b_hh"), &[h3], self.hidden, rng)
    }

    /// One step for a batch: `x: [B × in]` (or `[1 × in]`, broadcast),
    /// `h: [B × H]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        check_width(g, x, self.input, &self.name)?;
        check_width(g, h, self.hidden, &self.name)?;
        let hd = self.hidden;
        let w_ih = g.param(&self.p("w_ih"));
        let w_hh = g.param(&self.p("w_hh"));
        let b_ih = g.param(&self.p("b_ih"));
        let b_hh = g.param(&self.p("b_hh"));
        let xi = g.matmul(x, w_ih);
        let gi = g.add(xi, b_ih);
        let hh = g.matmul(h, w_hh);
        let gh = g.add(hh, b_hh);

        let gi_r = g.slice_cols(gi, 0, hd);
        let gh_r = g.slice_cols(gh, 0, hd);
        let r_pre = g.add(gi_r, gh_r);
        let r = g.sigmoid(r_pre);

        let gi_u = g.slice_cols(gi, hd, hd);
        let gh_u = g.slice_cols(gh, hd, hd);
        let u_pre = g.add(gi_u, gh_u);
        let u = g.sigmoid(u_pre);

        let gi_n = g.slice_cols(gi, 2 * hd, hd);
        let gh_n = g.slice_cols(gh, 2 * hd, hd);
        let rg = g.mul(r, gh_n);
        let n_pre = g.add(gi_n, rg);
        let n = g.tanh(n_pre);

        let diff = g.sub(h, n);
        let ud = g.mul(u, diff);
        Ok(g.add(n, ud))
    }
}
