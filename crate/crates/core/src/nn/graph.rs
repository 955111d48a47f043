//! Reverse-mode automatic differentiation over 2D matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node in a
//! linear tape. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. Nodes that depend only on
//! constants are marked as not requiring gradients and are skipped.
//!
//! Shape mismatches inside the tape are programming errors and panic; the
//! layer code above validates user-facing inputs and returns errors.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Square(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    Pick(Var, Vec<usize>),
    GroupSumRows(Var, usize),
    HeadSelect(Var, usize),
    Bilinear {
        value: Var,
        loc: Var,
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter used in the pass, by name. Parameters
    /// that were used but received no gradient get zeros.
    pub fn params(&self) -> impl Iterator<Item = (&String, Option<&[f64]>)> {
        self.params.iter().map(|(name, &i)| (name, self.grads[i].as_deref()))
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&i| self.grads[i].as_deref())
    }

    /// Parameter gradients by name, moved out without copying.
    pub fn into_map(mut self) -> BTreeMap<String, Vec<f64>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, i)| self.grads[i].take().map(|g| (name, g)))
            .collect()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents implied by m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    (if rows == 1 { 0 } else { i }) * cols + if cols == 1 { 0 } else { j }
}

/// Sums a full-shape gradient down to a (possibly broadcast) operand shape.
fn reduce_to(g: &[f64], out: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let mut r = vec![0.0; target.0 * target.1];
    for i in 0..out.0 {
        for j in 0..out.1 {
            r[bidx(target.0, target.1, i, j)] += g[i * out.1 + j];
        }
    }
    r
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant data length");
        self.push(data, rows, cols, Op::Leaf, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.constant(r, c, t.data().to_vec())
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(1, 1, vec![v])
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "input data length");
        self.push(data, rows, cols, Op::Leaf, true)
    }

    /// Leaf node bound to a stored parameter; repeated lookups share a node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let (r, c) = t.dims2();
        let v = self.push(t.data().to_vec(), r, c, Op::Param, true);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, m, n, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {m}x{k} · ({n}x{k2})ᵀ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (1, k), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, m, n, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, c, r, Op::Transpose(a), rg)
    }

    // ---- broadcasting elementwise ----------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let da = self.dims(a);
        let db = self.dims(b);
        let (r, c) = broadcast_dims(da, db);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Vec::with_capacity(r * c);
        if da == db {
            out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                for j in 0..c {
                    out.push(f(va[bidx(da.0, da.1, i, j)], vb[bidx(db.0, db.1, i, j)]));
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, r, c, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- unary -------------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(out, r, c, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- row-wise normalizations -------------------------------------------

    /// Row softmax. Entries where `mask` is true get probability zero and the
    /// row is renormalized over the remaining entries.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (r, c) = self.dims(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "softmax mask shape");
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let keep = |j: usize| mask.map_or(true, |m| !m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) && x > mx {
                    mx = x;
                }
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) {
                    let e = (x - mx).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for (j, y) in o.iter_mut().enumerate() {
                if keep(j) {
                    *y /= sum;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, r, c, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, r, c, Op::LogSoftmax(a), rg)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gain), (1, c), "layer norm gain");
        assert_eq!(self.dims(bias), (1, c), "layer norm bias");
        let v = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- structural ----------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(out, r, len, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= r, "slice_rows {start}+{len} > {r}");
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(out, len, c, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, r, c, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p));
            r += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, r, c, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} >= {r}");
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(out, idx.len(), c, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(r * c, rows * cols, "reshape {r}x{c} -> {rows}x{cols}");
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(out, rows, cols, Op::Reshape(a), rg)
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over columns: `[r×c] → [r×1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(out, r, 1, Op::RowSums(a), rg)
    }

    /// Sum over rows: `[r×c] → [1×c]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, 1, c, Op::ColSums(a), rg)
    }

    /// One entry per row: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(idx.len(), r, "pick index count");
        let v = self.value(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick column {j} >= {c}");
                v[i * c + j]
            })
            .collect();
        let rg = self.rg(a);
        self.push(out, r, 1, Op::Pick(a, idx.to_vec()), rg)
    }

    /// Sums consecutive groups of `group` rows.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(group > 0 && r % group == 0, "group_sum_rows {r} rows by {group}");
        let v = self.value(a);
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = (i / group) * c;
            for j in 0..c {
                out[o + j] += v[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, r / group, c, Op::GroupSumRows(a, group), rg)
    }

    /// From a `[q·H × D]` matrix whose row `q·H + h` belongs to head `h`,
    /// keeps only head `h`'s column slice of each row: `→ [q × D]`.
    pub fn head_select(&mut self, a: Var, heads: usize) -> Var {
        let (r, d) = self.dims(a);
        assert!(
            r % heads == 0 && d % heads == 0,
            "head_select {r}x{d} with {heads} heads"
        );
        let q = r / heads;
        let dh = d / heads;
        let v = self.value(a);
        let mut out = vec![0.0; q * d];
        for qi in 0..q {
            for h in 0..heads {
                let src = (qi * heads + h) * d + h * dh;
                out[qi * d + h * dh..qi * d + (h + 1) * dh].copy_from_slice(&v[src..src + dh]);
            }
        }
        let rg = self.rg(a);
        self.push(out, q, d, Op::HeadSelect(a, heads), rg)
    }

    /// Bilinear sampling of a `[height·width × C]` feature map at normalized
    /// locations `loc: [N × 2]` holding `(u, v) ∈ [0,1]²` with `u` along the
    /// width. Cell `(r, c)` has its center at `((c+0.5)/W, (r+0.5)/H)`.
    /// Locations beyond the outermost cell centers clamp to the border.
    pub fn bilinear_sample(&mut self, value: Var, height: usize, width: usize, loc: Var) -> Var {
        let (hw, ch) = self.dims(value);
        assert_eq!(hw, height * width, "bilinear value rows");
        let (n, two) = self.dims(loc);
        assert_eq!(two, 2, "bilinear locations need 2 columns");
        let val = self.value(value);
        let l = self.value(loc);
        let mut out = vec![0.0; n * ch];
        for i in 0..n {
            let s = BilinearStencil::new(l[2 * i], l[2 * i + 1], height, width);
            let o = &mut out[i * ch..(i + 1) * ch];
            for (cell, w) in s.taps() {
                let row = &val[cell * ch..(cell + 1) * ch];
                for (oj, &vj) in o.iter_mut().zip(row) {
                    *oj += w * vj;
                }
            }
        }
        let rg = self.rg(value) || self.rg(loc);
        self.push(
            out,
            n,
            ch,
            Op::Bilinear {
                value,
                loc,
                height,
                width,
            },
            rg,
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(k, v)| (k.clone(), v.0)).collect();
        for (_, &v) in self.param_vars.iter() {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
        }
        Gradients { grads, params }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let x_of = |v: Var| &self.nodes[v.0].value;
        let elementwise = |v: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..self.nodes[v.0].value.len()).map(|i| g[i] * f(i)).collect()
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), x_of(b), (1, n), &mut da, false);
                    acc(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, x_of(a), (1, k), g, (n, 1), &mut db, false);
                    acc(grads, b, db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), x_of(b), (k, 1), &mut da, false);
                    acc(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, (1, n), x_of(a), (k, 1), &mut db, false);
                    acc(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        da[j * rows + i] = g[i * cols + j];
                    }
                }
                acc(grads, a, da);
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    acc(grads, a, reduce_to(g, (rows, cols), self.dims(a)));
                }
                if self.rg(b) {
                    let mut db = reduce_to(g, (rows, cols), self.dims(b));
                    if sign < 0.0 {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(grads, b, db);
                }
            }
            &Op::Mul(a, b) | &Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let da_dims = self.dims(a);
                let db_dims = self.dims(b);
                let va = x_of(a);
                let vb = x_of(b);
                let full = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                    let mut out = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let x = va[bidx(da_dims.0, da_dims.1, i, j)];
                            let z = vb[bidx(db_dims.0, db_dims.1, i, j)];
                            out.push(g[i * cols + j] * f(x, z));
                        }
                    }
                    out
                };
                if self.rg(a) {
                    let d = if is_div { full(&|_, z| 1.0 / z) } else { full(&|_, z| z) };
                    acc(grads, a, reduce_to(&d, (rows, cols), da_dims));
                }
                if self.rg(b) {
                    let d = if is_div {
                        full(&|x, z| -x / (z * z))
                    } else {
                        full(&|x, _| x)
                    };
                    acc(grads, b, reduce_to(&d, (rows, cols), db_dims));
                }
            }
            &Op::Scale(a, s) => acc(grads, a, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar(a) => acc(grads, a, g.to_vec()),
            &Op::Neg(a) => acc(grads, a, g.iter().map(|v| -v).collect()),
            &Op::Tanh(a) => acc(grads, a, elementwise(a, &|i| 1.0 - y[i] * y[i])),
            &Op::Sigmoid(a) => acc(grads, a, elementwise(a, &|i| y[i] * (1.0 - y[i]))),
            &Op::Exp(a) => acc(grads, a, elementwise(a, &|i| y[i])),
            &Op::Ln(a) => {
                let x = x_of(a);
                acc(grads, a, elementwise(a, &|i| 1.0 / x[i]))
            }
            &Op::Sqrt(a) => acc(grads, a, elementwise(a, &|i| 0.5 / y[i])),
            &Op::Abs(a) => {
                let x = x_of(a);
                acc(grads, a, elementwise(a, &|i| sign0(x[i])))
            }
            &Op::Relu(a) => {
                let x = x_of(a);
                acc(grads, a, elementwise(a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 }))
            }
            &Op::Square(a) => {
                let x = x_of(a);
                acc(grads, a, elementwise(a, &|i| 2.0 * x[i]))
            }
            &Op::Pow(a, p) => {
                let x = x_of(a);
                acc(
                    grads,
                    a,
                    elementwise(a, &|i| {
                        if x[i] != 0.0 {
                            p * x[i].powf(p - 1.0)
                        } else if p == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }),
                )
            }
            &Op::Clamp(a, lo, hi) => {
                let x = x_of(a);
                acc(
                    grads,
                    a,
                    elementwise(a, &|i| if x[i] >= lo && x[i] <= hi { 1.0 } else { 0.0 }),
                )
            }
            &Op::Softmax(a) => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        da[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, a, da);
            }
            &Op::LogSoftmax(a) => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        da[i * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                acc(grads, a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = x_of(*gain);
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for i in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            let dh = g[i * cols + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * cols + j];
                        }
                        for j in 0..cols {
                            let dh = g[i * cols + j] * gv[j];
                            dx[i * cols + j] = rstd[i] / n * (n * dh - s1 - xhat[i * cols + j] * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    acc(grads, *bias, reduce_to(g, (rows, cols), (1, cols)));
                }
            }
            &Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                for i in 0..rows {
                    da[i * ac + start..i * ac + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                acc(grads, a, da);
            }
            &Op::SliceRows(a, start) => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                da[start * ac..(start + rows) * ac].copy_from_slice(g);
                acc(grads, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * cols + off..i * cols + off + w]);
                        }
                        acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.rg(p) {
                        acc(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let (ar, ac) = self.dims(*a);
                let mut da = vec![0.0; ar * ac];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..ac {
                        da[i * ac + j] += g[k * ac + j];
                    }
                }
                acc(grads, *a, da);
            }
            &Op::Reshape(a) => acc(grads, a, g.to_vec()),
            &Op::SumAll(a) => {
                let n = self.nodes[a.0].value.len();
                acc(grads, a, vec![g[0]; n]);
            }
            &Op::RowSums(a) => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                for i in 0..ar {
                    da[i * ac..(i + 1) * ac].fill(g[i]);
                }
                acc(grads, a, da);
            }
            &Op::ColSums(a) => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                for i in 0..ar {
                    da[i * ac..(i + 1) * ac].copy_from_slice(g);
                }
                acc(grads, a, da);
            }
            Op::Pick(a, idx) => {
                let (ar, ac) = self.dims(*a);
                let mut da = vec![0.0; ar * ac];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * ac + j] = g[i];
                }
                acc(grads, *a, da);
            }
            &Op::GroupSumRows(a, group) => {
                let (ar, ac) = self.dims(a);
                let mut da = vec![0.0; ar * ac];
                for i in 0..ar {
                    let o = (i / group) * ac;
                    da[i * ac..(i + 1) * ac].copy_from_slice(&g[o..o + ac]);
                }
                acc(grads, a, da);
            }
            &Op::HeadSelect(a, heads) => {
                let (ar, d) = self.dims(a);
                let dh = d / heads;
                let mut da = vec![0.0; ar * d];
                for qi in 0..rows {
                    for h in 0..heads {
                        let dst = (qi * heads + h) * d + h * dh;
                        da[dst..dst + dh].copy_from_slice(&g[qi * d + h * dh..qi * d + (h + 1) * dh]);
                    }
                }
                acc(grads, a, da);
            }
            &Op::Bilinear {
                value,
                loc,
                height,
                width,
            } => {
                let ch = cols;
                let val = x_of(value);
                let l = x_of(loc);
                let want_v = self.rg(value);
                let want_l = self.rg(loc);
                let mut dv = if want_v { vec![0.0; val.len()] } else { Vec::new() };
                let mut dl = if want_l { vec![0.0; l.len()] } else { Vec::new() };
                for i in 0..rows {
                    let s = BilinearStencil::new(l[2 * i], l[2 * i + 1], height, width);
                    let gi = &g[i * ch..(i + 1) * ch];
                    if want_v {
                        for (cell, w) in s.taps() {
                            for j in 0..ch {
                                dv[cell * ch + j] += w * gi[j];
                            }
                        }
                    }
                    if want_l {
                        let row = |cell: usize| &val[cell * ch..(cell + 1) * ch];
                        let (v00, v01, v10, v11) = (row(s.c00), row(s.c01), row(s.c10), row(s.c11));
                        let mut dpx = 0.0;
                        let mut dpy = 0.0;
                        for j in 0..ch {
                            dpx += gi[j] * ((1.0 - s.fy) * (v01[j] - v00[j]) + s.fy * (v11[j] - v10[j]));
                            dpy += gi[j] * ((1.0 - s.fx) * (v10[j] - v00[j]) + s.fx * (v11[j] - v01[j]));
                        }
                        if s.x_free {
                            dl[2 * i] += dpx * width as f64;
                        }
                        if s.y_free {
                            dl[2 * i + 1] += dpy * height as f64;
                        }
                    }
                }
                if want_v {
                    acc(grads, value, dv);
                }
                if want_l {
                    acc(grads, loc, dl);
                }
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct BilinearStencil {
    c00: usize,
    c01: usize,
    c10: usize,
    c11: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

impl BilinearStencil {
    fn new(u: f64, v: f64, height: usize, width: usize) -> Self {
        let axis = |t: f64, n: usize| -> (usize, usize, f64, bool) {
            let p = t * n as f64 - 0.5;
            let hi = (n - 1) as f64;
            let free = p > 0.0 && p < hi;
            let p = p.clamp(0.0, hi);
            if n == 1 {
                return (0, 0, 0.0, false);
            }
            let i0 = (p.floor() as usize).min(n - 2);
            (i0, i0 + 1, p - i0 as f64, free)
        };
        let (x0, x1, fx, x_free) = axis(u, width);
        let (y0, y1, fy, y_free) = axis(v, height);
        BilinearStencil {
            c00: y0 * width + x0,
            c01: y0 * width + x1,
            c10: y1 * width + x0,
            c11: y1 * width + x1,
            fx,
            fy,
            x_free,
            y_free,
        }
    }

    fn taps(&self) -> [(usize, f64); 4] {
        [
            (self.c00, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.c01, self.fx * (1.0 - self.fy)),
            (self.c10, (1.0 - self.fx) * self.fy),
            (self.c11, self.fx * self.fy),
        ]
    }
}
