//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D [`Array2`]; scalars are `1×1`. Operations record
//! their inputs on the tape and [`Tape::backward`] walks the records in
//! reverse. The op set is exactly what the policy needs, including a fused
//! masked multi-head attention with an optional learnable additive bias.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::topo_attention::attention_head;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for the fused attention op.
#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    MinConst(Var, f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    Scatter {
        table: Var,
        entries: Rc<Vec<(usize, usize, f64)>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: AttentionShape,
        probs: Vec<Array2<f64>>,
    },
    Mse(Var, Rc<Array2<f64>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation. Not thread-safe; one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on any
/// gradient-requiring leaf.
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(out, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) * &*self.value(b);
        self.push(out, Op::Mul(a, b), self.rg(&[a, b]))
    }

    /// `a[n×m] + row[1×m]` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let r = self.value(row);
            assert_eq!(r.nrows(), 1, "add_row expects a 1×m row");
            &*self.value(a) + &r.row(0)
        };
        self.push(out, Op::AddRow(a, row), self.rg(&[a, row]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(out, Op::AddScalar(a), self.rg(&[a]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(out, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(out, Op::Silu(a), self.rg(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a), self.rg(&[a]))
    }

    /// Elementwise `min(a, c)`; the gradient is 1 strictly below `c`, else 0.
    pub fn min_const(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x.min(c));
        self.push(out, Op::MinConst(a, c), self.rg(&[a]))
    }

    /// Row-wise RMS normalization with a learnable `1×m` gain.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: f64) -> Var {
        let (out, inv_rms) = {
            let xv = self.value(x);
            let g = self.value(gain);
            let m = xv.ncols() as f64;
            let mut out = Array2::zeros(xv.dim());
            let mut inv = Vec::with_capacity(xv.nrows());
            for (r, row) in xv.rows().into_iter().enumerate() {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / m;
                let ir = 1.0 / (ms + eps).sqrt();
                inv.push(ir);
                for (c, &v) in row.iter().enumerate() {
                    out[[r, c]] = v * ir * g[[0, c]];
                }
            }
            (out, inv)
        };
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, self.rg(&[x, gain]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let views: Vec<Ref<'_, Array2<f64>>> = parts.iter().map(|&p| self.value(p)).collect();
            let vv: Vec<ArrayView2<'_, f64>> = views.iter().map(|r| r.view()).collect();
            ndarray::concatenate(Axis(0), &vv).expect("concat_rows: column counts differ")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts))
    }

    /// `out[i] = a[indices[i]]` row-wise; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let out = self.value(a).select(Axis(0), &indices);
        self.push(out, Op::GatherRows(a, indices), self.rg(&[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start), self.rg(&[a]))
    }

    /// Builds a `rows×cols` matrix whose flat entry `o` is
    /// `Σ coef · table_flat[t]` over `entries` of the form `(o, t, coef)`.
    pub fn scatter(&self, table: Var, rows: usize, cols: usize, entries: Rc<Vec<(usize, usize, f64)>>) -> Var {
        let out = {
            let t = self.value(table);
            let flat = t.as_slice().expect("standard layout");
            let mut out = Array2::zeros((rows, cols));
            let o = out.as_slice_mut().expect("standard layout");
            for &(oi, ti, c) in entries.iter() {
                o[oi] += c * flat[ti];
            }
            out
        };
        self.push(out, Op::Scatter { table, entries }, self.rg(&[table]))
    }

    /// Multi-head attention over `batch` independent sequences of length
    /// `seq`, rows laid out sequence-major. `mask` is a constant `seq×seq`
    /// additive mask whose `-inf` entries block a key; `bias` an optional
    /// learnable `seq×seq` additive term shared across batch and heads.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Array2<f64>,
        bias: Option<Var>,
        shape: AttentionShape,
    ) -> Var {
        let (out, probs) = {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let bv = bias.map(|b| self.value(b));
            let AttentionShape { batch, seq, heads } = shape;
            let d = qv.ncols();
            assert_eq!(qv.nrows(), batch * seq, "attention: row count");
            assert_eq!(d % heads, 0, "attention: width not divisible by heads");
            let dh = d / heads;
            let mut out = Array2::zeros((batch * seq, d));
            let mut probs = Vec::with_capacity(batch * heads);
            for b in 0..batch {
                let rows = b * seq..(b + 1) * seq;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qs = qv.slice(s![rows.clone(), cols.clone()]);
                    let ks = kv.slice(s![rows.clone(), cols.clone()]);
                    let vs = vv.slice(s![rows.clone(), cols.clone()]);
                    let (o, p) = attention_head(qs, ks, vs, Some(mask), bv.as_deref())
                        .expect("attention: every query row needs an unblocked key");
                    out.slice_mut(s![rows.clone(), cols]).assign(&o);
                    probs.push(p);
                }
            }
            (out, probs)
        };
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        let rg = self.rg(&parents);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                probs,
            },
            rg,
        )
    }

    /// Mean squared error against a constant target; `1×1`.
    pub fn mse(&self, pred: Var, target: Rc<Array2<f64>>) -> Var {
        let out = {
            let p = self.value(pred);
            assert_eq!(p.dim(), target.dim(), "mse: shape mismatch");
            let n = p.len() as f64;
            let s: f64 = p.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            Array2::from_elem((1, 1), s / n)
        };
        self.push(out, Op::Mse(pred, target), self.rg(&[pred]))
    }

    /// Attention probabilities stored by an attention node, one `seq×seq`
    /// matrix per (batch item, head) in batch-major order.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Array2<f64>>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], nodes: &[Node], v: Var, g: Array2<f64>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        let wants = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        let ga = g.dot(&nodes[b.0].value.t());
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if wants(*b) {
                        let gb = nodes[a.0].value.t().dot(&g);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *b, g.clone());
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, -&g);
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, &nodes, *a, &g * &nodes[b.0].value);
                    }
                    if wants(*b) {
                        acc(&mut grads, &nodes, *b, &g * &nodes[a.0].value);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, &nodes, *row, gr);
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, g),
                Op::Scale(a, c) => acc(&mut grads, &nodes, *a, g * *c),
                Op::Silu(a) => {
                    let x = &nodes[a.0].value;
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &xv| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *gv *= sig * (1.0 + xv * (1.0 - sig));
                    });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, g * &node.value),
                Op::MinConst(a, c) => {
                    let mut ga = g;
                    ga.zip_mut_with(&nodes[a.0].value, |gv, &xv| {
                        if xv >= *c {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gain.0].value;
                    let m = xv.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    let mut gg = Array2::zeros((1, m));
                    for r in 0..xv.nrows() {
                        let ir = inv_rms[r];
                        let mut dot = 0.0;
                        for c in 0..m {
                            let xhat = xv[[r, c]] * ir;
                            let dxhat = g[[r, c]] * gv[[0, c]];
                            gg[[0, c]] += g[[r, c]] * xhat;
                            dot += dxhat * xhat;
                        }
                        let mean = dot / m as f64;
                        for c in 0..m {
                            let xhat = xv[[r, c]] * ir;
                            let dxhat = g[[r, c]] * gv[[0, c]];
                            gx[[r, c]] = (dxhat - xhat * mean) * ir;
                        }
                    }
                    if wants(*gain) {
                        acc(&mut grads, &nodes, *gain, gg);
                    }
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = nodes[p.0].value.nrows();
                        if wants(*p) {
                            let gp = g.slice(s![start..start + n, ..]).to_owned();
                            acc(&mut grads, &nodes, *p, gp);
                        }
                        start += n;
                    }
                }
                Op::GatherRows(a, idx) => {
                    if wants(*a) {
                        let mut ga = Array2::zeros(nodes[a.0].value.dim());
                        for (r, &src) in idx.iter().enumerate() {
                            let mut dst = ga.row_mut(src);
                            dst += &g.row(r);
                        }
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(nodes[a.0].value.dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Scatter { table, entries } => {
                    let tv = &nodes[table.0].value;
                    let mut gt = Array2::zeros(tv.dim());
                    {
                        let gflat = g.as_slice().expect("standard layout");
                        let tflat = gt.as_slice_mut().expect("standard layout");
                        for &(oi, ti, c) in entries.iter() {
                            tflat[ti] += c * gflat[oi];
                        }
                    }
                    acc(&mut grads, &nodes, *table, gt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    shape,
                    probs,
                } => {
                    let qv = &nodes[q.0].value;
                    let kv = &nodes[k.0].value;
                    let vv = &nodes[v.0].value;
                    let AttentionShape { batch, seq, heads } = *shape;
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gvv = Array2::zeros(vv.dim());
                    let mut gb = Array2::<f64>::zeros((seq, seq));
                    for b in 0..batch {
                        let rows = b * seq..(b + 1) * seq;
                        for h in 0..heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            let dv = p.t().dot(&go);
                            let dp = go.dot(&vs.t());
                            let mut ds = &dp * p;
                            for r in 0..seq {
                                let row_sum: f64 = ds.row(r).sum();
                                for c in 0..seq {
                                    ds[[r, c]] -= p[[r, c]] * row_sum;
                                }
                            }
                            gb += &ds;
                            let dq = ds.dot(&ks) * scale;
                            let dk = ds.t().dot(&qs) * scale;
                            let mut t = gq.slice_mut(s![rows.clone(), cols.clone()]);
                            t += &dq;
                            let mut t = gk.slice_mut(s![rows.clone(), cols.clone()]);
                            t += &dk;
                            let mut t = gvv.slice_mut(s![rows.clone(), cols]);
                            t += &dv;
                        }
                    }
                    acc(&mut grads, &nodes, *q, gq);
                    acc(&mut grads, &nodes, *k, gk);
                    acc(&mut grads, &nodes, *v, gvv);
                    if let Some(bv) = bias {
                        acc(&mut grads, &nodes, *bv, gb);
                    }
                }
                Op::Mse(pred, target) => {
                    let p = &nodes[pred.0].value;
                    let n = p.len() as f64;
                    let g0 = g[[0, 0]];
                    let mut gp = p - &**target;
                    gp.mapv_inplace(|x| 2.0 * x / n * g0);
                    acc(&mut grads, &nodes, *pred, gp);
                }
            }
        }
        Gradients(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every entry of every parameter.
    fn check(params: Vec<Array2<f64>>, build: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss);
        let eval = |ps: &[Array2<f64>]| {
            let t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let l = build(&t, &vs);
            let x = t.value(l)[[0, 0]];
            x
        };
        let eps = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get(vars[pi]).cloned().unwrap_or_else(|| Array2::zeros(p.dim()));
            for idx in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = params.clone();
                minus[pi].as_slice_mut().unwrap()[idx] -= eps;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ana = g.as_slice().unwrap()[idx];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "param {pi}[{idx}]: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = Rc::new(random(&mut rng, 3, 2));
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)],
            |t, v| {
                let h = t.matmul(v[0], v[1]);
                let h = t.add_row(h, v[2]);
                let s = t.silu(h);
                let e = t.exp(t.scale(s, 0.5));
                let m = t.mul(e, t.add_scalar(h, 1.0));
                let d = t.sub(m, t.min_const(h, 0.3));
                t.mse(d, target.clone())
            },
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Rc::new(random(&mut rng, 5, 2));
        let entries = Rc::new(vec![(0, 0, 1.0), (3, 2, -0.5), (5, 1, 2.0), (5, 0, 1.0)]);
        check(
            vec![random(&mut rng, 2, 3), random(&mut rng, 1, 3), random(&mut rng, 1, 3)],
            move |t, v| {
                let sc = t.scatter(v[2], 2, 3, entries.clone());
                let cat = t.concat_rows(&[v[0], sc, v[1]]);
                let g = t.gather_rows(cat, Rc::new(vec![4, 0, 0, 2, 3]));
                let n = t.rms_norm(g, v[1], 1e-6);
                let sl = t.slice_cols(n, 1, 3);
                t.mse(sl, target.clone())
            },
        );
    }

    #[test]
    fn attention_gradients_with_mask_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = 4;
        let mut mask = Array2::zeros((seq, seq));
        mask[[0, 3]] = f64::NEG_INFINITY;
        mask[[2, 1]] = f64::NEG_INFINITY;
        let target = Rc::new(random(&mut rng, 2 * seq, 4));
        let shape = AttentionShape {
            batch: 2,
            seq,
            heads: 2,
        };
        check(
            vec![
                random(&mut rng, 2 * seq, 4),
                random(&mut rng, 2 * seq, 4),
                random(&mut rng, 2 * seq, 4),
                random(&mut rng, seq, seq),
            ],
            move |t, v| {
                let o = t.attention(v[0], v[1], v[2], &mask, Some(v[3]), shape);
                t.mse(o, target.clone())
            },
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0], [4.0]]);
        let y = t.matmul(c, p);
        let mut g = t.backward(t.mse(y, Rc::new(array![[0.0]])));
        assert!(g.get(c).is_none());
        assert_eq!(g.take(p).unwrap(), array![[2.0 * 11.0], [4.0 * 11.0]]);
    }
}
