//! Minimal reverse-mode autodiff: a flat `Tensor` value type and a `Tape`
//! of operations with hand-written backward rules.
//!
//! Everything is `f64` so gradients can be checked against central finite
//! differences at step 1e-4 without drowning in rounding noise. Tensors are
//! matrices (`rows x cols`); sequences are `s x channels`, parameters are
//! whatever shape suits their op, scalars are `1 x 1`. Structured ops
//! (convolutions, norms, the selective scan) live in `nn.rs`.

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value on the tape.
pub type Vid = usize;

/// Elementwise activations with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    /// x -> -exp(x); parameterizes strictly negative SSM dynamics.
    NegExp,
}

impl Unary {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            // explicit NaN propagation: f64::max would silently drop it
            Unary::Relu => {
                if x.is_nan() {
                    x
                } else {
                    x.max(0.0)
                }
            }
            Unary::Softplus => softplus(x),
            Unary::NegExp => -x.exp(),
        }
    }

    /// Derivative given input x and output y = eval(x).
    #[inline]
    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::NegExp => y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        0.0
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on (0, inf); useful for initializing pre-activations.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Context handed to a backward rule: parent values, the node's own output,
/// and the incoming gradient.
pub struct BackCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Vid>,
    backward: Option<BackwardFn>,
}

/// Growing record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (parameters, network inputs).
    pub fn leaf(&mut self, value: Tensor) -> Vid {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: Vid) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn push(&mut self, value: Tensor, parents: Vec<Vid>, backward: Option<BackwardFn>) -> Vid {
        self.nodes.push(Node { value, parents, backward });
        self.nodes.len() - 1
    }

    /// Reverse sweep from `root` (must be scalar) with seed gradient 1.
    /// Returns one gradient slot per node; untouched nodes stay `None`.
    pub fn backward(&self, root: Vid) -> Vec<Option<Tensor>> {
        let seed = Tensor::scalar(1.0);
        self.backward_seeded(root, seed)
    }

    /// Reverse sweep with an explicit seed gradient at `root`.
    pub fn backward_seeded(&self, root: Vid, seed: Tensor) -> Vec<Option<Tensor>> {
        assert!(self.nodes[root].value.same_shape(&seed), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let ctx = BackCtx { inputs: &inputs, output: &node.value, grad: &g };
                let parent_grads = back(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        match &mut grads[pid] {
                            Some(acc) => {
                                debug_assert!(acc.same_shape(&pg));
                                for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                                    *a += b;
                                }
                            }
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }

    // ---- elementwise / linear algebra ops ----

    pub fn add(&mut self, a: Vid, b: Vid) -> Vid {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|ctx: &BackCtx| {
                vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Vid, b: Vid) -> Vid {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|ctx: &BackCtx| {
                let mut neg = ctx.grad.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                vec![Some(ctx.grad.clone()), Some(neg)]
            })),
        )
    }

    pub fn mul(&mut self, a: Vid, b: Vid) -> Vid {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|ctx: &BackCtx| {
                let (va, vb) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.grad.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect();
                let gb = ctx.grad.data.iter().zip(&va.data).map(|(g, x)| g * x).collect();
                vec![
                    Some(Tensor::new(va.rows, va.cols, ga)),
                    Some(Tensor::new(vb.rows, vb.cols, gb)),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Vid, k: f64) -> Vid {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * k).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad.data.iter().map(|v| v * k).collect();
                vec![Some(Tensor::new(ctx.grad.rows, ctx.grad.cols, g))]
            })),
        )
    }

    pub fn unary(&mut self, a: Vid, op: Unary) -> Vid {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| op.eval(x)).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |ctx: &BackCtx| {
                let x = ctx.inputs[0];
                let g = ctx
                    .grad
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&ctx.output.data))
                    .map(|(g, (&x, &y))| g * op.deriv(x, y))
                    .collect();
                vec![Some(Tensor::new(x.rows, x.cols, g))]
            })),
        )
    }

    /// y = x @ w, x: (s,k), w: (k,n).
    pub fn matmul(&mut self, x: Vid, w: Vid) -> Vid {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.cols, vw.rows, "matmul inner dim mismatch");
        let (s, k, n) = (vx.rows, vx.cols, vw.cols);
        let mut out = Tensor::zeros(s, n);
        matmul_into(&vx.data, &vw.data, &mut out.data, s, k, n);
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |ctx: &BackCtx| {
                let (vx, vw) = (ctx.inputs[0], ctx.inputs[1]);
                // gx = g @ w^T
                let mut gx = Tensor::zeros(s, k);
                for r in 0..s {
                    let grow = &ctx.grad.data[r * n..(r + 1) * n];
                    let gxrow = &mut gx.data[r * k..(r + 1) * k];
                    for kk in 0..k {
                        let wrow = &vw.data[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * wrow[j];
                        }
                        gxrow[kk] = acc;
                    }
                }
                // gw = x^T @ g
                let mut gw = Tensor::zeros(k, n);
                for r in 0..s {
                    let xrow = &vx.data[r * k..(r + 1) * k];
                    let grow = &ctx.grad.data[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let xv = xrow[kk];
                        if xv != 0.0 {
                            let gwrow = &mut gw.data[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                gwrow[j] += xv * grow[j];
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw)]
            })),
        )
    }

    /// Broadcast-add a length-n bias to every row of x: (s,n).
    pub fn add_bias(&mut self, x: Vid, b: Vid) -> Vid {
        let (vx, vb) = (self.value(x), self.value(b));
        assert_eq!(vx.cols, vb.len(), "bias length mismatch");
        let (s, n) = (vx.rows, vx.cols);
        let mut out = vx.clone();
        for r in 0..s {
            for j in 0..n {
                out.data[r * n + j] += vb.data[j];
            }
        }
        self.push(
            out,
            vec![x, b],
            Some(Box::new(move |ctx: &BackCtx| {
                let vb = ctx.inputs[1];
                let mut gb = Tensor::zeros(vb.rows, vb.cols);
                for r in 0..s {
                    for j in 0..n {
                        gb.data[j] += ctx.grad.data[r * n + j];
                    }
                }
                vec![Some(ctx.grad.clone()), Some(gb)]
            })),
        )
    }

    /// Column-wise concatenation of two (s, *) tensors.
    pub fn concat_cols(&mut self, a: Vid, b: Vid) -> Vid {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "concat row mismatch");
        let (s, ca, cb) = (va.rows, va.cols, vb.cols);
        let mut out = Tensor::zeros(s, ca + cb);
        for r in 0..s {
            out.data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&va.data[r * ca..(r + 1) * ca]);
            out.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&vb.data[r * cb..(r + 1) * cb]);
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |ctx: &BackCtx| {
                let mut ga = Tensor::zeros(s, ca);
                let mut gb = Tensor::zeros(s, cb);
                for r in 0..s {
                    ga.data[r * ca..(r + 1) * ca]
                        .copy_from_slice(&ctx.grad.data[r * (ca + cb)..r * (ca + cb) + ca]);
                    gb.data[r * cb..(r + 1) * cb]
                        .copy_from_slice(&ctx.grad.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Columns [from, to) of x.
    pub fn slice_cols(&mut self, x: Vid, from: usize, to: usize) -> Vid {
        let vx = self.value(x);
        assert!(from < to && to <= vx.cols, "bad column slice");
        let (s, c, w) = (vx.rows, vx.cols, to - from);
        let mut out = Tensor::zeros(s, w);
        for r in 0..s {
            out.data[r * w..(r + 1) * w].copy_from_slice(&vx.data[r * c + from..r * c + to]);
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |ctx: &BackCtx| {
                let mut gx = Tensor::zeros(s, c);
                for r in 0..s {
                    gx.data[r * c + from..r * c + to]
                        .copy_from_slice(&ctx.grad.data[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Vid) -> Vid {
        let vx = self.value(x);
        let total: f64 = vx.data.iter().sum();
        let (r, c) = (vx.rows, vx.cols);
        self.push(
            Tensor::scalar(total),
            vec![x],
            Some(Box::new(move |ctx: &BackCtx| {
                vec![Some(Tensor::full(r, c, ctx.grad.item()))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Vid) -> Vid {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }
}

/// out += is NOT implied; out must be zeroed. c[s,n] = a[s,k] @ b[k,n].
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], s: usize, k: usize, n: usize) {
    for r in 0..s {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}
