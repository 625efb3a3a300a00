//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is a single-use computation graph: ops evaluate eagerly and
//! record a backward closure. [`Tape::backward`] walks the recorded nodes in
//! reverse and accumulates gradients for every node that can reach a
//! parameter leaf. Constant subgraphs (inputs, frozen feature extractors)
//! record no closures and cost nothing at backward time.
//!
//! Everything is f64 and single-threaded, so results are bit-identical
//! across runs and machines for the same inputs.

use crate::tensor::{matmul, matmul_at, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &[Node], &mut [Option<Tensor>])>;

pub struct Node {
    value: Tensor,
    requires_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accum(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, requires_grad, back });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Trainable leaf; `backward` will report its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    /// Copy of `v` detached from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Backward pass from a scalar root. Returns gradients for every leaf
    /// (and keeps none of the interior gradients).
    pub fn backward(&self, root: Var) -> Gradients {
        let root_val = self.value(root);
        assert_eq!(root_val.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(back) = self.nodes[id].back.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[id].take() else { continue };
            back(&g, &self.nodes, &mut grads);
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
        );
        let (ra, rb) = (self.rg(a), self.rg(b));
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, g.clone());
            }
            if rb {
                accum(grads, b.0, g.clone());
            }
        });
        self.push(out, ra || rb, Some(back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
        );
        let (ra, rb) = (self.rg(a), self.rg(b));
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, g.clone());
            }
            if rb {
                accum(grads, b.0, g.map(|v| -v));
            }
        });
        self.push(out, ra || rb, Some(back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
        );
        let (ra, rb) = (self.rg(a), self.rg(b));
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let vb = &n[b.0].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(vb.data()).map(|(gv, bv)| gv * bv).collect(),
                );
                accum(grads, a.0, da);
            }
            if rb {
                let va = &n[a.0].value;
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(va.data()).map(|(gv, av)| gv * av).collect(),
                );
                accum(grads, b.0, db);
            }
        });
        self.push(out, ra || rb, Some(back))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, g.map(|v| v * c));
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, g.clone());
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let va = &n[a.0].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, av)| if *av >= 0.0 { *gv } else { -gv })
                        .collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let va = &n[a.0].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(va.data()).map(|(gv, av)| 2.0 * av * gv).collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let va = &n[a.0].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, av)| if *av > 0.0 { *gv } else { slope * gv })
                        .collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ra = self.rg(a);
        let out_id = self.nodes.len();
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let y = &n[out_id].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ra = self.rg(a);
        let out_id = self.nodes.len();
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let y = &n[out_id].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.shape_of(a);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, Tensor::full(&shape, g.item()));
            }
        });
        self.push(Tensor::scalar(s), ra, Some(back))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel() as f64;
        let s: f64 = va.data().iter().sum::<f64>() / n;
        let shape = self.shape_of(a);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, Tensor::full(&shape, g.item() / n));
            }
        });
        self.push(Tensor::scalar(s), ra, Some(back))
    }

    /// Per-channel mean over all trailing axes: `[C, ...] -> [C]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.shape()[0];
        let rest = va.numel() / c;
        let mut out = vec![0.0; c];
        for ci in 0..c {
            out[ci] = va.data()[ci * rest..(ci + 1) * rest].iter().sum::<f64>() / rest as f64;
        }
        let shape = self.shape_of(a);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut da = Tensor::zeros(&shape);
                for ci in 0..c {
                    let gv = g.data()[ci] / rest as f64;
                    for v in &mut da.data_mut()[ci * rest..(ci + 1) * rest] {
                        *v = gv;
                    }
                }
                accum(grads, a.0, da);
            }
        });
        self.push(Tensor::from_vec(&[c], out), ra, Some(back))
    }

    /// `1 / sqrt(v + eps)` on a vector (variance -> inverse std).
    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|v| 1.0 / (v + eps).sqrt());
        let ra = self.rg(a);
        let out_id = self.nodes.len();
        let back: BackFn = Box::new(move |g, n, grads| {
            if ra {
                let y = &n[out_id].value;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (-0.5 * yv * yv * yv))
                        .collect(),
                );
                accum(grads, a.0, da);
            }
        });
        self.push(out, ra, Some(back))
    }

    // ---- channel broadcast: x [C, ...] with s [C] ----

    fn bc_op(&mut self, x: Var, s: Var, f: fn(f64, f64) -> f64, which: BcKind) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[0];
        let rest = vx.numel() / c;
        assert_eq!(self.value(s).numel(), c, "broadcast vector length mismatch");
        let mut out = Tensor::zeros(vx.shape());
        {
            let sx = self.value(x).data();
            let ss = self.value(s).data();
            let od = out.data_mut();
            for ci in 0..c {
                let sv = ss[ci];
                for i in 0..rest {
                    od[ci * rest + i] = f(sx[ci * rest + i], sv);
                }
            }
        }
        let (rx, rs) = (self.rg(x), self.rg(s));
        let back: BackFn = Box::new(move |g, n, grads| {
            match which {
                BcKind::Add | BcKind::Sub => {
                    if rx {
                        accum(grads, x.0, g.clone());
                    }
                    if rs {
                        let mut ds = vec![0.0; c];
                        for ci in 0..c {
                            let sum: f64 = g.data()[ci * rest..(ci + 1) * rest].iter().sum();
                            ds[ci] = if matches!(which, BcKind::Sub) { -sum } else { sum };
                        }
                        accum(grads, s.0, Tensor::from_vec(&[c], ds));
                    }
                }
                BcKind::Mul => {
                    if rx {
                        let sv = &n[s.0].value;
                        let mut dx = Tensor::zeros(g.shape());
                        for ci in 0..c {
                            let m = sv.data()[ci];
                            for i in 0..rest {
                                dx.data_mut()[ci * rest + i] = g.data()[ci * rest + i] * m;
                            }
                        }
                        accum(grads, x.0, dx);
                    }
                    if rs {
                        let xv = &n[x.0].value;
                        let mut ds = vec![0.0; c];
                        for ci in 0..c {
                            let mut sum = 0.0;
                            for i in 0..rest {
                                sum += g.data()[ci * rest + i] * xv.data()[ci * rest + i];
                            }
                            ds[ci] = sum;
                        }
                        accum(grads, s.0, Tensor::from_vec(&[c], ds));
                    }
                }
            }
        });
        self.push(out, rx || rs, Some(back))
    }

    pub fn bc_add(&mut self, x: Var, s: Var) -> Var {
        self.bc_op(x, s, |a, b| a + b, BcKind::Add)
    }

    pub fn bc_sub(&mut self, x: Var, s: Var) -> Var {
        self.bc_op(x, s, |a, b| a - b, BcKind::Sub)
    }

    pub fn bc_mul(&mut self, x: Var, s: Var) -> Var {
        self.bc_op(x, s, |a, b| a * b, BcKind::Mul)
    }

    // ---- structure ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let orig = self.shape_of(a);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, g.clone().reshaped(&orig));
            }
        });
        self.push(out, ra, Some(back))
    }

    /// Concatenate along the first axis; trailing shapes must match.
    pub fn concat_first(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(&va.shape()[1..], &vb.shape()[1..], "concat trailing shape mismatch");
        let ca = va.shape()[0];
        let cb = vb.shape()[0];
        let mut shape = va.shape().to_vec();
        shape[0] = ca + cb;
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let na = va.numel();
        let (ra, rb) = (self.rg(a), self.rg(b));
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                accum(grads, a.0, Tensor::from_vec(&sa, g.data()[..na].to_vec()));
            }
            if rb {
                accum(grads, b.0, Tensor::from_vec(&sb, g.data()[na..].to_vec()));
            }
        });
        self.push(Tensor::from_vec(&shape, data), ra || rb, Some(back))
    }

    /// Slice rows `lo..hi` of the first axis.
    pub fn slice_first(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = self.value(a);
        let c = va.shape()[0];
        assert!(lo < hi && hi <= c, "slice_first {lo}..{hi} out of range 0..{c}");
        let rest = va.numel() / c;
        let mut shape = va.shape().to_vec();
        shape[0] = hi - lo;
        let data = va.data()[lo * rest..hi * rest].to_vec();
        let orig = self.shape_of(a);
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut da = Tensor::zeros(&orig);
                da.data_mut()[lo * rest..hi * rest].copy_from_slice(g.data());
                accum(grads, a.0, da);
            }
        });
        self.push(Tensor::from_vec(&shape, data), ra, Some(back))
    }

    /// Crop `lo` and `hi` entries from the last axis of a `[C, L]` tensor.
    pub fn crop1d(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2, "crop1d wants [C, L]");
        let (c, l) = (va.shape()[0], va.shape()[1]);
        assert!(lo + hi < l, "crop1d removes everything");
        let ln = l - lo - hi;
        let mut data = Vec::with_capacity(c * ln);
        for ci in 0..c {
            data.extend_from_slice(&va.data()[ci * l + lo..ci * l + lo + ln]);
        }
        let ra = self.rg(a);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut da = Tensor::zeros(&[c, l]);
                for ci in 0..c {
                    da.data_mut()[ci * l + lo..ci * l + lo + ln]
                        .copy_from_slice(&g.data()[ci * ln..(ci + 1) * ln]);
                }
                accum(grads, a.0, da);
            }
        });
        self.push(Tensor::from_vec(&[c, ln], data), ra, Some(back))
    }

    // ---- dense / conv ----

    /// y = W x + b with x `[N]`, W `[M, N]`, b `[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let n = vx.numel();
        let m = vw.shape()[0];
        assert_eq!(vw.shape(), &[m, n], "linear weight shape");
        assert_eq!(vb.numel(), m, "linear bias length");
        let mut out = vec![0.0; m];
        matmul(m, n, 1, vw.data(), vx.data(), &mut out, 0.0);
        for (o, bv) in out.iter_mut().zip(vb.data()) {
            *o += bv;
        }
        let (rx, rw, rb) = (self.rg(x), self.rg(w), self.rg(b));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if rx {
                let vw = &nodes[w.0].value;
                let mut dx = vec![0.0; n];
                matmul_at(n, m, 1, vw.data(), g.data(), &mut dx, 0.0);
                accum(grads, x.0, Tensor::from_vec(&[n], dx));
            }
            if rw {
                let vx = &nodes[x.0].value;
                let mut dw = vec![0.0; m * n];
                // outer product g (m x 1) * x^T (1 x n)
                matmul(m, 1, n, g.data(), vx.data(), &mut dw, 0.0);
                accum(grads, w.0, Tensor::from_vec(&[m, n], dw));
            }
            if rb {
                accum(grads, b.0, g.clone());
            }
        });
        self.push(Tensor::from_vec(&[m], out), rx || rw || rb, Some(back))
    }

    /// Valid 1D convolution: x `[C, L]`, w `[O, C, K]`, b `[O]` -> `[O, L-K+1]`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (c, l) = (vx.shape()[0], vx.shape()[1]);
        let (o, cw, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(c, cw, "conv1d channel mismatch");
        assert!(l >= k, "conv1d input shorter than kernel");
        assert_eq!(vb.numel(), o, "conv1d bias length");
        let lo = l - k + 1;
        let mut out = vec![0.0; o * lo];
        for oi in 0..o {
            for p in 0..lo {
                let mut acc = vb.data()[oi];
                for ci in 0..c {
                    for ki in 0..k {
                        acc += vw.data()[(oi * c + ci) * k + ki] * vx.data()[ci * l + p + ki];
                    }
                }
                out[oi * lo + p] = acc;
            }
        }
        let (rx, rw, rb) = (self.rg(x), self.rg(w), self.rg(b));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if rx {
                let vw = &nodes[w.0].value;
                let mut dx = Tensor::zeros(&[c, l]);
                for oi in 0..o {
                    for p in 0..lo {
                        let gv = g.data()[oi * lo + p];
                        for ci in 0..c {
                            for ki in 0..k {
                                dx.data_mut()[ci * l + p + ki] +=
                                    gv * vw.data()[(oi * c + ci) * k + ki];
                            }
                        }
                    }
                }
                accum(grads, x.0, dx);
            }
            if rw {
                let vx = &nodes[x.0].value;
                let mut dw = Tensor::zeros(&[o, c, k]);
                for oi in 0..o {
                    for p in 0..lo {
                        let gv = g.data()[oi * lo + p];
                        for ci in 0..c {
                            for ki in 0..k {
                                dw.data_mut()[(oi * c + ci) * k + ki] +=
                                    gv * vx.data()[ci * l + p + ki];
                            }
                        }
                    }
                }
                accum(grads, w.0, dw);
            }
            if rb {
                let mut db = vec![0.0; o];
                for oi in 0..o {
                    db[oi] = g.data()[oi * lo..(oi + 1) * lo].iter().sum();
                }
                accum(grads, b.0, Tensor::from_vec(&[o], db));
            }
        });
        self.push(Tensor::from_vec(&[o, lo], out), rx || rw || rb, Some(back))
    }

    /// 2D convolution, square kernel semantics not required: x `[C, H, W]`,
    /// w `[O, C, KH, KW]`, b `[O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wi) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (o, cw, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(c, cw, "conv2d channel mismatch");
        assert_eq!(vb.numel(), o, "conv2d bias length");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let ck = c * kh * kw;
        let p = ho * wo;
        let col = im2col2d(vx.data(), c, h, wi, kh, kw, stride, pad, ho, wo);
        let mut out = vec![0.0; o * p];
        matmul(o, ck, p, vw.data(), &col, &mut out, 0.0);
        for oi in 0..o {
            let bv = vb.data()[oi];
            for v in &mut out[oi * p..(oi + 1) * p] {
                *v += bv;
            }
        }
        let (rx, rw, rb) = (self.rg(x), self.rg(w), self.rg(b));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if rw {
                let vx = &nodes[x.0].value;
                let col = im2col2d(vx.data(), c, h, wi, kh, kw, stride, pad, ho, wo);
                let mut dw = vec![0.0; o * ck];
                // dW (o x ck) = dY (o x p) * col^T (p x ck)
                unsafe {
                    matrixmultiply::dgemm(
                        o, p, ck, 1.0, g.data().as_ptr(), p as isize, 1, col.as_ptr(), 1,
                        p as isize, 0.0, dw.as_mut_ptr(), ck as isize, 1,
                    );
                }
                accum(grads, w.0, Tensor::from_vec(&[o, c, kh, kw], dw));
            }
            if rx {
                let vw = &nodes[w.0].value;
                let mut dcol = vec![0.0; ck * p];
                matmul_at(ck, o, p, vw.data(), g.data(), &mut dcol, 0.0);
                let dx = col2im2d(&dcol, c, h, wi, kh, kw, stride, pad, ho, wo);
                accum(grads, x.0, Tensor::from_vec(&[c, h, wi], dx));
            }
            if rb {
                let mut db = vec![0.0; o];
                for oi in 0..o {
                    db[oi] = g.data()[oi * p..(oi + 1) * p].iter().sum();
                }
                accum(grads, b.0, Tensor::from_vec(&[o], db));
            }
        });
        self.push(Tensor::from_vec(&[o, ho, wo], out), rx || rw || rb, Some(back))
    }

    /// 3D convolution: x `[C, D, H, W]`, w `[O, C, KD, KH, KW]`, b `[O]`,
    /// per-axis stride and zero padding.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (c, d, h, wi) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, cw, kd, kh, kw) =
            (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3], vw.shape()[4]);
        assert_eq!(c, cw, "conv3d channel mismatch");
        assert_eq!(vb.numel(), o, "conv3d bias length");
        let dd = (d + 2 * pad.0 - kd) / stride.0 + 1;
        let ho = (h + 2 * pad.1 - kh) / stride.1 + 1;
        let wo = (wi + 2 * pad.2 - kw) / stride.2 + 1;
        let ck = c * kd * kh * kw;
        let p = dd * ho * wo;
        let col = im2col3d(vx.data(), c, d, h, wi, kd, kh, kw, stride, pad, dd, ho, wo);
        let mut out = vec![0.0; o * p];
        matmul(o, ck, p, vw.data(), &col, &mut out, 0.0);
        for oi in 0..o {
            let bv = vb.data()[oi];
            for v in &mut out[oi * p..(oi + 1) * p] {
                *v += bv;
            }
        }
        let (rx, rw, rb) = (self.rg(x), self.rg(w), self.rg(b));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if rw {
                let vx = &nodes[x.0].value;
                let col = im2col3d(vx.data(), c, d, h, wi, kd, kh, kw, stride, pad, dd, ho, wo);
                let mut dw = vec![0.0; o * ck];
                unsafe {
                    matrixmultiply::dgemm(
                        o, p, ck, 1.0, g.data().as_ptr(), p as isize, 1, col.as_ptr(), 1,
                        p as isize, 0.0, dw.as_mut_ptr(), ck as isize, 1,
                    );
                }
                accum(grads, w.0, Tensor::from_vec(&[o, c, kd, kh, kw], dw));
            }
            if rx {
                let vw = &nodes[w.0].value;
                let mut dcol = vec![0.0; ck * p];
                matmul_at(ck, o, p, vw.data(), g.data(), &mut dcol, 0.0);
                let dx = col2im3d(&dcol, c, d, h, wi, kd, kh, kw, stride, pad, dd, ho, wo);
                accum(grads, x.0, Tensor::from_vec(&[c, d, h, wi], dx));
            }
            if rb {
                let mut db = vec![0.0; o];
                for oi in 0..o {
                    db[oi] = g.data()[oi * p..(oi + 1) * p].iter().sum();
                }
                accum(grads, b.0, Tensor::from_vec(&[o], db));
            }
        });
        self.push(Tensor::from_vec(&[o, dd, ho, wo], out), rx || rw || rb, Some(back))
    }

    /// Transposed 3D convolution with kernel == stride (disjoint upsampling):
    /// x `[C, D, H, W]`, w `[C, O, KD, KH, KW]`, b `[O]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize, usize),
    ) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (c, d, h, wi) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cw, o, kd, kh, kw) =
            (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3], vw.shape()[4]);
        assert_eq!(c, cw, "conv_transpose3d channel mismatch");
        assert_eq!((kd, kh, kw), stride, "conv_transpose3d expects kernel == stride");
        assert_eq!(vb.numel(), o, "conv_transpose3d bias length");
        let (dd, ho, wo) = (d * kd, h * kh, wi * kw);
        let mut out = Tensor::full(&[o, dd, ho, wo], 0.0);
        {
            let od = out.data_mut();
            for oi in 0..o {
                let bv = vb.data()[oi];
                for v in &mut od[oi * dd * ho * wo..(oi + 1) * dd * ho * wo] {
                    *v = bv;
                }
            }
            for ci in 0..c {
                for di in 0..d {
                    for hi in 0..h {
                        for wj in 0..wi {
                            let xv = vx.data()[((ci * d + di) * h + hi) * wi + wj];
                            for oi in 0..o {
                                for zd in 0..kd {
                                    for zh in 0..kh {
                                        for zw in 0..kw {
                                            let wv = vw.data()
                                                [(((ci * o + oi) * kd + zd) * kh + zh) * kw + zw];
                                            let idx = ((oi * dd + di * kd + zd) * ho
                                                + hi * kh
                                                + zh)
                                                * wo
                                                + wj * kw
                                                + zw;
                                            od[idx] += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let (rx, rw, rb) = (self.rg(x), self.rg(w), self.rg(b));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if rx {
                let vw = &nodes[w.0].value;
                let mut dx = Tensor::zeros(&[c, d, h, wi]);
                for ci in 0..c {
                    for di in 0..d {
                        for hi in 0..h {
                            for wj in 0..wi {
                                let mut acc = 0.0;
                                for oi in 0..o {
                                    for zd in 0..kd {
                                        for zh in 0..kh {
                                            for zw in 0..kw {
                                                let wv = vw.data()[(((ci * o + oi) * kd + zd)
                                                    * kh
                                                    + zh)
                                                    * kw
                                                    + zw];
                                                let idx = ((oi * dd + di * kd + zd) * ho
                                                    + hi * kh
                                                    + zh)
                                                    * wo
                                                    + wj * kw
                                                    + zw;
                                                acc += g.data()[idx] * wv;
                                            }
                                        }
                                    }
                                }
                                dx.data_mut()[((ci * d + di) * h + hi) * wi + wj] = acc;
                            }
                        }
                    }
                }
                accum(grads, x.0, dx);
            }
            if rw {
                let vx = &nodes[x.0].value;
                let mut dw = Tensor::zeros(&[c, o, kd, kh, kw]);
                for ci in 0..c {
                    for di in 0..d {
                        for hi in 0..h {
                            for wj in 0..wi {
                                let xv = vx.data()[((ci * d + di) * h + hi) * wi + wj];
                                for oi in 0..o {
                                    for zd in 0..kd {
                                        for zh in 0..kh {
                                            for zw in 0..kw {
                                                let idx = ((oi * dd + di * kd + zd) * ho
                                                    + hi * kh
                                                    + zh)
                                                    * wo
                                                    + wj * kw
                                                    + zw;
                                                dw.data_mut()[(((ci * o + oi) * kd + zd) * kh
                                                    + zh)
                                                    * kw
                                                    + zw] += xv * g.data()[idx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, w.0, dw);
            }
            if rb {
                let mut db = vec![0.0; o];
                let per = dd * ho * wo;
                for oi in 0..o {
                    db[oi] = g.data()[oi * per..(oi + 1) * per].iter().sum();
                }
                accum(grads, b.0, Tensor::from_vec(&[o], db));
            }
        });
        self.push(out, rx || rw || rb, Some(back))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2d needs even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let idx = (ci * h + oh * 2 + dh) * w + ow * 2 + dw;
                            let v = vx.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ci * ho + oh) * wo + ow] = best;
                    arg[(ci * ho + oh) * wo + ow] = best_idx;
                }
            }
        }
        let ra = self.rg(x);
        let shape = self.shape_of(x);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut dx = Tensor::zeros(&shape);
                for (i, &src) in arg.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[i];
                }
                accum(grads, x.0, dx);
            }
        });
        self.push(Tensor::from_vec(&[c, ho, wo], out), ra, Some(back))
    }

    /// 2x nearest-neighbour spatial upsampling of `[C, H, W]`.
    pub fn upsample2d_nearest(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out[(ci * ho + oh) * wo + ow] = vx.data()[(ci * h + oh / 2) * w + ow / 2];
                }
            }
        }
        let ra = self.rg(x);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            dx.data_mut()[(ci * h + oh / 2) * w + ow / 2] +=
                                g.data()[(ci * ho + oh) * wo + ow];
                        }
                    }
                }
                accum(grads, x.0, dx);
            }
        });
        self.push(Tensor::from_vec(&[c, ho, wo], out), ra, Some(back))
    }

    /// Spatial average pooling of a volume by integer factor, depth untouched:
    /// `[C, D, H, W] -> [C, D, H/f, W/f]`.
    pub fn avgpool3d_spatial(&mut self, x: Var, f: usize) -> Var {
        let vx = self.value(x);
        let (c, d, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert!(h % f == 0 && w % f == 0, "avgpool3d_spatial factor must divide spatial dims");
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; c * d * ho * wo];
        for ci in 0..c {
            for di in 0..d {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for dh in 0..f {
                            for dw in 0..f {
                                acc += vx.data()
                                    [((ci * d + di) * h + oh * f + dh) * w + ow * f + dw];
                            }
                        }
                        out[((ci * d + di) * ho + oh) * wo + ow] = acc * inv;
                    }
                }
            }
        }
        let ra = self.rg(x);
        let back: BackFn = Box::new(move |g, _n, grads| {
            if ra {
                let mut dx = Tensor::zeros(&[c, d, h, w]);
                for ci in 0..c {
                    for di in 0..d {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g.data()[((ci * d + di) * ho + oh) * wo + ow] * inv;
                                for dh in 0..f {
                                    for dw in 0..f {
                                        dx.data_mut()[((ci * d + di) * h + oh * f + dh) * w
                                            + ow * f
                                            + dw] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                accum(grads, x.0, dx);
            }
        });
        self.push(Tensor::from_vec(&[c, d, ho, wo], out), ra, Some(back))
    }

    /// Gram matrix of an activation map: `[C, H, W] -> [C, C]`,
    /// `G = A A^T / (C*H*W)` with `A` the `C x (H*W)` flattening.
    pub fn gram(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let hw = h * w;
        let norm = 1.0 / (c * h * w) as f64;
        let mut g_out = vec![0.0; c * c];
        // A (c x hw) * A^T -> use dgemm with B transposed via strides.
        unsafe {
            matrixmultiply::dgemm(
                c, hw, c, norm, vx.data().as_ptr(), hw as isize, 1, vx.data().as_ptr(), 1,
                hw as isize, 0.0, g_out.as_mut_ptr(), c as isize, 1,
            );
        }
        let ra = self.rg(x);
        let back: BackFn = Box::new(move |g, nodes, grads| {
            if ra {
                let vx = &nodes[x.0].value;
                // dA = (G_grad + G_grad^T) A * norm
                let mut sym = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (g.data()[i * c + j] + g.data()[j * c + i]) * norm;
                    }
                }
                let mut dx = vec![0.0; c * hw];
                matmul(c, c, hw, &sym, vx.data(), &mut dx, 0.0);
                accum(grads, x.0, Tensor::from_vec(&[c, h, w], dx));
            }
        });
        self.push(Tensor::from_vec(&[c, c], g_out), ra, Some(back))
    }

    /// Trilinear warp of a feature volume by a dense displacement field.
    ///
    /// `vol` is `[C, D, H, W]`; `disp` is `[3, D, H, W]` with rows (d, h, w)
    /// displacements in normalized coordinates (each axis spans [-1, 1]).
    /// Sample positions are the identity grid plus the displacement, clamped
    /// to the volume (border padding), interpolated trilinearly.
    ///
    /// A zero displacement reproduces the input exactly: the identity grid is
    /// evaluated in index space, so no floating-point drift is introduced.
    pub fn grid_sample3d(&mut self, vol: Var, disp: Var) -> Var {
        let (vv, vd) = (self.value(vol), self.value(disp));
        let (c, d, h, w) = (vv.shape()[0], vv.shape()[1], vv.shape()[2], vv.shape()[3]);
        assert_eq!(vd.shape(), &[3, d, h, w], "grid_sample3d displacement shape");
        let vox = d * h * w;
        let mut out = vec![0.0; c * vox];
        sample_forward(vv.data(), vd.data(), c, d, h, w, &mut out);
        let (rv, rd) = (self.rg(vol), self.rg(disp));
        let back: BackFn = Box::new(move |g, nodes, grads| {
            let vv = &nodes[vol.0].value;
            let vd = &nodes[disp.0].value;
            let mut dvol = if rv { Some(Tensor::zeros(&[c, d, h, w])) } else { None };
            let mut ddisp = if rd { Some(Tensor::zeros(&[3, d, h, w])) } else { None };
            sample_backward(
                vv.data(),
                vd.data(),
                g.data(),
                c,
                d,
                h,
                w,
                dvol.as_mut().map(|t| t.data_mut()),
                ddisp.as_mut().map(|t| t.data_mut()),
            );
            if let Some(dv) = dvol {
                accum(grads, vol.0, dv);
            }
            if let Some(dd) = ddisp {
                accum(grads, disp.0, dd);
            }
        });
        self.push(Tensor::from_vec(&[c, d, h, w], out), rv || rd, Some(back))
    }
}

#[derive(Clone, Copy)]
enum BcKind {
    Add,
    Sub,
    Mul,
}

// ---- im2col helpers ----

#[allow(clippy::too_many_arguments)]
fn im2col2d(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut col = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let base = row * p;
                for oh in 0..ho {
                    let ih = (oh * stride + khi) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kwi) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col[base + oh * wo + ow] = x[xrow + iw as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im2d(
    dcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                let base = row * p;
                for oh in 0..ho {
                    let ih = (oh * stride + khi) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kwi) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[xrow + iw as usize] += dcol[base + oh * wo + ow];
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn im2col3d(
    x: &[f64],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    dd: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = dd * ho * wo;
    let mut col = vec![0.0; c * kd * kh * kw * p];
    for ci in 0..c {
        for kdi in 0..kd {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = ((ci * kd + kdi) * kh + khi) * kw + kwi;
                    let base = row * p;
                    for od in 0..dd {
                        let id = (od * stride.0 + kdi) as isize - pad.0 as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride.1 + khi) as isize - pad.1 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ci * d + id as usize) * h + ih as usize) * w;
                            for ow in 0..wo {
                                let iw = (ow * stride.2 + kwi) as isize - pad.2 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                col[base + (od * ho + oh) * wo + ow] = x[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im3d(
    dcol: &[f64],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    dd: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = dd * ho * wo;
    let mut dx = vec![0.0; c * d * h * w];
    for ci in 0..c {
        for kdi in 0..kd {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = ((ci * kd + kdi) * kh + khi) * kw + kwi;
                    let base = row * p;
                    for od in 0..dd {
                        let id = (od * stride.0 + kdi) as isize - pad.0 as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride.1 + khi) as isize - pad.1 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = ((ci * d + id as usize) * h + ih as usize) * w;
                            for ow in 0..wo {
                                let iw = (ow * stride.2 + kwi) as isize - pad.2 as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dx[xrow + iw as usize] += dcol[base + (od * ho + oh) * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---- trilinear sampling kernels ----

/// Index-space sample position along one axis: identity + displacement scaled
/// by (len-1)/2, clamped to the border. A length-1 axis collapses to index 0.
#[inline]
fn axis_pos(i: usize, disp: f64, len: usize) -> f64 {
    let half = (len as f64 - 1.0) / 2.0;
    let p = i as f64 + disp * half;
    p.clamp(0.0, len as f64 - 1.0)
}

#[inline]
fn corners(p: f64, len: usize) -> (usize, usize, f64) {
    let i0 = p.floor() as usize;
    let i0 = i0.min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

fn sample_forward(vol: &[f64], disp: &[f64], c: usize, d: usize, h: usize, w: usize, out: &mut [f64]) {
    let vox = d * h * w;
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let vi = (di * h + hi) * w + wi;
                let pd = axis_pos(di, disp[vi], d);
                let ph = axis_pos(hi, disp[vox + vi], h);
                let pw = axis_pos(wi, disp[2 * vox + vi], w);
                let (d0, d1, fd) = corners(pd, d);
                let (h0, h1, fh) = corners(ph, h);
                let (w0, w1, fw) = corners(pw, w);
                for ci in 0..c {
                    let base = ci * vox;
                    let v000 = vol[base + (d0 * h + h0) * w + w0];
                    let v001 = vol[base + (d0 * h + h0) * w + w1];
                    let v010 = vol[base + (d0 * h + h1) * w + w0];
                    let v011 = vol[base + (d0 * h + h1) * w + w1];
                    let v100 = vol[base + (d1 * h + h0) * w + w0];
                    let v101 = vol[base + (d1 * h + h0) * w + w1];
                    let v110 = vol[base + (d1 * h + h1) * w + w0];
                    let v111 = vol[base + (d1 * h + h1) * w + w1];
                    let c00 = v000 * (1.0 - fw) + v001 * fw;
                    let c01 = v010 * (1.0 - fw) + v011 * fw;
                    let c10 = v100 * (1.0 - fw) + v101 * fw;
                    let c11 = v110 * (1.0 - fw) + v111 * fw;
                    let c0 = c00 * (1.0 - fh) + c01 * fh;
                    let c1 = c10 * (1.0 - fh) + c11 * fh;
                    out[base + vi] = c0 * (1.0 - fd) + c1 * fd;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_backward(
    vol: &[f64],
    disp: &[f64],
    g: &[f64],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    mut dvol: Option<&mut [f64]>,
    mut ddisp: Option<&mut [f64]>,
) {
    let vox = d * h * w;
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let vi = (di * h + hi) * w + wi;
                let raw_d = di as f64 + disp[vi] * (d as f64 - 1.0) / 2.0;
                let raw_h = hi as f64 + disp[vox + vi] * (h as f64 - 1.0) / 2.0;
                let raw_w = wi as f64 + disp[2 * vox + vi] * (w as f64 - 1.0) / 2.0;
                let pd = raw_d.clamp(0.0, d as f64 - 1.0);
                let ph = raw_h.clamp(0.0, h as f64 - 1.0);
                let pw = raw_w.clamp(0.0, w as f64 - 1.0);
                // clamp kills the gradient outside the border
                let live_d = raw_d > 0.0 && raw_d < d as f64 - 1.0;
                let live_h = raw_h > 0.0 && raw_h < h as f64 - 1.0;
                let live_w = raw_w > 0.0 && raw_w < w as f64 - 1.0;
                let (d0, d1, fd) = corners(pd, d);
                let (h0, h1, fh) = corners(ph, h);
                let (w0, w1, fw) = corners(pw, w);
                let mut acc_d = 0.0;
                let mut acc_h = 0.0;
                let mut acc_w = 0.0;
                for ci in 0..c {
                    let base = ci * vox;
                    let gv = g[base + vi];
                    let idx = [
                        base + (d0 * h + h0) * w + w0,
                        base + (d0 * h + h0) * w + w1,
                        base + (d0 * h + h1) * w + w0,
                        base + (d0 * h + h1) * w + w1,
                        base + (d1 * h + h0) * w + w0,
                        base + (d1 * h + h0) * w + w1,
                        base + (d1 * h + h1) * w + w0,
                        base + (d1 * h + h1) * w + w1,
                    ];
                    let wt = [
                        (1.0 - fd) * (1.0 - fh) * (1.0 - fw),
                        (1.0 - fd) * (1.0 - fh) * fw,
                        (1.0 - fd) * fh * (1.0 - fw),
                        (1.0 - fd) * fh * fw,
                        fd * (1.0 - fh) * (1.0 - fw),
                        fd * (1.0 - fh) * fw,
                        fd * fh * (1.0 - fw),
                        fd * fh * fw,
                    ];
                    if let Some(dv) = dvol.as_deref_mut() {
                        for k in 0..8 {
                            dv[idx[k]] += gv * wt[k];
                        }
                    }
                    if ddisp.is_some() {
                        let v: Vec<f64> = idx.iter().map(|&i| vol[i]).collect();
                        // partials of the trilinear blend w.r.t. fractional coords
                        let dfd = (v[4] - v[0]) * (1.0 - fh) * (1.0 - fw)
                            + (v[5] - v[1]) * (1.0 - fh) * fw
                            + (v[6] - v[2]) * fh * (1.0 - fw)
                            + (v[7] - v[3]) * fh * fw;
                        let dfh = (v[2] - v[0]) * (1.0 - fd) * (1.0 - fw)
                            + (v[3] - v[1]) * (1.0 - fd) * fw
                            + (v[6] - v[4]) * fd * (1.0 - fw)
                            + (v[7] - v[5]) * fd * fw;
                        let dfw = (v[1] - v[0]) * (1.0 - fd) * (1.0 - fh)
                            + (v[3] - v[2]) * (1.0 - fd) * fh
                            + (v[5] - v[4]) * fd * (1.0 - fh)
                            + (v[7] - v[6]) * fd * fh;
                        acc_d += gv * dfd;
                        acc_h += gv * dfh;
                        acc_w += gv * dfw;
                    }
                }
                if let Some(dd) = ddisp.as_deref_mut() {
                    if live_d {
                        dd[vi] += acc_d * (d as f64 - 1.0) / 2.0;
                    }
                    if live_h {
                        dd[vox + vi] += acc_h * (h as f64 - 1.0) / 2.0;
                    }
                    if live_w {
                        dd[2 * vox + vi] += acc_w * (w as f64 - 1.0) / 2.0;
                    }
                }
            }
        }
    }
}
