//! Reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients. Each training step
//! builds a fresh tape, so there is no graph reuse or retained state between
//! steps. All arithmetic is `f64` so analytic gradients can be checked against
//! central finite differences at tight tolerances.

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use super::params::ParamStore;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Silu(usize),
    /// Mean of all elements -> scalar (shape `[]`).
    Mean(usize),
    Sum(usize),
    /// `[n,c,h,w] -> [n,c]`, mean over the spatial axes.
    MeanSpatial(usize),
    /// `[n,d] + [d]` broadcast over rows.
    AddRowBias(usize, usize),
    /// `[n,c,l] + [c]` broadcast over batch and time.
    AddChanBias1d(usize, usize),
    /// `[n,c,h,w] + [c]` broadcast over batch and space.
    AddChanBias2d(usize, usize),
    /// `[n,c,h,w] + [n,c]` broadcast over space (per-sample conditioning).
    AddChanPerSample(usize, usize),
    /// Two 2-D arrays side by side: `[n,a] ++ [n,b] -> [n,a+b]`.
    ConcatCols(usize, usize),
    /// Column range of a 2-D array.
    SliceCols(usize, usize, usize),
    /// `[n,c,l]` at time index t -> `[n,c]`.
    SliceTime(usize, usize),
    /// Row lookup: `table [v,d]`, indices `[n]` -> `[n,d]`.
    Gather(usize, Vec<usize>),
    Reshape(usize),
    /// 2x2 average pooling, stride 2.
    AvgPool2d(usize),
    /// Nearest-neighbour 2x upsampling.
    Upsample2d(usize),
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    /// Mean softmax cross-entropy of `logits [n,k]` against class indices.
    SoftmaxCrossEntropy(usize, Vec<usize>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// One forward pass under recording.
pub struct Tape {
    nodes: Vec<Node>,
    /// (node index, parameter name) for every bound parameter leaf.
    bindings: Vec<(usize, String)>,
}

/// Gradients produced by [`Tape::backward`], indexed like the tape.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf (no gradient tracked beyond the tape).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter; its gradient can later be scattered
    /// back into the store with [`Tape::accumulate`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let value = store.value(name).clone();
        let v = self.push(value, Op::Leaf);
        self.bindings.push((v.0, name.to_string()));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a.0))
    }

    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("mean_spatial expects [n,c,h,w]");
        let v = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        self.push(v.into_dyn(), Op::MeanSpatial(a.0))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let d = bv.len();
        let mut out = xv.clone();
        for mut row in out
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("add_row_bias expects [n,d]")
            .rows_mut()
        {
            for j in 0..d {
                row[j] += bv[[j]];
            }
        }
        self.push(out, Op::AddRowBias(x.0, b.0))
    }

    pub fn add_chan_bias_1d(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        let bv = &self.nodes[b.0].value;
        {
            let mut o = out
                .view_mut()
                .into_dimensionality::<Ix3>()
                .expect("add_chan_bias_1d expects [n,c,l]");
            let (n, c, l) = o.dim();
            for i in 0..n {
                for ch in 0..c {
                    let bias = bv[[ch]];
                    for t in 0..l {
                        o[[i, ch, t]] += bias;
                    }
                }
            }
        }
        self.push(out, Op::AddChanBias1d(x.0, b.0))
    }

    pub fn add_chan_bias_2d(&mut self, x: Var, b: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        let bv = &self.nodes[b.0].value;
        {
            let mut o = out
                .view_mut()
                .into_dimensionality::<Ix4>()
                .expect("add_chan_bias_2d expects [n,c,h,w]");
            let (n, c, h, w) = o.dim();
            for i in 0..n {
                for ch in 0..c {
                    let bias = bv[[ch]];
                    for y in 0..h {
                        for z in 0..w {
                            o[[i, ch, y, z]] += bias;
                        }
                    }
                }
            }
        }
        self.push(out, Op::AddChanBias2d(x.0, b.0))
    }

    pub fn add_chan_per_sample(&mut self, x: Var, y: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        let yv = self.nodes[y.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("add_chan_per_sample bias expects [n,c]")
            .to_owned();
        {
            let mut o = out
                .view_mut()
                .into_dimensionality::<Ix4>()
                .expect("add_chan_per_sample expects [n,c,h,w]");
            let (n, c, h, w) = o.dim();
            for i in 0..n {
                for ch in 0..c {
                    let bias = yv[[i, ch]];
                    for yy in 0..h {
                        for zz in 0..w {
                            o[[i, ch, yy, zz]] += bias;
                        }
                    }
                }
            }
        }
        self.push(out, Op::AddChanPerSample(x.0, y.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("concat_cols lhs 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("concat_cols rhs 2-d");
        let v = ndarray::concatenate(Axis(1), &[av, bv]).unwrap().into_dyn();
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("slice_cols expects 2-d");
        let v = av.slice(ndarray::s![.., from..to]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(a.0, from, to))
    }

    pub fn slice_time(&mut self, a: Var, t: usize) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("slice_time expects [n,c,l]");
        let v = av.slice(ndarray::s![.., .., t]).to_owned().into_dyn();
        self.push(v, Op::SliceTime(a.0, t))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.nodes[table.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("gather table expects [v,d]");
        let d = tv.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((indices.len(), d));
        for (i, &ix) in indices.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(ix));
        }
        self.push(out.into_dyn(), Op::Gather(table.0, indices.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a.0))
    }

    pub fn avg_pool_2d(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("avg_pool_2d expects [n,c,h,w]");
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool_2d needs even dims");
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h / 2, w / 2));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for z in 0..w / 2 {
                        out[[i, ch, y, z]] = 0.25
                            * (x[[i, ch, 2 * y, 2 * z]]
                                + x[[i, ch, 2 * y + 1, 2 * z]]
                                + x[[i, ch, 2 * y, 2 * z + 1]]
                                + x[[i, ch, 2 * y + 1, 2 * z + 1]]);
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::AvgPool2d(a.0))
    }

    pub fn upsample_2d(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample_2d expects [n,c,h,w]");
        let (n, c, h, w) = x.dim();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h * 2, w * 2));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for z in 0..w {
                        let v = x[[i, ch, y, z]];
                        out[[i, ch, 2 * y, 2 * z]] = v;
                        out[[i, ch, 2 * y + 1, 2 * z]] = v;
                        out[[i, ch, 2 * y, 2 * z + 1]] = v;
                        out[[i, ch, 2 * y + 1, 2 * z + 1]] = v;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2d(a.0))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv1d input expects [n,c,l]");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv1d weight expects [co,ci,k]");
        let (n, ci, l) = xv.dim();
        let (co, wci, k) = wv.dim();
        assert_eq!(ci, wci, "conv1d channel mismatch");
        let lo = (l + 2 * pad - k) / stride + 1;
        let mut out = ndarray::Array3::<f64>::zeros((n, co, lo));
        for i in 0..n {
            for oc in 0..co {
                for ot in 0..lo {
                    let mut acc = 0.0;
                    for icx in 0..ci {
                        for kk in 0..k {
                            let it = ot * stride + kk;
                            if it < pad || it - pad >= l {
                                continue;
                            }
                            acc += xv[[i, icx, it - pad]] * wv[[oc, icx, kk]];
                        }
                    }
                    out[[i, oc, ot]] = acc;
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv1d { x: x.0, w: w.0, stride, pad })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input expects [n,c,h,w]");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight expects [co,ci,kh,kw]");
        let (n, ci, h, wdt) = xv.dim();
        let (co, wci, kh, kw) = wv.dim();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let mut out = ndarray::Array4::<f64>::zeros((n, co, ho, wo));
        for i in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for icx in 0..ci {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wdt {
                                        continue;
                                    }
                                    acc += xv[[i, icx, iy - pad, ix - pad]]
                                        * wv[[oc, icx, ky, kx]];
                                }
                            }
                        }
                        out[[i, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2d { x: x.0, w: w.0, stride, pad })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.nodes[logits.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("softmax_ce expects [n,k]");
        let (n, _k) = lv.dim();
        assert_eq!(n, labels.len());
        let mut total = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[lab];
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
        self.push(v, Op::SoftmaxCrossEntropy(logits.0, labels.to_vec()))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert!(
            self.nodes[loss.0].value.ndim() == 0,
            "backward expects a scalar loss"
        );
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Scatter gradients of bound parameter leaves back into the store.
    pub fn accumulate(&self, grads: &Grads, store: &mut ParamStore) {
        for (node, name) in &self.bindings {
            if let Some(g) = grads.grads[*node].as_ref() {
                store.add_grad(name, g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let mut send = |target: usize, contrib: ArrayD<f64>| match &mut grads[target] {
            Some(acc) => *acc += &contrib,
            slot @ None => *slot = Some(contrib),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, g * &self.nodes[*b].value);
                send(*b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => send(*a, g.mapv(|v| v * c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                send(*a, gv.dot(&bv.t()).into_dyn());
                send(*b, av.t().dot(&gv).into_dyn());
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                send(*a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                send(
                    *a,
                    g * &x.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    }),
                );
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let gd = g[[]] / n;
                send(*a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gd));
            }
            Op::Sum(a) => {
                let gd = g[[]];
                send(*a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gd));
            }
            Op::MeanSpatial(a) => {
                let xs = self.nodes[*a].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let scale = 1.0 / (h * w) as f64;
                for i in 0..n {
                    for ch in 0..c {
                        let v = gv[[i, ch]] * scale;
                        for y in 0..h {
                            for z in 0..w {
                                gx[[i, ch, y, z]] = v;
                            }
                        }
                    }
                }
                send(*a, gx.into_dyn());
            }
            Op::AddRowBias(x, b) => {
                send(*x, g.clone());
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                send(*b, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddChanBias1d(x, b) => {
                send(*x, g.clone());
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                send(*b, gv.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
            }
            Op::AddChanBias2d(x, b) => {
                send(*x, g.clone());
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                send(
                    *b,
                    gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn(),
                );
            }
            Op::AddChanPerSample(x, y) => {
                send(*x, g.clone());
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                send(*y, gv.sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.shape()[1];
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                send(*a, gv.slice(ndarray::s![.., ..ca]).to_owned().into_dyn());
                send(*b, gv.slice(ndarray::s![.., ca..]).to_owned().into_dyn());
            }
            Op::SliceCols(a, from, to) => {
                let shape = self.nodes[*a].value.shape();
                let mut gx = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                gx.slice_mut(ndarray::s![.., *from..*to]).assign(&gv);
                send(*a, gx.into_dyn());
            }
            Op::SliceTime(a, t) => {
                let shape = self.nodes[*a].value.shape();
                let mut gx = ndarray::Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                gx.slice_mut(ndarray::s![.., .., *t]).assign(&gv);
                send(*a, gx.into_dyn());
            }
            Op::Gather(table, indices) => {
                let shape = self.nodes[*table].value.shape();
                let mut gt = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (i, &ix) in indices.iter().enumerate() {
                    let mut row = gt.row_mut(ix);
                    row += &gv.row(i);
                }
                send(*table, gt.into_dyn());
            }
            Op::Reshape(a) => {
                let v = g
                    .clone()
                    .into_shape_with_order(self.nodes[*a].value.raw_dim())
                    .unwrap();
                send(*a, v);
            }
            Op::AvgPool2d(a) => {
                let xs = self.nodes[*a].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..h / 2 {
                            for z in 0..w / 2 {
                                let v = gv[[i, ch, y, z]] * 0.25;
                                gx[[i, ch, 2 * y, 2 * z]] = v;
                                gx[[i, ch, 2 * y + 1, 2 * z]] = v;
                                gx[[i, ch, 2 * y, 2 * z + 1]] = v;
                                gx[[i, ch, 2 * y + 1, 2 * z + 1]] = v;
                            }
                        }
                    }
                }
                send(*a, gx.into_dyn());
            }
            Op::Upsample2d(a) => {
                let xs = self.nodes[*a].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for z in 0..w {
                                gx[[i, ch, y, z]] = gv[[i, ch, 2 * y, 2 * z]]
                                    + gv[[i, ch, 2 * y + 1, 2 * z]]
                                    + gv[[i, ch, 2 * y, 2 * z + 1]]
                                    + gv[[i, ch, 2 * y + 1, 2 * z + 1]];
                            }
                        }
                    }
                }
                send(*a, gx.into_dyn());
            }
            Op::Conv1d { x, w, stride, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, ci, l) = xv.dim();
                let (co, _, k) = wv.dim();
                let lo = gv.dim().2;
                let mut gx = ndarray::Array3::<f64>::zeros((n, ci, l));
                let mut gw = ndarray::Array3::<f64>::zeros((co, ci, k));
                for i in 0..n {
                    for oc in 0..co {
                        for ot in 0..lo {
                            let go = gv[[i, oc, ot]];
                            if go == 0.0 {
                                continue;
                            }
                            for icx in 0..ci {
                                for kk in 0..k {
                                    let it = ot * stride + kk;
                                    if it < *pad || it - pad >= l {
                                        continue;
                                    }
                                    gx[[i, icx, it - pad]] += go * wv[[oc, icx, kk]];
                                    gw[[oc, icx, kk]] += go * xv[[i, icx, it - pad]];
                                }
                            }
                        }
                    }
                }
                send(*x, gx.into_dyn());
                send(*w, gw.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, ci, h, wdt) = xv.dim();
                let (co, _, kh, kw) = wv.dim();
                let (_, _, ho, wo) = gv.dim();
                let mut gx = ndarray::Array4::<f64>::zeros((n, ci, h, wdt));
                let mut gw = ndarray::Array4::<f64>::zeros((co, ci, kh, kw));
                for i in 0..n {
                    for oc in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = gv[[i, oc, oy, ox]];
                                if go == 0.0 {
                                    continue;
                                }
                                for icx in 0..ci {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < *pad || iy - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < *pad || ix - pad >= wdt {
                                                continue;
                                            }
                                            gx[[i, icx, iy - pad, ix - pad]] +=
                                                go * wv[[oc, icx, ky, kx]];
                                            gw[[oc, icx, ky, kx]] +=
                                                go * xv[[i, icx, iy - pad, ix - pad]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                send(*x, gx.into_dyn());
                send(*w, gw.into_dyn());
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let lv = self.nodes[*logits].value.view().into_dimensionality::<Ix2>().unwrap();
                let (n, k) = lv.dim();
                let gd = g[[]] / n as f64;
                let mut gl = ndarray::Array2::<f64>::zeros((n, k));
                for i in 0..n {
                    let row = lv.row(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - mx).exp() / denom;
                        gl[[i, j]] = gd * (p - if j == labels[i] { 1.0 } else { 0.0 });
                    }
                }
                send(*logits, gl.into_dyn());
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
