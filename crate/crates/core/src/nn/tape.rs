//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation appends a node holding its forward value plus whatever
//! it needs for the backward pass. Backward is seeded with explicit
//! gradients for any set of nodes, so loss functions can be evaluated
//! outside the tape and injected as `(node, dL/dnode)` pairs.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    ConcatChannels(Var, Var),
    Gather {
        x: Var,
        sample: usize,
        positions: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = c * kh * kw;
        let p = ho * wo;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; n * k * p];
        for s in 0..n {
            im2col(
                &xv[s * c * h * wd..(s + 1) * c * h * wd],
                (c, h, wd),
                (kh, kw),
                stride,
                pad,
                (ho, wo),
                &mut cols[s * k * p..(s + 1) * k * p],
            );
        }
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * p];
        for s in 0..n {
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            gemm(
                o,
                k,
                p,
                wv,
                false,
                &cols[s * k * p..(s + 1) * k * p],
                false,
                dst,
                false,
            );
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out).expect("conv output shape");
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let p = h * w;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(p) {
            let mean = plane.iter().sum::<f64>() / p as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::InstanceNorm { x, inv_std })
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(value, Op::Upsample2x(x))
    }

    /// 2×2 mean pooling, stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for i in 0..ho {
                for j in 0..wo {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let cc = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * wo + j] = 0.25 * (a + b + cc + d);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("pool shape");
        self.push(value, Op::AvgPool2x(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(
            n == nb && h == hb && w == wb,
            "concat_channels: incompatible shapes"
        );
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * h * w..(s + 1) * ca * h * w]);
            out.extend_from_slice(&bv[s * cb * h * w..(s + 1) * cb * h * w]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out).expect("concat shape");
        self.push(value, Op::ConcatChannels(a, b))
    }

    /// Rows `positions` (flattened `i * w + j`) of sample `sample` as an `[S, C]` matrix.
    pub fn gather(&mut self, x: Var, sample: usize, positions: &[usize]) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let base = sample * c * h * w;
        let mut out = Vec::with_capacity(positions.len() * c);
        for &pos in positions {
            assert!(pos < h * w, "gather: position {pos} outside {h}x{w}");
            for ch in 0..c {
                out.push(src[base + ch * h * w + pos]);
            }
        }
        let value = Tensor::from_vec(&[positions.len(), c], out).expect("gather shape");
        self.push(
            value,
            Op::Gather {
                x,
                sample,
                positions: positions.to_vec(),
            },
        )
    }

    /// `x · wᵀ + b` with `x: [S, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (s, fin) = self.value(x).dims2();
        let (fout, win) = self.value(w).dims2();
        assert_eq!(fin, win, "linear: input width {fin} vs weight width {win}");
        let mut out = vec![0.0; s * fout];
        gemm(
            s,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_vec(&[s, fout], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b })
    }

    /// Scale each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).dims2();
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// Smallest |pre-activation| over every ReLU-family node; central finite
    /// differences are only trustworthy when this exceeds the step size.
    pub fn min_kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from explicit seeds `(node, dL/dnode)`.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut params = ParamGrads::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            // Input gradients stay in place for `Gradients::wrt`.
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(id) => params.accumulate(*id, &gy),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (n, c, h, wd) = self.value(*x).dims4();
                    let (o, _, kh, kw) = self.value(*w).dims4();
                    let (_, _, ho, wo) = node.value.dims4();
                    let k = c * kh * kw;
                    let p = ho * wo;
                    let wv = self.value(*w).data();
                    let gyv = gy.data();
                    let mut gw = vec![0.0; o * k];
                    let mut gx = vec![0.0; n * c * h * wd];
                    let mut gcols = vec![0.0; k * p];
                    for s in 0..n {
                        let gys = &gyv[s * o * p..(s + 1) * o * p];
                        gemm(
                            o,
                            p,
                            k,
                            gys,
                            false,
                            &cols[s * k * p..(s + 1) * k * p],
                            true,
                            &mut gw,
                            true,
                        );
                        gemm(k, o, p, wv, true, gys, false, &mut gcols, false);
                        col2im(
                            &gcols,
                            (c, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                            (ho, wo),
                            &mut gx[s * c * h * wd..(s + 1) * c * h * wd],
                        );
                    }
                    if let Some(b) = b {
                        let mut gb = vec![0.0; o];
                        for s in 0..n {
                            for (oc, row) in gyv[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                                gb[oc] += row.iter().sum::<f64>();
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::from_vec(&[o], gb).unwrap());
                    }
                    let wshape = self.value(*w).shape().to_vec();
                    accumulate(&mut grads[w.0], Tensor::from_vec(&wshape, gw).unwrap());
                    accumulate(
                        &mut grads[x.0],
                        Tensor::from_vec(&[n, c, h, wd], gx).unwrap(),
                    );
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (_, _, h, w) = node.value.dims4();
                    let p = (h * w) as f64;
                    let mut gx = gy.clone();
                    for ((gplane, yplane), is) in gx
                        .data_mut()
                        .chunks_mut(h * w)
                        .zip(node.value.data().chunks(h * w))
                        .zip(inv_std)
                    {
                        let sum_g: f64 = gplane.iter().sum();
                        let sum_gy: f64 = gplane.iter().zip(yplane).map(|(g, y)| g * y).sum();
                        for (g, y) in gplane.iter_mut().zip(yplane) {
                            *g = is / p * (p * *g - sum_g - y * sum_gy);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Relu(x) => {
                    let mut gx = gy;
                    for (g, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = gy;
                    for (g, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *g *= slope;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = gy;
                    for (g, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = gy;
                    for (g, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[b.0], gy);
                }
                Op::Upsample2x(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut gx = vec![0.0; n * c * h * w];
                    for (src, dst) in gy.data().chunks(4 * h * w).zip(gx.chunks_mut(h * w)) {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                            }
                        }
                    }
                    accumulate(
                        &mut grads[x.0],
                        Tensor::from_vec(&[n, c, h, w], gx).unwrap(),
                    );
                }
                Op::AvgPool2x(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (_, _, ho, wo) = node.value.dims4();
                    let mut gx = vec![0.0; n * c * h * w];
                    for (src, dst) in gy.data().chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
                        for i in 0..ho {
                            for j in 0..wo {
                                let g = 0.25 * src[i * wo + j];
                                dst[2 * i * w + 2 * j] += g;
                                dst[2 * i * w + 2 * j + 1] += g;
                                dst[(2 * i + 1) * w + 2 * j] += g;
                                dst[(2 * i + 1) * w + 2 * j + 1] += g;
                            }
                        }
                    }
                    accumulate(
                        &mut grads[x.0],
                        Tensor::from_vec(&[n, c, h, w], gx).unwrap(),
                    );
                }
                Op::ConcatChannels(a, b) => {
                    let (n, ca, h, w) = self.value(*a).dims4();
                    let (_, cb, _, _) = self.value(*b).dims4();
                    let mut ga = Vec::with_capacity(n * ca * h * w);
                    let mut gb = Vec::with_capacity(n * cb * h * w);
                    for chunk in gy.data().chunks((ca + cb) * h * w) {
                        ga.extend_from_slice(&chunk[..ca * h * w]);
                        gb.extend_from_slice(&chunk[ca * h * w..]);
                    }
                    accumulate(
                        &mut grads[a.0],
                        Tensor::from_vec(&[n, ca, h, w], ga).unwrap(),
                    );
                    accumulate(
                        &mut grads[b.0],
                        Tensor::from_vec(&[n, cb, h, w], gb).unwrap(),
                    );
                }
                Op::Gather {
                    x,
                    sample,
                    positions,
                } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (_, c, h, w) = self.value(*x).dims4();
                    let mut gx = Tensor::zeros(&shape);
                    let base = sample * c * h * w;
                    let dst = gx.data_mut();
                    for (row, &pos) in gy.data().chunks(c).zip(positions) {
                        for (ch, g) in row.iter().enumerate() {
                            dst[base + ch * h * w + pos] += g;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Linear { x, w, b } => {
                    let (s, fin) = self.value(*x).dims2();
                    let (fout, _) = self.value(*w).dims2();
                    let mut gx = vec![0.0; s * fin];
                    gemm(
                        s,
                        fout,
                        fin,
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut gx,
                        false,
                    );
                    let mut gw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        s,
                        fin,
                        gy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut gw,
                        false,
                    );
                    let mut gb = vec![0.0; fout];
                    for row in gy.data().chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[s, fin], gx).unwrap());
                    accumulate(&mut grads[w.0], Tensor::from_vec(&[fout, fin], gw).unwrap());
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[fout], gb).unwrap());
                }
                Op::L2NormalizeRows { x, norms } => {
                    let (_, d) = node.value.dims2();
                    let mut gx = gy;
                    for ((g, y), &n) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(node.value.data().chunks(d))
                        .zip(norms)
                    {
                        if n > 0.0 {
                            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                            for (gi, yi) in g.iter_mut().zip(y) {
                                *gi = (*gi - yi * dot) / n;
                            }
                        } else {
                            g.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Gradients {
            inputs: grads,
            params,
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    inputs: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient reaching an input node, if any path from a seed touched it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let p = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [f64],
) {
    let p = ho * wo;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
