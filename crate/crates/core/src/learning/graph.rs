//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Only the operations the models use are provided. Every op validates shapes
//! and records a closure that maps the output gradient to input gradients.
//! With recording disabled the graph is a plain evaluator.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::learning::attention::{attention_backward, attention_forward, AttentionDims};
use crate::learning::tensor::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use crate::learning::{Grads, Params, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Parameter gradients. Parameters that were read but received no
    /// gradient flow get explicit zeros.
    pub fn into_param_grads(mut self, params: &Params) -> Grads {
        let mut out = Grads::new();
        for (name, var) in &self.params {
            let g = self.by_node[var.0].take().unwrap_or_else(|| {
                Tensor::zeros(params.get(name).map(|t| t.shape()).unwrap_or(&[0]))
            });
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: true,
        }
    }

    /// A graph that evaluates values only.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None)
    }

    /// Reads a named parameter. Repeated reads of the same name share a node.
    pub fn param(&mut self, store: &Params, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.constant(store.get(name)?.clone());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let node = if self.record {
            Node {
                value,
                parents,
                backward,
            }
        } else {
            Node {
                value,
                parents: Vec::new(),
                backward: None,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::InvalidArgument(
                "backward on a non-recording graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| self.value(*p)).collect();
            let parent_grads = backward(&inputs, &node.value, &g);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.map(|x| -x)])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|inp, _, g| {
                vec![
                    g.zip_map(inp[1], |g, y| g * y).expect("shape"),
                    g.zip_map(inp[0], |g, x| g * x).expect("shape"),
                ]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, vec![a], Some(Box::new(move |_, _, g| vec![g.map(|x| x * c)])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(|inp, _, g| {
                vec![g
                    .zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("shape")]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(
            out,
            vec![a],
            Some(Box::new(|inp, _, g| {
                vec![g
                    .zip_map(inp[0], |g, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("shape")]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![g.clone().reshape(&in_shape).expect("shape")]
            })),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if perm.len() != x.ndim() || {
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            seen != (0..perm.len()).collect::<Vec<_>>()
        } {
            return Err(Error::dim(format!(
                "invalid permutation {perm:?} for shape {:?}",
                x.shape()
            )));
        }
        let out = permute_tensor(x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| vec![permute_tensor(g, &inverse)])),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat axis out of range"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "cannot concatenate {first:?} with {s:?} along axis {axis}"
                )));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &n) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |inp, _, g| {
                let gd = g.data();
                let mut outs: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&n| Vec::with_capacity(outer * n * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &n) in outs.iter_mut().zip(&sizes) {
                        buf.extend_from_slice(&gd[off..off + n * inner]);
                        off += n * inner;
                    }
                }
                outs.into_iter()
                    .zip(inp)
                    .map(|(d, t)| Tensor::new(t.shape(), d).expect("shape"))
                    .collect()
            })),
        ))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn select_outer(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("index {bad} out of range for axis of size {n}")));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(&shape, data)?;
        let indices = indices.to_vec();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |inp, _, g| {
                let mut dx = Tensor::zeros(inp[0].shape());
                let gd = g.data();
                let dd = dx.data_mut();
                for (row, &i) in indices.iter().enumerate() {
                    for k in 0..inner {
                        dd[i * inner + k] += gd[row * inner + k];
                    }
                }
                vec![dx]
            })),
        ))
    }

    // ---- dense ----

    /// `x[..., din] · w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.ndim() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::dim(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.rows();
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != dout {
                return Err(Error::dim(format!(
                    "linear: bias {:?} vs output width {dout}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nn(xv.data(), wv.data(), &mut out, rows, din, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let out = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |inp, _, g| {
                let gd = g.data();
                let mut dx = vec![0.0; rows * din];
                gemm_nt(gd, inp[1].data(), &mut dx, rows, dout, din);
                let mut dw = vec![0.0; din * dout];
                gemm_tn(inp[0].data(), gd, &mut dw, din, rows, dout);
                let mut out = vec![
                    Tensor::new(inp[0].shape(), dx).expect("shape"),
                    Tensor::new(inp[1].shape(), dw).expect("shape"),
                ];
                if has_bias {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    out.push(Tensor::new(inp[2].shape(), db).expect("shape"));
                }
                out
            })),
        ))
    }

    /// Multi-head scaled dot-product attention over `[B, T, d]` inputs.
    ///
    /// `mask`, when given, is a row-major `Tq×Tk` table of allowed entries
    /// shared by every batch element and head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let dims = AttentionDims::infer(
            self.shape(q),
            self.shape(k),
            self.shape(v),
            heads,
            mask.as_deref().map(Vec::len),
        )?;
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &dims,
            mask.as_deref().map(Vec::as_slice),
        )?;
        let out = Tensor::new(&[dims.batch, dims.tq, dims.dv], out)?;
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(
            out,
            vec![q, k, v],
            Some(Box::new(move |inp, _, g| {
                let (dq, dk, dv) =
                    attention_backward(inp[0].data(), inp[1].data(), inp[2].data(), &probs, g.data(), &dims);
                vec![
                    Tensor::new(inp[0].shape(), dq).expect("shape"),
                    Tensor::new(inp[1].shape(), dk).expect("shape"),
                    Tensor::new(inp[2].shape(), dv).expect("shape"),
                ]
            })),
        ))
    }

    // ---- convolution ----

    /// 2D convolution of `x[N, Cin, H, W]` with `w[Cout, Cin, k, k]` and bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::dim(format!(
                "conv2d: input {xs:?} vs weight {ws:?}"
            )));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::dim("conv2d: bias length must equal output channels"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] || stride == 0 {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        }
        let geo = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, cout) = (xs[0], ws[0]);
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let positions = ho * wo;
        let patch = geo.patch_len();
        let in_len = geo.channels * geo.height * geo.width;
        let record = self.record;

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cols = vec![0.0; patch * positions];
                geo.im2col(&xv[i * in_len..(i + 1) * in_len], &mut cols);
                let mut out = vec![0.0; cout * positions];
                for (c, row) in out.chunks_mut(positions).enumerate() {
                    row.fill(bv[c]);
                }
                gemm_nn(wv, &cols, &mut out, cout, patch, positions);
                (out, if record { cols } else { Vec::new() })
            })
            .collect();
        let mut data = Vec::with_capacity(n * cout * positions);
        let mut cols_all = Vec::with_capacity(n);
        for (o, c) in per_sample {
            data.extend_from_slice(&o);
            cols_all.push(c);
        }
        let out = Tensor::new(&[n, cout, ho, wo], data)?;
        Ok(self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |inp, _, g| {
                let gd = g.data();
                let wv = inp[1].data();
                let out_len = cout * positions;
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let go = &gd[i * out_len..(i + 1) * out_len];
                        let mut dw = vec![0.0; cout * patch];
                        gemm_nt(go, &cols_all[i], &mut dw, cout, positions, patch);
                        let mut dcols = vec![0.0; patch * positions];
                        gemm_tn(wv, go, &mut dcols, patch, cout, positions);
                        let mut dx = vec![0.0; in_len];
                        geo.col2im(&dcols, &mut dx);
                        let db: Vec<f64> = go.chunks(positions).map(|r| r.iter().sum()).collect();
                        (dx, dw, db)
                    })
                    .collect();
                let mut dx = Vec::with_capacity(n * in_len);
                let mut dw = vec![0.0; cout * patch];
                let mut db = vec![0.0; cout];
                for (px, pw, pb) in parts {
                    dx.extend_from_slice(&px);
                    for (a, b) in dw.iter_mut().zip(&pw) {
                        *a += b;
                    }
                    for (a, b) in db.iter_mut().zip(&pb) {
                        *a += b;
                    }
                }
                vec![
                    Tensor::new(inp[0].shape(), dx).expect("shape"),
                    Tensor::new(inp[1].shape(), dw).expect("shape"),
                    Tensor::new(inp[2].shape(), db).expect("shape"),
                ]
            })),
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("upsample2x expects [N, C, H, W]"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |inp, _, g| {
                let gd = g.data();
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Tensor::new(inp[0].shape(), dx).expect("shape")]
            })),
        ))
    }

    /// Adds a per-sample, per-channel shift `b[N, C]` to `x[N, C, H, W]`.
    pub fn add_channel_shift(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bs = self.shape(b);
        if s.len() != 4 || bs != [s[0], s[1]] {
            return Err(Error::dim(format!(
                "channel shift {bs:?} does not match {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += bv[i];
            }
        }
        Ok(self.push(
            out,
            vec![x, b],
            Some(Box::new(move |inp, _, g| {
                let db: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                vec![
                    g.clone(),
                    Tensor::new(inp[1].shape(), db).expect("shape"),
                ]
            })),
        ))
    }

    // ---- reductions ----

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.expect_same_shape(t)?;
        let n = p.numel() as f64;
        let loss = mse_loss(p, t)?;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred, target],
            Some(Box::new(move |inp, _, g| {
                let s = g.data()[0] * 2.0 / n;
                let d = inp[0].zip_map(inp[1], |a, b| s * (a - b)).expect("shape");
                let neg = d.map(|x| -x);
                vec![d, neg]
            })),
        ))
    }

    /// Mean absolute error; the subgradient at zero difference is zero.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        let loss = l1_loss(p, t)?;
        let n = p.numel() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred, target],
            Some(Box::new(move |inp, _, g| {
                let s = g.data()[0] / n;
                let d = inp[0]
                    .zip_map(inp[1], |a, b| {
                        let diff = a - b;
                        if diff > 0.0 {
                            s
                        } else if diff < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                let neg = d.map(|x| -x);
                vec![d, neg]
            })),
        ))
    }

    /// `Σ x ⊙ w` for a constant weight tensor; used to probe gradients.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(w)?;
        let s: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let w = w.clone();
        Ok(self.push(
            Tensor::scalar(s),
            vec![x],
            Some(Box::new(move |_, _, g| {
                let gs = g.data()[0];
                vec![w.map(|v| v * gs)]
            })),
        ))
    }
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; nd];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared difference over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn concat_and_select_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 1, 2], vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.select_outer(c, &[0, 0]).unwrap();
        assert_eq!(g.shape(s), &[2, 3, 2]);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::scalar(1.0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut g = Graph::new();
        let x = Tensor::new(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let b = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2, 2]);
        for co in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w.get(&[co, ci, ky, kx])
                                        * x.get(&[0, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((g.value(y).get(&[0, co, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    use crate::learning::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gradchecks `build` over the named random inputs.
    fn check(inputs: &[(&str, &[usize])], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut params = Params::new();
        for (name, shape) in inputs {
            params.insert(*name, Tensor::uniform(shape, 1.0, &mut rng));
        }
        let f = |p: &Params| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .map(|(n, _)| g.param(p, n))
                .collect::<Result<_>>()?;
            let out = build(&mut g, &vars);
            let probe = Tensor::new(
                g.shape(out),
                (0..g.value(out).numel()).map(|i| ((i * 7 + 3) as f64 * 0.37).sin()).collect(),
            )?;
            let loss = g.weighted_sum(out, &probe)?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss)?.into_param_grads(p);
            Ok((value, grads))
        };
        let report = gradcheck(f, &params, 1e-6, None).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_linear() {
        check(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])], |g, v| {
            g.linear(v[0], v[1], Some(v[2])).unwrap()
        });
    }

    #[test]
    fn gradcheck_attention_masked_multihead() {
        let mask = Arc::new(vec![true, false, false, true, true, false, true, true, true]);
        check(&[("q", &[2, 3, 4]), ("k", &[2, 3, 4]), ("v", &[2, 3, 6])], move |g, v| {
            g.attention(v[0], v[1], v[2], 2, Some(mask.clone())).unwrap()
        });
    }

    #[test]
    fn gradcheck_conv_and_upsample() {
        check(&[("x", &[2, 2, 5, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            g.upsample2x(y).unwrap()
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        check(&[("a", &[2, 3, 2]), ("b", &[2, 1, 2])], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let p = g.permute(c, &[2, 0, 1]).unwrap();
            let s = g.select_outer(p, &[1, 0, 1]).unwrap();
            g.reshape(s, &[6, 4]).unwrap()
        });
    }

    #[test]
    fn gradcheck_elementwise_and_losses() {
        check(&[("a", &[3, 4]), ("b", &[3, 4])], |g, v| {
            let s = g.silu(v[0]);
            let m = g.mul(s, v[1]).unwrap();
            let d = g.sub(m, v[0]).unwrap();
            let r = g.relu(d);
            let sc = g.scale(r, 0.5);
            let mse = g.mse(sc, v[1]).unwrap();
            let l1 = g.l1(v[0], v[1]).unwrap();
            g.add(mse, l1).unwrap()
        });
        check(&[("x", &[2, 3, 2, 2]), ("b", &[2, 3])], |g, v| {
            g.add_channel_shift(v[0], v[1]).unwrap()
        });
    }
}
