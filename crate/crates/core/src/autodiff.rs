//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a define-by-run tape: op constructors evaluate eagerly
//! and append a node, [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that transitively depends on a
//! trainable leaf. The op set is exactly what the decomposition pipeline
//! needs: convolutions, activations, warping and resampling (both linear
//! in the image), cost volumes, max fusion, and the reductions used by
//! the losses.
//!
//! Flows entering [`Graph::warp`] are constants by construction — the
//! dense-flow backend is fixed and never trained through — so gradients
//! propagate only into the warped image.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use crate::geom::ResampleAxis;
use crate::image::FlowField;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Mean(usize),
    /// Weighted elementwise sum of same-shaped tensors.
    SumWeighted(Vec<(usize, f64)>),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    /// Spatial mean per channel: `[C, H, W] -> [C]`.
    Gap(usize),
    ConcatC(Vec<usize>),
    SliceC {
        input: usize,
        start: usize,
        len: usize,
    },
    MaxStack {
        inputs: Vec<usize>,
        argmax: Vec<u8>,
    },
    Warp {
        image: usize,
        flow: FlowField,
    },
    Resize(usize),
    GradX(usize),
    GradY(usize),
    CostVolume {
        a: usize,
        b: usize,
        range: usize,
    },
    /// Tiles two components of a vector into a constant `[2, H, W]` field.
    Tile2 { vec: usize, offset: usize },
    MulConst {
        input: usize,
        factor: ArrayD<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Abs(a)
            | Op::Mean(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Gap(a)
            | Op::GradX(a)
            | Op::GradY(a) => vec![*a],
            Op::SumWeighted(terms) => terms.iter().map(|(i, _)| *i).collect(),
            Op::Conv2d {
                input,
                weight,
                bias,
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::ConcatC(parts) => parts.clone(),
            Op::SliceC { input, .. } => vec![*input],
            Op::MaxStack { inputs, .. } => inputs.clone(),
            Op::Warp { image, .. } => vec![*image],
            Op::Resize(input) => vec![*input],
            Op::CostVolume { a, b, .. } => vec![*a, *b],
            Op::Tile2 { vec: v, .. } => vec![*v],
            Op::MulConst { input, .. } => vec![*input],
        }
    }
}

/// Gradients of a scalar with respect to every graph node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    /// In inference mode intermediate buffers may be released and
    /// backward is unavailable.
    inference: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose intermediate values may be dropped with
    /// [`Graph::release_except`]; backward is disabled.
    pub fn new_inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Named trainable leaves, in insertion order.
    pub fn params(&self) -> &[(String, usize)] {
        &self.params
    }

    pub fn param_grads<'g>(&self, grads: &'g Gradients) -> Vec<(&str, Option<&'g ArrayD<f64>>)> {
        self.params
            .iter()
            .map(|(name, id)| (name.as_str(), grads.grads[*id].as_ref()))
            .collect()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        let needs_grad = op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: trainable,
            op: Op::Leaf,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), var.0));
        var
    }

    /// Frees the value buffers of all non-leaf nodes not listed in
    /// `live`. Only valid in inference mode.
    pub fn release_except(&mut self, live: &[Var]) {
        assert!(self.inference, "release_except requires inference mode");
        let mut keep = vec![false; self.nodes.len()];
        for v in live {
            keep[v.0] = true;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !keep[i] && !matches!(node.op, Op::Leaf) && node.value.len() > 0 {
                node.value = ArrayD::zeros(IxDyn(&[0]));
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + s);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a.0))
    }

    pub fn mul_const(&mut self, a: Var, factor: ArrayD<f64>) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), factor.shape());
        let value = &self.nodes[a.0].value * &factor;
        self.push(value, Op::MulConst { input: a.0, factor })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    // ---- reductions ----

    /// Mean over all elements, returning a scalar (0-d) node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a.0))
    }

    /// Weighted sum of same-shaped tensors.
    pub fn sum_weighted(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut value = self.nodes[terms[0].0 .0].value.mapv(|v| v * terms[0].1);
        for (v, w) in &terms[1..] {
            value.zip_mut_with(&self.nodes[v.0].value, |acc, x| *acc += w * x);
        }
        self.push(
            value,
            Op::SumWeighted(terms.iter().map(|(v, w)| (v.0, *w)).collect()),
        )
    }

    pub fn mean_abs(&mut self, a: Var) -> Var {
        let t = self.abs(a);
        self.mean(t)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.mean_abs(d)
    }

    // ---- structured ops ----

    /// 2-D convolution with odd square kernels, stride 1, zero "same"
    /// padding. Input `[Ci, H, W]`, weight `[Co, Ci, K, K]`, bias `[Co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let value = conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    /// Fully connected layer: input `[N]`, weight `[M, N]`, bias `[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let (m, n) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), n);
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let mut out = b.to_owned();
        let os = out.as_slice_mut().unwrap();
        for i in 0..m {
            let row = &ws[i * n..(i + 1) * n];
            os[i] += row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(
            out,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    pub fn gap(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (c, h, w) = dims3(v);
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ch in 0..c {
            out[[ch]] = s[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        self.push(out, Op::Gap(a.0))
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, h, w) = dims3(&self.nodes[parts[0].0].value);
        let total: usize = parts
            .iter()
            .map(|p| self.nodes[p.0].value.shape()[0])
            .sum();
        let mut out = ArrayD::zeros(IxDyn(&[total, h, w]));
        let os = out.as_slice_mut().unwrap();
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let len = v.len();
            os[offset..offset + len].copy_from_slice(v.as_slice().unwrap());
            offset += len;
        }
        self.push(out, Op::ConcatC(parts.iter().map(|p| p.0).collect()))
    }

    /// Channel slice `[start, start + len)` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let v = &self.nodes[input.0].value;
        let (c, h, w) = dims3(v);
        assert!(start + len <= c);
        let s = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[len, h, w]));
        out.as_slice_mut()
            .unwrap()
            .copy_from_slice(&s[start * h * w..(start + len) * h * w]);
        self.push(
            out,
            Op::SliceC {
                input: input.0,
                start,
                len,
            },
        )
    }

    /// Elementwise maximum across same-shaped tensors. Ties route the
    /// gradient to the earliest input.
    pub fn max_stack(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty() && inputs.len() < 256);
        let first = &self.nodes[inputs[0].0].value;
        let mut out = first.clone();
        let mut argmax = vec![0u8; first.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            let vs = self.nodes[v.0].value.as_slice().unwrap().to_vec();
            let os = out.as_slice_mut().unwrap();
            for (i, (o, x)) in os.iter_mut().zip(vs.iter()).enumerate() {
                if *x > *o {
                    *o = *x;
                    argmax[i] = k as u8;
                }
            }
        }
        self.push(
            out,
            Op::MaxStack {
                inputs: inputs.iter().map(|v| v.0).collect(),
                argmax,
            },
        )
    }

    /// Backward-warps an image by a fixed flow field (zero padding). The
    /// flow is a constant: gradients go to the image only.
    pub fn warp(&mut self, image: Var, flow: &FlowField) -> Var {
        let img3 = as3(&self.nodes[image.0].value);
        let out = crate::geom::warp_bilinear(&img3, flow).expect("warp shape checked by caller");
        self.push(
            out.into_dyn(),
            Op::Warp {
                image: image.0,
                flow: flow.clone(),
            },
        )
    }

    /// Bilinear resize of a `[C, H, W]` tensor.
    pub fn resize(&mut self, input: Var, new_h: usize, new_w: usize) -> Var {
        let img3 = as3(&self.nodes[input.0].value);
        let out = crate::geom::resize_bilinear(&img3, new_h, new_w);
        self.push(out.into_dyn(), Op::Resize(input.0))
    }

    /// Forward-difference horizontal gradient; last column zero.
    pub fn grad_x(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (c, h, w) = dims3(v);
        let img3 = as3(v);
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    out[[ch, y, x]] = img3[[ch, y, x + 1]] - img3[[ch, y, x]];
                }
            }
        }
        self.push(out, Op::GradX(a.0))
    }

    /// Forward-difference vertical gradient; last row zero.
    pub fn grad_y(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (c, h, w) = dims3(v);
        let img3 = as3(v);
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    out[[ch, y, x]] = img3[[ch, y + 1, x]] - img3[[ch, y, x]];
                }
            }
        }
        self.push(out, Op::GradY(a.0))
    }

    /// Correlation cost volume: for each pixel and displacement `d` with
    /// `|d|_inf <= range`, the feature dot product between `a` at `x` and
    /// `b` at `x + d`; out-of-bounds partners contribute zero.
    pub fn cost_volume(&mut self, a: Var, b: Var, range: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape(), vb.shape());
        let out = cost_volume_forward(va, vb, range);
        self.push(
            out,
            Op::CostVolume {
                a: a.0,
                b: b.0,
                range,
            },
        )
    }

    /// Tiles components `[offset, offset + 1]` of a vector into a
    /// spatially constant `[2, H, W]` field.
    pub fn tile2(&mut self, vec: Var, offset: usize, h: usize, w: usize) -> Var {
        let v = &self.nodes[vec.0].value;
        assert!(offset + 2 <= v.len());
        let mut out = ArrayD::zeros(IxDyn(&[2, h, w]));
        let s = v.as_slice().unwrap();
        out.slice_mut(ndarray::s![0, .., ..]).fill(s[offset]);
        out.slice_mut(ndarray::s![1, .., ..]).fill(s[offset + 1]);
        self.push(out, Op::Tile2 { vec: vec.0, offset })
    }

    // ---- backward ----

    /// Gradients of the scalar `root` with respect to all nodes that
    /// depend on a trainable leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(!self.inference, "backward is unavailable in inference mode");
        assert!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let shape = self.nodes[root.0].value.raw_dim();
        grads[root.0] = Some(ArrayD::from_elem(shape, 1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = grads[id].take().unwrap();
            self.accumulate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, grad: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, grad * &self.nodes[*b].value);
                self.add_grad(grads, *b, grad * &self.nodes[*a].value);
            }
            Op::Scale(a, s) => self.add_grad(grads, *a, grad.mapv(|v| v * s)),
            Op::AddScalar(a) => self.add_grad(grads, *a, grad.clone()),
            Op::Abs(a) => {
                let sign = self.nodes[*a].value.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.add_grad(grads, *a, grad * &sign);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let g = grad.sum() / n;
                let shape = self.nodes[*a].value.raw_dim();
                self.add_grad(grads, *a, ArrayD::from_elem(shape, g));
            }
            Op::SumWeighted(terms) => {
                for (i, w) in terms {
                    self.add_grad(grads, *i, grad.mapv(|v| v * w));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let factor = self.nodes[*a]
                    .value
                    .mapv(|v| if v > 0.0 { 1.0 } else { *slope });
                self.add_grad(grads, *a, grad * &factor);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let dydx = y.mapv(|s| s * (1.0 - s));
                self.add_grad(grads, *a, grad * &dydx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                if self.nodes[*input].needs_grad {
                    self.add_grad(grads, *input, conv2d_backward_input(w, grad, x.raw_dim()));
                }
                if self.nodes[*weight].needs_grad {
                    self.add_grad(grads, *weight, conv2d_backward_weight(x, grad, w.raw_dim()));
                }
                if self.nodes[*bias].needs_grad {
                    let (co, h, wd) = dims3(grad);
                    let gs = grad.as_slice().unwrap();
                    let mut db = ArrayD::zeros(IxDyn(&[co]));
                    for o in 0..co {
                        db[[o]] = gs[o * h * wd..(o + 1) * h * wd].iter().sum();
                    }
                    self.add_grad(grads, *bias, db);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let gs = grad.as_slice().unwrap();
                if self.nodes[*input].needs_grad {
                    let ws = w.as_slice().unwrap();
                    let mut dx = ArrayD::zeros(x.raw_dim());
                    let dxs = dx.as_slice_mut().unwrap();
                    for i in 0..m {
                        let row = &ws[i * n..(i + 1) * n];
                        for (d, wv) in dxs.iter_mut().zip(row) {
                            *d += gs[i] * wv;
                        }
                    }
                    self.add_grad(grads, *input, dx);
                }
                if self.nodes[*weight].needs_grad {
                    let xs = x.as_slice().unwrap();
                    let mut dw = ArrayD::zeros(w.raw_dim());
                    let dws = dw.as_slice_mut().unwrap();
                    for i in 0..m {
                        for (j, xv) in xs.iter().enumerate() {
                            dws[i * n + j] = gs[i] * xv;
                        }
                    }
                    self.add_grad(grads, *weight, dw);
                }
                if self.nodes[*bias].needs_grad {
                    self.add_grad(grads, *bias, grad.clone());
                }
            }
            Op::Gap(a) => {
                let (c, h, w) = dims3(&self.nodes[*a].value);
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                let inv = 1.0 / (h * w) as f64;
                for ch in 0..c {
                    let g = grad[[ch]] * inv;
                    dx.slice_mut(ndarray::s![ch, .., ..]).fill(g);
                }
                self.add_grad(grads, *a, dx);
            }
            Op::ConcatC(parts) => {
                let (_, h, w) = dims3(grad);
                let gs = grad.as_slice().unwrap();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[*p].value.shape()[0];
                    let len = pc * h * w;
                    if self.nodes[*p].needs_grad {
                        let mut dp = ArrayD::zeros(IxDyn(&[pc, h, w]));
                        dp.as_slice_mut()
                            .unwrap()
                            .copy_from_slice(&gs[offset..offset + len]);
                        self.add_grad(grads, *p, dp);
                    }
                    offset += len;
                }
            }
            Op::SliceC { input, start, len } => {
                let (c, h, w) = dims3(&self.nodes[*input].value);
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                dx.as_slice_mut().unwrap()[start * h * w..(start + len) * h * w]
                    .copy_from_slice(grad.as_slice().unwrap());
                self.add_grad(grads, *input, dx);
            }
            Op::MaxStack { inputs, argmax } => {
                let gs = grad.as_slice().unwrap();
                for (k, inp) in inputs.iter().enumerate() {
                    if !self.nodes[*inp].needs_grad {
                        continue;
                    }
                    let mut d = ArrayD::zeros(grad.raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    for (i, g) in gs.iter().enumerate() {
                        if argmax[i] == k as u8 {
                            ds[i] = *g;
                        }
                    }
                    self.add_grad(grads, *inp, d);
                }
            }
            Op::Warp { image, flow } => {
                let dx = warp_backward_image(grad, flow, self.nodes[*image].value.raw_dim());
                self.add_grad(grads, *image, dx);
            }
            Op::Resize(input) => {
                let src = self.nodes[*input].value.raw_dim();
                self.add_grad(grads, *input, resize_backward(grad, src));
            }
            Op::GradX(a) => {
                let (c, h, w) = dims3(grad);
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w.saturating_sub(1) {
                            let g = grad[[ch, y, x]];
                            dx[[ch, y, x]] -= g;
                            dx[[ch, y, x + 1]] += g;
                        }
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::GradY(a) => {
                let (c, h, w) = dims3(grad);
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for y in 0..h.saturating_sub(1) {
                        for x in 0..w {
                            let g = grad[[ch, y, x]];
                            dx[[ch, y, x]] -= g;
                            dx[[ch, y + 1, x]] += g;
                        }
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::CostVolume { a, b, range } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (da, db) = cost_volume_backward(va, vb, grad, *range);
                if self.nodes[*a].needs_grad {
                    self.add_grad(grads, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Tile2 { vec, offset } => {
                let mut dv = ArrayD::zeros(self.nodes[*vec].value.raw_dim());
                dv[[*offset]] = grad.slice(ndarray::s![0, .., ..]).sum();
                dv[[*offset + 1]] = grad.slice(ndarray::s![1, .., ..]).sum();
                self.add_grad(grads, *vec, dv);
            }
            Op::MulConst { input, factor } => {
                self.add_grad(grads, *input, grad * factor);
            }
        }
    }
}

fn dims3(v: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

fn as3(v: &ArrayD<f64>) -> ndarray::Array3<f64> {
    v.clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected 3-d tensor")
}

// Rayon pays off only on larger planes.
const PAR_THRESHOLD: usize = 64 * 64;

fn conv2d_forward(input: &ArrayD<f64>, weight: &ArrayD<f64>, bias: &ArrayD<f64>) -> ArrayD<f64> {
    let (ci, h, w) = dims3(input);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4);
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci);
    assert_eq!(ws[2], ws[3]);
    assert_eq!(k % 2, 1, "conv kernels must be odd");
    let r = (k / 2) as isize;
    let xs = input.as_slice().unwrap();
    let wv = weight.as_slice().unwrap();
    let bs = bias.as_slice().unwrap();

    let mut out = ArrayD::zeros(IxDyn(&[co, h, w]));
    let os = out.as_slice_mut().unwrap();
    let plane = h * w;
    let body = |o: usize, dst: &mut [f64]| {
        dst.fill(bs[o]);
        for i in 0..ci {
            let src = &xs[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let coeff = wv[((o * ci + i) * k + ky) * k + kx];
                    if coeff == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - r;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            drow[x] += coeff * srow[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    };
    if plane >= PAR_THRESHOLD && co > 1 {
        os.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, dst)| body(o, dst));
    } else {
        for (o, dst) in os.chunks_mut(plane).enumerate() {
            body(o, dst);
        }
    }
    out
}

fn conv2d_backward_input(
    weight: &ArrayD<f64>,
    grad: &ArrayD<f64>,
    input_dim: ndarray::IxDyn,
) -> ArrayD<f64> {
    let (co, h, w) = dims3(grad);
    let ws = weight.shape();
    let (ci, k) = (ws[1], ws[2]);
    let r = (k / 2) as isize;
    let gs = grad.as_slice().unwrap();
    let wv = weight.as_slice().unwrap();
    let mut dx = ArrayD::zeros(input_dim);
    let plane = h * w;
    let dxs = dx.as_slice_mut().unwrap();
    let body = |i: usize, dst: &mut [f64]| {
        for o in 0..co {
            let g = &gs[o * plane..(o + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let coeff = wv[((o * ci + i) * k + ky) * k + kx];
                    if coeff == 0.0 {
                        continue;
                    }
                    let dxo = kx as isize - r;
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = ((w as isize - dxo).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[sy * w..(sy + 1) * w];
                        let grow = &g[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            drow[(x as isize + dxo) as usize] += coeff * grow[x];
                        }
                    }
                }
            }
        }
    };
    if plane >= PAR_THRESHOLD && ci > 1 {
        dxs.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, dst)| body(i, dst));
    } else {
        for (i, dst) in dxs.chunks_mut(plane).enumerate() {
            body(i, dst);
        }
    }
    dx
}

fn conv2d_backward_weight(
    input: &ArrayD<f64>,
    grad: &ArrayD<f64>,
    weight_dim: ndarray::IxDyn,
) -> ArrayD<f64> {
    let (co, h, w) = dims3(grad);
    let ci = weight_dim[1];
    let k = weight_dim[2];
    let r = (k / 2) as isize;
    let xs = input.as_slice().unwrap();
    let gs = grad.as_slice().unwrap();
    let mut dw = ArrayD::zeros(weight_dim);
    let plane = h * w;
    let per_out = ci * k * k;
    let dws = dw.as_slice_mut().unwrap();
    let body = |o: usize, dst: &mut [f64]| {
        let g = &gs[o * plane..(o + 1) * plane];
        for i in 0..ci {
            let src = &xs[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let grow = &g[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            acc += grow[x] * srow[(x as isize + dx) as usize];
                        }
                    }
                    dst[(i * k + ky) * k + kx] = acc;
                }
            }
        }
    };
    if plane >= PAR_THRESHOLD && co > 1 {
        dws.par_chunks_mut(per_out)
            .enumerate()
            .for_each(|(o, dst)| body(o, dst));
    } else {
        for (o, dst) in dws.chunks_mut(per_out).enumerate() {
            body(o, dst);
        }
    }
    dw
}

fn warp_backward_image(
    grad: &ArrayD<f64>,
    flow: &FlowField,
    image_dim: ndarray::IxDyn,
) -> ArrayD<f64> {
    let (c, h, w) = dims3(grad);
    let mut dimg = ArrayD::zeros(image_dim);
    let gs = grad.as_slice().unwrap();
    let ds = dimg.as_slice_mut().unwrap();
    let plane = h * w;
    for ch in 0..c {
        let g = &gs[ch * plane..(ch + 1) * plane];
        let d = &mut ds[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let gv = g[y * w + x];
                if gv == 0.0 {
                    continue;
                }
                let sx = x as f64 + flow[[0, y, x]];
                let sy = y as f64 + flow[[1, y, x]];
                let x0 = sx.floor() as isize;
                let y0 = sy.floor() as isize;
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let xx = x0 + dx;
                        let yy = y0 + dy;
                        let wgt = wx * wy;
                        if wgt != 0.0
                            && xx >= 0
                            && yy >= 0
                            && (xx as usize) < w
                            && (yy as usize) < h
                        {
                            d[yy as usize * w + xx as usize] += wgt * gv;
                        }
                    }
                }
            }
        }
    }
    dimg
}

fn resize_backward(grad: &ArrayD<f64>, src_dim: ndarray::IxDyn) -> ArrayD<f64> {
    let (c, nh, nw) = dims3(grad);
    let (h, w) = (src_dim[1], src_dim[2]);
    let ax = ResampleAxis::new(w, nw);
    let ay = ResampleAxis::new(h, nh);
    let mut dx = ArrayD::zeros(src_dim);
    for ch in 0..c {
        for y in 0..nh {
            let (y0, y1, wy) = (ay.lo[y], ay.hi[y], ay.w_lo[y]);
            for x in 0..nw {
                let (x0, x1, wx) = (ax.lo[x], ax.hi[x], ax.w_lo[x]);
                let g = grad[[ch, y, x]];
                dx[[ch, y0, x0]] += g * wy * wx;
                dx[[ch, y0, x1]] += g * wy * (1.0 - wx);
                dx[[ch, y1, x0]] += g * (1.0 - wy) * wx;
                dx[[ch, y1, x1]] += g * (1.0 - wy) * (1.0 - wx);
            }
        }
    }
    dx
}

pub(crate) fn cost_volume_forward(a: &ArrayD<f64>, b: &ArrayD<f64>, range: usize) -> ArrayD<f64> {
    let (c, h, w) = dims3(a);
    let side = 2 * range + 1;
    let r = range as isize;
    let mut out = ArrayD::zeros(IxDyn(&[side * side, h, w]));
    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let plane = h * w;
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dy + r) as usize * side) + (dx + r) as usize;
            for ch in 0..c {
                let ap = &asl[ch * plane..(ch + 1) * plane];
                let bp = &bsl[ch * plane..(ch + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[d, y, x]] += ap[y * w + x] * bp[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

fn cost_volume_backward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    grad: &ArrayD<f64>,
    range: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (c, h, w) = dims3(a);
    let side = 2 * range + 1;
    let r = range as isize;
    let mut da = ArrayD::zeros(a.raw_dim());
    let mut db = ArrayD::zeros(b.raw_dim());
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dy + r) as usize * side) + (dx + r) as usize;
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let g = grad[[d, y, x]];
                        if g == 0.0 {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        da[[ch, y, x]] += g * b[[ch, sy, sx]];
                        db[[ch, sy, sx]] += g * a[[ch, y, x]];
                    }
                }
            }
        }
    }
    (da, db)
}

/// Central finite-difference gradient of `f` at `at`. Test utility for
/// validating analytic gradients.
pub fn finite_difference_gradient<F>(f: F, at: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(at.raw_dim());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let slice = probe.as_slice_mut().unwrap();
        let orig = slice[i];
        slice[i] = orig + step;
        let hi = f(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig - step;
        let lo = f(&probe);
        let slice = probe.as_slice_mut().unwrap();
        slice[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (hi - lo) / (2.0 * step);
    }
    grad
}
