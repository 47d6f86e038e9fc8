use std::ops::Range;

use super::{ActivationKind, ParamLayout};
use crate::error::{check_dim, Error, Result};

pub type NodeId = usize;

/// Affine map `y = W x + b`; `W` is `d_out x d_in`, row-major, and both blocks
/// live in an external parameter array at the stored offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: usize,
    pub bias: usize,
}

impl LinearLayer {
    /// Registers the weight and bias blocks of a new layer in `layout`.
    pub fn allocate(layout: &mut ParamLayout, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = layout.push(format!("{name}.weight"), d_out, d_in).start;
        let bias = layout.push(format!("{name}.bias"), d_out, 1).start;
        LinearLayer {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    pub fn weight_range(&self) -> Range<usize> {
        self.weight..self.weight + self.d_in * self.d_out
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.bias..self.bias + self.d_out
    }

    fn param_end(&self) -> usize {
        self.weight_range().end.max(self.bias_range().end)
    }

    #[inline]
    pub fn apply(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &params[self.weight_range()];
        let b = &params[self.bias_range()];
        for (i, (o, row)) in out.iter_mut().zip(w.chunks_exact(self.d_in)).enumerate() {
            *o = b[i] + dot(row, x);
        }
    }

    /// Accumulates parameter and input adjoints for output adjoint `gy`.
    #[inline]
    fn accumulate_grad(
        &self,
        params: &[f64],
        x: &[f64],
        gy: &[f64],
        gx: &mut [f64],
        gparams: &mut [f64],
    ) {
        let w = &params[self.weight_range()];
        let (gw_start, gb_start) = (self.weight, self.bias);
        for (i, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gparams[gb_start + i] += g;
            let row = i * self.d_in;
            let gw = &mut gparams[gw_start + row..gw_start + row + self.d_in];
            for (gwj, &xj) in gw.iter_mut().zip(x) {
                *gwj += g * xj;
            }
            for (gxj, &wj) in gx.iter_mut().zip(&w[row..row + self.d_in]) {
                *gxj += g * wj;
            }
        }
    }
}

/// Four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Node operation. Operands always refer to earlier nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Linear { layer: LinearLayer, arg: NodeId },
    Activation { kind: ActivationKind, arg: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    /// Reduces a vector to its (length one) sum.
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    dim: usize,
}

/// Incrementally assembles an [`ExprGraph`]. Node 0 is the input.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(input_dim: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                op: Op::Input,
                dim: input_dim,
            }],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn dim(&self, node: NodeId) -> usize {
        self.nodes[node].dim
    }

    fn push(&mut self, op: Op, dim: usize) -> NodeId {
        self.nodes.push(Node { op, dim });
        self.nodes.len() - 1
    }

    /// Allocates a new layer in `layout` and applies it to `arg`.
    pub fn linear(
        &mut self,
        layout: &mut ParamLayout,
        name: &str,
        arg: NodeId,
        d_out: usize,
    ) -> NodeId {
        let layer = LinearLayer::allocate(layout, name, self.dim(arg), d_out);
        self.push(Op::Linear { layer, arg }, d_out)
    }

    pub fn linear_with(&mut self, layer: LinearLayer, arg: NodeId) -> Result<NodeId> {
        check_dim("linear layer input", layer.d_in, self.dim(arg))?;
        Ok(self.push(Op::Linear { layer, arg }, layer.d_out))
    }

    pub fn activation(&mut self, kind: ActivationKind, arg: NodeId) -> NodeId {
        let dim = self.dim(arg);
        self.push(Op::Activation { kind, arg }, dim)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_dim("add", self.dim(a), self.dim(b))?;
        let dim = self.dim(a);
        Ok(self.push(Op::Add(a, b), dim))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_dim("mul", self.dim(a), self.dim(b))?;
        let dim = self.dim(a);
        Ok(self.push(Op::Mul(a, b), dim))
    }

    pub fn scale(&mut self, arg: NodeId, factor: f64) -> NodeId {
        let dim = self.dim(arg);
        self.push(Op::Scale(arg, factor), dim)
    }

    pub fn exp(&mut self, arg: NodeId) -> NodeId {
        let dim = self.dim(arg);
        self.push(Op::Exp(arg), dim)
    }

    pub fn sum(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Sum(arg), 1)
    }

    /// Freezes the graph; `outputs` are concatenated in the given order.
    pub fn finish(self, outputs: &[NodeId]) -> ExprGraph {
        let values: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.dim]).collect();
        let adjoints = values.clone();
        let param_end = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Linear { layer, .. } => Some(layer.param_end()),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        ExprGraph {
            nodes: self.nodes,
            outputs: outputs.to_vec(),
            values,
            adjoints,
            param_end,
            evaluated: false,
        }
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Static, acyclic computation graph with per-instance value caches.
///
/// Cloning yields an independent instance that can run on another thread.
#[derive(Clone, Debug)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
    values: Vec<Vec<f64>>,
    adjoints: Vec<Vec<f64>>,
    param_end: usize,
    evaluated: bool,
}

impl ExprGraph {
    pub fn input_dim(&self) -> usize {
        self.nodes[0].dim
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.iter().map(|&o| self.nodes[o].dim).sum()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Smallest parameter array length the graph can address.
    pub fn param_end(&self) -> usize {
        self.param_end
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Linear { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// Cached value of output `index` from the last forward pass.
    pub fn output(&self, index: usize) -> &[f64] {
        &self.values[self.outputs[index]]
    }

    pub fn forward(&mut self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(params, input)?;
        let mut out = Vec::with_capacity(self.output_dim());
        for &o in &self.outputs {
            out.extend_from_slice(&self.values[o]);
        }
        Ok(out)
    }

    /// Forward pass that only fills the caches; read results with [`ExprGraph::output`].
    pub fn evaluate(&mut self, params: &[f64], input: &[f64]) -> Result<()> {
        check_dim("graph input", self.input_dim(), input.len())?;
        if params.len() < self.param_end {
            return Err(Error::Dimension {
                context: "graph parameters",
                expected: self.param_end,
                got: params.len(),
            });
        }
        self.values[0].copy_from_slice(input);
        for id in 1..self.nodes.len() {
            let (done, rest) = self.values.split_at_mut(id);
            let out = &mut rest[0];
            match &self.nodes[id].op {
                Op::Input => unreachable!("only node 0 is an input"),
                Op::Linear { layer, arg } => layer.apply(params, &done[*arg], out),
                Op::Activation { kind, arg } => {
                    for (o, &x) in out.iter_mut().zip(&done[*arg]) {
                        *o = kind.apply(x);
                    }
                }
                Op::Add(a, b) => {
                    for ((o, &x), &y) in out.iter_mut().zip(&done[*a]).zip(&done[*b]) {
                        *o = x + y;
                    }
                }
                Op::Mul(a, b) => {
                    for ((o, &x), &y) in out.iter_mut().zip(&done[*a]).zip(&done[*b]) {
                        *o = x * y;
                    }
                }
                Op::Scale(arg, c) => {
                    for (o, &x) in out.iter_mut().zip(&done[*arg]) {
                        *o = c * x;
                    }
                }
                Op::Exp(arg) => {
                    for (o, &x) in out.iter_mut().zip(&done[*arg]) {
                        *o = x.exp();
                    }
                }
                Op::Sum(arg) => out[0] = done[*arg].iter().sum(),
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Reverse pass for the scalar `seed . output`.
    ///
    /// Parameter adjoints are added into `param_grad` (indexed like `params`);
    /// the input adjoint is returned.
    pub fn backward(
        &mut self,
        params: &[f64],
        seed: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        check_dim("backward seed", self.output_dim(), seed.len())?;
        if param_grad.len() < self.param_end {
            return Err(Error::Dimension {
                context: "parameter gradient",
                expected: self.param_end,
                got: param_grad.len(),
            });
        }
        for a in &mut self.adjoints {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut offset = 0;
        for &o in &self.outputs {
            let d = self.nodes[o].dim;
            for (a, s) in self.adjoints[o].iter_mut().zip(&seed[offset..offset + d]) {
                *a += s;
            }
            offset += d;
        }
        for id in (1..self.nodes.len()).rev() {
            let (lo, hi) = self.adjoints.split_at_mut(id);
            let gy = &hi[0];
            let vals = &self.values;
            match &self.nodes[id].op {
                Op::Input => unreachable!("only node 0 is an input"),
                Op::Linear { layer, arg } => {
                    layer.accumulate_grad(params, &vals[*arg], gy, &mut lo[*arg], param_grad)
                }
                Op::Activation { kind, arg } => {
                    for ((g, &y), &x) in lo[*arg].iter_mut().zip(gy).zip(&vals[*arg]) {
                        *g += y * kind.derivative(x);
                    }
                }
                Op::Add(a, b) => {
                    for (g, &y) in lo[*a].iter_mut().zip(gy) {
                        *g += y;
                    }
                    for (g, &y) in lo[*b].iter_mut().zip(gy) {
                        *g += y;
                    }
                }
                Op::Mul(a, b) => {
                    for ((g, &y), &v) in lo[*a].iter_mut().zip(gy).zip(&vals[*b]) {
                        *g += y * v;
                    }
                    for ((g, &y), &v) in lo[*b].iter_mut().zip(gy).zip(&vals[*a]) {
                        *g += y * v;
                    }
                }
                Op::Scale(arg, c) => {
                    for (g, &y) in lo[*arg].iter_mut().zip(gy) {
                        *g += c * y;
                    }
                }
                Op::Exp(arg) => {
                    for ((g, &y), &e) in lo[*arg].iter_mut().zip(gy).zip(&vals[id]) {
                        *g += y * e;
                    }
                }
                Op::Sum(arg) => {
                    let y = gy[0];
                    lo[*arg].iter_mut().for_each(|g| *g += y);
                }
            }
        }
        Ok(self.adjoints[0].clone())
    }

    /// Convenience wrapper returning fresh gradient buffers.
    pub fn gradients(&mut self, params: &[f64], seed: &[f64]) -> Result<Gradients> {
        let mut pg = vec![0.0; params.len()];
        let input = self.backward(params, seed, &mut pg)?;
        Ok(Gradients { params: pg, input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_linear_layer() {
        let mut layout = ParamLayout::new();
        let mut b = GraphBuilder::new(2);
        let y = b.linear(&mut layout, "l", 0, 2);
        let mut g = b.finish(&[y]);
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(g.forward(&params, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut b = GraphBuilder::new(1);
        let x = b.input();
        let y = b.mul(x, x).unwrap();
        let mut g = b.finish(&[y]);
        assert_eq!(g.forward(&[], &[3.0]).unwrap(), vec![9.0]);
        let grads = g.gradients(&[], &[1.0]).unwrap();
        assert_eq!(grads.input, vec![6.0]);
    }

    #[test]
    fn bias_gradient_equals_seed() {
        let mut layout = ParamLayout::new();
        let mut b = GraphBuilder::new(3);
        let y = b.linear(&mut layout, "l", 0, 2);
        let mut g = b.finish(&[y]);
        let params: Vec<f64> = (0..layout.len()).map(|i| i as f64 * 0.1).collect();
        g.forward(&params, &[0.3, -1.0, 2.0]).unwrap();
        let seed = [0.7, -1.3];
        let grads = g.gradients(&params, &seed).unwrap();
        let bias = layout.get("l.bias").unwrap().range();
        assert_eq!(&grads.params[bias], &seed);
    }

    #[test]
    fn backward_requires_forward() {
        let mut layout = ParamLayout::new();
        let mut b = GraphBuilder::new(1);
        let y = b.linear(&mut layout, "l", 0, 1);
        let mut g = b.finish(&[y]);
        let params = vec![0.0; layout.len()];
        assert!(matches!(
            g.gradients(&params, &[1.0]),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn shape_errors() {
        let mut layout = ParamLayout::new();
        let mut b = GraphBuilder::new(2);
        let y = b.linear(&mut layout, "l", 0, 3);
        assert!(b.add(0, y).is_err());
        let mut g = b.finish(&[y]);
        let params = vec![0.0; layout.len()];
        assert!(matches!(
            g.forward(&params, &[1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(g.forward(&params[..2], &[1.0, 2.0]).is_err());
        g.forward(&params, &[1.0, 2.0]).unwrap();
        assert!(g.gradients(&params, &[1.0]).is_err());
    }

    #[test]
    fn elementwise_ops_match_fd() {
        // f(x) = sum(exp(0.5 * x) * x + x)
        let mut b = GraphBuilder::new(3);
        let x = b.input();
        let h = b.scale(x, 0.5);
        let e = b.exp(h);
        let m = b.mul(e, x).unwrap();
        let a = b.add(m, x).unwrap();
        let s = b.sum(a);
        let mut g = b.finish(&[s]);
        let point = [0.3, -1.2, 2.0];
        g.forward(&[], &point).unwrap();
        let grads = g.gradients(&[], &[1.0]).unwrap();
        let mut g2 = g.clone();
        let fd = fd_gradient(|p: &[f64]| g2.forward(&[], p).unwrap()[0], &point, 1e-6).unwrap();
        for (a, b) in grads.input.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-7);
        }
    }

    fn random_mlp(
        rng: &mut ChaCha8Rng,
        depth: usize,
        max_width: usize,
    ) -> (ExprGraph, ParamLayout, usize) {
        let kinds = [
            ActivationKind::Tanh,
            ActivationKind::selu(),
            ActivationKind::LogSigmoid,
            ActivationKind::Identity,
        ];
        let d_in = rng.random_range(1..=4);
        let mut layout = ParamLayout::new();
        let mut b = GraphBuilder::new(d_in);
        let mut node = b.input();
        for i in 0..depth {
            let w = rng.random_range(1..=max_width);
            node = b.linear(&mut layout, &format!("l{i}"), node, w);
            node = b.activation(kinds[rng.random_range(0..kinds.len())], node);
        }
        let out = b.linear(&mut layout, "out", node, rng.random_range(1..=3));
        // Two heads off the same trunk exercise adjoint accumulation.
        let head = b.linear(&mut layout, "head", node, 1);
        (b.finish(&[out, head]), layout, d_in)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_networks_match_fd(seed in any::<u64>(), depth in 0usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut g, layout, d_in) = random_mlp(&mut rng, depth, 50);
            let params: Vec<f64> = (0..layout.len())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let input: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            let seed_vec: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            g.forward(&params, &input).unwrap();
            let grads = g.gradients(&params, &seed_vec).unwrap();

            let mut probe = g.clone();
            let mut scalar = |p: &[f64], x: &[f64]| -> f64 {
                let out = probe.forward(p, x).unwrap();
                out.iter().zip(&seed_vec).map(|(a, b)| a * b).sum()
            };
            let fd_p = fd_gradient(|p| scalar(p, &input), &params, 1e-6).unwrap();
            let fd_x = fd_gradient(|x| scalar(&params, x), &input, 1e-6).unwrap();
            // Absolute floor: components near zero carry only round-off.
            let scale = fd_p.iter().chain(&fd_x).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
            for (a, b) in grads.params.iter().zip(&fd_p).chain(grads.input.iter().zip(&fd_x)) {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale);
                prop_assert!(err < 1e-5, "analytic {} vs fd {}", a, b);
            }
        }
    }
}
