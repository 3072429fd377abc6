//! Reverse-mode automatic differentiation over tensor expressions.
//!
//! A [`Tape`] records operations in construction order, which is already a
//! topological order of the (acyclic) expression graph. [`Tape::backward`]
//! walks the tape in reverse, accumulating gradients into every node that
//! can reach a trainable leaf. A finite-difference [`grad_check`] validates
//! analytic gradients against central differences.

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    AddBias(usize, usize),
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
    },
    Act(usize, Activation),
    /// Elementwise tilted loss of a residual tensor.
    Pinball {
        residual: usize,
        tau: f64,
    },
    SumAll(usize),
    /// Same data, new shape.
    Reshape(usize),
    /// Extract one index of the last axis.
    Select {
        input: usize,
        channel: usize,
    },
    /// Elementwise multiply by a constant tensor (dropout masks).
    MulConst(usize, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Expression tape. One tape per loss evaluation; distinct tapes are
/// independent and may live on distinct threads.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a trainable leaf (gradients will be accumulated for it).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::sub(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::hadamard(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(alpha);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a.0, alpha), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a.0, b.0), rg))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::add_bias(&self.nodes[x.0].value, &self.nodes[bias.0].value)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x.0, bias.0), rg))
    }

    pub fn conv2d_same(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::conv2d_same(
            &self.nodes[input.0].value,
            &self.nodes[kernels.0].value,
            &self.nodes[bias.0].value,
        )?;
        let rg = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = tensor::activation(&self.nodes[x.0].value, kind);
        let rg = self.needs(x);
        self.push(value, Op::Act(x.0, kind), rg)
    }

    /// Elementwise tilted loss `max(tau * r, (tau - 1) * r)` of a residual.
    pub fn pinball(&mut self, residual: NodeId, tau: f64) -> Result<NodeId> {
        if !(0.0 < tau && tau < 1.0) {
            return Err(Error::invalid(
                "pinball",
                format!("tau must lie in (0,1), got {}", tau),
            ));
        }
        let value = self.nodes[residual.0]
            .value
            .map(|r| (tau * r).max((tau - 1.0) * r));
        let rg = self.needs(residual);
        Ok(self.push(
            value,
            Op::Pinball {
                residual: residual.0,
                tau,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.needs(x);
        self.push(value, Op::SumAll(x.0), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let c = *v.shape().last().unwrap();
        if channel >= c {
            return Err(Error::shape(
                "select_channel",
                "channel",
                format!("< {}", c),
                channel,
            ));
        }
        let value = v.select_last_axis(channel);
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::Select {
                input: x.0,
                channel,
            },
            rg,
        ))
    }

    pub fn mul_const(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let value = tensor::hadamard(&self.nodes[x.0].value, &mask)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MulConst(x.0, mask), rg))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; every
    /// trainable leaf reachable from `loss` gets `d loss / d leaf`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        if !self.nodes[loss.0].value.item().is_finite() {
            return Err(Error::NonFinite {
                context: "backward loss".to_string(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads[*b], g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let d = tensor::hadamard(&g, &self.nodes[*b].value)?;
                        accumulate(&mut grads[*a], d);
                    }
                    if self.nodes[*b].requires_grad {
                        let d = tensor::hadamard(&g, &self.nodes[*a].value)?;
                        accumulate(&mut grads[*b], d);
                    }
                }
                Op::Scale(a, alpha) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads[*a], g.scale(*alpha));
                    }
                }
                Op::Matmul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let d = matmul_nt(&g, &self.nodes[*b].value);
                        accumulate(&mut grads[*a], d);
                    }
                    if self.nodes[*b].requires_grad {
                        let d = matmul_tn(&self.nodes[*a].value, &g);
                        accumulate(&mut grads[*b], d);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut grads[*x], g.clone());
                    }
                    if self.nodes[*bias].requires_grad {
                        let c = self.nodes[*bias].value.len();
                        let mut d = vec![0.0; c];
                        for chunk in g.data().chunks(c) {
                            for (acc, &gv) in d.iter_mut().zip(chunk) {
                                *acc += gv;
                            }
                        }
                        accumulate(&mut grads[*bias], Tensor::from_vec(vec![c], d)?);
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                } => {
                    if self.nodes[*input].requires_grad {
                        let d = tensor::conv2d_same_grad_input(&g, &self.nodes[*kernels].value);
                        accumulate(&mut grads[*input], d);
                    }
                    if self.nodes[*kernels].requires_grad {
                        let kshape = self.nodes[*kernels].value.shape();
                        let d = tensor::conv2d_same_grad_kernels(
                            &g,
                            &self.nodes[*input].value,
                            kshape[0],
                            kshape[1],
                        );
                        accumulate(&mut grads[*kernels], d);
                    }
                    if self.nodes[*bias].requires_grad {
                        accumulate(&mut grads[*bias], tensor::conv2d_same_grad_bias(&g));
                    }
                }
                Op::Act(x, kind) => {
                    if self.nodes[*x].requires_grad {
                        let v = &self.nodes[idx].value;
                        let d = match kind {
                            Activation::Sigmoid => {
                                let local = v.map(|s| s * (1.0 - s));
                                tensor::hadamard(&g, &local)?
                            }
                            Activation::Tanh => {
                                let local = v.map(|t| 1.0 - t * t);
                                tensor::hadamard(&g, &local)?
                            }
                            Activation::Linear => g.clone(),
                        };
                        accumulate(&mut grads[*x], d);
                    }
                }
                Op::Pinball { residual, tau } => {
                    if self.nodes[*residual].requires_grad {
                        // Subgradient tau at the kink r = 0.
                        let tau = *tau;
                        let slope = self.nodes[*residual]
                            .value
                            .map(|r| if r >= 0.0 { tau } else { tau - 1.0 });
                        let d = tensor::hadamard(&g, &slope)?;
                        accumulate(&mut grads[*residual], d);
                    }
                }
                Op::SumAll(x) => {
                    if self.nodes[*x].requires_grad {
                        let d = Tensor::filled(self.nodes[*x].value.shape(), g.item());
                        accumulate(&mut grads[*x], d);
                    }
                }
                Op::Reshape(x) => {
                    if self.nodes[*x].requires_grad {
                        let d = g.reshape(self.nodes[*x].value.shape().to_vec())?;
                        accumulate(&mut grads[*x], d);
                    }
                }
                Op::Select { input, channel } => {
                    if self.nodes[*input].requires_grad {
                        let ishape = self.nodes[*input].value.shape();
                        let c = *ishape.last().unwrap();
                        let mut d = Tensor::zeros(ishape);
                        for (p, &gv) in g.data().iter().enumerate() {
                            d.data_mut()[p * c + channel] = gv;
                        }
                        accumulate(&mut grads[*input], d);
                    }
                }
                Op::MulConst(x, mask) => {
                    if self.nodes[*x].requires_grad {
                        let d = tensor::hadamard(&g, mask)?;
                        accumulate(&mut grads[*x], d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zero tensor when the leaf was never reached.
    pub fn for_leaf(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// `g (r,c) . b^T (k,c)` -> `(r,k)`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g.data()[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b.data()[p * c..(p + 1) * c];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::from_vec(vec![r, k], out).unwrap()
}

/// `a^T (r,k) . g (r,c)` -> `(k,c)`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = g.shape()[1];
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let arow = &a.data()[i * k..(i + 1) * k];
        let grow = &g.data()[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::from_vec(vec![k, c], out).unwrap()
}

/// Compare analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh tape from leaves registered in the
/// order of `params`. Returns the max over all parameter elements of
/// `|analytic - numeric| / max(1, |numeric|)`. Probe points must keep `f`
/// differentiable (stay away from tilted-loss kinks, no dropout).
pub fn grad_check<F>(params: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = probe.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check evaluation".to_string(),
            });
        }
        Ok(v)
    };

    // Analytic gradients at the probe point.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.for_leaf(&tape, id)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for e in 0..param.len() {
            let orig = param.data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
