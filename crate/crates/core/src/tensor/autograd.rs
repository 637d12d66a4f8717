use crate::error::{Error, Result};
use crate::relu_variants::{self, GateDecision, GateWeights, GroupingSpec};

use super::kernels::{self, ConvGeometry};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geometry: ConvGeometry },
    Dense { x: Var, w: Var, b: Var },
    AvgPool { x: Var, kernel: usize, stride: usize },
    Relu { x: Var },
    Gate {
        x: Var,
        weights: Option<Var>,
        spec: Box<GroupingSpec>,
        decision: GateDecision,
        temperature: f64,
    },
    Scale { x: Var, mask: Vec<f64> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of differentiable operations. Entries are stored in
/// execution order, so every input precedes the entries that consume it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geometry = kernels::conv2d_geometry(xv, wv, bv, stride, padding)?;
        let out = kernels::conv2d_forward(xv, wv, bv, stride, padding)?;
        self.push(out, &[x, w, b], Op::Conv2d { x, w, b, geometry }, "conv2d output")
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::dense_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(out, &[x, w, b], Op::Dense { x, w, b }, "dense output")
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = kernels::avgpool_forward(self.value(x), kernel, stride)?;
        self.push(out, &[x], Op::AvgPool { x, kernel, stride }, "avgpool output")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = relu_variants::relu(self.value(x));
        self.push(out, &[x], Op::Relu { x }, "relu output")
    }

    /// Hard shared gate with a straight-through sigmoid backward. When
    /// `weights` is given it must hold the `[C, H*W]` learned gate weights,
    /// which then receive gradients.
    pub fn gate(
        &mut self,
        x: Var,
        spec: &GroupingSpec,
        weights: Option<Var>,
        temperature: f64,
        flips: Option<&[bool]>,
    ) -> Result<Var> {
        let mut spec = spec.clone();
        if let Some(wv) = weights {
            let w = self.value(wv);
            if w.rank() != 2 || w.shape()[1] != spec.plane_len() {
                return Err(Error::shape(format!(
                    "gate weights must be [C, {}], got {:?}",
                    spec.plane_len(),
                    w.shape()
                )));
            }
            spec.gate = GateWeights::Learned {
                weights: w.data().chunks(w.shape()[1]).map(<[f64]>::to_vec).collect(),
            };
        }
        let (out, decision) = relu_variants::soft_gate_forward_with_flips(self.value(x), &spec, temperature, flips)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(weights).collect();
        self.push(
            out,
            &inputs,
            Op::Gate {
                x,
                weights,
                spec: Box::new(spec),
                decision,
                temperature,
            },
            "gate output",
        )
    }

    /// Elementwise multiplication by a constant mask (dropout, noise masks).
    pub fn scale(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("scale mask does not match its input"));
        }
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        self.push(out, &[x], Op::Scale { x, mask }, "scaled output")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, |x, y| x + y)?;
        self.push(out, &[a, b], Op::Add { a, b }, "sum")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, |x, y| x * y)?;
        self.push(out, &[a, b], Op::Mul { a, b }, "product")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum { x }, "reduction")
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "loss",
        )
    }

    fn zip_same_shape(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Tensor::new(av.shape().to_vec(), av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every entry
    /// that requires them. Each entry is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.accumulate(loss, seed);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            grad.ensure_finite("gradient")?;
            let contributions = self.local_gradients(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn local_gradients(&self, idx: usize, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geometry } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), geometry, grad);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.value(*w), grad);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::AvgPool { x, kernel, stride } => {
                vec![(*x, kernels::avgpool_backward(self.value(*x).shape(), *kernel, *stride, grad))]
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let g = xv.data().iter().zip(grad.data()).map(|(v, g)| if *v >= 0.0 { *g } else { 0.0 });
                vec![(*x, Tensor::new(xv.shape().to_vec(), g.collect())?)]
            }
            Op::Gate {
                x,
                weights,
                spec,
                decision,
                temperature,
            } => {
                let (gx, gw) = relu_variants::soft_gate_backward(self.value(*x), spec, decision, *temperature, grad)?;
                let mut out = vec![(*x, gx)];
                if let (Some(wv), Some(gw)) = (weights, gw) {
                    out.push((*wv, gw));
                }
                out
            }
            Op::Scale { x, mask } => {
                let g = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*x, Tensor::new(grad.shape().to_vec(), g)?)]
            }
            Op::Add { a, b } => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = grad.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let gb = grad.data().iter().zip(av.data()).map(|(g, y)| g * y).collect();
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Sum { x } => {
                let g = grad.data()[0];
                vec![(*x, Tensor::full(self.value(*x).shape(), g))]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = grad.data()[0] / n as f64;
                let mut g = probs.clone();
                for (row, &label) in g.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, Tensor::new(shape, g)?)]
            }
        })
    }
}
