//! Tape-based reverse-mode differentiation.
//!
//! Ops append nodes in execution order, so node ids are already a topological
//! order; `backward` walks the tape once in reverse and accumulates
//! vector-Jacobian products into a per-node gradient store.

use super::ops::{self, NormSaved};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBiasRows(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    TokensFromGrid(NodeId),
    GridFromTokens(NodeId),
    SoftmaxLast(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: NormSaved,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_var: Vec<f64>,
        xhat: Tensor,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: NormSaved,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per tape node after a backward pass. Nodes the seed never
/// reached report a zero tensor of the right shape.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros when the node is off-path.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Running batch statistics produced by a train-mode batch norm, to be folded
/// into the persistent running stats by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "op produced non-finite values");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scaled(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias_rows(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddBiasRows(x, bias), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_cols(self.value(x), start, len)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let v = ops::concat_cols(&parts)?;
        Ok(self.push(Op::ConcatCols(xs.to_vec()), v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn tokens_from_grid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::tokens_from_grid(self.value(x))?;
        Ok(self.push(Op::TokensFromGrid(x), v))
    }

    pub fn grid_from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let v = ops::grid_from_tokens(self.value(x), h, w)?;
        Ok(self.push(Op::GridFromTokens(x), v))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_last(self.value(x));
        self.push(Op::SoftmaxLast(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        self.push(Op::Relu(x), v)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = ops::gelu(self.value(x));
        self.push(Op::Gelu(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Conv2d { x, w, b }, v))
    }

    pub fn avg_pool_2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::avg_pool_2x2(self.value(x))?;
        Ok(self.push(Op::AvgPool2(x), v))
    }

    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::upsample_nearest_2x(self.value(x))?;
        Ok(self.push(Op::Upsample2(x), v))
    }

    /// Train-mode batch norm; returns the node and the batch statistics so the
    /// caller can update running stats (the tape itself never mutates them).
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats)> {
        let (v, saved, mean, var) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let id = self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            },
            v,
        );
        Ok((id, BatchStats { mean, var }))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let v = ops::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let xhat = {
            let x = self.value(x);
            Tensor::from_fn(x.shape(), |i| {
                let c = x.shape()[1];
                let hw = x.shape()[2] * x.shape()[3];
                let ch = (i / hw) % c;
                (x.data()[i] - running_mean[ch]) / (running_var[ch] + ops::NORM_EPS).sqrt()
            })
        };
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                running_var: running_var.to_vec(),
                xhat,
            },
            v,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, saved) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            v,
        ))
    }

    /// Reverse pass from `root`, seeded with `seed` (same shape as the root
    /// value). Visits every recorded op at most once, in reverse order.
    pub fn backward(&self, root: NodeId, seed: Tensor) -> Result<GradStore> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(root));
        }
        if seed.shape() != self.value(root).shape() {
            return Err(TensorError::SeedShape {
                seed: seed.shape().to_vec(),
                value: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(GradStore { grads })
    }

    fn step_backward(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| match &mut grads
            [id.0]
        {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Mul(a, b) => {
                let ga = ops::mul(grad, self.value(*b)).unwrap();
                let gb = ops::mul(grad, self.value(*a)).unwrap();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, grad.scaled(*c)),
            Op::AddBiasRows(x, bias) => {
                accumulate(grads, *x, grad.clone());
                accumulate(grads, *bias, ops::col_sums(grad));
            }
            Op::Matmul(a, b) => {
                let bt = ops::transpose(self.value(*b)).unwrap();
                let at = ops::transpose(self.value(*a)).unwrap();
                accumulate(grads, *a, ops::matmul(grad, &bt).unwrap());
                accumulate(grads, *b, ops::matmul(&at, grad).unwrap());
            }
            Op::Transpose(a) => accumulate(grads, *a, ops::transpose(grad).unwrap()),
            Op::SliceCols { x, start } => {
                let full = self.value(*x).shape()[1];
                accumulate(grads, *x, ops::scatter_cols(grad, full, *start));
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                for &part in xs {
                    let len = self.value(part).shape()[1];
                    let g = ops::slice_cols(grad, start, len).unwrap();
                    accumulate(grads, part, g);
                    start += len;
                }
            }
            Op::Reshape(x) => {
                let g = grad.reshaped(self.value(*x).shape()).unwrap();
                accumulate(grads, *x, g);
            }
            Op::TokensFromGrid(x) => {
                let shp = self.value(*x).shape();
                let g = ops::grid_from_tokens(grad, shp[1], shp[2]).unwrap();
                accumulate(grads, *x, g);
            }
            Op::GridFromTokens(x) => {
                accumulate(grads, *x, ops::tokens_from_grid(grad).unwrap());
            }
            Op::SoftmaxLast(x) => {
                accumulate(grads, *x, ops::softmax_last_backward(grad, &node.value));
            }
            Op::Relu(x) => accumulate(grads, *x, ops::relu_backward(grad, self.value(*x))),
            Op::Gelu(x) => accumulate(grads, *x, ops::gelu_backward(grad, self.value(*x))),
            Op::Sigmoid(x) => accumulate(grads, *x, ops::sigmoid_backward(grad, &node.value)),
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = ops::conv2d_backward(grad, self.value(*x), self.value(*w));
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::AvgPool2(x) => accumulate(grads, *x, ops::avg_pool_2x2_backward(grad)),
            Op::Upsample2(x) => accumulate(grads, *x, ops::upsample_nearest_2x_backward(grad)),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (gx, gg, gb) = ops::batch_norm_train_backward(grad, self.value(*gamma), saved);
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                running_var,
                xhat,
            } => {
                let (gx, gg, gb) =
                    ops::batch_norm_eval_backward(grad, self.value(*gamma), running_var, xhat);
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (gx, gg, gb) = ops::layer_norm_backward(grad, self.value(*gamma), saved);
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
        }
    }
}
