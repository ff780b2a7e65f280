use crate::conv::ConvParams;
use crate::error::{DiffError, Result};
use crate::{conv, loss, norm, pointwise, reduce, sample, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation with the forward context its backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        p: ConvParams,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Select {
        x: Var,
        index: usize,
        chunk: usize,
    },
    Reshape {
        x: Var,
    },
    Max {
        xs: Vec<Var>,
        arg: Vec<u32>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    WeightedSum {
        p: Var,
        v: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Bilinear {
        f: Var,
        grid: Var,
    },
    Variance {
        xs: Vec<Var>,
    },
    Repeat {
        x: Var,
        outer: usize,
        count: usize,
        inner: usize,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    UnitNormals {
        x: Var,
        norms: Vec<T>,
        facing: bool,
        batch: usize,
        plane: usize,
    },
    SmoothL1 {
        x: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        beta: T,
        count: usize,
    },
    Cosine {
        x: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Gradient buffers indexed by node, allocated lazily during backward.
pub(crate) struct Grads<'a, T> {
    nodes: &'a [Node<T>],
    bufs: Vec<Option<Vec<T>>>,
}

impl<'a, T: Scalar> Grads<'a, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.numel();
        self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }
}

/// Append-only record of a differentiable computation.
///
/// Values are immutable once recorded. Gradients of leaves accumulate across
/// repeated [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a single-element output.
    ///
    /// Every leaf recorded with [`Tape::param`] ends up with a gradient; leaves
    /// not connected to `output` get zeros. Calling this twice without
    /// [`Tape::zero_grad`] adds the second gradient onto the first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        if self.nodes[output.0].value.numel() != 1 {
            return Err(DiffError::NotScalar(out_shape));
        }
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();
        {
            let mut grads = Grads {
                nodes: &self.nodes,
                bufs: (0..=output.0).map(|_| None).collect(),
            };
            grads.bufs[output.0] = Some(vec![T::one()]);
            for i in (0..=output.0).rev() {
                let Some(g) = grads.bufs[i].take() else {
                    continue;
                };
                let node = &self.nodes[i];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((i, g));
                    continue;
                }
                backward_op(node, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(node: &Node<T>, g: &[T], grads: &mut Grads<'_, T>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b, p } => conv::conv_backward(*x, *w, *b, p, g, grads),
        Op::ConvTranspose { x, w, p } => conv::conv_transpose_backward(*x, *w, p, g, grads),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            outer,
            channels,
            inner,
        } => norm::batch_norm_backward(
            [*x, *gamma, *beta],
            xhat,
            inv_std,
            *train,
            (*outer, *channels, *inner),
            g,
            grads,
        ),
        Op::Relu { x } => pointwise::relu_backward(*x, out, g, grads),
        Op::Add { a, b } => pointwise::add_backward(*a, *b, g, grads),
        Op::Mul { a, b } => pointwise::mul_backward(*a, *b, g, grads),
        Op::Scale { x, k } => pointwise::scale_backward(*x, *k, g, grads),
        Op::Sum { x } => reduce::sum_backward(*x, g, grads),
        Op::Concat { xs, outer, chunks } => reduce::concat_backward(xs, *outer, chunks, g, grads),
        Op::Select { x, index, chunk } => reduce::select_backward(*x, *index, *chunk, g, grads),
        Op::Reshape { x } => pointwise::reshape_backward(*x, g, grads),
        Op::Max { xs, arg } => reduce::max_backward(xs, arg, g, grads),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => reduce::softmax_backward(*x, out, (*outer, *len, *inner), g, grads),
        Op::WeightedSum {
            p,
            v,
            outer,
            len,
            inner,
        } => reduce::weighted_sum_backward(*p, *v, (*outer, *len, *inner), g, grads),
        Op::Bilinear { f, grid } => sample::bilinear_backward(*f, *grid, g, grads),
        Op::Variance { xs } => reduce::variance_backward(xs, g, grads),
        Op::Repeat {
            x,
            outer,
            count,
            inner,
        } => reduce::repeat_backward(*x, (*outer, *count, *inner), g, grads),
        Op::MaskFill { x, keep } => pointwise::mask_fill_backward(*x, keep, g, grads),
        Op::UnitNormals {
            x,
            norms,
            facing,
            batch,
            plane,
        } => pointwise::unit_normals_backward(*x, out, norms, *facing, (*batch, *plane), g, grads),
        Op::SmoothL1 {
            x,
            target,
            mask,
            beta,
            count,
        } => loss::smooth_l1_backward(*x, target, mask, *beta, *count, g, grads),
        Op::Cosine {
            x,
            target,
            mask,
            count,
        } => loss::cosine_backward(*x, target, mask, *count, g, grads),
    }
}
