//! Reverse-mode gradient tape.
//!
//! Every recorded primitive appends one node; node indices therefore follow
//! execution order and [`Tape::backward`] walks them from last to first.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormSaved, BatchStats, Conv2dOptions};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
    },
    BatchNormTrain {
        input: Var,
        scale: Var,
        shift: Var,
        saved: BatchNormSaved,
    },
    BatchNormEval {
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    Concat {
        a: Var,
        b: Var,
        a_channels: usize,
    },
    Add(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Upsample2x(_) => "upsample2x",
            Op::Concat { .. } => "concat_channels",
            Op::Add(..) => "add",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Nodes whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &opts,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                opts,
            },
        ))
    }

    /// Batch normalization in training mode. Returns the batch statistics
    /// so the caller can fold them into its running averages.
    pub fn batch_norm_train(&mut self, input: Var, scale: Var, shift: Var) -> Result<(Var, BatchStats)> {
        let (out, saved, stats) = ops::batch_norm_train(self.value(input), self.value(scale), self.value(shift))?;
        let v = self.push(
            out,
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                saved,
            },
        );
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<Var> {
        let out = ops::batch_norm_eval(
            self.value(input),
            self.value(scale),
            self.value(shift),
            running_mean,
            running_var,
        )?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                scale,
                shift,
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample2x(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let a_channels = self.value(a).shape()[1];
        Ok(self.push(out, Op::Concat { a, b, a_channels }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `output`) through every node recorded up to and including `output`.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut visited = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            visited.push(Var(i));
            let mut send = |v: Var, g: Tensor| accumulate(&mut grads[v.0], g);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    opts,
                } => {
                    let g = ops::conv2d_backward(self.value(*input), self.value(*kernel), &upstream, opts)?;
                    send(*input, g.input)?;
                    send(*kernel, g.kernel)?;
                    if let Some(b) = bias {
                        send(*b, g.bias)?;
                    }
                }
                Op::BatchNormTrain {
                    input,
                    scale,
                    shift,
                    saved,
                } => {
                    let g = ops::batch_norm_train_backward(saved, self.value(*scale), &upstream)?;
                    send(*input, g.input)?;
                    send(*scale, g.scale)?;
                    send(*shift, g.shift)?;
                }
                Op::BatchNormEval {
                    input,
                    scale,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    let g = ops::batch_norm_eval_backward(
                        self.value(*input),
                        self.value(*scale),
                        running_mean,
                        running_var,
                        &upstream,
                    )?;
                    send(*input, g.input)?;
                    send(*scale, g.scale)?;
                    send(*shift, g.shift)?;
                }
                Op::Relu(x) => send(*x, ops::relu_backward(self.value(*x), &upstream)?)?,
                Op::Sigmoid(x) => send(*x, ops::sigmoid_backward(&node.value, &upstream)?)?,
                Op::Upsample2x(x) => send(*x, ops::upsample2x_backward(&upstream)?)?,
                Op::Concat { a, b, a_channels } => {
                    let (ga, gb) = ops::split_channels(&upstream, *a_channels)?;
                    send(*a, ga)?;
                    send(*b, gb)?;
                }
                Op::Add(a, b) => {
                    send(*a, upstream.clone())?;
                    send(*b, upstream)?;
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shapes {:?} and {:?} do not match",
                    acc.shape(),
                    g.shape()
                )));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
