use crate::error::Result;
use crate::op::Op;
use crate::tensor::Tensor;

/// Evaluation context for model code.
///
/// Forward passes are written once against this trait and run either
/// eagerly ([`Eager`]) or recorded on a [`Tape`](crate::Tape) for
/// differentiation.
pub trait Ops {
    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Registers an input. On a tape, `requires_grad` leaves receive gradients.
    fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Tensor;

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }
    fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.apply(Op::AddBias, &[x, bias])
    }
    fn mul_cells(&mut self, x: &Tensor, weights: &Tensor) -> Result<Tensor> {
        self.apply(Op::MulCells, &[x, weights])
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn conv2d(&mut self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        self.apply(Op::Conv2d, &[x, kernel])
    }
    /// Subgradient at 0 is 0.
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Relu, &[x])
    }
    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sigmoid, &[x])
    }
    fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Exp, &[x])
    }
    fn log1m(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Log1m, &[x])
    }
    fn softmax_channel(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softmax, &[x])
    }
    fn log_softmax_channel(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::LogSoftmax, &[x])
    }
    fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::Scale(c), &[x])
    }
    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sum, &[x])
    }
    fn sum_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::SumChannels, &[x])
    }
    fn mean_sq(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::MeanSq, &[a, b])
    }
    fn smooth_l1(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::SmoothL1, &[a, b])
    }
    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Op::SliceChannels { start, len }, &[x])
    }
    fn concat_channels(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        self.apply(Op::ConcatChannels, xs)
    }
    fn avg_pool2(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::AvgPool2, &[x])
    }
    fn upsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Upsample2, &[x])
    }
    fn box_iou(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::BoxIou, &[a, b])
    }
}

/// Plain evaluation with no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        op.forward(inputs)
    }

    fn leaf(&mut self, value: &Tensor, _requires_grad: bool) -> Tensor {
        value.detach()
    }
}
