//! Primitive kernels: forward evaluation and vector-Jacobian products.
//!
//! Layout conventions: feature maps are `[H, W, C]` (channel last), conv
//! kernels are `[3, 3, C_in, C_out]`, box tensors are `[L, 4]` holding
//! `(center_x, center_y, width, height)`.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Upper clamp applied to the argument of [`Op::Log1m`].
pub const LOG1M_CLAMP: f64 = 1.0 - 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    /// `[.., C] + [C]`
    AddBias,
    /// `[.., C] * [.., 1]`
    MulCells,
    MatMul,
    /// 3x3, stride 1, zero same-padding.
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    /// `ln(1 - min(x, LOG1M_CLAMP))`
    Log1m,
    Softmax,
    LogSoftmax,
    Scale(f64),
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// `[.., C] -> [.., 1]`
    SumChannels,
    /// Mean of squared differences, shape `[1]`.
    MeanSq,
    /// Summed Huber loss with unit transition, shape `[1]`.
    SmoothL1,
    Reshape(Vec<usize>),
    SliceChannels { start: usize, len: usize },
    ConcatChannels,
    AvgPool2,
    Upsample2,
    /// Row-wise IoU of two `[L, 4]` box tensors, shape `[L, 1]`.
    BoxIou,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::MulCells => "mul_cells",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log1m => "log1m",
            Op::Softmax => "softmax_channel",
            Op::LogSoftmax => "log_softmax_channel",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::SumChannels => "sum_channels",
            Op::MeanSq => "mean_sq",
            Op::SmoothL1 => "smooth_l1",
            Op::Reshape(_) => "reshape",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels => "concat_channels",
            Op::AvgPool2 => "avg_pool2",
            Op::Upsample2 => "upsample2",
            Op::BoxIou => "box_iou",
        }
    }

    /// Evaluates the op. Inputs are never mutated.
    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        let out = match self {
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = binary(name, inputs)?;
                same_shape(name, a, b)?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::AddBias => {
                let (x, b) = binary(name, inputs)?;
                let c = last(x);
                if b.shape() != [c] {
                    return Err(mismatch(name, x, b));
                }
                let bias = b.data();
                let data = x
                    .data()
                    .chunks_exact(c)
                    .flat_map(|row| row.iter().zip(bias).map(|(v, w)| v + w))
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::MulCells => {
                let (x, w) = binary(name, inputs)?;
                check_cells(name, x, w)?;
                let c = last(x);
                let data = x
                    .data()
                    .chunks_exact(c)
                    .zip(w.data())
                    .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::MatMul => {
                let (a, b) = binary(name, inputs)?;
                let (m, k, n) = matmul_dims(a, b)?;
                Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n))
            }
            Op::Conv2d => {
                let (x, k) = binary(name, inputs)?;
                let g = conv_geometry(x, k)?;
                Tensor::from_parts(vec![g.h, g.w, g.cout], conv_forward(&g, x.data(), k.data()))
            }
            Op::Relu => map(unary(name, inputs)?, |v| if v > 0.0 { v } else { 0.0 }),
            Op::Sigmoid => map(unary(name, inputs)?, sigmoid),
            Op::Exp => map(unary(name, inputs)?, f64::exp),
            Op::Log1m => map(unary(name, inputs)?, |v| (1.0 - v.min(LOG1M_CLAMP)).ln()),
            Op::Scale(c) => {
                let c = *c;
                map(unary(name, inputs)?, move |v| v * c)
            }
            Op::Softmax | Op::LogSoftmax => {
                let x = unary(name, inputs)?;
                let c = last(x);
                let log = matches!(self, Op::LogSoftmax);
                let mut data = Vec::with_capacity(x.numel());
                for row in x.data().chunks_exact(c) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    if log {
                        let lse = max + z.ln();
                        data.extend(row.iter().map(|v| v - lse));
                    } else {
                        data.extend(row.iter().map(|v| (v - max).exp() / z));
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Sum => Tensor::scalar(unary(name, inputs)?.data().iter().sum()),
            Op::SumChannels => {
                let x = unary(name, inputs)?;
                let c = last(x);
                let data = x.data().chunks_exact(c).map(|r| r.iter().sum()).collect();
                Tensor::from_parts(cells_shape(x), data)
            }
            Op::MeanSq => {
                let (a, b) = binary(name, inputs)?;
                same_shape(name, a, b)?;
                let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Tensor::scalar(s / a.numel() as f64)
            }
            Op::SmoothL1 => {
                let (a, b) = binary(name, inputs)?;
                same_shape(name, a, b)?;
                let s = a.data().iter().zip(b.data()).map(|(x, y)| huber(x - y)).sum();
                Tensor::scalar(s)
            }
            Op::Reshape(shape) => {
                let x = unary(name, inputs)?;
                if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != x.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Tensor::from_parts(shape.clone(), x.data().to_vec())
            }
            Op::SliceChannels { start, len } => {
                let x = unary(name, inputs)?;
                let c = last(x);
                if *len == 0 || start + len > c {
                    return Err(TensorError::InvalidShape {
                        op: name,
                        shape: x.shape().to_vec(),
                        reason: "channel range out of bounds",
                    });
                }
                let data = x
                    .data()
                    .chunks_exact(c)
                    .flat_map(|row| row[*start..start + len].iter().copied())
                    .collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Tensor::from_parts(shape, data)
            }
            Op::ConcatChannels => {
                let first = inputs.first().ok_or(TensorError::InvalidShape {
                    op: name,
                    shape: vec![],
                    reason: "no inputs",
                })?;
                let cells = cells_shape(first);
                for t in inputs {
                    if cells_shape(t) != cells {
                        return Err(mismatch(name, first, t));
                    }
                }
                let widths: Vec<usize> = inputs.iter().map(|t| last(t)).collect();
                let total: usize = widths.iter().sum();
                let ncell = first.numel() / widths[0];
                let mut data = Vec::with_capacity(ncell * total);
                for i in 0..ncell {
                    for (t, &w) in inputs.iter().zip(&widths) {
                        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                    }
                }
                let mut shape = first.shape().to_vec();
                *shape.last_mut().unwrap() = total;
                Tensor::from_parts(shape, data)
            }
            Op::AvgPool2 => {
                let x = unary(name, inputs)?;
                let (h, w, c) = hwc(name, x)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(TensorError::InvalidShape {
                        op: name,
                        shape: x.shape().to_vec(),
                        reason: "spatial extents must be even",
                    });
                }
                let (oh, ow) = (h / 2, w / 2);
                let xd = x.data();
                let mut out = vec![0.0; oh * ow * c];
                for y in 0..h {
                    for xx in 0..w {
                        let src = &xd[(y * w + xx) * c..(y * w + xx + 1) * c];
                        let o = ((y / 2) * ow + xx / 2) * c;
                        for (d, s) in out[o..o + c].iter_mut().zip(src) {
                            *d += 0.25 * s;
                        }
                    }
                }
                Tensor::from_parts(vec![oh, ow, c], out)
            }
            Op::Upsample2 => {
                let x = unary(name, inputs)?;
                let (h, w, c) = hwc(name, x)?;
                let (oh, ow) = (2 * h, 2 * w);
                let xd = x.data();
                let mut out = Vec::with_capacity(oh * ow * c);
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = ((y / 2) * w + xx / 2) * c;
                        out.extend_from_slice(&xd[s..s + c]);
                    }
                }
                Tensor::from_parts(vec![oh, ow, c], out)
            }
            Op::BoxIou => {
                let (a, b) = binary(name, inputs)?;
                same_shape(name, a, b)?;
                if a.shape().len() != 2 || a.shape()[1] != 4 {
                    return Err(TensorError::InvalidShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: "expected [L, 4]",
                    });
                }
                let data = a
                    .data()
                    .chunks_exact(4)
                    .zip(b.data().chunks_exact(4))
                    .map(|(p, q)| iou_with_grad(p, q).0)
                    .collect();
                Tensor::from_parts(vec![a.shape()[0], 1], data)
            }
        };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(out)
    }

    /// Gradients of a scalar objective w.r.t. each input, given the
    /// gradient w.r.t. this op's output.
    pub(crate) fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Op::Add => vec![grad.to_vec(), grad.to_vec()],
            Op::Sub => vec![grad.to_vec(), grad.iter().map(|g| -g).collect()],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    grad.iter().zip(b).map(|(g, y)| g * y).collect(),
                    grad.iter().zip(a).map(|(g, x)| g * x).collect(),
                ]
            }
            Op::AddBias => {
                let c = inputs[1].numel();
                let mut gb = vec![0.0; c];
                for row in grad.chunks_exact(c) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![grad.to_vec(), gb]
            }
            Op::MulCells => {
                let (x, w) = (inputs[0], inputs[1]);
                let c = last(x);
                let mut gx = Vec::with_capacity(x.numel());
                let mut gw = Vec::with_capacity(w.numel());
                for ((g_row, x_row), &s) in grad.chunks_exact(c).zip(x.data().chunks_exact(c)).zip(w.data()) {
                    gx.extend(g_row.iter().map(|g| g * s));
                    gw.push(g_row.iter().zip(x_row).map(|(g, v)| g * v).sum());
                }
                vec![gx, gw]
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = g_row.iter().zip(b_row).map(|(g, v)| g * v).sum();
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let g_row = &grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (acc, g) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                            *acc += av * g;
                        }
                    }
                }
                vec![ga, gb]
            }
            Op::Conv2d => {
                let (x, k) = (inputs[0], inputs[1]);
                let g = conv_geometry(x, k).expect("shapes validated in forward");
                let (gx, gk) = conv_backward(&g, x.data(), k.data(), grad);
                vec![gx, gk]
            }
            Op::Relu => vec![grad
                .iter()
                .zip(inputs[0].data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect()],
            Op::Sigmoid => vec![grad
                .iter()
                .zip(output.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect()],
            Op::Exp => vec![grad.iter().zip(output.data()).map(|(g, e)| g * e).collect()],
            Op::Log1m => vec![grad
                .iter()
                .zip(inputs[0].data())
                .map(|(g, &v)| if v < LOG1M_CLAMP { -g / (1.0 - v) } else { 0.0 })
                .collect()],
            Op::Scale(c) => vec![grad.iter().map(|g| g * c).collect()],
            Op::Softmax => {
                let c = last(output);
                let mut gx = Vec::with_capacity(grad.len());
                for (g_row, y_row) in grad.chunks_exact(c).zip(output.data().chunks_exact(c)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    gx.extend(g_row.iter().zip(y_row).map(|(g, y)| y * (g - dot)));
                }
                vec![gx]
            }
            Op::LogSoftmax => {
                let c = last(output);
                let mut gx = Vec::with_capacity(grad.len());
                for (g_row, y_row) in grad.chunks_exact(c).zip(output.data().chunks_exact(c)) {
                    let total: f64 = g_row.iter().sum();
                    gx.extend(g_row.iter().zip(y_row).map(|(g, y)| g - y.exp() * total));
                }
                vec![gx]
            }
            Op::Sum => vec![vec![grad[0]; inputs[0].numel()]],
            Op::SumChannels => {
                let c = last(inputs[0]);
                vec![grad.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect()]
            }
            Op::MeanSq => {
                let scale = 2.0 * grad[0] / inputs[0].numel() as f64;
                let ga: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let gb = ga.iter().map(|g| -g).collect();
                vec![ga, gb]
            }
            Op::SmoothL1 => {
                let ga: Vec<f64> = inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(x, y)| grad[0] * huber_grad(x - y))
                    .collect();
                let gb = ga.iter().map(|g| -g).collect();
                vec![ga, gb]
            }
            Op::Reshape(_) => vec![grad.to_vec()],
            Op::SliceChannels { start, len } => {
                let c = last(inputs[0]);
                let mut gx = vec![0.0; inputs[0].numel()];
                for (row, g_row) in gx.chunks_exact_mut(c).zip(grad.chunks_exact(*len)) {
                    row[*start..start + len].copy_from_slice(g_row);
                }
                vec![gx]
            }
            Op::ConcatChannels => {
                let widths: Vec<usize> = inputs.iter().map(|t| last(t)).collect();
                let total: usize = widths.iter().sum();
                let mut out: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
                for g_row in grad.chunks_exact(total) {
                    let mut off = 0;
                    for (dst, &w) in out.iter_mut().zip(&widths) {
                        dst.extend_from_slice(&g_row[off..off + w]);
                        off += w;
                    }
                }
                out
            }
            Op::AvgPool2 => {
                let x = inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ow = w / 2;
                let mut gx = vec![0.0; x.numel()];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / 2) * ow + xx / 2) * c;
                        let d = (y * w + xx) * c;
                        for (dst, g) in gx[d..d + c].iter_mut().zip(&grad[o..o + c]) {
                            *dst = 0.25 * g;
                        }
                    }
                }
                vec![gx]
            }
            Op::Upsample2 => {
                let x = inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let ow = 2 * w;
                let mut gx = vec![0.0; x.numel()];
                for y in 0..2 * h {
                    for xx in 0..ow {
                        let s = (y * ow + xx) * c;
                        let d = ((y / 2) * w + xx / 2) * c;
                        for (dst, g) in gx[d..d + c].iter_mut().zip(&grad[s..s + c]) {
                            *dst += g;
                        }
                    }
                }
                vec![gx]
            }
            Op::BoxIou => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let mut ga = Vec::with_capacity(a.len());
                let mut gb = Vec::with_capacity(b.len());
                for ((p, q), g) in a.chunks_exact(4).zip(b.chunks_exact(4)).zip(grad) {
                    let (_, dp, dq) = iou_with_grad(p, q);
                    ga.extend(dp.iter().map(|d| d * g));
                    gb.extend(dq.iter().map(|d| d * g));
                }
                vec![ga, gb]
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn huber_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// IoU of two `(cx, cy, w, h)` boxes and its partial derivatives w.r.t. both.
fn iou_with_grad(p: &[f64], q: &[f64]) -> (f64, [f64; 4], [f64; 4]) {
    let (px1, px2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (py1, py2) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (qx1, qx2) = (q[0] - 0.5 * q[2], q[0] + 0.5 * q[2]);
    let (qy1, qy2) = (q[1] - 0.5 * q[3], q[1] + 0.5 * q[3]);
    let iw = px2.min(qx2) - px1.max(qx1);
    let ih = py2.min(qy2) - py1.max(qy1);
    let area_p = p[2] * p[3];
    let area_q = q[2] * q[3];
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4], [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + area_q - inter;
    let iou = inter / union;

    // d iw / d (x1, x2) for each box; the min/max picks one side.
    let (d_iw_px2, d_iw_qx2) = if px2 <= qx2 { (1.0, 0.0) } else { (0.0, 1.0) };
    let (d_iw_px1, d_iw_qx1) = if px1 >= qx1 { (-1.0, 0.0) } else { (0.0, -1.0) };
    let (d_ih_py2, d_ih_qy2) = if py2 <= qy2 { (1.0, 0.0) } else { (0.0, 1.0) };
    let (d_ih_py1, d_ih_qy1) = if py1 >= qy1 { (-1.0, 0.0) } else { (0.0, -1.0) };

    // inter = iw * ih; iou = inter / (area_p + area_q - inter)
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    let side = |d_iw_x1: f64, d_iw_x2: f64, d_ih_y1: f64, d_ih_y2: f64, w: f64, h: f64| {
        // x1 = cx - w/2, x2 = cx + w/2
        let d_iw_cx = d_iw_x1 + d_iw_x2;
        let d_iw_w = 0.5 * (d_iw_x2 - d_iw_x1);
        let d_ih_cy = d_ih_y1 + d_ih_y2;
        let d_ih_h = 0.5 * (d_ih_y2 - d_ih_y1);
        [
            d_inter * d_iw_cx * ih,
            d_inter * d_ih_cy * iw,
            d_inter * d_iw_w * ih + d_area * h,
            d_inter * d_ih_h * iw + d_area * w,
        ]
    };
    let dp = side(d_iw_px1, d_iw_px2, d_ih_py1, d_ih_py2, p[2], p[3]);
    let dq = side(d_iw_qx1, d_iw_qx2, d_ih_qy1, d_ih_qy2, q[2], q[3]);
    (iou, dp, dq)
}

fn unary<'a>(op: &'static str, inputs: &[&'a Tensor]) -> Result<&'a Tensor> {
    match inputs {
        [x] => Ok(x),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: vec![inputs.len()],
            reason: "expected one input",
        }),
    }
}

fn binary<'a>(op: &'static str, inputs: &[&'a Tensor]) -> Result<(&'a Tensor, &'a Tensor)> {
    match inputs {
        [a, b] => Ok((a, b)),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: vec![inputs.len()],
            reason: "expected two inputs",
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(op, a, b))
    }
}

fn last(t: &Tensor) -> usize {
    *t.shape().last().unwrap()
}

fn cells_shape(t: &Tensor) -> Vec<usize> {
    let mut s = t.shape().to_vec();
    *s.last_mut().unwrap() = 1;
    s
}

fn check_cells(op: &'static str, x: &Tensor, w: &Tensor) -> Result<()> {
    if w.shape() == cells_shape(x) {
        Ok(())
    } else {
        Err(mismatch(op, x, w))
    }
}

fn hwc(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(TensorError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected [H, W, C]",
        }),
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        _ => Err(mismatch("matmul", a, b)),
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

fn conv_geometry(x: &Tensor, k: &Tensor) -> Result<ConvGeometry> {
    match (x.shape(), k.shape()) {
        (&[h, w, cin], &[3, 3, kc, cout]) if kc == cin => Ok(ConvGeometry { h, w, cin, cout }),
        _ => Err(mismatch("conv2d", x, k)),
    }
}

/// Calls `f(out_cell, in_cell, tap)` for every in-bounds 3x3 tap.
#[inline]
fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..g.h {
        for x in 0..g.w {
            let o = y * g.w + x;
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= g.h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= g.w as isize {
                        continue;
                    }
                    f(o, sy as usize * g.w + sx as usize, dy * 3 + dx);
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.h * g.w * cout];
    for_each_tap(g, |o, i, tap| {
        let dst = &mut out[o * cout..(o + 1) * cout];
        let src = &x[i * cin..(i + 1) * cin];
        for (ci, &v) in src.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let kr = &k[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
            for (d, kv) in dst.iter_mut().zip(kr) {
                *d += v * kv;
            }
        }
    });
    out
}

fn conv_backward(g: &ConvGeometry, x: &[f64], k: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (cin, cout) = (g.cin, g.cout);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for_each_tap(g, |o, i, tap| {
        let go = &grad[o * cout..(o + 1) * cout];
        let src = &x[i * cin..(i + 1) * cin];
        for ci in 0..cin {
            let base = (tap * cin + ci) * cout;
            let kr = &k[base..base + cout];
            gx[i * cin + ci] += go.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
            let v = src[ci];
            if v != 0.0 {
                for (acc, gv) in gk[base..base + cout].iter_mut().zip(go) {
                    *acc += v * gv;
                }
            }
        }
    });
    (gx, gk)
}
