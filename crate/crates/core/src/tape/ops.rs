//! Primitive catalog: forward rule, reverse partials and forward tangents.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Matmul,
    Transpose,
    Sum { axis: Option<usize> },
    Mean,
    Dot,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    MaxReduce { axis: Option<usize> },
    /// `max(x, c)` elementwise.
    MaxConst(f64),
    Clamp { lo: f64, hi: f64 },
    SquaredNorm,
    /// Output with externally supplied dense Jacobians, one per input,
    /// each of shape `(out_numel, in_numel)`.
    Linearized { jacobians: Vec<Tensor> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean => "mean",
            Op::Dot => "dot",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::MaxReduce { .. } => "max",
            Op::MaxConst(_) => "max_const",
            Op::Clamp { .. } => "clamp",
            Op::SquaredNorm => "squared_norm",
            Op::Linearized { .. } => "linearized",
        }
    }

    /// Builds an op from its catalog name and numeric attributes.
    pub fn from_name(name: &str, attrs: &[f64]) -> Result<Op> {
        let attr = |i: usize| -> Result<f64> {
            attrs
                .get(i)
                .copied()
                .ok_or_else(|| Error::UnknownOp(format!("{name}: missing attribute {i}")))
        };
        let axis = |i: usize| -> Result<Option<usize>> {
            Ok(attrs.get(i).map(|&a| a as usize))
        };
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "neg" => Op::Neg,
            "scale" => Op::Scale(attr(0)?),
            "matmul" => Op::Matmul,
            "transpose" => Op::Transpose,
            "sum" => Op::Sum { axis: axis(0)? },
            "mean" => Op::Mean,
            "dot" => Op::Dot,
            "concat" => Op::Concat {
                axis: axis(0)?.unwrap_or(0),
            },
            "slice" => Op::Slice {
                axis: attr(0)? as usize,
                start: attr(1)? as usize,
                len: attr(2)? as usize,
            },
            "reshape" => Op::Reshape(attrs.iter().map(|&a| a as usize).collect()),
            "abs" => Op::Abs,
            "square" => Op::Square,
            "sqrt" => Op::Sqrt,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "tanh" => Op::Tanh,
            "sigmoid" => Op::Sigmoid,
            "relu" => Op::Relu,
            "softplus" => Op::Softplus,
            "max" => Op::MaxReduce { axis: axis(0)? },
            "max_const" | "hinge" => Op::MaxConst(attr(0)?),
            "clamp" => Op::Clamp {
                lo: attr(0)?,
                hi: attr(1)?,
            },
            "squared_norm" => Op::SquaredNorm,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    fn is_unary_elementwise(&self) -> bool {
        matches!(
            self,
            Op::Neg
                | Op::Scale(_)
                | Op::Abs
                | Op::Square
                | Op::Sqrt
                | Op::Exp
                | Op::Log
                | Op::Tanh
                | Op::Sigmoid
                | Op::Relu
                | Op::Softplus
                | Op::MaxConst(_)
                | Op::Clamp { .. }
        )
    }
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_value(op: &Op, x: f64) -> f64 {
    match *op {
        Op::Neg => -x,
        Op::Scale(c) => c * x,
        Op::Abs => x.abs(),
        Op::Square => x * x,
        Op::Sqrt => x.sqrt(),
        Op::Exp => x.exp(),
        Op::Log => x.ln(),
        Op::Tanh => x.tanh(),
        Op::Sigmoid => sigmoid(x),
        Op::Relu => x.max(0.0),
        Op::Softplus => softplus(x),
        Op::MaxConst(c) => x.max(c),
        Op::Clamp { lo, hi } => x.clamp(lo, hi),
        _ => unreachable!("not a unary op"),
    }
}

/// Derivative of a unary op at input `x` with output `y`, using the declared
/// policies at non-smooth points: relu'(0)=0, abs'(0)=0, max(x,c)' = 0 at
/// x=c, clamp' = 0 at or beyond the bounds.
fn unary_deriv(op: &Op, x: f64, y: f64) -> f64 {
    match *op {
        Op::Neg => -1.0,
        Op::Scale(c) => c,
        Op::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Op::Square => 2.0 * x,
        Op::Sqrt => 0.5 / y,
        Op::Exp => y,
        Op::Log => 1.0 / x,
        Op::Tanh => 1.0 - y * y,
        Op::Sigmoid => y * (1.0 - y),
        Op::Relu => f64::from(x > 0.0),
        Op::Softplus => sigmoid(x),
        Op::MaxConst(c) => f64::from(x > c),
        Op::Clamp { lo, hi } => f64::from(x > lo && x < hi),
        _ => unreachable!("not a unary op"),
    }
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(mismatch(
            op,
            format!("{:?} vs {:?} (only scalar broadcasting)", a.shape(), b.shape()),
        ))
    }
}

fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let data = match (ad.len() == n, bd.len() == n) {
        (true, true) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (false, true) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (false, false) => vec![f(ad[0], bd[0])],
    };
    Tensor::from_raw(shape, data)
}

/// Sums a broadcast cotangent back down to the operand's shape.
fn reduce_to(g: Tensor, like: &Tensor) -> Tensor {
    if like.is_scalar() && !g.is_scalar() {
        Tensor::scalar(g.sum())
    } else {
        g
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Normalises matmul operands to (m, k, n) with flags for vector operands.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (m, k1, a_vec) = match a.shape() {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        s => return Err(mismatch("matmul", format!("lhs rank {} unsupported", s.len()))),
    };
    let (k2, n, b_vec) = match b.shape() {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        s => return Err(mismatch("matmul", format!("rhs rank {} unsupported", s.len()))),
    };
    if a_vec && b_vec {
        return Err(mismatch("matmul", "vector-vector product: use dot"));
    }
    if k1 != k2 {
        return Err(mismatch(
            "matmul",
            format!("inner dims {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let shape = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => unreachable!(),
    };
    Ok((m, k1, n, shape))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a, b)?;
    Ok(Tensor::from_raw(shape, matmul_raw(a.data(), b.data(), m, k, n)))
}

fn expect_arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(mismatch(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn argmax_lowest(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

/// Forward rule.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if op.is_unary_elementwise() {
        expect_arity(op, inputs, 1)?;
        return Ok(inputs[0].map(|x| unary_value(op, x)));
    }
    match op {
        Op::Leaf | Op::Const => Err(mismatch(op.name(), "leaves are not recorded through forward")),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let shape = broadcast_shape(op.name(), a, b)?;
            Ok(match op {
                Op::Add => binary_map(a, b, shape, |x, y| x + y),
                Op::Sub => binary_map(a, b, shape, |x, y| x - y),
                Op::Mul => binary_map(a, b, shape, |x, y| x * y),
                _ => binary_map(a, b, shape, |x, y| x / y),
            })
        }
        Op::Matmul => {
            expect_arity(op, inputs, 2)?;
            matmul(inputs[0], inputs[1])
        }
        Op::Transpose => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            match a.shape() {
                [r, c] => Ok(Tensor::from_raw(vec![*c, *r], transpose_raw(a.data(), *r, *c))),
                s => Err(mismatch("transpose", format!("rank-2 required, got {s:?}"))),
            }
        }
        Op::Sum { axis: None } => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Op::Sum { axis: Some(axis) } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if *axis >= a.rank() {
                return Err(mismatch("sum", format!("axis {axis} out of range for {:?}", a.shape())));
            }
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..ext {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * ext + e) * inner + i];
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Ok(Tensor::from_raw(shape, out))
        }
        Op::Mean => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum() / inputs[0].numel() as f64))
        }
        Op::Dot => {
            expect_arity(op, inputs, 2)?;
            if inputs[0].shape() != inputs[1].shape() {
                return Err(mismatch(
                    "dot",
                    format!("{:?} vs {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            Ok(Tensor::scalar(inputs[0].dot(inputs[1])))
        }
        Op::SquaredNorm => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].dot(inputs[0])))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(mismatch("concat", "no inputs"));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(mismatch("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != *axis && a != b)
                {
                    return Err(mismatch("concat", format!("{first:?} vs {s:?} along axis {axis}")));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let ext = t.shape()[*axis];
                    data.extend_from_slice(&t.data()[o * ext * inner..(o + 1) * ext * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_raw(shape, data))
        }
        Op::Slice { axis, start, len } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if *axis >= a.rank() || *len == 0 || start + len > a.shape()[*axis] {
                return Err(mismatch(
                    "slice",
                    format!("[{start}, {start}+{len}) on axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Ok(Tensor::from_raw(shape, data))
        }
        Op::Reshape(shape) => {
            expect_arity(op, inputs, 1)?;
            if shape.contains(&0) || shape.iter().product::<usize>() != inputs[0].numel() {
                return Err(mismatch(
                    "reshape",
                    format!("{:?} -> {shape:?}", inputs[0].shape()),
                ));
            }
            Ok(inputs[0].reshaped(shape.clone()))
        }
        Op::MaxReduce { axis: None } => {
            expect_arity(op, inputs, 1)?;
            let (_, v) = argmax_lowest(inputs[0].data().iter().copied());
            Ok(Tensor::scalar(v))
        }
        Op::MaxReduce { axis: Some(axis) } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if *axis >= a.rank() {
                return Err(mismatch("max", format!("axis {axis} out of range for {:?}", a.shape())));
            }
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..ext).map(|e| a.data()[(o * ext + e) * inner + i]);
                    out.push(argmax_lowest(it).1);
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Ok(Tensor::from_raw(shape, out))
        }
        Op::Linearized { .. } => Err(mismatch("linearized", "recorded via Tape::linearized")),
        _ => unreachable!(),
    }
}

/// Reverse partials: cotangent contributions for each input.
pub(crate) fn backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    if op.is_unary_elementwise() {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| gv * unary_deriv(op, xv, yv))
            .collect();
        return vec![Tensor::from_raw(x.shape().to_vec(), data)];
    }
    match op {
        Op::Add | Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let gb = if matches!(op, Op::Sub) { g.map(|v| -v) } else { g.clone() };
            vec![reduce_to(g.clone(), a), reduce_to(gb, b)]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = g.shape().to_vec();
            let ga = binary_map(g, b, shape.clone(), |gv, bv| gv * bv);
            let gb = binary_map(g, a, shape, |gv, av| gv * av);
            vec![reduce_to(ga, a), reduce_to(gb, b)]
        }
        Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = g.shape().to_vec();
            let ga = binary_map(g, b, shape.clone(), |gv, bv| gv / bv);
            // d(a/b)/db = -out/b
            let gout = binary_map(g, out, shape.clone(), |gv, ov| -gv * ov);
            let gb = binary_map(&gout, b, shape, |v, bv| v / bv);
            vec![reduce_to(ga, a), reduce_to(gb, b)]
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n, _) = matmul_dims(a, b).expect("validated at record time");
            // Treat every operand as a matrix: a (m,k), b (k,n), g (m,n).
            let bt = transpose_raw(b.data(), k, n);
            let ga = matmul_raw(g.data(), &bt, m, n, k);
            let at = transpose_raw(a.data(), m, k);
            let gb = matmul_raw(&at, g.data(), k, m, n);
            vec![
                Tensor::from_raw(a.shape().to_vec(), ga),
                Tensor::from_raw(b.shape().to_vec(), gb),
            ]
        }
        Op::Transpose => {
            let s = g.shape();
            vec![Tensor::from_raw(vec![s[1], s[0]], transpose_raw(g.data(), s[0], s[1]))]
        }
        Op::Sum { axis: None } => vec![Tensor::filled(inputs[0].shape(), g.item())],
        Op::Sum { axis: Some(axis) } => {
            let a = inputs[0];
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![0.0; a.numel()];
            for o in 0..outer {
                for e in 0..ext {
                    for i in 0..inner {
                        data[(o * ext + e) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![Tensor::from_raw(a.shape().to_vec(), data)]
        }
        Op::Mean => {
            let a = inputs[0];
            vec![Tensor::filled(a.shape(), g.item() / a.numel() as f64)]
        }
        Op::Dot => {
            let gv = g.item();
            vec![inputs[1].map(|v| gv * v), inputs[0].map(|v| gv * v)]
        }
        Op::SquaredNorm => {
            let gv = g.item();
            vec![inputs[0].map(|v| 2.0 * gv * v)]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let ext = t.shape()[*axis];
                let mut data = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + ext * inner]);
                }
                grads.push(Tensor::from_raw(t.shape().to_vec(), data));
                offset += ext;
            }
            grads
        }
        Op::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![0.0; a.numel()];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                data[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Tensor::from_raw(a.shape().to_vec(), data)]
        }
        Op::Reshape(_) => vec![g.reshaped(inputs[0].shape().to_vec())],
        Op::MaxReduce { axis: None } => {
            let a = inputs[0];
            let (idx, _) = argmax_lowest(a.data().iter().copied());
            let mut data = vec![0.0; a.numel()];
            data[idx] = g.item();
            vec![Tensor::from_raw(a.shape().to_vec(), data)]
        }
        Op::MaxReduce { axis: Some(axis) } => {
            let a = inputs[0];
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![0.0; a.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..ext).map(|e| a.data()[(o * ext + e) * inner + i]);
                    let (e, _) = argmax_lowest(it);
                    data[(o * ext + e) * inner + i] = g.data()[o * inner + i];
                }
            }
            vec![Tensor::from_raw(a.shape().to_vec(), data)]
        }
        Op::Linearized { jacobians } => jacobians
            .iter()
            .zip(inputs)
            .map(|(j, x)| {
                let (rows, cols) = (j.shape()[0], j.shape()[1]);
                // g^T J
                let v = matmul_raw(g.data(), j.data(), 1, rows, cols);
                Tensor::from_raw(x.shape().to_vec(), v)
            })
            .collect(),
        Op::Leaf | Op::Const => Vec::new(),
        _ => unreachable!(),
    }
}

/// Forward tangent of the output given input tangents.
pub(crate) fn tangent(op: &Op, inputs: &[&Tensor], out: &Tensor, t: &[&Tensor]) -> Tensor {
    if op.is_unary_elementwise() {
        let data = inputs[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(t[0].data())
            .map(|((&xv, &yv), &tv)| tv * unary_deriv(op, xv, yv))
            .collect();
        return Tensor::from_raw(out.shape().to_vec(), data);
    }
    let linear = |ts: &[&Tensor]| forward(op, ts).expect("shapes validated at record time");
    match op {
        Op::Add | Op::Sub | Op::Transpose | Op::Sum { .. } | Op::Mean | Op::Concat { .. }
        | Op::Slice { .. } | Op::Reshape(_) => linear(t),
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = out.shape().to_vec();
            let x = binary_map(t[0], b, shape.clone(), |tv, bv| tv * bv);
            let y = binary_map(a, t[1], shape.clone(), |av, tv| av * tv);
            binary_map(&x, &y, shape, |p, q| p + q)
        }
        Op::Div => {
            let b = inputs[1];
            let shape = out.shape().to_vec();
            // (ta - out * tb) / b
            let x = binary_map(out, t[1], shape.clone(), |ov, tv| ov * tv);
            let num = binary_map(t[0], &x, shape.clone(), |p, q| p - q);
            binary_map(&num, b, shape, |p, q| p / q)
        }
        Op::Matmul => {
            let p = matmul(t[0], inputs[1]).expect("validated");
            let q = matmul(inputs[0], t[1]).expect("validated");
            p.zip_map(&q, |x, y| x + y)
        }
        Op::Dot => Tensor::scalar(t[0].dot(inputs[1]) + inputs[0].dot(t[1])),
        Op::SquaredNorm => Tensor::scalar(2.0 * inputs[0].dot(t[0])),
        Op::MaxReduce { axis: None } => {
            let (idx, _) = argmax_lowest(inputs[0].data().iter().copied());
            Tensor::scalar(t[0].data()[idx])
        }
        Op::MaxReduce { axis: Some(axis) } => {
            let a = inputs[0];
            let (outer, ext, inner) = split_axis(a.shape(), *axis);
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..ext).map(|e| a.data()[(o * ext + e) * inner + i]);
                    let (e, _) = argmax_lowest(it);
                    data.push(t[0].data()[(o * ext + e) * inner + i]);
                }
            }
            Tensor::from_raw(out.shape().to_vec(), data)
        }
        Op::Linearized { jacobians } => {
            let mut acc = vec![0.0; out.numel()];
            for (j, tv) in jacobians.iter().zip(t) {
                let (rows, cols) = (j.shape()[0], j.shape()[1]);
                let v = matmul_raw(j.data(), tv.data(), rows, cols, 1);
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
            Tensor::from_raw(out.shape().to_vec(), acc)
        }
        Op::Leaf | Op::Const => Tensor::zeros(out.shape()),
        _ => unreachable!(),
    }
}
