//! Dense f64 tensors and the forward/backward kernels the models are built
//! from.
//!
//! Storage is always contiguous row-major; there are no views or strides.
//! Every kernel is a pure function of its inputs and is deterministic:
//! identical inputs produce bit-identical outputs.

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents are positive and match the
    /// data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expect} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Copy of example `i` along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::Shape(format!(
                "index {i} out of range for leading extent of {:?}",
                self.shape
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "stack of mismatched shapes {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            data.extend_from_slice(p.data());
        }
        Tensor::new(shape, data)
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2("matmul lhs")?;
        let [k2, n] = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Row-wise log-softmax of a `[b,n]` tensor, stabilized by max
    /// subtraction so huge logits never overflow.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let [b, n] = self.dims2("log_softmax")?;
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - max - log_sum;
            }
        }
        Tensor::new(vec![b, n], out)
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Shape(format!(
                "{what} expects rank 2, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims3(&self, what: &str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Shape(format!(
                "{what} expects rank 3, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Shape(format!(
                "{what} expects rank 4, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Pointwise nonlinearity applied between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
        }
    }

    // relu'(0) is defined as 0 so the backward pass is an exact function.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise activation.
pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&x| kind.apply(x)).collect(),
    }
}

/// Gradient of [`activation`] w.r.t. its input, given the upstream gradient.
pub fn activation_backward(input: &Tensor, kind: Activation, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape != grad_out.shape {
        return Err(Error::Shape(format!(
            "activation backward: input {:?} vs upstream gradient {:?}",
            input.shape, grad_out.shape
        )));
    }
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| g * kind.derivative(x))
        .collect();
    Ok(Tensor {
        shape: input.shape.clone(),
        data,
    })
}

/// 3x3 cross-correlation with zero padding 1 and stride 1, so the output has
/// the same spatial size as the input. `input` is `[C_in,H,W]`, `kernels` is
/// `[C_out,C_in,3,3]`, `bias` is `[C_out]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c_in, h, w] = input.dims3("conv2d input")?;
    let [c_out, kc, kh, kw] = kernels.dims4("conv2d kernels")?;
    if kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv2d kernels must be 3x3, got {kh}x{kw}"
        )));
    }
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, kernels expect {kc}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data[o];
                for c in 0..c_in {
                    for dy in 0..3usize {
                        let iy = (y + dy).wrapping_sub(1);
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = (x + dx).wrapping_sub(1);
                            if ix >= w {
                                continue;
                            }
                            acc += input.data[(c * h + iy) * w + ix]
                                * kernels.data[((o * c_in + c) * 3 + dy) * 3 + dx];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Exact gradients of [`conv2d`] w.r.t. input, kernels, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [c_in, h, w] = input.dims3("conv2d backward input")?;
    let [c_out, kc, _, _] = kernels.dims4("conv2d backward kernels")?;
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d backward channel mismatch: input has {c_in} channels, kernels expect {kc}"
        )));
    }
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::Shape(format!(
            "conv2d backward upstream gradient {:?} does not match output shape [{c_out}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let mut grad_input = vec![0.0; c_in * h * w];
    let mut grad_kernels = vec![0.0; c_out * c_in * 9];
    let mut grad_bias = vec![0.0; c_out];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out.data[(o * h + y) * w + x];
                grad_bias[o] += g;
                for c in 0..c_in {
                    for dy in 0..3usize {
                        let iy = (y + dy).wrapping_sub(1);
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = (x + dx).wrapping_sub(1);
                            if ix >= w {
                                continue;
                            }
                            let in_idx = (c * h + iy) * w + ix;
                            let k_idx = ((o * c_in + c) * 3 + dy) * 3 + dx;
                            grad_kernels[k_idx] += g * input.data[in_idx];
                            grad_input[in_idx] += g * kernels.data[k_idx];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], grad_input)?,
        Tensor::new(vec![c_out, c_in, 3, 3], grad_kernels)?,
        Tensor::new(vec![c_out], grad_bias)?,
    ))
}

/// Argmax positions recorded by [`maxpool2`], needed to route gradients back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    /// Flat input index of the window maximum, one per output element.
    argmax: Vec<usize>,
}

/// 2x2 non-overlapping max pooling over `[C,H,W]` with even `H`, `W`. Ties
/// within a window break to the first position in row-major scan order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolMask)> {
    let [c, h, w] = input.dims3("maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 requires even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (ch * h + 2 * y) * w + 2 * x;
                let mut best = input.data[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(ch * oh + y) * ow + x] = best;
                argmax[(ch * oh + y) * ow + x] = best_idx;
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        PoolMask {
            input_shape: [c, h, w],
            output_shape: [c, oh, ow],
            argmax,
        },
    ))
}

/// Routes the upstream gradient to the argmax positions recorded in `mask`.
pub fn maxpool2_backward(mask: &PoolMask, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != mask.output_shape {
        return Err(Error::Shape(format!(
            "maxpool2 backward upstream gradient {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            mask.output_shape
        )));
    }
    let mut grad_input = Tensor::zeros(&mask.input_shape);
    for (i, &src) in mask.argmax.iter().enumerate() {
        grad_input.data[src] += grad_out.data[i];
    }
    Ok(grad_input)
}
