//! Minimal dense-tensor network stack: 2-d convolution, 2x2 max pooling,
//! fully connected layers, ReLU, softmax cross-entropy, and Adam.
//!
//! Tensors are row-major `f64` buffers with an explicit shape. Every forward
//! op has a matching backward op that takes the same inputs plus the upstream
//! gradient, so layers chain by hand without a graph runtime.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape {shape:?} does not match {len} data values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: kernel {k}x{k} larger than input {h}x{w}")]
    KernelTooLarge {
        op: &'static str,
        k: usize,
        h: usize,
        w: usize,
    },
    #[error("class label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("adam state sized for {expected} parameters, got {got}")]
    AdamSizeMismatch { expected: usize, got: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

/// Row-major n-d array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dim3(&self, op: &'static str) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(NnError::ShapeMismatch {
                op,
                expected: "rank-3 tensor [channels, height, width]".into(),
                got: format!("{:?}", self.shape),
            }),
        }
    }
}

fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<(), NnError> {
    if t.shape() != shape {
        return Err(NnError::ShapeMismatch {
            op,
            expected: format!("{shape:?}"),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(())
}

/// Valid (no padding, stride 1) cross-correlation.
///
/// `input` is `[c_in, h, w]`, `kernels` `[c_out, c_in, k, k]`, `bias`
/// `[c_out]`; output is `[c_out, h-k+1, w-k+1]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (c_in, h, w) = input.dim3("conv2d_forward")?;
    let [c_out, kc_in, kh, kw] = kernels.shape()[..] else {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_forward",
            expected: "rank-4 kernels [c_out, c_in, k, k]".into(),
            got: format!("{:?}", kernels.shape()),
        });
    };
    if kc_in != c_in || kh != kw {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_forward",
            expected: format!("kernels [{c_out}, {c_in}, k, k]"),
            got: format!("{:?}", kernels.shape()),
        });
    }
    expect_shape("conv2d_forward", bias, &[c_out])?;
    if kh > h || kw > w {
        return Err(NnError::KernelTooLarge {
            op: "conv2d_forward",
            k: kh,
            h,
            w,
        });
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iv = input.data()[(ci * h + oy + ky) * w + ox + kx];
                            let kv =
                                kernels.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out.data_mut()[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of the convolution: returns `(d_input, d_kernels, d_bias)` for
/// the upstream gradient `dout` of shape `[c_out, h-k+1, w-k+1]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (c_in, h, w) = input.dim3("conv2d_backward")?;
    let [c_out, _, kh, kw] = kernels.shape()[..] else {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_backward",
            expected: "rank-4 kernels".into(),
            got: format!("{:?}", kernels.shape()),
        });
    };
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    expect_shape("conv2d_backward", dout, &[c_out, oh, ow])?;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernels = Tensor::zeros(kernels.shape());
    let mut d_bias = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout.data()[(co * oh + oy) * ow + ox];
                d_bias.data_mut()[co] += g;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let i_idx = (ci * h + oy + ky) * w + ox + kx;
                            let k_idx = ((co * c_in + ci) * kh + ky) * kw + kx;
                            d_input.data_mut()[i_idx] += g * kernels.data()[k_idx];
                            d_kernels.data_mut()[k_idx] += g * input.data()[i_idx];
                        }
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernels, d_bias))
}

/// 2x2 max pooling with stride 2 per channel; odd trailing rows/columns are
/// dropped.
pub fn maxpool2d_forward(input: &Tensor) -> Result<Tensor, NnError> {
    let (c, h, w) = input.dim3("maxpool2d_forward")?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.data_mut()[(ch * oh + oy) * ow + ox] =
                    pool_window_max(input, ch, h, w, oy, ox).1;
            }
        }
    }
    Ok(out)
}

/// Routes the upstream gradient to each window's max cell; ties go to the
/// first cell in row-major window order.
pub fn maxpool2d_backward(input: &Tensor, dout: &Tensor) -> Result<Tensor, NnError> {
    let (c, h, w) = input.dim3("maxpool2d_backward")?;
    let (oh, ow) = (h / 2, w / 2);
    expect_shape("maxpool2d_backward", dout, &[c, oh, ow])?;
    let mut d_input = Tensor::zeros(input.shape());
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (argmax, _) = pool_window_max(input, ch, h, w, oy, ox);
                d_input.data_mut()[argmax] += dout.data()[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Ok(d_input)
}

fn pool_window_max(
    input: &Tensor,
    ch: usize,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
) -> (usize, f64) {
    let mut best_idx = 0;
    let mut best = f64::NEG_INFINITY;
    for dy in 0..2 {
        for dx in 0..2 {
            let idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
            let v = input.data()[idx];
            if v > best {
                best = v;
                best_idx = idx;
            }
        }
    }
    (best_idx, best)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).unwrap()
}

/// ReLU gradient mask; the subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, dout: &Tensor) -> Result<Tensor, NnError> {
    expect_shape("relu_backward", dout, input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(input.shape(), data).unwrap())
}

/// `y = W x + b` with `W` of shape `[d_out, d_in]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let [d_out, d_in] = weights.shape()[..] else {
        return Err(NnError::ShapeMismatch {
            op: "fc_forward",
            expected: "rank-2 weights [d_out, d_in]".into(),
            got: format!("{:?}", weights.shape()),
        });
    };
    if input.len() != d_in {
        return Err(NnError::ShapeMismatch {
            op: "fc_forward",
            expected: format!("input of {d_in} values"),
            got: format!("{:?}", input.shape()),
        });
    }
    expect_shape("fc_forward", bias, &[d_out])?;
    let mut out = Tensor::zeros(&[d_out]);
    for o in 0..d_out {
        let row = &weights.data()[o * d_in..(o + 1) * d_in];
        let mut acc = bias.data()[o];
        for (wv, xv) in row.iter().zip(input.data()) {
            acc += wv * xv;
        }
        out.data_mut()[o] = acc;
    }
    Ok(out)
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn fc_backward(
    input: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let [d_out, d_in] = weights.shape()[..] else {
        return Err(NnError::ShapeMismatch {
            op: "fc_backward",
            expected: "rank-2 weights [d_out, d_in]".into(),
            got: format!("{:?}", weights.shape()),
        });
    };
    if input.len() != d_in || dout.len() != d_out {
        return Err(NnError::ShapeMismatch {
            op: "fc_backward",
            expected: format!("input {d_in}, dout {d_out}"),
            got: format!("input {:?}, dout {:?}", input.shape(), dout.shape()),
        });
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = Tensor::zeros(&[d_out]);
    for o in 0..d_out {
        let g = dout.data()[o];
        d_bias.data_mut()[o] += g;
        for i in 0..d_in {
            d_input.data_mut()[i] += g * weights.data()[o * d_in + i];
            d_weights.data_mut()[o * d_in + i] += g * input.data()[i];
        }
    }
    Ok((d_input, d_weights, d_bias))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against a class label. Returns the loss
/// and its gradient with respect to the logits, `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), NnError> {
    if logits.is_empty() {
        return Err(NnError::Empty("logits"));
    }
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let probs = softmax(logits);
    // Clamp keeps the loss finite even if a probability underflows to zero.
    let loss = -probs[label].max(1e-300).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Adam state for one parameter buffer (bias-corrected first and second
/// moments, per-buffer step counter).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(learning_rate: f64, len: usize) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(NnError::AdamSizeMismatch {
            expected: state.m.len(),
            got: if params.len() != state.m.len() {
                params.len()
            } else {
                grads.len()
            },
        });
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
