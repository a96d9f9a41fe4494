//! Sliding-window quantum convolution.
//!
//! A window of pixels is squashed into rotation angles, fed to a fixed
//! parameterized circuit as its input angles, and the readout qubit's Z
//! expectation becomes one output pixel. The window slides like an ordinary
//! convolution; gradients flow to both the circuit's trainable angles and the
//! input pixels via the adjoint sweep, with overlapping windows accumulating.

use thiserror::Error;

use crate::qsim::{self, CompiledPqc, QsimError};

#[derive(Debug, Error)]
pub enum QuanvError {
    #[error("feature map {height}x{width} needs {expected} values, got {got}")]
    ValueCount {
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {0} fed to squash")]
    NonFinite(f64),
    #[error("window dimensions must be at least 1x1")]
    EmptyWindow,
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("window {m}x{n} covers {cells} cells but circuit has {n_qubits} qubits")]
    WindowQubitMismatch {
        m: usize,
        n: usize,
        cells: usize,
        n_qubits: usize,
    },
    #[error("circuit declares {n_inputs} input slots, window needs {expected}")]
    InputSlotMismatch { n_inputs: usize, expected: usize },
    #[error("expected {expected} trainable angles, got {got}")]
    ThetaCount { expected: usize, got: usize },
    #[error("readout qubit {readout} out of range for {n_qubits} qubits")]
    ReadoutOutOfRange { readout: usize, n_qubits: usize },
    #[error("input {in_h}x{in_w} smaller than window {m}x{n}")]
    InputSmallerThanWindow {
        in_h: usize,
        in_w: usize,
        m: usize,
        n: usize,
    },
    #[error("upstream gradient is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    UpstreamShape {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error(transparent)]
    Qsim(#[from] QsimError),
}

/// 2-d grid of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        FeatureMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self, QuanvError> {
        if values.len() != height * width {
            return Err(QuanvError::ValueCount {
                height,
                width,
                expected: height * width,
                got: values.len(),
            });
        }
        Ok(FeatureMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Maps any real to a rotation angle in (0, pi): `pi * sigmoid(x)`.
pub fn squash(x: f64) -> Result<f64, QuanvError> {
    if !x.is_finite() {
        return Err(QuanvError::NonFinite(x));
    }
    Ok(std::f64::consts::PI * sigmoid(x))
}

/// d squash / dx = pi * sigmoid(x) * (1 - sigmoid(x)).
pub fn squash_derivative(x: f64) -> Result<f64, QuanvError> {
    if !x.is_finite() {
        return Err(QuanvError::NonFinite(x));
    }
    let s = sigmoid(x);
    Ok(std::f64::consts::PI * s * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One quantum filter: a compiled circuit, its trainable angles, and the
/// sliding-window geometry. The window's `m x n` cells map row-major onto the
/// circuit's input slots (cell `(r, c)` drives slot `r * n + c`).
#[derive(Debug, Clone)]
pub struct QuantumFilter {
    pub pqc: CompiledPqc,
    pub thetas: Vec<f64>,
    pub window: (usize, usize),
    pub stride: usize,
    pub readout: usize,
}

impl QuantumFilter {
    pub fn new(
        pqc: CompiledPqc,
        thetas: Vec<f64>,
        window: (usize, usize),
        stride: usize,
        readout: usize,
    ) -> Result<Self, QuanvError> {
        let (m, n) = window;
        if m == 0 || n == 0 {
            return Err(QuanvError::EmptyWindow);
        }
        if stride == 0 {
            return Err(QuanvError::ZeroStride);
        }
        let cells = m * n;
        if cells != pqc.n_qubits {
            return Err(QuanvError::WindowQubitMismatch {
                m,
                n,
                cells,
                n_qubits: pqc.n_qubits,
            });
        }
        if pqc.n_inputs != cells {
            return Err(QuanvError::InputSlotMismatch {
                n_inputs: pqc.n_inputs,
                expected: cells,
            });
        }
        if thetas.len() != pqc.n_thetas {
            return Err(QuanvError::ThetaCount {
                expected: pqc.n_thetas,
                got: thetas.len(),
            });
        }
        if readout >= pqc.n_qubits {
            return Err(QuanvError::ReadoutOutOfRange {
                readout,
                n_qubits: pqc.n_qubits,
            });
        }
        Ok(QuantumFilter {
            pqc,
            thetas,
            window,
            stride,
            readout,
        })
    }

    /// Output grid dimensions for an input map: `floor((in - window)/stride) + 1`.
    pub fn output_shape(&self, in_h: usize, in_w: usize) -> Result<(usize, usize), QuanvError> {
        let (m, n) = self.window;
        if in_h < m || in_w < n {
            return Err(QuanvError::InputSmallerThanWindow { in_h, in_w, m, n });
        }
        Ok(((in_h - m) / self.stride + 1, (in_w - n) / self.stride + 1))
    }

    fn window_angles(&self, input: &FeatureMap, u: usize, v: usize) -> Result<Vec<f64>, QuanvError> {
        let (m, n) = self.window;
        let mut angles = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                angles.push(squash(input.get(u * self.stride + r, v * self.stride + c))?);
            }
        }
        Ok(angles)
    }

    /// Runs the circuit on every window; output pixel = readout expectation.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap, QuanvError> {
        let (out_h, out_w) = self.output_shape(input.height(), input.width())?;
        let mut out = FeatureMap::zeros(out_h, out_w);
        for u in 0..out_h {
            for v in 0..out_w {
                let angles = self.window_angles(input, u, v)?;
                let e = qsim::expectation(&self.pqc, &angles, &self.thetas, self.readout)?;
                out.set(u, v, e);
            }
        }
        Ok(out)
    }

    /// Chain-rule pass: returns the gradient for the trainable angles and for
    /// the input map, both weighted by `upstream`. The input gradient routes
    /// through the squash derivative; overlapping windows accumulate into the
    /// same pixels, and theta gradients accumulate over all windows.
    pub fn backward(
        &self,
        input: &FeatureMap,
        upstream: &FeatureMap,
    ) -> Result<(Vec<f64>, FeatureMap), QuanvError> {
        let (out_h, out_w) = self.output_shape(input.height(), input.width())?;
        if upstream.height() != out_h || upstream.width() != out_w {
            return Err(QuanvError::UpstreamShape {
                want_h: out_h,
                want_w: out_w,
                got_h: upstream.height(),
                got_w: upstream.width(),
            });
        }
        let (m, n) = self.window;
        let mut dthetas = vec![0.0; self.pqc.n_thetas];
        let mut dinput = FeatureMap::zeros(input.height(), input.width());
        for u in 0..out_h {
            for v in 0..out_w {
                let g = upstream.get(u, v);
                let angles = self.window_angles(input, u, v)?;
                let (dt, di) =
                    qsim::grad_adjoint(&self.pqc, &angles, &self.thetas, self.readout)?;
                for (acc, d) in dthetas.iter_mut().zip(&dt) {
                    *acc += g * d;
                }
                for (k, &dik) in di.iter().enumerate().take(m * n) {
                    let (y, x) = (u * self.stride + k / n, v * self.stride + k % n);
                    let raw = input.get(y, x);
                    dinput.set(y, x, dinput.get(y, x) + g * dik * squash_derivative(raw)?);
                }
            }
        }
        Ok((dthetas, dinput))
    }
}
