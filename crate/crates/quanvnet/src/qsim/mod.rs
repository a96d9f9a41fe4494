//! Exact statevector simulation of small parameterized quantum circuits.
//!
//! Amplitudes are stored as `2^n` complex numbers indexed by the computational
//! basis; qubit 0 is the least-significant bit of the basis index. This
//! convention is shared by every module that talks about qubits.

mod grad;
mod oracle;

pub use grad::{grad_adjoint, grad_parameter_shift};
pub use oracle::{dense_unitary, MAX_ORACLE_QUBITS};

use num_complex::Complex64;
use thiserror::Error;

/// Upper bound on simulated qubits (4096 amplitudes).
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error)]
pub enum QsimError {
    #[error("qubit count {0} outside supported range 1..={MAX_QUBITS}")]
    BadQubitCount(usize),
    #[error("qubit index {index} out of range for {n_qubits} qubits")]
    QubitOutOfRange { index: usize, n_qubits: usize },
    #[error("{kind} acts on {expected} qubit(s), got {got}")]
    ArityMismatch {
        kind: GateKind,
        expected: usize,
        got: usize,
    },
    #[error("{kind} operands must be distinct, got {qubits:?}")]
    DuplicateQubits { kind: GateKind, qubits: Vec<usize> },
    #[error("{0} requires an angle parameter")]
    MissingParam(GateKind),
    #[error("{0} takes no angle parameter")]
    UnexpectedParam(GateKind),
    #[error("expected {expected} {what} value(s), got {got}")]
    BindingLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} slot {index} out of range (circuit declares {count})")]
    SlotOutOfRange {
        what: &'static str,
        index: usize,
        count: usize,
    },
    #[error("non-finite angle {angle} bound to {what} slot {index}")]
    NonFiniteAngle {
        what: &'static str,
        index: usize,
        angle: f64,
    },
    #[error("dense oracle supports at most {MAX_ORACLE_QUBITS} qubits, got {0}")]
    OracleTooLarge(usize),
}

/// The eleven supported gate kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    H,
    X,
    Cnot,
    Swap,
    Toffoli,
    Rx,
    Ry,
    Rz,
    Crx,
    Cry,
    Crz,
}

impl GateKind {
    pub const ALL: [GateKind; 11] = [
        GateKind::H,
        GateKind::X,
        GateKind::Cnot,
        GateKind::Swap,
        GateKind::Toffoli,
        GateKind::Rx,
        GateKind::Ry,
        GateKind::Rz,
        GateKind::Crx,
        GateKind::Cry,
        GateKind::Crz,
    ];

    /// Number of qubit operands.
    pub fn arity(self) -> usize {
        match self {
            GateKind::H | GateKind::X | GateKind::Rx | GateKind::Ry | GateKind::Rz => 1,
            GateKind::Cnot | GateKind::Swap | GateKind::Crx | GateKind::Cry | GateKind::Crz => 2,
            GateKind::Toffoli => 3,
        }
    }

    /// True for the six rotation kinds that carry an angle.
    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            GateKind::Rx
                | GateKind::Ry
                | GateKind::Rz
                | GateKind::Crx
                | GateKind::Cry
                | GateKind::Crz
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::H => "H",
            GateKind::X => "X",
            GateKind::Cnot => "CNOT",
            GateKind::Swap => "SWAP",
            GateKind::Toffoli => "Toffoli",
            GateKind::Rx => "Rx",
            GateKind::Ry => "Ry",
            GateKind::Rz => "Rz",
            GateKind::Crx => "CRx",
            GateKind::Cry => "CRy",
            GateKind::Crz => "CRz",
        }
    }
}

impl std::fmt::Display for GateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a gate's angle comes from when the circuit is run.
///
/// `Theta` slots are trainable weights, `Input` slots are data angles; either
/// kind may be bound by several gates (data reloading), and gradients for a
/// shared slot accumulate over all of its occurrences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamSource {
    Theta(usize),
    Input(usize),
    Constant(f64),
}

/// One gate application: kind, qubit operands, and an angle source for the
/// rotation kinds.
///
/// Operand order: `Cnot`/`Crx`/`Cry`/`Crz` are `[control, target]`, `Toffoli`
/// is `[control, control, target]`, `Swap` is symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInstance {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    pub param: Option<ParamSource>,
}

impl GateInstance {
    pub fn new(
        kind: GateKind,
        qubits: Vec<usize>,
        param: Option<ParamSource>,
    ) -> Result<Self, QsimError> {
        if qubits.len() != kind.arity() {
            return Err(QsimError::ArityMismatch {
                kind,
                expected: kind.arity(),
                got: qubits.len(),
            });
        }
        for (i, q) in qubits.iter().enumerate() {
            if qubits[..i].contains(q) {
                return Err(QsimError::DuplicateQubits { kind, qubits });
            }
        }
        match (kind.is_parameterized(), param.is_some()) {
            (true, false) => return Err(QsimError::MissingParam(kind)),
            (false, true) => return Err(QsimError::UnexpectedParam(kind)),
            _ => {}
        }
        Ok(GateInstance {
            kind,
            qubits,
            param,
        })
    }

    fn check_qubits(&self, n_qubits: usize) -> Result<(), QsimError> {
        for &q in &self.qubits {
            if q >= n_qubits {
                return Err(QsimError::QubitOutOfRange { index: q, n_qubits });
            }
        }
        Ok(())
    }
}

/// An executable gate program over a fixed qubit count, with declared numbers
/// of trainable and input angle slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPqc {
    pub n_qubits: usize,
    pub n_thetas: usize,
    pub n_inputs: usize,
    pub gates: Vec<GateInstance>,
}

impl CompiledPqc {
    /// Builds a program from a gate list, inferring slot counts from the
    /// highest referenced indices.
    pub fn from_gates(n_qubits: usize, gates: Vec<GateInstance>) -> Result<Self, QsimError> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::BadQubitCount(n_qubits));
        }
        let mut n_thetas = 0;
        let mut n_inputs = 0;
        for g in &gates {
            g.check_qubits(n_qubits)?;
            match g.param {
                Some(ParamSource::Theta(i)) => n_thetas = n_thetas.max(i + 1),
                Some(ParamSource::Input(i)) => n_inputs = n_inputs.max(i + 1),
                _ => {}
            }
        }
        Ok(CompiledPqc {
            n_qubits,
            n_thetas,
            n_inputs,
            gates,
        })
    }
}

/// State of `n_qubits` qubits as a dense amplitude vector.
#[derive(Debug, Clone)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn rotation_matrix(kind: GateKind, angle: f64) -> [[Complex64; 2]; 2] {
    let (half_sin, half_cos) = (angle / 2.0).sin_cos();
    let c = Complex64::new(half_cos, 0.0);
    match kind {
        GateKind::Rx | GateKind::Crx => {
            let off = Complex64::new(0.0, -half_sin);
            [[c, off], [off, c]]
        }
        GateKind::Ry | GateKind::Cry => {
            let s = Complex64::new(half_sin, 0.0);
            [[c, -s], [s, c]]
        }
        GateKind::Rz | GateKind::Crz => [
            [Complex64::new(half_cos, -half_sin), Complex64::ZERO],
            [Complex64::ZERO, Complex64::new(half_cos, half_sin)],
        ],
        _ => unreachable!("not a rotation kind"),
    }
}

const H_MATRIX: [[Complex64; 2]; 2] = [
    [
        Complex64::new(FRAC_1_SQRT_2, 0.0),
        Complex64::new(FRAC_1_SQRT_2, 0.0),
    ],
    [
        Complex64::new(FRAC_1_SQRT_2, 0.0),
        Complex64::new(-FRAC_1_SQRT_2, 0.0),
    ],
];

const X_MATRIX: [[Complex64; 2]; 2] = [
    [Complex64::ZERO, Complex64::new(1.0, 0.0)],
    [Complex64::new(1.0, 0.0), Complex64::ZERO],
];

impl StateVector {
    /// All-zeros basis state |0...0>.
    pub fn new(n_qubits: usize) -> Result<Self, QsimError> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::BadQubitCount(n_qubits));
        }
        let mut amps = vec![Complex64::ZERO; 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(StateVector { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Applies one gate; rotation kinds need `angle`.
    pub fn apply(&mut self, gate: &GateInstance, angle: Option<f64>) -> Result<(), QsimError> {
        gate.check_qubits(self.n_qubits)?;
        match (gate.kind.is_parameterized(), angle) {
            (true, None) => return Err(QsimError::MissingParam(gate.kind)),
            (false, Some(_)) => return Err(QsimError::UnexpectedParam(gate.kind)),
            _ => {}
        }
        self.apply_unchecked(gate, angle);
        Ok(())
    }

    fn apply_unchecked(&mut self, gate: &GateInstance, angle: Option<f64>) {
        match gate.kind {
            GateKind::H => self.apply_1q(&H_MATRIX, gate.qubits[0], &[]),
            GateKind::X => self.apply_1q(&X_MATRIX, gate.qubits[0], &[]),
            GateKind::Cnot => self.apply_1q(&X_MATRIX, gate.qubits[1], &gate.qubits[..1]),
            GateKind::Toffoli => self.apply_1q(&X_MATRIX, gate.qubits[2], &gate.qubits[..2]),
            GateKind::Swap => self.apply_swap(gate.qubits[0], gate.qubits[1]),
            GateKind::Rx | GateKind::Ry | GateKind::Rz => {
                let m = rotation_matrix(gate.kind, angle.unwrap());
                self.apply_1q(&m, gate.qubits[0], &[]);
            }
            GateKind::Crx | GateKind::Cry | GateKind::Crz => {
                let m = rotation_matrix(gate.kind, angle.unwrap());
                self.apply_1q(&m, gate.qubits[1], &gate.qubits[..1]);
            }
        }
    }

    fn apply_1q(&mut self, m: &[[Complex64; 2]; 2], target: usize, controls: &[usize]) {
        let t_mask = 1usize << target;
        let c_mask: usize = controls.iter().map(|&c| 1usize << c).sum();
        for i in 0..self.amps.len() {
            if i & t_mask == 0 && i & c_mask == c_mask {
                let j = i | t_mask;
                let a0 = self.amps[i];
                let a1 = self.amps[j];
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[j] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    fn apply_swap(&mut self, a: usize, b: usize) {
        let (ma, mb) = (1usize << a, 1usize << b);
        for i in 0..self.amps.len() {
            if i & ma != 0 && i & mb == 0 {
                self.amps.swap(i, i ^ ma ^ mb);
            }
        }
    }

    /// In-place Z on one qubit: flips the sign of amplitudes with that bit set.
    fn apply_z_sign(&mut self, qubit: usize) {
        let mask = 1usize << qubit;
        for (i, a) in self.amps.iter_mut().enumerate() {
            if i & mask != 0 {
                *a = -*a;
            }
        }
    }

    /// <Z> on the readout qubit: sum of |amp|^2 with readout bit 0 minus the
    /// sum with readout bit 1. Always in [-1, 1] for a normalized state.
    pub fn expectation_z(&self, readout: usize) -> Result<f64, QsimError> {
        if readout >= self.n_qubits {
            return Err(QsimError::QubitOutOfRange {
                index: readout,
                n_qubits: self.n_qubits,
            });
        }
        let mask = 1usize << readout;
        let mut e = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            e += if i & mask == 0 { p } else { -p };
        }
        Ok(e)
    }
}

/// Resolves every gate's angle against the given bindings. Non-parameterized
/// gates resolve to `None`. Rejects stale slot indices and non-finite angles.
pub fn resolve_angles(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
) -> Result<Vec<Option<f64>>, QsimError> {
    if inputs.len() != pqc.n_inputs {
        return Err(QsimError::BindingLength {
            what: "input",
            expected: pqc.n_inputs,
            got: inputs.len(),
        });
    }
    if thetas.len() != pqc.n_thetas {
        return Err(QsimError::BindingLength {
            what: "theta",
            expected: pqc.n_thetas,
            got: thetas.len(),
        });
    }
    let lookup = |what: &'static str, slots: &[f64], index: usize| -> Result<f64, QsimError> {
        let angle = *slots.get(index).ok_or(QsimError::SlotOutOfRange {
            what,
            index,
            count: slots.len(),
        })?;
        if !angle.is_finite() {
            return Err(QsimError::NonFiniteAngle { what, index, angle });
        }
        Ok(angle)
    };
    pqc.gates
        .iter()
        .map(|g| match g.param {
            None => Ok(None),
            Some(ParamSource::Theta(i)) => lookup("theta", thetas, i).map(Some),
            Some(ParamSource::Input(i)) => lookup("input", inputs, i).map(Some),
            Some(ParamSource::Constant(a)) => {
                if a.is_finite() {
                    Ok(Some(a))
                } else {
                    Err(QsimError::NonFiniteAngle {
                        what: "constant",
                        index: 0,
                        angle: a,
                    })
                }
            }
        })
        .collect()
}

pub(crate) fn run_resolved(
    pqc: &CompiledPqc,
    angles: &[Option<f64>],
) -> Result<StateVector, QsimError> {
    let mut state = StateVector::new(pqc.n_qubits)?;
    for (gate, angle) in pqc.gates.iter().zip(angles) {
        state.apply(gate, *angle)?;
    }
    Ok(state)
}

/// Runs the program on |0...0> with the given angle bindings.
pub fn run_circuit(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
) -> Result<StateVector, QsimError> {
    let angles = resolve_angles(pqc, inputs, thetas)?;
    run_resolved(pqc, &angles)
}

/// Runs the circuit and measures <Z> on `readout`.
pub fn expectation(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
    readout: usize,
) -> Result<f64, QsimError> {
    run_circuit(pqc, inputs, thetas)?.expectation_z(readout)
}

/// Z applied to one qubit of a copy of the state.
pub(crate) fn z_flipped(state: &StateVector, readout: usize) -> Result<StateVector, QsimError> {
    if readout >= state.n_qubits() {
        return Err(QsimError::QubitOutOfRange {
            index: readout,
            n_qubits: state.n_qubits(),
        });
    }
    let mut out = state.clone();
    out.apply_z_sign(readout);
    Ok(out)
}
