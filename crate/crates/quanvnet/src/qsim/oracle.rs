//! Dense-matrix reference for tiny circuits.
//!
//! Builds each gate's full `2^n x 2^n` unitary by summing Kronecker-embedded
//! 2x2 factors, then multiplies the gate matrices together. Deliberately
//! independent of the simulator's bit-twiddling apply loops so the two paths
//! can cross-check each other. Row-major matrices, basis index bit i = qubit i
//! (so qubit n-1 is the leftmost Kronecker factor).

use num_complex::Complex64;

use super::{
    resolve_angles, rotation_matrix, CompiledPqc, GateInstance, GateKind, QsimError,
};

/// Oracle limit; 8x8 matrices at most.
pub const MAX_ORACLE_QUBITS: usize = 3;

type M2 = [[Complex64; 2]; 2];

const fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

const I2: M2 = [[c(1.0), c(0.0)], [c(0.0), c(1.0)]];
const X2: M2 = [[c(0.0), c(1.0)], [c(1.0), c(0.0)]];
/// |0><0| and |1><1| projectors.
const P0: M2 = [[c(1.0), c(0.0)], [c(0.0), c(0.0)]];
const P1: M2 = [[c(0.0), c(0.0)], [c(0.0), c(1.0)]];
/// |1><0| (raise) and |0><1| (lower).
const RAISE: M2 = [[c(0.0), c(0.0)], [c(1.0), c(0.0)]];
const LOWER: M2 = [[c(0.0), c(1.0)], [c(0.0), c(0.0)]];

fn h2() -> M2 {
    let s = c(std::f64::consts::FRAC_1_SQRT_2);
    [[s, s], [s, -s]]
}

fn kron(a: &[Complex64], a_dim: usize, b: &M2) -> Vec<Complex64> {
    let dim = a_dim * 2;
    let mut out = vec![Complex64::ZERO; dim * dim];
    for ar in 0..a_dim {
        for ac in 0..a_dim {
            for br in 0..2 {
                for bc in 0..2 {
                    out[(ar * 2 + br) * dim + (ac * 2 + bc)] = a[ar * a_dim + ac] * b[br][bc];
                }
            }
        }
    }
    out
}

/// Embeds 2x2 factors on the named qubits (identity elsewhere) into the full
/// space, Kronecker order qubit n-1 down to qubit 0.
fn embed(n_qubits: usize, factors: &[(usize, M2)]) -> Vec<Complex64> {
    let mut m = vec![Complex64::new(1.0, 0.0)];
    let mut dim = 1;
    for q in (0..n_qubits).rev() {
        let f = factors
            .iter()
            .find(|(fq, _)| *fq == q)
            .map(|(_, fm)| *fm)
            .unwrap_or(I2);
        m = kron(&m, dim, &f);
        dim *= 2;
    }
    m
}

fn add_assign(a: &mut [Complex64], b: &[Complex64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += *y;
    }
}

fn matmul(a: &[Complex64], b: &[Complex64], dim: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::ZERO; dim * dim];
    for r in 0..dim {
        for k in 0..dim {
            let av = a[r * dim + k];
            if av == Complex64::ZERO {
                continue;
            }
            for col in 0..dim {
                out[r * dim + col] += av * b[k * dim + col];
            }
        }
    }
    out
}

/// Sum-of-embedded-terms expansion of one gate.
fn gate_matrix(n_qubits: usize, gate: &GateInstance, angle: Option<f64>) -> Vec<Complex64> {
    let q = &gate.qubits;
    let terms: Vec<Vec<(usize, M2)>> = match gate.kind {
        GateKind::H => vec![vec![(q[0], h2())]],
        GateKind::X => vec![vec![(q[0], X2)]],
        GateKind::Rx | GateKind::Ry | GateKind::Rz => {
            vec![vec![(q[0], rotation_matrix(gate.kind, angle.unwrap()))]]
        }
        GateKind::Cnot => vec![vec![(q[0], P0)], vec![(q[0], P1), (q[1], X2)]],
        GateKind::Crx | GateKind::Cry | GateKind::Crz => vec![
            vec![(q[0], P0)],
            vec![(q[0], P1), (q[1], rotation_matrix(gate.kind, angle.unwrap()))],
        ],
        GateKind::Swap => vec![
            vec![(q[0], P0), (q[1], P0)],
            vec![(q[0], P1), (q[1], P1)],
            vec![(q[0], RAISE), (q[1], LOWER)],
            vec![(q[0], LOWER), (q[1], RAISE)],
        ],
        GateKind::Toffoli => vec![
            vec![(q[0], P0), (q[1], P0)],
            vec![(q[0], P0), (q[1], P1)],
            vec![(q[0], P1), (q[1], P0)],
            vec![(q[0], P1), (q[1], P1), (q[2], X2)],
        ],
    };
    let dim = 1 << n_qubits;
    let mut m = vec![Complex64::ZERO; dim * dim];
    for term in &terms {
        add_assign(&mut m, &embed(n_qubits, term));
    }
    m
}

/// Full unitary of the bound circuit as a row-major `2^n x 2^n` matrix.
/// Column 0 is the state `run_circuit` should produce from |0...0>.
pub fn dense_unitary(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
) -> Result<Vec<Complex64>, QsimError> {
    if pqc.n_qubits > MAX_ORACLE_QUBITS {
        return Err(QsimError::OracleTooLarge(pqc.n_qubits));
    }
    let angles = resolve_angles(pqc, inputs, thetas)?;
    let dim = 1usize << pqc.n_qubits;
    let mut total = vec![Complex64::ZERO; dim * dim];
    for i in 0..dim {
        total[i * dim + i] = Complex64::new(1.0, 0.0);
    }
    for (gate, angle) in pqc.gates.iter().zip(&angles) {
        let m = gate_matrix(pqc.n_qubits, gate, *angle);
        total = matmul(&m, &total, dim);
    }
    Ok(total)
}
