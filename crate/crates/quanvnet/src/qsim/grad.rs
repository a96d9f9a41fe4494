//! Gradients of the readout expectation with respect to bound angles.
//!
//! `grad_adjoint` is the production path: one forward sweep, then a reverse
//! sweep that peels gates off both the state and the Z-weighted costate, for
//! a cost of roughly three circuit executions total. `grad_parameter_shift`
//! evaluates the exact shift rules instead (two circuit runs per single-qubit
//! rotation occurrence, four per controlled rotation) and exists to
//! cross-check the adjoint sweep.

use num_complex::Complex64;

use super::{
    resolve_angles, run_resolved, z_flipped, CompiledPqc, GateInstance, GateKind, ParamSource,
    QsimError, StateVector,
};

enum Pauli {
    X,
    Y,
    Z,
}

/// Generator (target Pauli, control qubit if any) of a rotation gate.
fn generator(gate: &GateInstance) -> (Pauli, usize, Option<usize>) {
    match gate.kind {
        GateKind::Rx => (Pauli::X, gate.qubits[0], None),
        GateKind::Ry => (Pauli::Y, gate.qubits[0], None),
        GateKind::Rz => (Pauli::Z, gate.qubits[0], None),
        GateKind::Crx => (Pauli::X, gate.qubits[1], Some(gate.qubits[0])),
        GateKind::Cry => (Pauli::Y, gate.qubits[1], Some(gate.qubits[0])),
        GateKind::Crz => (Pauli::Z, gate.qubits[1], Some(gate.qubits[0])),
        _ => unreachable!("not a rotation kind"),
    }
}

/// Im<lambda| Proj_c Pauli_t |psi>, the per-gate angle derivative in the
/// adjoint sweep. For controlled rotations the projector keeps only basis
/// states with the control bit set.
fn generator_overlap(lambda: &StateVector, psi: &StateVector, gate: &GateInstance) -> f64 {
    let (pauli, target, control) = generator(gate);
    let t_mask = 1usize << target;
    let c_mask = control.map_or(0, |c| 1usize << c);
    let la = lambda.amplitudes();
    let pa = psi.amplitudes();
    let i_unit = Complex64::new(0.0, 1.0);
    let mut acc = Complex64::ZERO;
    for k in 0..pa.len() {
        if k & c_mask != c_mask {
            continue;
        }
        let pv = match pauli {
            Pauli::X => pa[k ^ t_mask],
            Pauli::Y => {
                if k & t_mask != 0 {
                    i_unit * pa[k ^ t_mask]
                } else {
                    -i_unit * pa[k ^ t_mask]
                }
            }
            Pauli::Z => {
                if k & t_mask == 0 {
                    pa[k]
                } else {
                    -pa[k]
                }
            }
        };
        acc += la[k].conj() * pv;
    }
    acc.im
}

/// Exact d<Z_readout>/d(theta slots) and d<Z_readout>/d(input slots) by
/// adjoint (reverse-sweep) differentiation. Slots bound by several gates
/// accumulate over all occurrences; unused slots stay zero.
pub fn grad_adjoint(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
    readout: usize,
) -> Result<(Vec<f64>, Vec<f64>), QsimError> {
    let angles = resolve_angles(pqc, inputs, thetas)?;
    let mut psi = run_resolved(pqc, &angles)?;
    let mut lambda = z_flipped(&psi, readout)?;
    let mut dthetas = vec![0.0; pqc.n_thetas];
    let mut dinputs = vec![0.0; pqc.n_inputs];
    for (gate, angle) in pqc.gates.iter().zip(&angles).rev() {
        match gate.param {
            Some(ParamSource::Theta(i)) => dthetas[i] += generator_overlap(&lambda, &psi, gate),
            Some(ParamSource::Input(i)) => dinputs[i] += generator_overlap(&lambda, &psi, gate),
            Some(ParamSource::Constant(_)) | None => {}
        }
        // Undo the gate on both vectors: rotations invert by negating the
        // angle, the non-parameterized kinds are involutions.
        let inverse_angle = angle.map(|a| -a);
        psi.apply(gate, inverse_angle)?;
        lambda.apply(gate, inverse_angle)?;
    }
    Ok((dthetas, dinputs))
}

fn eval_shifted(
    pqc: &CompiledPqc,
    angles: &[Option<f64>],
    gate_index: usize,
    delta: f64,
    readout: usize,
) -> Result<f64, QsimError> {
    let mut shifted = angles.to_vec();
    shifted[gate_index] = shifted[gate_index].map(|a| a + delta);
    run_resolved(pqc, &shifted)?.expectation_z(readout)
}

/// Same gradients via parameter-shift evaluations.
///
/// Single-qubit rotations use the two-term rule with shifts of pi/2.
/// Controlled rotations have generator eigenvalue gaps of 1/2 and 1, so they
/// need the four-term rule with shifts of pi/2 and 3pi/2. Shifts are applied
/// per gate occurrence, never to a whole shared slot, and the per-occurrence
/// results accumulate into the slot's entry.
pub fn grad_parameter_shift(
    pqc: &CompiledPqc,
    inputs: &[f64],
    thetas: &[f64],
    readout: usize,
) -> Result<(Vec<f64>, Vec<f64>), QsimError> {
    let angles = resolve_angles(pqc, inputs, thetas)?;
    // Surface readout range errors even for parameterless circuits.
    run_resolved(pqc, &angles)?.expectation_z(readout)?;

    let half_pi = std::f64::consts::FRAC_PI_2;
    let sqrt2 = std::f64::consts::SQRT_2;
    let c1 = (sqrt2 + 1.0) / (4.0 * sqrt2);
    let c2 = (sqrt2 - 1.0) / (4.0 * sqrt2);

    let mut dthetas = vec![0.0; pqc.n_thetas];
    let mut dinputs = vec![0.0; pqc.n_inputs];
    for (gi, gate) in pqc.gates.iter().enumerate() {
        let slot = match gate.param {
            Some(ParamSource::Theta(i)) => Some((true, i)),
            Some(ParamSource::Input(i)) => Some((false, i)),
            Some(ParamSource::Constant(_)) | None => None,
        };
        let Some((is_theta, slot)) = slot else {
            continue;
        };
        let grad = match gate.kind {
            GateKind::Rx | GateKind::Ry | GateKind::Rz => {
                let plus = eval_shifted(pqc, &angles, gi, half_pi, readout)?;
                let minus = eval_shifted(pqc, &angles, gi, -half_pi, readout)?;
                (plus - minus) / 2.0
            }
            GateKind::Crx | GateKind::Cry | GateKind::Crz => {
                let p1 = eval_shifted(pqc, &angles, gi, half_pi, readout)?;
                let m1 = eval_shifted(pqc, &angles, gi, -half_pi, readout)?;
                let p3 = eval_shifted(pqc, &angles, gi, 3.0 * half_pi, readout)?;
                let m3 = eval_shifted(pqc, &angles, gi, -3.0 * half_pi, readout)?;
                c1 * (p1 - m1) - c2 * (p3 - m3)
            }
            _ => unreachable!("parameterized gates are rotations"),
        };
        if is_theta {
            dthetas[slot] += grad;
        } else {
            dinputs[slot] += grad;
        }
    }
    Ok((dthetas, dinputs))
}

#[cfg(test)]
mod tests {
    use super::super::{expectation, GateInstance, GateKind, ParamSource};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn g(kind: GateKind, qubits: &[usize]) -> GateInstance {
        GateInstance::new(kind, qubits.to_vec(), None).unwrap()
    }

    fn gp(kind: GateKind, qubits: &[usize], p: ParamSource) -> GateInstance {
        GateInstance::new(kind, qubits.to_vec(), Some(p)).unwrap()
    }

    /// Central finite differences over theta slots (step 1e-5).
    fn fd_thetas(pqc: &CompiledPqc, inputs: &[f64], thetas: &[f64], readout: usize) -> Vec<f64> {
        let h = 1e-5;
        (0..thetas.len())
            .map(|i| {
                let mut plus = thetas.to_vec();
                let mut minus = thetas.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let ep = expectation(pqc, inputs, &plus, readout).unwrap();
                let em = expectation(pqc, inputs, &minus, readout).unwrap();
                (ep - em) / (2.0 * h)
            })
            .collect()
    }

    fn fd_inputs(pqc: &CompiledPqc, inputs: &[f64], thetas: &[f64], readout: usize) -> Vec<f64> {
        let h = 1e-5;
        (0..inputs.len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let ep = expectation(pqc, &plus, thetas, readout).unwrap();
                let em = expectation(pqc, &minus, thetas, readout).unwrap();
                (ep - em) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ry_gradient_is_minus_sine() {
        // E(theta) = <0| Ry(-theta) Z Ry(theta) |0> = cos(theta).
        let pqc = CompiledPqc::from_gates(1, vec![gp(GateKind::Ry, &[0], ParamSource::Theta(0))])
            .unwrap();
        let theta = 0.3;
        let (dt, di) = grad_adjoint(&pqc, &[], &[theta], 0).unwrap();
        assert!(di.is_empty());
        close(dt[0], -theta.sin(), 1e-14);

        let (st, _) = grad_parameter_shift(&pqc, &[], &[theta], 0).unwrap();
        close(st[0], -theta.sin(), 1e-14);
    }

    #[test]
    fn encoded_input_gradient_is_minus_cosine() {
        // E(a) = -sin(a) for Ry(a) H |0>, so dE/da = -cos(a).
        let pqc = CompiledPqc::from_gates(
            1,
            vec![
                g(GateKind::H, &[0]),
                gp(GateKind::Ry, &[0], ParamSource::Input(0)),
            ],
        )
        .unwrap();
        for &a in &[0.0, 0.4, 1.3, 2.2] {
            let (dt, di) = grad_adjoint(&pqc, &[a], &[], 0).unwrap();
            assert!(dt.is_empty());
            close(di[0], -a.cos(), 1e-13);
        }
    }

    #[test]
    fn shared_slot_accumulates_occurrences() {
        // Two Ry gates bound to the same slot: E = cos(2 theta).
        let pqc = CompiledPqc::from_gates(
            1,
            vec![
                gp(GateKind::Ry, &[0], ParamSource::Theta(0)),
                gp(GateKind::Ry, &[0], ParamSource::Theta(0)),
            ],
        )
        .unwrap();
        let theta = 0.7;
        let (dt, _) = grad_adjoint(&pqc, &[], &[theta], 0).unwrap();
        close(dt[0], -2.0 * (2.0 * theta).sin(), 1e-13);
        let (st, _) = grad_parameter_shift(&pqc, &[], &[theta], 0).unwrap();
        close(st[0], -2.0 * (2.0 * theta).sin(), 1e-13);
    }

    #[test]
    fn controlled_rotation_gradient_matches_closed_form() {
        // H on the control, CRy onto qubit 1: E_1 = (1 + cos(theta)) / 2.
        let pqc = CompiledPqc::from_gates(
            2,
            vec![
                g(GateKind::H, &[0]),
                gp(GateKind::Cry, &[0, 1], ParamSource::Theta(0)),
            ],
        )
        .unwrap();
        for &theta in &[0.2, 0.9, 1.7, 2.8] {
            close(
                expectation(&pqc, &[], &[theta], 1).unwrap(),
                (1.0 + theta.cos()) / 2.0,
                1e-13,
            );
            let (dt, _) = grad_adjoint(&pqc, &[], &[theta], 1).unwrap();
            close(dt[0], -theta.sin() / 2.0, 1e-13);
            let (st, _) = grad_parameter_shift(&pqc, &[], &[theta], 1).unwrap();
            close(st[0], -theta.sin() / 2.0, 1e-13);
        }
    }

    #[test]
    fn parameterless_circuit_yields_empty_gradients() {
        let pqc = CompiledPqc::from_gates(
            2,
            vec![g(GateKind::H, &[0]), g(GateKind::Cnot, &[0, 1])],
        )
        .unwrap();
        let (dt, di) = grad_adjoint(&pqc, &[], &[], 0).unwrap();
        assert!(dt.is_empty() && di.is_empty());
    }

    /// Random small circuit whose rotations draw from small slot pools, so
    /// slot sharing across gates is common.
    fn random_circuit(rng: &mut ChaCha8Rng) -> (CompiledPqc, Vec<f64>, Vec<f64>, usize) {
        let n = rng.random_range(1..=3usize);
        let n_gates = rng.random_range(1..=8usize);
        let mut gates = Vec::new();
        for _ in 0..n_gates {
            let kind = loop {
                let k = GateKind::ALL[rng.random_range(0..GateKind::ALL.len())];
                if k.arity() <= n {
                    break k;
                }
            };
            let mut qubits = Vec::new();
            while qubits.len() < kind.arity() {
                let q = rng.random_range(0..n);
                if !qubits.contains(&q) {
                    qubits.push(q);
                }
            }
            let param = kind.is_parameterized().then(|| {
                if rng.random_range(0..2) == 0 {
                    ParamSource::Theta(rng.random_range(0..3))
                } else {
                    ParamSource::Input(rng.random_range(0..3))
                }
            });
            gates.push(GateInstance::new(kind, qubits, param).unwrap());
        }
        let pqc = CompiledPqc::from_gates(n, gates).unwrap();
        let thetas: Vec<f64> = (0..pqc.n_thetas)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let inputs: Vec<f64> = (0..pqc.n_inputs)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let readout = rng.random_range(0..n);
        (pqc, inputs, thetas, readout)
    }

    #[test]
    fn adjoint_agrees_with_finite_differences_and_shift_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let (pqc, inputs, thetas, readout) = random_circuit(&mut rng);
            let (at, ai) = grad_adjoint(&pqc, &inputs, &thetas, readout).unwrap();
            let (st, si) = grad_parameter_shift(&pqc, &inputs, &thetas, readout).unwrap();
            let ft = fd_thetas(&pqc, &inputs, &thetas, readout);
            let fi = fd_inputs(&pqc, &inputs, &thetas, readout);
            for i in 0..at.len() {
                close(at[i], ft[i], 1e-7);
                close(at[i], st[i], 1e-11);
            }
            for i in 0..ai.len() {
                close(ai[i], fi[i], 1e-7);
                close(ai[i], si[i], 1e-11);
            }
        }
    }
}
