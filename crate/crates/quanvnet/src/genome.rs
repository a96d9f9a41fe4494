//! Circuit genomes: a per-slot decision grammar and its compilation into an
//! executable gate program.
//!
//! A genome is an `n_layers x n_qubits` grid of decisions. Compilation first
//! emits a fixed encoding block (H on every qubit, then Ry of input angle i on
//! qubit i), then walks the grid in layer-major order emitting one gate per
//! decision. Multi-qubit partners are addressed relative to the slot's qubit
//! by a nonzero offset, wrapping modulo the qubit count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::qsim::{CompiledPqc, GateInstance, GateKind, ParamSource, MAX_QUBITS};

/// Version tag written into serialized genomes.
pub const GENOME_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GenomeError {
    #[error("qubit count {0} outside supported range 2..={MAX_QUBITS}")]
    BadQubitCount(usize),
    #[error("layer count must be at least 1")]
    BadLayerCount,
    #[error("expected {expected} decisions (layers x qubits), got {got}")]
    DecisionCount { expected: usize, got: usize },
    #[error("{op} requires {need} offset(s), got {got}")]
    OffsetCount {
        op: DecisionOp,
        need: usize,
        got: usize,
    },
    #[error("decision {index}: offset {offset} outside 1..={max} for {n_qubits} qubits")]
    OffsetOutOfRange {
        index: usize,
        offset: usize,
        max: usize,
        n_qubits: usize,
    },
    #[error("decision {index}: Toffoli offsets must differ, both are {offset}")]
    OffsetsEqual { index: usize, offset: usize },
    #[error("decision {index}: Toffoli needs 3 distinct qubits, only {n_qubits} available")]
    ToffoliTooFewQubits { index: usize, n_qubits: usize },
    #[error("decision {index}: bad token {token:?}: {reason}")]
    BadToken {
        index: usize,
        token: String,
        reason: String,
    },
    #[error("unsupported genome format version {found} (supported: {GENOME_FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("malformed genome text: {0}")]
    Malformed(String),
}

/// The twelve per-slot choices: eleven gates plus `Reload`, which re-encodes
/// the slot's input angle with an extra Ry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionOp {
    Reload,
    Rx,
    Ry,
    Rz,
    CRx,
    CRy,
    CRz,
    H,
    X,
    Cnot,
    Swap,
    Toffoli,
}

impl DecisionOp {
    pub const COUNT: usize = 12;

    pub const ALL: [DecisionOp; 12] = [
        DecisionOp::Reload,
        DecisionOp::Rx,
        DecisionOp::Ry,
        DecisionOp::Rz,
        DecisionOp::CRx,
        DecisionOp::CRy,
        DecisionOp::CRz,
        DecisionOp::H,
        DecisionOp::X,
        DecisionOp::Cnot,
        DecisionOp::Swap,
        DecisionOp::Toffoli,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DecisionOp::Reload => "Reload",
            DecisionOp::Rx => "Rx",
            DecisionOp::Ry => "Ry",
            DecisionOp::Rz => "Rz",
            DecisionOp::CRx => "CRx",
            DecisionOp::CRy => "CRy",
            DecisionOp::CRz => "CRz",
            DecisionOp::H => "H",
            DecisionOp::X => "X",
            DecisionOp::Cnot => "CNOT",
            DecisionOp::Swap => "SWAP",
            DecisionOp::Toffoli => "Toffoli",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|o| o.name() == name)
    }

    /// Qubits touched by the emitted gate (1 for single-qubit ops and Reload).
    pub fn arity(self) -> usize {
        match self {
            DecisionOp::Cnot
            | DecisionOp::Swap
            | DecisionOp::CRx
            | DecisionOp::CRy
            | DecisionOp::CRz => 2,
            DecisionOp::Toffoli => 3,
            _ => 1,
        }
    }

    /// True for ops that emit a gate with a fresh trainable angle.
    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            DecisionOp::Rx
                | DecisionOp::Ry
                | DecisionOp::Rz
                | DecisionOp::CRx
                | DecisionOp::CRy
                | DecisionOp::CRz
        )
    }
}

impl std::fmt::Display for DecisionOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One slot's choice: an op plus partner offsets where the op needs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub op: DecisionOp,
    pub offset1: Option<usize>,
    pub offset2: Option<usize>,
}

impl Decision {
    pub fn new(
        op: DecisionOp,
        offset1: Option<usize>,
        offset2: Option<usize>,
    ) -> Result<Self, GenomeError> {
        let got = offset1.iter().count() + offset2.iter().count();
        let need = op.arity() - 1;
        if got != need || (need == 1 && offset1.is_none()) {
            return Err(GenomeError::OffsetCount { op, need, got });
        }
        Ok(Decision {
            op,
            offset1,
            offset2,
        })
    }

    fn validate(&self, index: usize, n_qubits: usize) -> Result<(), GenomeError> {
        let max = n_qubits - 1;
        for off in [self.offset1, self.offset2].into_iter().flatten() {
            if off == 0 || off > max {
                return Err(GenomeError::OffsetOutOfRange {
                    index,
                    offset: off,
                    max,
                    n_qubits,
                });
            }
        }
        if self.op == DecisionOp::Toffoli {
            if n_qubits < 3 {
                return Err(GenomeError::ToffoliTooFewQubits { index, n_qubits });
            }
            if self.offset1 == self.offset2 {
                return Err(GenomeError::OffsetsEqual {
                    index,
                    offset: self.offset1.unwrap(),
                });
            }
        }
        Ok(())
    }

    /// Compact text form: op name with `+offset` suffixes, e.g. `CRy+2`,
    /// `Toffoli+1+2`.
    pub fn token(&self) -> String {
        let mut s = self.op.name().to_string();
        for off in [self.offset1, self.offset2].into_iter().flatten() {
            s.push('+');
            s.push_str(&off.to_string());
        }
        s
    }

    pub fn from_token(index: usize, token: &str) -> Result<Self, GenomeError> {
        let bad = |reason: String| GenomeError::BadToken {
            index,
            token: token.to_string(),
            reason,
        };
        let mut parts = token.split('+');
        let name = parts.next().unwrap_or("");
        let op = DecisionOp::from_name(name)
            .ok_or_else(|| bad(format!("unknown op name {name:?}")))?;
        let mut offsets = Vec::new();
        for p in parts {
            let off: usize = p
                .parse()
                .map_err(|_| bad(format!("offset {p:?} is not a positive integer")))?;
            offsets.push(off);
        }
        let need = op.arity() - 1;
        if offsets.len() != need {
            return Err(bad(format!(
                "{} takes {} offset(s), found {}",
                op,
                need,
                offsets.len()
            )));
        }
        Decision::new(op, offsets.first().copied(), offsets.get(1).copied())
    }
}

/// A full architecture description: decision grid dimensions plus the
/// layer-major decision list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitGenome {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub decisions: Vec<Decision>,
}

impl CircuitGenome {
    pub fn new(
        n_qubits: usize,
        n_layers: usize,
        decisions: Vec<Decision>,
    ) -> Result<Self, GenomeError> {
        let genome = CircuitGenome {
            n_qubits,
            n_layers,
            decisions,
        };
        genome.validate()?;
        Ok(genome)
    }

    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.n_qubits < 2 || self.n_qubits > MAX_QUBITS {
            return Err(GenomeError::BadQubitCount(self.n_qubits));
        }
        if self.n_layers == 0 {
            return Err(GenomeError::BadLayerCount);
        }
        let expected = self.n_layers * self.n_qubits;
        if self.decisions.len() != expected {
            return Err(GenomeError::DecisionCount {
                expected,
                got: self.decisions.len(),
            });
        }
        for (i, d) in self.decisions.iter().enumerate() {
            d.validate(i, self.n_qubits)?;
        }
        Ok(())
    }

    /// Number of trainable angles the compiled circuit will carry.
    pub fn count_params(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.op.is_parameterized())
            .count()
    }

    /// Fraction of decisions that are parameterized ops.
    pub fn parameterized_fraction(&self) -> f64 {
        self.count_params() as f64 / self.decisions.len() as f64
    }

    /// Emits the gate program: encoding block, then one gate per decision in
    /// layer-major order. Trainable angles are numbered in emission order.
    /// Partner qubits sit at `(i + offset) mod n`; for Toffoli, the slot qubit
    /// and the offset1 partner are the controls and the offset2 partner is the
    /// target.
    pub fn compile(&self) -> Result<CompiledPqc, GenomeError> {
        self.validate()?;
        let n = self.n_qubits;
        let mut gates = Vec::with_capacity(2 * n + self.decisions.len());
        let valid = "validated genome emits well-formed gates";
        for q in 0..n {
            gates.push(GateInstance::new(GateKind::H, vec![q], None).expect(valid));
        }
        for q in 0..n {
            gates.push(
                GateInstance::new(GateKind::Ry, vec![q], Some(ParamSource::Input(q)))
                    .expect(valid),
            );
        }
        let mut next_theta = 0;
        for (slot, d) in self.decisions.iter().enumerate() {
            let i = slot % n;
            let partner = |off: Option<usize>| (i + off.unwrap()) % n;
            let mut theta = || {
                let t = ParamSource::Theta(next_theta);
                next_theta += 1;
                Some(t)
            };
            let gate = match d.op {
                DecisionOp::Reload => {
                    GateInstance::new(GateKind::Ry, vec![i], Some(ParamSource::Input(i)))
                }
                DecisionOp::Rx => GateInstance::new(GateKind::Rx, vec![i], theta()),
                DecisionOp::Ry => GateInstance::new(GateKind::Ry, vec![i], theta()),
                DecisionOp::Rz => GateInstance::new(GateKind::Rz, vec![i], theta()),
                DecisionOp::CRx => {
                    GateInstance::new(GateKind::Crx, vec![i, partner(d.offset1)], theta())
                }
                DecisionOp::CRy => {
                    GateInstance::new(GateKind::Cry, vec![i, partner(d.offset1)], theta())
                }
                DecisionOp::CRz => {
                    GateInstance::new(GateKind::Crz, vec![i, partner(d.offset1)], theta())
                }
                DecisionOp::H => GateInstance::new(GateKind::H, vec![i], None),
                DecisionOp::X => GateInstance::new(GateKind::X, vec![i], None),
                DecisionOp::Cnot => {
                    GateInstance::new(GateKind::Cnot, vec![i, partner(d.offset1)], None)
                }
                DecisionOp::Swap => {
                    GateInstance::new(GateKind::Swap, vec![i, partner(d.offset1)], None)
                }
                DecisionOp::Toffoli => GateInstance::new(
                    GateKind::Toffoli,
                    vec![i, partner(d.offset1), partner(d.offset2)],
                    None,
                ),
            };
            gates.push(gate.expect(valid));
        }
        Ok(CompiledPqc::from_gates(n, gates).expect(valid))
    }

    /// Serializes to the versioned text format (TOML, one decision token per
    /// slot, rows grouped by layer).
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "version = {}\nn_qubits = {}\nn_layers = {}\n\ndecisions = [\n",
            GENOME_FORMAT_VERSION, self.n_qubits, self.n_layers
        );
        for layer in self.decisions.chunks(self.n_qubits) {
            s.push_str("  ");
            for d in layer {
                s.push('"');
                s.push_str(&d.token());
                s.push_str("\", ");
            }
            s.pop();
            s.push('\n');
        }
        s.push_str("]\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GenomeError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct GenomeDoc {
            version: u32,
            n_qubits: usize,
            n_layers: usize,
            decisions: Vec<String>,
        }
        let doc: GenomeDoc =
            toml::from_str(text).map_err(|e| GenomeError::Malformed(e.to_string()))?;
        if doc.version != GENOME_FORMAT_VERSION {
            return Err(GenomeError::UnsupportedVersion { found: doc.version });
        }
        let decisions = doc
            .decisions
            .iter()
            .enumerate()
            .map(|(i, t)| Decision::from_token(i, t))
            .collect::<Result<Vec<_>, _>>()?;
        CircuitGenome::new(doc.n_qubits, doc.n_layers, decisions)
    }
}

/// Uniform random genome.
///
/// Every decision op is drawn uniformly (Toffoli excluded when fewer than 3
/// qubits make it unrealizable), offsets uniformly from the valid range, and
/// the Toffoli second offset uniformly from the values distinct from the
/// first.
pub fn random_genome(
    n_qubits: usize,
    n_layers: usize,
    seed: u64,
) -> Result<CircuitGenome, GenomeError> {
    if !(2..=MAX_QUBITS).contains(&n_qubits) {
        return Err(GenomeError::BadQubitCount(n_qubits));
    }
    if n_layers == 0 {
        return Err(GenomeError::BadLayerCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops: Vec<DecisionOp> = DecisionOp::ALL
        .into_iter()
        .filter(|op| *op != DecisionOp::Toffoli || n_qubits >= 3)
        .collect();
    let mut decisions = Vec::with_capacity(n_layers * n_qubits);
    for _ in 0..n_layers * n_qubits {
        let op = ops[rng.random_range(0..ops.len())];
        let offset1 = (op.arity() >= 2).then(|| rng.random_range(1..n_qubits));
        let offset2 = (op.arity() == 3).then(|| {
            let raw = rng.random_range(1..n_qubits - 1);
            if raw >= offset1.unwrap() {
                raw + 1
            } else {
                raw
            }
        });
        decisions.push(Decision::new(op, offset1, offset2).expect("offsets match arity"));
    }
    CircuitGenome::new(n_qubits, n_layers, decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{GateKind, ParamSource};

    fn d(op: DecisionOp) -> Decision {
        Decision::new(op, None, None).unwrap()
    }

    fn d1(op: DecisionOp, off: usize) -> Decision {
        Decision::new(op, Some(off), None).unwrap()
    }

    #[test]
    fn compile_emits_encoding_block_then_decisions() {
        let genome =
            CircuitGenome::new(2, 1, vec![d(DecisionOp::Reload), d(DecisionOp::H)]).unwrap();
        let pqc = genome.compile().unwrap();
        assert_eq!(pqc.n_qubits, 2);
        assert_eq!(pqc.n_inputs, 2);
        assert_eq!(pqc.n_thetas, 0);
        let kinds: Vec<_> = pqc.gates.iter().map(|g| g.kind).collect();
        assert_eq!(
            kinds,
            vec![
                GateKind::H,
                GateKind::H,
                GateKind::Ry,
                GateKind::Ry,
                GateKind::Ry,
                GateKind::H
            ]
        );
        assert_eq!(pqc.gates[4].qubits, vec![0]);
        assert_eq!(pqc.gates[4].param, Some(ParamSource::Input(0)));
        assert_eq!(pqc.gates[5].qubits, vec![1]);
    }

    #[test]
    fn theta_slots_number_in_emission_order() {
        let genome = CircuitGenome::new(
            2,
            2,
            vec![
                d(DecisionOp::Rx),
                d1(DecisionOp::CRy, 1),
                d(DecisionOp::H),
                d(DecisionOp::Rz),
            ],
        )
        .unwrap();
        let pqc = genome.compile().unwrap();
        assert_eq!(pqc.n_thetas, 3);
        assert_eq!(genome.count_params(), 3);
        let body = &pqc.gates[4..];
        assert_eq!(body[0].param, Some(ParamSource::Theta(0)));
        assert_eq!(body[1].kind, GateKind::Cry);
        assert_eq!(body[1].qubits, vec![1, 0]);
        assert_eq!(body[1].param, Some(ParamSource::Theta(1)));
        assert_eq!(body[3].param, Some(ParamSource::Theta(2)));
    }

    #[test]
    fn partner_offsets_wrap_modulo_qubit_count() {
        let decisions = vec![
            d1(DecisionOp::Cnot, 2),
            d(DecisionOp::H),
            d1(DecisionOp::Swap, 2),
        ];
        let genome = CircuitGenome::new(3, 1, decisions).unwrap();
        let pqc = genome.compile().unwrap();
        assert_eq!(pqc.gates[6].qubits, vec![0, 2]);
        assert_eq!(pqc.gates[8].qubits, vec![2, 1]);
    }

    #[test]
    fn toffoli_operands_are_slot_offset1_offset2() {
        let decisions = vec![
            Decision::new(DecisionOp::Toffoli, Some(1), Some(2)).unwrap(),
            d(DecisionOp::H),
            d(DecisionOp::H),
        ];
        let genome = CircuitGenome::new(3, 1, decisions).unwrap();
        let pqc = genome.compile().unwrap();
        assert_eq!(pqc.gates[6].kind, GateKind::Toffoli);
        assert_eq!(pqc.gates[6].qubits, vec![0, 1, 2]);
    }

    #[test]
    fn forty_five_params_for_nine_qubit_five_layer_rotations() {
        let decisions = vec![d(DecisionOp::Ry); 45];
        let genome = CircuitGenome::new(9, 5, decisions).unwrap();
        assert_eq!(genome.count_params(), 45);
        assert_eq!(genome.compile().unwrap().n_thetas, 45);
        assert_eq!(genome.parameterized_fraction(), 1.0);
    }

    #[test]
    fn grammar_validation_errors() {
        assert!(matches!(
            CircuitGenome::new(1, 1, vec![d(DecisionOp::H)]),
            Err(GenomeError::BadQubitCount(1))
        ));
        assert!(matches!(
            CircuitGenome::new(2, 0, vec![]),
            Err(GenomeError::BadLayerCount)
        ));
        assert!(matches!(
            CircuitGenome::new(2, 1, vec![d(DecisionOp::H)]),
            Err(GenomeError::DecisionCount {
                expected: 2,
                got: 1
            })
        ));
        assert!(matches!(
            Decision::new(DecisionOp::Cnot, None, None),
            Err(GenomeError::OffsetCount { .. })
        ));
        assert!(matches!(
            Decision::new(DecisionOp::H, Some(1), None),
            Err(GenomeError::OffsetCount { .. })
        ));
        let too_far = CircuitGenome::new(2, 1, vec![d1(DecisionOp::Cnot, 2), d(DecisionOp::H)]);
        assert!(matches!(
            too_far,
            Err(GenomeError::OffsetOutOfRange { offset: 2, .. })
        ));
        let tof2 = CircuitGenome::new(
            2,
            1,
            vec![
                Decision::new(DecisionOp::Toffoli, Some(1), Some(1)).unwrap(),
                d(DecisionOp::H),
            ],
        );
        assert!(matches!(
            tof2,
            Err(GenomeError::ToffoliTooFewQubits { .. })
        ));
        let equal = CircuitGenome::new(
            3,
            1,
            vec![
                Decision::new(DecisionOp::Toffoli, Some(2), Some(2)).unwrap(),
                d(DecisionOp::H),
                d(DecisionOp::H),
            ],
        );
        assert!(matches!(equal, Err(GenomeError::OffsetsEqual { .. })));
    }

    #[test]
    fn text_round_trip_preserves_genomes() {
        for seed in 0..30 {
            let genome = random_genome(2 + (seed as usize % 7), 1 + (seed as usize % 4), seed)
                .unwrap();
            let text = genome.to_text();
            let back = CircuitGenome::from_text(&text).unwrap();
            assert_eq!(genome, back, "round trip failed for:\n{text}");
        }
    }

    #[test]
    fn parse_rejects_malformed_documents() {
        let ok = random_genome(3, 1, 1).unwrap().to_text();
        assert!(CircuitGenome::from_text(&ok).is_ok());

        let unknown_op = ok.replacen(
            &random_genome(3, 1, 1).unwrap().decisions[0].token(),
            "CZ+1",
            1,
        );
        match CircuitGenome::from_text(&unknown_op) {
            Err(GenomeError::BadToken { token, reason, .. }) => {
                assert!(token.starts_with("CZ"), "{token}");
                assert!(reason.contains("unknown op name"), "{reason}");
            }
            other => panic!("expected BadToken, got {other:?}"),
        }

        let bad_version = ok.replacen("version = 1", "version = 9", 1);
        assert!(matches!(
            CircuitGenome::from_text(&bad_version),
            Err(GenomeError::UnsupportedVersion { found: 9 })
        ));

        let extra_field = format!("{ok}\nmystery = 3\n");
        assert!(matches!(
            CircuitGenome::from_text(&extra_field),
            Err(GenomeError::Malformed(_))
        ));

        assert!(matches!(
            Decision::from_token(0, "H+1"),
            Err(GenomeError::BadToken { .. })
        ));
        assert!(matches!(
            Decision::from_token(0, "CNOT"),
            Err(GenomeError::BadToken { .. })
        ));
        assert!(matches!(
            Decision::from_token(0, "CNOT+x"),
            Err(GenomeError::BadToken { .. })
        ));
    }

    #[test]
    fn random_genomes_always_compile() {
        for seed in 0..200 {
            let n = 2 + (seed as usize % 8);
            let genome = random_genome(n, 1 + (seed as usize % 5), seed).unwrap();
            genome.compile().unwrap();
        }
    }

    #[test]
    fn random_genome_is_deterministic_per_seed() {
        assert_eq!(random_genome(5, 3, 42).unwrap(), random_genome(5, 3, 42).unwrap());
        assert_ne!(random_genome(5, 3, 42).unwrap(), random_genome(5, 3, 43).unwrap());
    }

    #[test]
    fn random_genome_op_frequencies_are_near_uniform() {
        // 10^4 genomes at N=4, L=2: 80000 decisions, expected frequency 1/12
        // per op, tolerance 3 sigma of the binomial proportion.
        let mut counts = [0usize; DecisionOp::COUNT];
        let mut total = 0usize;
        for seed in 0..10_000 {
            let genome = random_genome(4, 2, seed).unwrap();
            for d in &genome.decisions {
                counts[d.op.index()] += 1;
                total += 1;
            }
        }
        let p = 1.0 / 12.0;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / total as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "op {:?} frequency {freq} vs {p} (3 sigma = {})",
                DecisionOp::from_index(i).unwrap(),
                3.0 * sigma
            );
        }
    }

    #[test]
    fn two_qubit_random_genomes_never_contain_toffoli() {
        for seed in 0..300 {
            let genome = random_genome(2, 3, seed).unwrap();
            assert!(genome.decisions.iter().all(|d| d.op != DecisionOp::Toffoli));
        }
    }
}
