//! LSTM policy over circuit genomes, trained with REINFORCE.
//!
//! The controller emits one decision per genome slot. Each step feeds the
//! previous op's embedding (a start token first) through a single LSTM cell,
//! then three softmax heads read the hidden state: the op head (12 choices),
//! the offset1 head (N-1 choices) when the op takes a partner, and the
//! offset2 head (offset1's index masked out) for Toffoli. Offsets do not feed
//! back into the embedding; only ops do.
//!
//! All backpropagation is hand-rolled: the update re-runs the decision
//! sequence teacher-forced (with inverted dropout on the head path, fresh
//! mask per step; dropout is active only in update passes), then walks the
//! steps in reverse through the standard LSTM cell gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{CircuitGenome, Decision, DecisionOp, GenomeError};
use crate::nn::{adam_step, AdamState};
use crate::qsim::MAX_QUBITS;

pub const EMBED_DIM: usize = 32;
pub const HIDDEN: usize = 64;
/// Default coefficient of the entropy bonus in the REINFORCE loss.
pub const ENTROPY_BETA: f64 = 0.01;
/// Exponential moving average decay of the reward baseline.
pub const BASELINE_DECAY: f64 = 0.9;
/// Version tag of the controller checkpoint format.
pub const CONTROLLER_FORMAT_VERSION: u32 = 1;

const GATE_DIM: usize = 4 * HIDDEN;
const START_TOKEN: usize = DecisionOp::COUNT;
const TOKENS: usize = DecisionOp::COUNT + 1;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("qubit count {0} outside supported range 2..={MAX_QUBITS}")]
    BadQubitCount(usize),
    #[error("controller heads sized for {params} qubits, asked to emit for {requested}")]
    QubitMismatch { params: usize, requested: usize },
    #[error("layer count must be at least 1")]
    BadLayerCount,
    #[error("update needs at least one trace")]
    EmptyBatch,
    #[error("{traces} trace(s) but {rewards} reward(s)")]
    BatchLengthMismatch { traces: usize, rewards: usize },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("{what}: expected length {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("controller checkpoint: {0}")]
    Checkpoint(String),
}

/// All trainable arrays of the policy. Gate weight rows are ordered
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    n_qubits: usize,
    pub dropout: f64,
    embed: Vec<f64>,
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    b_gates: Vec<f64>,
    w_op: Vec<f64>,
    b_op: Vec<f64>,
    w_off1: Vec<f64>,
    b_off1: Vec<f64>,
    w_off2: Vec<f64>,
    b_off2: Vec<f64>,
}

const ARRAY_COUNT: usize = 10;

impl ControllerParams {
    /// Fresh policy with weights uniform in [-0.1, 0.1] (biases zero), drawn
    /// in declaration order from a seeded generator.
    pub fn new(n_qubits: usize, seed: u64) -> Result<Self, ControllerError> {
        if !(2..=MAX_QUBITS).contains(&n_qubits) {
            return Err(ControllerError::BadQubitCount(n_qubits));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-0.1..0.1)).collect()
        };
        let offsets = n_qubits - 1;
        Ok(ControllerParams {
            n_qubits,
            dropout: 0.2,
            embed: weights(TOKENS * EMBED_DIM),
            w_ih: weights(GATE_DIM * EMBED_DIM),
            w_hh: weights(GATE_DIM * HIDDEN),
            b_gates: vec![0.0; GATE_DIM],
            w_op: weights(DecisionOp::COUNT * HIDDEN),
            b_op: vec![0.0; DecisionOp::COUNT],
            w_off1: weights(offsets * HIDDEN),
            b_off1: vec![0.0; offsets],
            w_off2: weights(offsets * HIDDEN),
            b_off2: vec![0.0; offsets],
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    fn array_shapes(n_qubits: usize) -> [(&'static str, Vec<usize>); ARRAY_COUNT] {
        let offsets = n_qubits - 1;
        [
            ("embed", vec![TOKENS, EMBED_DIM]),
            ("w_ih", vec![GATE_DIM, EMBED_DIM]),
            ("w_hh", vec![GATE_DIM, HIDDEN]),
            ("b_gates", vec![GATE_DIM]),
            ("w_op", vec![DecisionOp::COUNT, HIDDEN]),
            ("b_op", vec![DecisionOp::COUNT]),
            ("w_off1", vec![offsets, HIDDEN]),
            ("b_off1", vec![offsets]),
            ("w_off2", vec![offsets, HIDDEN]),
            ("b_off2", vec![offsets]),
        ]
    }

    fn arrays(&self) -> [&Vec<f64>; ARRAY_COUNT] {
        [
            &self.embed,
            &self.w_ih,
            &self.w_hh,
            &self.b_gates,
            &self.w_op,
            &self.b_op,
            &self.w_off1,
            &self.b_off1,
            &self.w_off2,
            &self.b_off2,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; ARRAY_COUNT] {
        [
            &mut self.embed,
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_gates,
            &mut self.w_op,
            &mut self.b_op,
            &mut self.w_off1,
            &mut self.b_off1,
            &mut self.w_off2,
            &mut self.b_off2,
        ]
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Adds `delta` to the parameter at a flat index over all arrays in
    /// declaration order. Intended for finite-difference probes.
    pub fn flat_add(&mut self, mut index: usize, delta: f64) {
        for a in self.arrays_mut() {
            if index < a.len() {
                a[index] += delta;
                return;
            }
            index -= a.len();
        }
        panic!("flat index out of range");
    }

    /// Serializes every array with its shape into versioned JSON.
    pub fn to_json(&self) -> String {
        let shapes = Self::array_shapes(self.n_qubits);
        let arrays = self
            .arrays()
            .iter()
            .zip(shapes)
            .map(|(data, (name, shape))| NamedArray {
                name: name.to_string(),
                shape,
                data: (*data).clone(),
            })
            .collect();
        let doc = ControllerCheckpoint {
            version: CONTROLLER_FORMAT_VERSION,
            n_qubits: self.n_qubits,
            dropout: self.dropout,
            arrays,
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ControllerError> {
        let doc: ControllerCheckpoint = serde_json::from_str(text)
            .map_err(|e| ControllerError::Checkpoint(e.to_string()))?;
        if doc.version != CONTROLLER_FORMAT_VERSION {
            return Err(ControllerError::Checkpoint(format!(
                "unsupported version {} (supported: {CONTROLLER_FORMAT_VERSION})",
                doc.version
            )));
        }
        if !(0.0..1.0).contains(&doc.dropout) {
            return Err(ControllerError::BadDropout(doc.dropout));
        }
        let mut params = ControllerParams::new(doc.n_qubits, 0)?;
        params.dropout = doc.dropout;
        let shapes = Self::array_shapes(doc.n_qubits);
        if doc.arrays.len() != ARRAY_COUNT {
            return Err(ControllerError::Checkpoint(format!(
                "expected {ARRAY_COUNT} arrays, found {}",
                doc.arrays.len()
            )));
        }
        for (target, ((name, shape), stored)) in params
            .arrays_mut()
            .into_iter()
            .zip(shapes.into_iter().zip(&doc.arrays))
        {
            if stored.name != name || stored.shape != shape {
                return Err(ControllerError::Checkpoint(format!(
                    "array {:?} with shape {:?}, expected {name:?} with shape {shape:?}",
                    stored.name, stored.shape
                )));
            }
            let len: usize = shape.iter().product();
            if stored.data.len() != len {
                return Err(ControllerError::Checkpoint(format!(
                    "array {name:?} holds {} values, shape {shape:?} needs {len}",
                    stored.data.len()
                )));
            }
            *target = stored.data.clone();
        }
        Ok(params)
    }
}

/// One weight array with an explicit shape, as stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControllerCheckpoint {
    version: u32,
    n_qubits: usize,
    dropout: f64,
    arrays: Vec<NamedArray>,
}

/// A sampled decision sequence with its score under the sampling policy.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub decisions: Vec<Decision>,
    pub n_layers: usize,
    pub logprob: f64,
    pub entropy: f64,
}

/// Exponential moving average of batch mean rewards. Reads 0 until the first
/// observation; the advantage in an update always uses the value from before
/// that update's observation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RewardBaseline {
    ema: Option<f64>,
}

impl RewardBaseline {
    pub fn new() -> Self {
        RewardBaseline { ema: None }
    }

    pub fn value(&self) -> f64 {
        self.ema.unwrap_or(0.0)
    }

    pub fn observe(&mut self, mean_reward: f64) {
        self.ema = Some(match self.ema {
            None => mean_reward,
            Some(v) => BASELINE_DECAY * v + (1.0 - BASELINE_DECAY) * mean_reward,
        });
    }
}

/// Adam over every controller array plus the entropy bonus weight.
#[derive(Debug, Clone)]
pub struct ControllerOptimizer {
    pub entropy_beta: f64,
    adam: Vec<AdamState>,
}

impl ControllerOptimizer {
    pub fn new(params: &ControllerParams, learning_rate: f64) -> Self {
        ControllerOptimizer {
            entropy_beta: ENTROPY_BETA,
            adam: params
                .arrays()
                .iter()
                .map(|a| AdamState::new(learning_rate, a.len()))
                .collect(),
        }
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

/// out[c] += sum_r w[r][c] * dz[r]
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dz: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dz[r];
        if g == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(row) {
            *o += g * wv;
        }
    }
}

/// dw[r][c] += dz[r] * x[c]
fn outer_acc(dw: &mut [f64], dz: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (c, &xv) in x.iter().enumerate() {
            dw[r * cols + c] += g * xv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM cell step: returns the new hidden and cell states.
pub fn lstm_step(
    params: &ControllerParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ControllerError> {
    for (what, buf, expected) in [
        ("lstm input", x, EMBED_DIM),
        ("hidden state", h, HIDDEN),
        ("cell state", c, HIDDEN),
    ] {
        if buf.len() != expected {
            return Err(ControllerError::DimMismatch {
                what,
                expected,
                got: buf.len(),
            });
        }
    }
    let gates = raw_gates(params, x, h);
    let mut h_new = vec![0.0; HIDDEN];
    let mut c_new = vec![0.0; HIDDEN];
    for j in 0..HIDDEN {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[HIDDEN + j]);
        let g = gates[2 * HIDDEN + j].tanh();
        let o = sigmoid(gates[3 * HIDDEN + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((h_new, c_new))
}

fn raw_gates(params: &ControllerParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut z = matvec(&params.w_ih, GATE_DIM, EMBED_DIM, x);
    let zh = matvec(&params.w_hh, GATE_DIM, HIDDEN, h);
    for j in 0..GATE_DIM {
        z[j] += zh[j] + params.b_gates[j];
    }
    z
}

/// Softmax over the unmasked entries; masked entries get probability zero.
fn softmax_masked(logits: &[f64], masked: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(masked)
        .map(|(&z, &m)| if m { 0.0 } else { (z - max).exp() })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_support = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_support = i;
            cum += p;
            if r < cum {
                return i;
            }
        }
    }
    last_support
}

/// One softmax head evaluation: probabilities, the mask, and the index that
/// was chosen (sampled or forced).
#[derive(Debug, Clone)]
struct HeadEval {
    probs: Vec<f64>,
    masked: Vec<bool>,
    chosen: usize,
}

impl HeadEval {
    fn logprob(&self) -> f64 {
        self.probs[self.chosen].ln()
    }

    fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }
}

struct StepCache {
    token_in: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    /// Per-unit scale applied to h before the heads (inverted dropout), if
    /// dropout was active.
    drop_mask: Option<Vec<f64>>,
    op: HeadEval,
    off1: Option<HeadEval>,
    off2: Option<HeadEval>,
}

enum PolicyMode<'a> {
    Sample(&'a mut ChaCha8Rng),
    Forced(&'a [Decision]),
}

/// Runs the policy over `n_layers * n_qubits` decision slots, either
/// sampling or re-scoring a forced decision sequence, optionally with
/// head-path dropout.
fn run_policy(
    params: &ControllerParams,
    n_layers: usize,
    mut mode: PolicyMode,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Decision>, f64, f64, Vec<StepCache>), ControllerError> {
    if !(0.0..1.0).contains(&params.dropout) {
        return Err(ControllerError::BadDropout(params.dropout));
    }
    let n = params.n_qubits;
    let steps = n_layers * n;
    let offsets = n - 1;
    let keep = 1.0 - params.dropout;

    let mut decisions = Vec::with_capacity(steps);
    let mut caches = Vec::with_capacity(steps);
    let mut logprob = 0.0;
    let mut entropy = 0.0;
    let mut token = START_TOKEN;
    let mut h = vec![0.0; HIDDEN];
    let mut c = vec![0.0; HIDDEN];

    for step in 0..steps {
        let x = params.embed[token * EMBED_DIM..(token + 1) * EMBED_DIM].to_vec();
        let gates = raw_gates(params, &x, &h);
        let mut gi = vec![0.0; HIDDEN];
        let mut gf = vec![0.0; HIDDEN];
        let mut gg = vec![0.0; HIDDEN];
        let mut go = vec![0.0; HIDDEN];
        let mut c_new = vec![0.0; HIDDEN];
        let mut h_new = vec![0.0; HIDDEN];
        for j in 0..HIDDEN {
            gi[j] = sigmoid(gates[j]);
            gf[j] = sigmoid(gates[HIDDEN + j]);
            gg[j] = gates[2 * HIDDEN + j].tanh();
            go[j] = sigmoid(gates[3 * HIDDEN + j]);
            c_new[j] = gf[j] * c[j] + gi[j] * gg[j];
            h_new[j] = go[j] * c_new[j].tanh();
        }

        let drop_mask = match &mut dropout_rng {
            Some(rng) if params.dropout > 0.0 => Some(
                (0..HIDDEN)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>(),
            ),
            _ => None,
        };
        let h_heads: Vec<f64> = match &drop_mask {
            Some(mask) => h_new.iter().zip(mask).map(|(a, b)| a * b).collect(),
            None => h_new.clone(),
        };

        let mut masked_op = vec![false; DecisionOp::COUNT];
        if n < 3 {
            masked_op[DecisionOp::Toffoli.index()] = true;
        }
        let op_logits = add_bias(
            matvec(&params.w_op, DecisionOp::COUNT, HIDDEN, &h_heads),
            &params.b_op,
        );
        let op_probs = softmax_masked(&op_logits, &masked_op);
        let op_chosen = match &mut mode {
            PolicyMode::Sample(rng) => sample_index(&op_probs, rng),
            PolicyMode::Forced(ds) => ds[step].op.index(),
        };
        let op_eval = HeadEval {
            probs: op_probs,
            masked: masked_op,
            chosen: op_chosen,
        };
        let op = DecisionOp::from_index(op_chosen).expect("head index maps to an op");
        logprob += op_eval.logprob();
        entropy += op_eval.entropy();

        let mut off1_eval = None;
        let mut off2_eval = None;
        let mut offset1 = None;
        let mut offset2 = None;
        if op.arity() >= 2 {
            let logits = add_bias(
                matvec(&params.w_off1, offsets, HIDDEN, &h_heads),
                &params.b_off1,
            );
            let probs = softmax_masked(&logits, &vec![false; offsets]);
            let chosen = match &mut mode {
                PolicyMode::Sample(rng) => sample_index(&probs, rng),
                PolicyMode::Forced(ds) => ds[step].offset1.unwrap() - 1,
            };
            let eval = HeadEval {
                probs,
                masked: vec![false; offsets],
                chosen,
            };
            logprob += eval.logprob();
            entropy += eval.entropy();
            offset1 = Some(chosen + 1);
            off1_eval = Some(eval);
        }
        if op.arity() == 3 {
            let mut masked = vec![false; offsets];
            masked[offset1.unwrap() - 1] = true;
            let logits = add_bias(
                matvec(&params.w_off2, offsets, HIDDEN, &h_heads),
                &params.b_off2,
            );
            let probs = softmax_masked(&logits, &masked);
            let chosen = match &mut mode {
                PolicyMode::Sample(rng) => sample_index(&probs, rng),
                PolicyMode::Forced(ds) => ds[step].offset2.unwrap() - 1,
            };
            let eval = HeadEval {
                probs,
                masked,
                chosen,
            };
            logprob += eval.logprob();
            entropy += eval.entropy();
            offset2 = Some(chosen + 1);
            off2_eval = Some(eval);
        }

        decisions.push(Decision::new(op, offset1, offset2)?);
        caches.push(StepCache {
            token_in: token,
            h_prev: h,
            c_prev: c,
            i: gi,
            f: gf,
            g: gg,
            o: go,
            c: c_new.clone(),
            h: h_new.clone(),
            drop_mask,
            op: op_eval,
            off1: off1_eval,
            off2: off2_eval,
        });

        token = op.index();
        h = h_new;
        c = c_new;
    }
    Ok((decisions, logprob, entropy, caches))
}

fn add_bias(mut v: Vec<f64>, b: &[f64]) -> Vec<f64> {
    for (x, y) in v.iter_mut().zip(b) {
        *x += y;
    }
    v
}

/// Samples one genome from the policy. `n_qubits` must match the head sizes
/// the controller was built with.
pub fn sample_genome(
    params: &ControllerParams,
    n_qubits: usize,
    n_layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(CircuitGenome, SampleTrace), ControllerError> {
    if n_qubits != params.n_qubits {
        return Err(ControllerError::QubitMismatch {
            params: params.n_qubits,
            requested: n_qubits,
        });
    }
    if n_layers == 0 {
        return Err(ControllerError::BadLayerCount);
    }
    let (decisions, logprob, entropy, _) =
        run_policy(params, n_layers, PolicyMode::Sample(rng), None)?;
    let genome = CircuitGenome::new(n_qubits, n_layers, decisions.clone())?;
    Ok((
        genome,
        SampleTrace {
            decisions,
            n_layers,
            logprob,
            entropy,
        },
    ))
}

/// Teacher-forced re-scoring of a decision sequence without dropout; returns
/// (logprob, entropy). Matches the values recorded at sampling time.
pub fn evaluate_trace(
    params: &ControllerParams,
    trace: &SampleTrace,
) -> Result<(f64, f64), ControllerError> {
    // Validates the decisions against the grammar before scoring.
    CircuitGenome::new(params.n_qubits, trace.n_layers, trace.decisions.clone())?;
    let (_, logprob, entropy, _) = run_policy(
        params,
        trace.n_layers,
        PolicyMode::Forced(&trace.decisions),
        None,
    )?;
    Ok((logprob, entropy))
}

/// Op-head distribution at the first decision slot (start token, zero state,
/// no dropout). Handy for inspecting what the policy has learned.
pub fn first_step_op_probs(params: &ControllerParams) -> Vec<f64> {
    let x = &params.embed[START_TOKEN * EMBED_DIM..(START_TOKEN + 1) * EMBED_DIM];
    let (h, _) = lstm_step(params, x, &vec![0.0; HIDDEN], &vec![0.0; HIDDEN])
        .expect("fixed dimensions");
    let logits = add_bias(matvec(&params.w_op, DecisionOp::COUNT, HIDDEN, &h), &params.b_op);
    let mut masked = vec![false; DecisionOp::COUNT];
    if params.n_qubits < 3 {
        masked[DecisionOp::Toffoli.index()] = true;
    }
    softmax_masked(&logits, &masked)
}

struct ControllerGrads {
    arrays: Vec<Vec<f64>>,
}

impl ControllerGrads {
    fn zeros_like(params: &ControllerParams) -> Self {
        ControllerGrads {
            arrays: params.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }
}

const EMBED_I: usize = 0;
const W_IH_I: usize = 1;
const W_HH_I: usize = 2;
const B_GATES_I: usize = 3;
const W_OP_I: usize = 4;
const B_OP_I: usize = 5;
const W_OFF1_I: usize = 6;
const B_OFF1_I: usize = 7;
const W_OFF2_I: usize = 8;
const B_OFF2_I: usize = 9;

/// dLoss/dlogits for one head under the REINFORCE objective with entropy
/// bonus: scale * (A * (p - onehot) + beta * p * (ln p + H)). Masked entries
/// carry no gradient.
fn head_logit_grad(eval: &HeadEval, advantage: f64, beta: f64, scale: f64) -> Vec<f64> {
    let h_ent = entropy_of(&eval.probs);
    eval.probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            if eval.masked[j] {
                return 0.0;
            }
            let indicator = if j == eval.chosen { 1.0 } else { 0.0 };
            let mut dz = advantage * (p - indicator);
            if p > 0.0 {
                dz += beta * p * (p.ln() + h_ent);
            }
            scale * dz
        })
        .collect()
}

/// REINFORCE loss and gradients for one teacher-forced trace.
fn trace_backward(
    params: &ControllerParams,
    trace: &SampleTrace,
    advantage: f64,
    beta: f64,
    scale: f64,
    grads: &mut ControllerGrads,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64, ControllerError> {
    CircuitGenome::new(params.n_qubits, trace.n_layers, trace.decisions.clone())?;
    let (_, logprob, entropy, caches) = run_policy(
        params,
        trace.n_layers,
        PolicyMode::Forced(&trace.decisions),
        dropout_rng,
    )?;
    let loss = -(advantage * logprob + beta * entropy);

    let offsets = params.n_qubits - 1;
    let mut dh_next = vec![0.0; HIDDEN];
    let mut dc_next = vec![0.0; HIDDEN];
    for cache in caches.iter().rev() {
        // Head gradients feed the (possibly dropout-scaled) hidden state.
        let mut dh_heads = vec![0.0; HIDDEN];
        let h_heads: Vec<f64> = match &cache.drop_mask {
            Some(mask) => cache.h.iter().zip(mask).map(|(a, b)| a * b).collect(),
            None => cache.h.clone(),
        };
        let dz_op = head_logit_grad(&cache.op, advantage, beta, scale);
        outer_acc(&mut grads.arrays[W_OP_I], &dz_op, &h_heads);
        for (b, g) in grads.arrays[B_OP_I].iter_mut().zip(&dz_op) {
            *b += g;
        }
        matvec_t_acc(&params.w_op, DecisionOp::COUNT, HIDDEN, &dz_op, &mut dh_heads);
        if let Some(eval) = &cache.off1 {
            let dz = head_logit_grad(eval, advantage, beta, scale);
            outer_acc(&mut grads.arrays[W_OFF1_I], &dz, &h_heads);
            for (b, g) in grads.arrays[B_OFF1_I].iter_mut().zip(&dz) {
                *b += g;
            }
            matvec_t_acc(&params.w_off1, offsets, HIDDEN, &dz, &mut dh_heads);
        }
        if let Some(eval) = &cache.off2 {
            let dz = head_logit_grad(eval, advantage, beta, scale);
            outer_acc(&mut grads.arrays[W_OFF2_I], &dz, &h_heads);
            for (b, g) in grads.arrays[B_OFF2_I].iter_mut().zip(&dz) {
                *b += g;
            }
            matvec_t_acc(&params.w_off2, offsets, HIDDEN, &dz, &mut dh_heads);
        }

        // Through dropout back onto h, plus the recurrent path.
        let mut dh = dh_next;
        match &cache.drop_mask {
            Some(mask) => {
                for j in 0..HIDDEN {
                    dh[j] += dh_heads[j] * mask[j];
                }
            }
            None => {
                for j in 0..HIDDEN {
                    dh[j] += dh_heads[j];
                }
            }
        }

        // Standard LSTM cell backward.
        let mut dz_gates = vec![0.0; GATE_DIM];
        let mut dc_prev = vec![0.0; HIDDEN];
        for j in 0..HIDDEN {
            let tanh_c = cache.c[j].tanh();
            let d_o = dh[j] * tanh_c;
            let mut dc = dc_next[j] + dh[j] * cache.o[j] * (1.0 - tanh_c * tanh_c);
            dz_gates[3 * HIDDEN + j] = d_o * cache.o[j] * (1.0 - cache.o[j]);
            let d_i = dc * cache.g[j];
            let d_g = dc * cache.i[j];
            let d_f = dc * cache.c_prev[j];
            dz_gates[j] = d_i * cache.i[j] * (1.0 - cache.i[j]);
            dz_gates[2 * HIDDEN + j] = d_g * (1.0 - cache.g[j] * cache.g[j]);
            dz_gates[HIDDEN + j] = d_f * cache.f[j] * (1.0 - cache.f[j]);
            dc *= cache.f[j];
            dc_prev[j] = dc;
        }

        let x = &params.embed[cache.token_in * EMBED_DIM..(cache.token_in + 1) * EMBED_DIM];
        outer_acc(&mut grads.arrays[W_IH_I], &dz_gates, x);
        outer_acc(&mut grads.arrays[W_HH_I], &dz_gates, &cache.h_prev);
        for (b, g) in grads.arrays[B_GATES_I].iter_mut().zip(&dz_gates) {
            *b += g;
        }
        let mut dx = vec![0.0; EMBED_DIM];
        matvec_t_acc(&params.w_ih, GATE_DIM, EMBED_DIM, &dz_gates, &mut dx);
        let embed_row =
            &mut grads.arrays[EMBED_I][cache.token_in * EMBED_DIM..(cache.token_in + 1) * EMBED_DIM];
        for (e, g) in embed_row.iter_mut().zip(&dx) {
            *e += g;
        }
        let mut dh_prev = vec![0.0; HIDDEN];
        matvec_t_acc(&params.w_hh, GATE_DIM, HIDDEN, &dz_gates, &mut dh_prev);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(loss)
}

/// One REINFORCE step over a batch of traces.
///
/// Loss: -mean_k[(R_k - baseline) * logprob_k] - beta * mean_k[entropy_k],
/// with the baseline read before this batch is folded into it. Returns the
/// loss. Dropout draws fresh masks from `dropout_rng` for every step of every
/// trace (in batch order), so a fixed generator state reproduces the update
/// exactly.
pub fn reinforce_update(
    params: &mut ControllerParams,
    traces: &[SampleTrace],
    rewards: &[f64],
    baseline: &mut RewardBaseline,
    opt: &mut ControllerOptimizer,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64, ControllerError> {
    if traces.is_empty() {
        return Err(ControllerError::EmptyBatch);
    }
    if traces.len() != rewards.len() {
        return Err(ControllerError::BatchLengthMismatch {
            traces: traces.len(),
            rewards: rewards.len(),
        });
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ControllerError::NonFiniteReward(bad));
    }

    let b = baseline.value();
    let scale = 1.0 / traces.len() as f64;
    let mut grads = ControllerGrads::zeros_like(params);
    let mut loss = 0.0;
    for (trace, &reward) in traces.iter().zip(rewards) {
        loss += scale
            * trace_backward(
                params,
                trace,
                reward - b,
                opt.entropy_beta,
                scale,
                &mut grads,
                Some(dropout_rng),
            )?;
    }

    for ((target, grad), state) in params
        .arrays_mut()
        .into_iter()
        .zip(&grads.arrays)
        .zip(&mut opt.adam)
    {
        adam_step(target, grad, state).expect("gradient arrays match parameter arrays");
    }

    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    baseline.observe(mean_reward);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn lstm_step_matches_straight_line_reference() {
        // Independent scalar-loop evaluation of the five cell equations.
        let params = ControllerParams::new(4, 7).unwrap();
        let x: Vec<f64> = (0..EMBED_DIM).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        let h: Vec<f64> = (0..HIDDEN).map(|i| (i as f64 * 0.11).cos() * 0.3).collect();
        let c: Vec<f64> = (0..HIDDEN).map(|i| (i as f64 * 0.23).sin() * 0.7).collect();
        let (h_new, c_new) = lstm_step(&params, &x, &h, &c).unwrap();

        for j in 0..HIDDEN {
            let mut zi = params.b_gates[j];
            let mut zf = params.b_gates[HIDDEN + j];
            let mut zg = params.b_gates[2 * HIDDEN + j];
            let mut zo = params.b_gates[3 * HIDDEN + j];
            for (k, &xk) in x.iter().enumerate() {
                zi += params.w_ih[j * EMBED_DIM + k] * xk;
                zf += params.w_ih[(HIDDEN + j) * EMBED_DIM + k] * xk;
                zg += params.w_ih[(2 * HIDDEN + j) * EMBED_DIM + k] * xk;
                zo += params.w_ih[(3 * HIDDEN + j) * EMBED_DIM + k] * xk;
            }
            for (k, &hk) in h.iter().enumerate() {
                zi += params.w_hh[j * HIDDEN + k] * hk;
                zf += params.w_hh[(HIDDEN + j) * HIDDEN + k] * hk;
                zg += params.w_hh[(2 * HIDDEN + j) * HIDDEN + k] * hk;
                zo += params.w_hh[(3 * HIDDEN + j) * HIDDEN + k] * hk;
            }
            let i_g = 1.0 / (1.0 + (-zi).exp());
            let f_g = 1.0 / (1.0 + (-zf).exp());
            let g_g = zg.tanh();
            let o_g = 1.0 / (1.0 + (-zo).exp());
            let c_ref = f_g * c[j] + i_g * g_g;
            close(c_new[j], c_ref, 1e-12);
            close(h_new[j], o_g * c_ref.tanh(), 1e-12);
        }
    }

    #[test]
    fn lstm_step_rejects_wrong_dimensions() {
        let params = ControllerParams::new(3, 0).unwrap();
        let bad = lstm_step(&params, &[0.0; 5], &[0.0; HIDDEN], &[0.0; HIDDEN]);
        assert!(matches!(bad, Err(ControllerError::DimMismatch { .. })));
    }

    #[test]
    fn sampled_traces_are_valid_and_rescorable() {
        for seed in 0..40u64 {
            let n = 2 + (seed as usize % 4);
            let params = ControllerParams::new(n, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let (genome, trace) = sample_genome(&params, n, 2, &mut rng).unwrap();
            genome.validate().unwrap();
            genome.compile().unwrap();
            let (lp, ent) = evaluate_trace(&params, &trace).unwrap();
            close(lp, trace.logprob, 1e-10);
            close(ent, trace.entropy, 1e-10);
            assert!(trace.logprob <= 0.0);
            assert!(trace.entropy >= 0.0);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_rng_state() {
        let params = ControllerParams::new(4, 3).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(10);
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let (g1, t1) = sample_genome(&params, 4, 3, &mut rng1).unwrap();
        let (g2, t2) = sample_genome(&params, 4, 3, &mut rng2).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(t1.logprob, t2.logprob);
        // The generator advanced identically.
        assert_eq!(rng1.random::<u64>(), rng2.random::<u64>());
    }

    #[test]
    fn two_qubit_policy_never_emits_toffoli() {
        let params = ControllerParams::new(2, 1).unwrap();
        let probs = first_step_op_probs(&params);
        assert_eq!(probs[DecisionOp::Toffoli.index()], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (genome, _) = sample_genome(&params, 2, 2, &mut rng).unwrap();
            assert!(genome.decisions.iter().all(|d| d.op != DecisionOp::Toffoli));
        }
    }

    #[test]
    fn fresh_policy_op_marginal_is_near_uniform() {
        // The exact first-step distribution is computable; sampled frequencies
        // must sit within 3 sigma of it, and it must itself be near 1/12.
        let params = ControllerParams::new(4, 123).unwrap();
        let exact = first_step_op_probs(&params);
        for &p in &exact {
            assert!((0.06..0.11).contains(&p), "first-step prob {p} far from 1/12");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let samples = 10_000;
        let mut counts = [0usize; DecisionOp::COUNT];
        for _ in 0..samples {
            let (genome, _) = sample_genome(&params, 4, 1, &mut rng).unwrap();
            counts[genome.decisions[0].op.index()] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            let p = exact[i];
            let sigma = (p * (1.0 - p) / samples as f64).sqrt();
            let freq = count as f64 / samples as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 1e-9,
                "op {i}: freq {freq} vs exact {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn qubit_mismatch_and_empty_batch_are_rejected() {
        let mut params = ControllerParams::new(4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_genome(&params, 5, 1, &mut rng),
            Err(ControllerError::QubitMismatch { .. })
        ));
        assert!(matches!(
            sample_genome(&params, 4, 0, &mut rng),
            Err(ControllerError::BadLayerCount)
        ));
        let mut opt = ControllerOptimizer::new(&params, 0.001);
        let mut baseline = RewardBaseline::new();
        assert!(matches!(
            reinforce_update(&mut params, &[], &[], &mut baseline, &mut opt, &mut rng),
            Err(ControllerError::EmptyBatch)
        ));
        let (_, trace) = sample_genome(&params, 4, 1, &mut rng).unwrap();
        assert!(matches!(
            reinforce_update(
                &mut params,
                std::slice::from_ref(&trace),
                &[1.0, 2.0],
                &mut baseline,
                &mut opt,
                &mut rng
            ),
            Err(ControllerError::BatchLengthMismatch { .. })
        ));
        assert!(matches!(
            reinforce_update(
                &mut params,
                &[trace],
                &[f64::NAN],
                &mut baseline,
                &mut opt,
                &mut rng
            ),
            Err(ControllerError::NonFiniteReward(_))
        ));
    }

    #[test]
    fn baseline_is_an_ema_with_exact_first_observation() {
        let mut b = RewardBaseline::new();
        assert_eq!(b.value(), 0.0);
        b.observe(1.0);
        assert_eq!(b.value(), 1.0);
        b.observe(0.5);
        close(b.value(), 0.9 * 1.0 + 0.1 * 0.5, 1e-12);
    }

    #[test]
    fn positive_advantage_update_raises_trace_logprob() {
        // beta = 0, one trace, reward above the zero baseline: a single
        // update must strictly increase the trace's logprob.
        for seed in 0..5u64 {
            let mut params = ControllerParams::new(3, seed).unwrap();
            params.dropout = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let (_, trace) = sample_genome(&params, 3, 2, &mut rng).unwrap();
            let (before, _) = evaluate_trace(&params, &trace).unwrap();
            let mut opt = ControllerOptimizer::new(&params, 0.001);
            opt.entropy_beta = 0.0;
            let mut baseline = RewardBaseline::new();
            reinforce_update(
                &mut params,
                std::slice::from_ref(&trace),
                &[1.0],
                &mut baseline,
                &mut opt,
                &mut rng,
            )
            .unwrap();
            let (after, _) = evaluate_trace(&params, &trace).unwrap();
            assert!(
                after > before,
                "logprob did not increase: {before} -> {after}"
            );
        }
    }

    #[test]
    fn reinforce_gradients_match_finite_differences() {
        // Deterministic loss (dropout off) over two traces; probe a spread of
        // coordinates across every array with central differences.
        let mut params = ControllerParams::new(3, 42).unwrap();
        params.dropout = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let (_, t1) = sample_genome(&params, 3, 1, &mut rng).unwrap();
        let (_, t2) = sample_genome(&params, 3, 1, &mut rng).unwrap();
        let traces = [t1, t2];
        let advantages = [0.8, -0.4];
        let beta = 0.01;

        let loss_of = |p: &ControllerParams| -> f64 {
            let scale = 1.0 / traces.len() as f64;
            traces
                .iter()
                .zip(advantages)
                .map(|(t, a)| {
                    let (lp, ent) = evaluate_trace(p, t).unwrap();
                    scale * -(a * lp + beta * ent)
                })
                .sum()
        };

        let mut grads = ControllerGrads::zeros_like(&params);
        let scale = 1.0 / traces.len() as f64;
        let mut loss = 0.0;
        for (t, a) in traces.iter().zip(advantages) {
            loss += scale
                * trace_backward(&params, t, a, beta, scale, &mut grads, None).unwrap();
        }
        close(loss, loss_of(&params), 1e-12);

        let flat_grad: Vec<f64> = grads.arrays.concat();
        let total = params.n_params();
        assert_eq!(flat_grad.len(), total);
        // Probe every 97th coordinate plus the array boundaries.
        let mut probes: Vec<usize> = (0..total).step_by(97).collect();
        let mut boundary = 0;
        for a in grads.arrays.iter() {
            probes.push(boundary);
            boundary += a.len();
            probes.push(boundary - 1);
        }
        let h = 1e-6;
        for &i in &probes {
            params.flat_add(i, h);
            let plus = loss_of(&params);
            params.flat_add(i, -2.0 * h);
            let minus = loss_of(&params);
            params.flat_add(i, h);
            let fd = (plus - minus) / (2.0 * h);
            close(flat_grad[i], fd, 2e-6);
        }
    }

    #[test]
    fn dropout_masks_are_reproducible_and_change_the_update() {
        let make = || {
            let mut params = ControllerParams::new(3, 9).unwrap();
            params.dropout = 0.2;
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            let (_, trace) = sample_genome(&params, 3, 2, &mut rng).unwrap();
            (params, trace)
        };
        let run = |drop_seed: u64| -> Vec<f64> {
            let (mut params, trace) = make();
            let mut opt = ControllerOptimizer::new(&params, 0.01);
            let mut baseline = RewardBaseline::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(drop_seed);
            reinforce_update(
                &mut params,
                &[trace],
                &[1.0],
                &mut baseline,
                &mut opt,
                &mut drop_rng,
            )
            .unwrap();
            params.arrays().iter().flat_map(|a| a.iter().copied()).collect()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = ControllerParams::new(5, 31).unwrap();
        let json = params.to_json();
        let back = ControllerParams::from_json(&json).unwrap();
        assert_eq!(params, back);
        assert_eq!(json, back.to_json());

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["version"] = serde_json::json!(99);
        assert!(matches!(
            ControllerParams::from_json(&doc.to_string()),
            Err(ControllerError::Checkpoint(_))
        ));
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["arrays"][0]["shape"] = serde_json::json!([1, 2]);
        assert!(ControllerParams::from_json(&doc.to_string()).is_err());
    }
}
