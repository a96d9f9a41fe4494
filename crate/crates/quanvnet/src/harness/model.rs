//! The hybrid classifier: classical convolution stages feeding the quantum
//! filter, then fully connected layers over its feature map.
//!
//! Stage order is Conv1 + ReLU + 2x2 max pool, an optional Conv2 + ReLU +
//! pool collapsing to one channel, the sliding-window quantum filter, and
//! either one fully connected layer or a hidden+output pair with ReLU
//! between. Weights are Glorot-uniform, drawn in stage order (conv1, conv2,
//! fc hidden, fc output), then circuit angles uniform in [-pi, pi); biases
//! start at zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::HarnessError;
use crate::genome::CircuitGenome;
use crate::nn::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, softmax, softmax_cross_entropy, Tensor,
};
use crate::quanv::{FeatureMap, QuantumFilter};

/// Spatial sizes at every stage, fixed at build time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub input: (usize, usize),
    pub feature: (usize, usize),
    pub quanv: (usize, usize),
    pub flat: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    pub genome: CircuitGenome,
    pub filter: QuantumFilter,
    pub conv1_kernels: Tensor,
    pub conv1_bias: Tensor,
    pub conv2: Option<(Tensor, Tensor)>,
    pub fc_hidden: Option<(Tensor, Tensor)>,
    pub fc_out: (Tensor, Tensor),
    pub dims: ModelDims,
}

/// Per-parameter-array gradients, aligned with `HybridModel::param_arrays`.
pub struct ModelGrads {
    arrays: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &HybridModel) -> Self {
        ModelGrads {
            arrays: model
                .param_arrays()
                .iter()
                .map(|(_, a)| vec![0.0; a.len()])
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            for g in a {
                *g *= s;
            }
        }
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.arrays
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

fn cfg_err(detail: String) -> HarnessError {
    HarnessError::Config(detail)
}

fn conv_stage_dims(
    (h, w): (usize, usize),
    kernel: usize,
    stage: &str,
) -> Result<(usize, usize), HarnessError> {
    if h < kernel || w < kernel {
        return Err(cfg_err(format!(
            "{stage}: kernel {kernel} larger than its {h}x{w} input"
        )));
    }
    let (ch, cw) = (h - kernel + 1, w - kernel + 1);
    if ch < 2 || cw < 2 {
        return Err(cfg_err(format!(
            "{stage}: {ch}x{cw} output collapses under the 2x2 pool"
        )));
    }
    Ok((ch / 2, cw / 2))
}

impl HybridModel {
    /// Builds and initializes the model for one input size and class count.
    /// Fails with a config error when the stage shapes do not chain.
    pub fn build(
        model_cfg: &ModelConfig,
        genome: CircuitGenome,
        input: (usize, usize),
        n_classes: usize,
        init_rng: &mut ChaCha8Rng,
    ) -> Result<Self, HarnessError> {
        if n_classes < 2 {
            return Err(cfg_err(format!("{n_classes} classes, need at least 2")));
        }
        let c1 = model_cfg.conv1_channels;
        let k1 = model_cfg.conv1_kernel;
        let after1 = conv_stage_dims(input, k1, "model.conv1_kernel")?;
        let (feature, k2) = match model_cfg.conv2_kernel {
            Some(k2) => (conv_stage_dims(after1, k2, "model.conv2_kernel")?, Some(k2)),
            None => (after1, None),
        };
        if k2.is_none() && c1 != 1 {
            return Err(cfg_err(format!(
                "model.conv1_channels: {c1} channels reach the quantum filter"
            )));
        }

        let (m, n) = (model_cfg.window[0], model_cfg.window[1]);
        if genome.n_qubits != m * n {
            return Err(cfg_err(format!(
                "genome has {} qubits, the {m}x{n} window needs {}",
                genome.n_qubits,
                m * n
            )));
        }
        let pqc = genome.compile()?;
        let n_thetas = pqc.n_thetas;
        let filter = QuantumFilter::new(
            pqc,
            vec![0.0; n_thetas],
            (m, n),
            model_cfg.stride,
            model_cfg.readout,
        )
        .map_err(|e| cfg_err(format!("quantum filter: {e}")))?;
        let quanv = filter
            .output_shape(feature.0, feature.1)
            .map_err(|e| cfg_err(format!("quantum filter: {e}")))?;
        let flat = quanv.0 * quanv.1;

        let conv1_kernels = Tensor::from_vec(
            &[c1, 1, k1, k1],
            glorot(init_rng, k1 * k1, c1 * k1 * k1, c1 * k1 * k1),
        )?;
        let conv1_bias = Tensor::zeros(&[c1]);
        let conv2 = match k2 {
            Some(k2) => Some((
                Tensor::from_vec(
                    &[1, c1, k2, k2],
                    glorot(init_rng, c1 * k2 * k2, k2 * k2, c1 * k2 * k2),
                )?,
                Tensor::zeros(&[1]),
            )),
            None => None,
        };
        let fc_hidden = match model_cfg.fc_hidden {
            Some(hidden) => Some((
                Tensor::from_vec(
                    &[hidden, flat],
                    glorot(init_rng, flat, hidden, hidden * flat),
                )?,
                Tensor::zeros(&[hidden]),
            )),
            None => None,
        };
        let out_in = model_cfg.fc_hidden.unwrap_or(flat);
        let fc_out = (
            Tensor::from_vec(
                &[n_classes, out_in],
                glorot(init_rng, out_in, n_classes, n_classes * out_in),
            )?,
            Tensor::zeros(&[n_classes]),
        );

        let mut model = HybridModel {
            genome,
            filter,
            conv1_kernels,
            conv1_bias,
            conv2,
            fc_hidden,
            fc_out,
            dims: ModelDims {
                input,
                feature,
                quanv,
                flat,
                n_classes,
            },
        };
        model.filter.thetas = (0..n_thetas)
            .map(|_| init_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        Ok(model)
    }

    /// Named parameter arrays in a fixed order (the checkpoint and Adam
    /// order): conv1, optional conv2, optional hidden layer, output layer,
    /// circuit angles.
    pub fn param_arrays(&self) -> Vec<(&'static str, &[f64])> {
        let mut arrays: Vec<(&'static str, &[f64])> = vec![
            ("conv1_kernels", self.conv1_kernels.data()),
            ("conv1_bias", self.conv1_bias.data()),
        ];
        if let Some((k, b)) = &self.conv2 {
            arrays.push(("conv2_kernels", k.data()));
            arrays.push(("conv2_bias", b.data()));
        }
        if let Some((w, b)) = &self.fc_hidden {
            arrays.push(("fc_hidden_weights", w.data()));
            arrays.push(("fc_hidden_bias", b.data()));
        }
        arrays.push(("fc_out_weights", self.fc_out.0.data()));
        arrays.push(("fc_out_bias", self.fc_out.1.data()));
        arrays.push(("thetas", &self.filter.thetas));
        arrays
    }

    pub fn param_arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut arrays: Vec<(&'static str, &mut [f64])> = vec![
            ("conv1_kernels", self.conv1_kernels.data_mut()),
            ("conv1_bias", self.conv1_bias.data_mut()),
        ];
        if let Some((k, b)) = &mut self.conv2 {
            arrays.push(("conv2_kernels", k.data_mut()));
            arrays.push(("conv2_bias", b.data_mut()));
        }
        if let Some((w, b)) = &mut self.fc_hidden {
            arrays.push(("fc_hidden_weights", w.data_mut()));
            arrays.push(("fc_hidden_bias", b.data_mut()));
        }
        arrays.push(("fc_out_weights", self.fc_out.0.data_mut()));
        arrays.push(("fc_out_bias", self.fc_out.1.data_mut()));
        arrays.push(("thetas", &mut self.filter.thetas));
        arrays
    }

    /// Tensor shapes aligned with `param_arrays` (flat arrays like `thetas`
    /// report a single dimension).
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut shapes: Vec<(&'static str, Vec<usize>)> = vec![
            ("conv1_kernels", self.conv1_kernels.shape().to_vec()),
            ("conv1_bias", self.conv1_bias.shape().to_vec()),
        ];
        if let Some((k, b)) = &self.conv2 {
            shapes.push(("conv2_kernels", k.shape().to_vec()));
            shapes.push(("conv2_bias", b.shape().to_vec()));
        }
        if let Some((w, b)) = &self.fc_hidden {
            shapes.push(("fc_hidden_weights", w.shape().to_vec()));
            shapes.push(("fc_hidden_bias", b.shape().to_vec()));
        }
        shapes.push(("fc_out_weights", self.fc_out.0.shape().to_vec()));
        shapes.push(("fc_out_bias", self.fc_out.1.shape().to_vec()));
        shapes.push(("thetas", vec![self.filter.thetas.len()]));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.param_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Adds `delta` to one parameter by flat index over `param_arrays`
    /// order. Finite-difference probe hook.
    pub fn flat_add(&mut self, mut index: usize, delta: f64) {
        for (_, a) in self.param_arrays_mut() {
            if index < a.len() {
                a[index] += delta;
                return;
            }
            index -= a.len();
        }
        panic!("flat index out of range");
    }

    fn forward_trace(&self, image: &[f64]) -> Result<ForwardTrace, HarnessError> {
        let (h, w) = self.dims.input;
        if image.len() != h * w {
            return Err(HarnessError::Internal(format!(
                "image holds {} pixels, model expects {}x{}",
                image.len(),
                h,
                w
            )));
        }
        let input = Tensor::from_vec(&[1, h, w], image.to_vec())?;
        let a1 = conv2d_forward(&input, &self.conv1_kernels, &self.conv1_bias)?;
        let r1 = relu_forward(&a1);
        let p1 = maxpool2d_forward(&r1)?;
        let conv2_trace = match &self.conv2 {
            Some((k2, b2)) => {
                let a2 = conv2d_forward(&p1, k2, b2)?;
                let r2 = relu_forward(&a2);
                let p2 = maxpool2d_forward(&r2)?;
                Some((a2, r2, p2))
            }
            None => None,
        };
        let feature_tensor = match &conv2_trace {
            Some((_, _, p2)) => p2,
            None => &p1,
        };
        let (fh, fw) = self.dims.feature;
        let feature = FeatureMap::from_vec(fh, fw, feature_tensor.data().to_vec())?;
        let quanv_map = self.filter.forward(&feature)?;
        let flat = Tensor::from_vec(&[self.dims.flat], quanv_map.values().to_vec())?;
        let (hidden_trace, logits) = match &self.fc_hidden {
            Some((w1, b1)) => {
                let z1 = fc_forward(&flat, w1, b1)?;
                let h1 = relu_forward(&z1);
                let logits = fc_forward(&h1, &self.fc_out.0, &self.fc_out.1)?;
                (Some((z1, h1)), logits)
            }
            None => (None, fc_forward(&flat, &self.fc_out.0, &self.fc_out.1)?),
        };
        Ok(ForwardTrace {
            input,
            a1,
            r1,
            p1,
            conv2: conv2_trace,
            feature,
            flat,
            hidden: hidden_trace,
            logits,
        })
    }

    /// Class probabilities for one image.
    pub fn probabilities(&self, image: &[f64]) -> Result<Vec<f64>, HarnessError> {
        let trace = self.forward_trace(image)?;
        Ok(softmax(trace.logits.data()))
    }

    /// Cross-entropy loss for one labeled image, with gradients accumulated
    /// into `grads` (so batch means are formed by scaling afterwards).
    pub fn loss_and_grads(
        &self,
        image: &[f64],
        label: usize,
        grads: &mut ModelGrads,
    ) -> Result<f64, HarnessError> {
        let trace = self.forward_trace(image)?;
        let (loss, dlogits) = softmax_cross_entropy(trace.logits.data(), label)?;
        let dlogits = Tensor::from_vec(&[self.dims.n_classes], dlogits)?;

        let mut slot = grads.arrays.len();
        let mut take = |count: usize| {
            slot -= count;
            slot
        };
        // Walk the parameter list backwards: thetas, fc_out, hidden, convs.
        let theta_slot = take(1);
        let fc_out_b_slot = take(1);
        let fc_out_w_slot = take(1);

        let dflat = match (&self.fc_hidden, &trace.hidden) {
            (Some((w1, _)), Some((z1, h1))) => {
                let (dh1, dwo, dbo) = fc_backward(h1, &self.fc_out.0, &dlogits)?;
                add(&mut grads.arrays[fc_out_w_slot], dwo.data());
                add(&mut grads.arrays[fc_out_b_slot], dbo.data());
                let dz1 = relu_backward(z1, &dh1)?;
                let fc_h_b_slot = take(1);
                let fc_h_w_slot = take(1);
                let (dflat, dw1, db1) = fc_backward(&trace.flat, w1, &dz1)?;
                add(&mut grads.arrays[fc_h_w_slot], dw1.data());
                add(&mut grads.arrays[fc_h_b_slot], db1.data());
                dflat
            }
            _ => {
                let (dflat, dwo, dbo) = fc_backward(&trace.flat, &self.fc_out.0, &dlogits)?;
                add(&mut grads.arrays[fc_out_w_slot], dwo.data());
                add(&mut grads.arrays[fc_out_b_slot], dbo.data());
                dflat
            }
        };

        let upstream = FeatureMap::from_vec(
            self.dims.quanv.0,
            self.dims.quanv.1,
            dflat.data().to_vec(),
        )?;
        let (dthetas, dfeature) = self.filter.backward(&trace.feature, &upstream)?;
        add(&mut grads.arrays[theta_slot], &dthetas);
        let (fh, fw) = self.dims.feature;
        let dpost_pool = Tensor::from_vec(&[1, fh, fw], dfeature.values().to_vec())?;

        let dp1 = match (&self.conv2, &trace.conv2) {
            (Some((k2, _)), Some((a2, r2, _))) => {
                let dr2 = maxpool2d_backward(r2, &dpost_pool)?;
                let da2 = relu_backward(a2, &dr2)?;
                let conv2_b_slot = take(1);
                let conv2_k_slot = take(1);
                let (dp1, dk2, db2) = conv2d_backward(&trace.p1, k2, &da2)?;
                add(&mut grads.arrays[conv2_k_slot], dk2.data());
                add(&mut grads.arrays[conv2_b_slot], db2.data());
                dp1
            }
            _ => dpost_pool,
        };
        let dr1 = maxpool2d_backward(&trace.r1, &dp1)?;
        let da1 = relu_backward(&trace.a1, &dr1)?;
        let conv1_b_slot = take(1);
        let conv1_k_slot = take(1);
        let (_, dk1, db1) = conv2d_backward(&trace.input, &self.conv1_kernels, &da1)?;
        add(&mut grads.arrays[conv1_k_slot], dk1.data());
        add(&mut grads.arrays[conv1_b_slot], db1.data());
        debug_assert_eq!(slot, 0);
        Ok(loss)
    }
}

fn add(acc: &mut [f64], values: &[f64]) {
    debug_assert_eq!(acc.len(), values.len());
    for (a, v) in acc.iter_mut().zip(values) {
        *a += v;
    }
}

struct ForwardTrace {
    input: Tensor,
    a1: Tensor,
    r1: Tensor,
    p1: Tensor,
    conv2: Option<(Tensor, Tensor, Tensor)>,
    feature: FeatureMap,
    flat: Tensor,
    hidden: Option<(Tensor, Tensor)>,
    logits: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::random_genome;
    use rand::SeedableRng;

    fn model_cfg(toml_body: &str) -> ModelConfig {
        #[derive(serde::Deserialize)]
        struct Wrap {
            model: ModelConfig,
        }
        let w: Wrap = toml::from_str(&format!("[model]\n{toml_body}")).unwrap();
        w.model
    }

    fn full_cfg() -> ModelConfig {
        model_cfg(
            "conv1_channels = 4\nconv2_kernel = 3\nwindow = [3, 3]\nfc_hidden = 32\n",
        )
    }

    fn desk_cfg() -> ModelConfig {
        model_cfg("conv1_channels = 1\nwindow = [3, 3]\n")
    }

    fn toy_cfg() -> ModelConfig {
        model_cfg(
            "conv1_channels = 2\nconv1_kernel = 3\nconv2_kernel = 2\nwindow = [2, 2]\npqc_layers = 2\nfc_hidden = 8\n",
        )
    }

    fn build(cfg: &ModelConfig, input: (usize, usize), classes: usize, seed: u64) -> HybridModel {
        let genome = random_genome(cfg.window[0] * cfg.window[1], cfg.pqc_layers, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HybridModel::build(cfg, genome, input, classes, &mut rng).unwrap()
    }

    #[test]
    fn stage_shapes_chain_for_the_three_presets() {
        let full = build(&full_cfg(), (28, 28), 2, 0);
        assert_eq!(full.dims.feature, (5, 5));
        assert_eq!(full.dims.quanv, (3, 3));
        assert_eq!(full.dims.flat, 9);

        let desk = build(&desk_cfg(), (14, 14), 2, 1);
        assert_eq!(desk.dims.feature, (6, 6));
        assert_eq!(desk.dims.quanv, (4, 4));
        assert_eq!(desk.dims.flat, 16);

        let toy = build(&toy_cfg(), (12, 12), 2, 2);
        assert_eq!(toy.dims.feature, (2, 2));
        assert_eq!(toy.dims.quanv, (1, 1));
        assert_eq!(toy.dims.flat, 1);
    }

    #[test]
    fn mismatched_genome_and_window_is_a_config_error() {
        let cfg = desk_cfg();
        let genome = random_genome(4, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = HybridModel::build(&cfg, genome, (14, 14), 2, &mut rng).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{err}");
    }

    #[test]
    fn oversized_kernel_is_a_config_error() {
        let cfg = model_cfg("conv1_channels = 1\nconv1_kernel = 9\nwindow = [2, 2]\n");
        let genome = random_genome(4, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = HybridModel::build(&cfg, genome, (8, 8), 2, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1_kernel"), "{msg}");
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let model = build(&desk_cfg(), (14, 14), 2, 3);
        let image: Vec<f64> = (0..196).map(|i| (i % 7) as f64 / 7.0).collect();
        let probs = model.probabilities(&image).unwrap();
        assert_eq!(probs.len(), 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = build(&toy_cfg(), (12, 12), 2, 7);
        let b = build(&toy_cfg(), (12, 12), 2, 7);
        let c = build(&toy_cfg(), (12, 12), 2, 8);
        let flat = |m: &HybridModel| -> Vec<f64> {
            m.param_arrays()
                .iter()
                .flat_map(|(_, a)| a.iter().copied())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    fn spot_check_fd(mut model: HybridModel, side: usize) {
        let image: Vec<f64> = (0..side * side)
            .map(|i| ((i * 13) % 29) as f64 / 29.0)
            .collect();
        let label = 1;

        let mut grads = ModelGrads::zeros_like(&model);
        let loss = model.loss_and_grads(&image, label, &mut grads).unwrap();
        assert!(loss.is_finite());
        let flat_grads: Vec<f64> = grads.arrays.concat();

        let mut probes = Vec::new();
        let mut offset = 0;
        for (_, a) in model.param_arrays() {
            probes.push(offset);
            probes.push(offset + a.len() / 2);
            offset += a.len();
        }
        let h = 1e-5;
        for &i in &probes {
            model.flat_add(i, h);
            let mut scratch = ModelGrads::zeros_like(&model);
            let plus = model.loss_and_grads(&image, label, &mut scratch).unwrap();
            model.flat_add(i, -2.0 * h);
            let mut scratch = ModelGrads::zeros_like(&model);
            let minus = model.loss_and_grads(&image, label, &mut scratch).unwrap();
            model.flat_add(i, h);
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (flat_grads[i] - fd).abs() < 1e-6,
                "coordinate {i}: analytic {} vs fd {fd}",
                flat_grads[i]
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_on_a_spot_subset() {
        // Probe a few coordinates in every parameter array against central
        // differences, on both fully connected variants.
        spot_check_fd(build(&toy_cfg(), (12, 12), 2, 11), 12);
        spot_check_fd(build(&desk_cfg(), (14, 14), 2, 11), 14);
    }

    #[test]
    fn param_array_names_are_stable() {
        let model = build(&full_cfg(), (28, 28), 2, 0);
        let names: Vec<&str> = model.param_arrays().iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            vec![
                "conv1_kernels",
                "conv1_bias",
                "conv2_kernels",
                "conv2_bias",
                "fc_hidden_weights",
                "fc_hidden_bias",
                "fc_out_weights",
                "fc_out_bias",
                "thetas",
            ]
        );
        let desk = build(&desk_cfg(), (14, 14), 2, 0);
        let names: Vec<&str> = desk.param_arrays().iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            vec![
                "conv1_kernels",
                "conv1_bias",
                "fc_out_weights",
                "fc_out_bias",
                "thetas",
            ]
        );
    }
}
