//! Small feedforward networks with exact reverse-mode gradients and an
//! adaptive-moment optimizer.
//!
//! Hidden layers use tanh, the output layer is linear. Two fixed
//! (non-trained) affine stages improve conditioning on physical data:
//! inputs are shifted/scaled into a unit box, outputs are multiplied by a
//! per-component scale. Both default to the identity and are serialized
//! with the weights so a checkpoint is self-contained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Feedforward network: tanh hidden layers, identity output.
/// `weights[l]` is row-major `layer_sizes[l+1] x layer_sizes[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Mlp {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    /// The same seed always yields the same parameters.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output layers");
        assert!(layer_sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            input_offset: vec![0.0; layer_sizes[0]],
            input_scale: vec![1.0; layer_sizes[0]],
            output_scale: vec![1.0; layer_sizes[layer_sizes.len() - 1]],
        }
    }

    /// Attach fixed feature scaling: inputs map to `(z - offset) * scale`
    /// before the first layer, raw outputs are multiplied by `output_scale`.
    pub fn with_scaling(mut self, offset: &[f64], scale: &[f64], output_scale: &[f64]) -> Self {
        assert_eq!(offset.len(), self.input_dim());
        assert_eq!(scale.len(), self.input_dim());
        assert_eq!(output_scale.len(), self.output_dim());
        self.input_offset = offset.to_vec();
        self.input_scale = scale.to_vec();
        self.output_scale = output_scale.to_vec();
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total trainable parameter count: sum of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|p| (p[0] + 1) * p[1])
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Forward pass into a reusable workspace; returns the output slice.
    /// The workspace retains every post-activation for a later backward pass.
    pub fn forward_ws<'w>(&self, z: &[f64], ws: &'w mut MlpWorkspace) -> &'w [f64] {
        debug_assert_eq!(z.len(), self.input_dim());
        ws.ensure(self);
        let n_layers = self.n_layers();
        for i in 0..z.len() {
            ws.acts[0][i] = (z[i] - self.input_offset[i]) * self.input_scale[i];
        }
        for l in 0..n_layers {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let w = &self.weights[l];
            let b = &self.biases[l];
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let prev = &prev[l];
            let out = &mut rest[0];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(prev.iter()) {
                    acc += wi * ai;
                }
                out[o] = if l + 1 < n_layers { acc.tanh() } else { acc };
            }
        }
        let out = &mut ws.acts[n_layers];
        for (o, s) in out.iter_mut().zip(self.output_scale.iter()) {
            *o *= s;
        }
        out
    }

    /// Deterministic forward evaluation (allocating convenience wrapper).
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let mut ws = MlpWorkspace::default();
        self.forward_ws(z, &mut ws).to_vec()
    }

    /// Checked forward: rejects inputs of the wrong length.
    pub fn try_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(self.forward(z))
    }

    /// Reverse-mode gradients of `<output, cotangent>` with respect to every
    /// parameter, accumulated into `grads`. The workspace must hold the
    /// activations of the immediately preceding `forward_ws` call on this
    /// network. If `input_grad` is given, the gradient with respect to the
    /// (unscaled) input is written there.
    pub fn backward_ws(
        &self,
        cotangent: &[f64],
        ws: &mut MlpWorkspace,
        grads: &mut MlpGrads,
        mut input_grad: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(cotangent.len(), self.output_dim());
        let n_layers = self.n_layers();
        // Undo the output scale on the stored final activation so hidden
        // deltas see the raw linear output; seed delta with scale applied.
        for (d, (c, s)) in ws.deltas[n_layers]
            .iter_mut()
            .zip(cotangent.iter().zip(self.output_scale.iter()))
        {
            *d = c * s;
        }
        for l in (0..n_layers).rev() {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let w = &self.weights[l];
            let (d_lo, d_hi) = ws.deltas.split_at_mut(l + 1);
            let delta = &d_hi[0];
            let delta_prev = &mut d_lo[l];
            let a_prev = &ws.acts[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for (gi, ai) in grow.iter_mut().zip(a_prev.iter()) {
                    *gi += d * ai;
                }
            }
            if l > 0 || input_grad.is_some() {
                for i in 0..n_in {
                    let mut acc = 0.0;
                    for o in 0..n_out {
                        acc += w[o * n_in + i] * delta[o];
                    }
                    delta_prev[i] = acc;
                }
                if l > 0 {
                    // a_prev holds tanh activations; tanh' = 1 - a^2.
                    for (d, a) in delta_prev.iter_mut().zip(a_prev.iter()) {
                        *d *= 1.0 - a * a;
                    }
                }
            }
        }
        if let Some(ig) = input_grad.as_deref_mut() {
            for i in 0..self.input_dim() {
                ig[i] = ws.deltas[0][i] * self.input_scale[i];
            }
        }
    }

    /// Allocating wrapper around forward + backward. Returns the parameter
    /// gradients and the input gradient.
    pub fn backward(&self, z: &[f64], cotangent: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if z.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent has length {}, network outputs {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let mut ws = MlpWorkspace::default();
        self.forward_ws(z, &mut ws);
        let mut grads = MlpGrads::zeros_like(self);
        let mut input_grad = vec![0.0; self.input_dim()];
        self.backward_ws(cotangent, &mut ws, &mut grads, Some(&mut input_grad));
        Ok((grads, input_grad))
    }
}

/// Reusable activation/delta buffers for one network shape.
#[derive(Debug, Default, Clone)]
pub struct MlpWorkspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl MlpWorkspace {
    fn ensure(&mut self, net: &Mlp) {
        let shape_ok = self.acts.len() == net.layer_sizes.len()
            && self.acts.iter().zip(net.layer_sizes.iter()).all(|(a, &s)| a.len() == s);
        if !shape_ok {
            self.acts = net.layer_sizes.iter().map(|&s| vec![0.0; s]).collect();
            self.deltas = net.layer_sizes.iter().map(|&s| vec![0.0; s]).collect();
        }
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += alpha * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in self.weights.iter().chain(self.biases.iter()) {
            for x in v.iter() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Adaptive-moment (Adam) optimizer state. Accumulators mirror the
/// parameter shapes; non-finite gradients skip the update and are counted.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gradient_clip: Option<f64>,
    pub step_count: u64,
    pub skipped: u64,
    first_moment: MlpGrads,
    second_moment: MlpGrads,
}

impl OptimState {
    pub fn new(net: &Mlp, learning_rate: f64, gradient_clip: Option<f64>) -> Self {
        assert!(learning_rate > 0.0);
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gradient_clip,
            step_count: 0,
            skipped: 0,
            first_moment: MlpGrads::zeros_like(net),
            second_moment: MlpGrads::zeros_like(net),
        }
    }
}

/// One adaptive-moment update of `net` from `grads`. Applies global-norm
/// gradient clipping when configured. A non-finite gradient skips the
/// update entirely (parameters and moments untouched) and bumps
/// `state.skipped`.
pub fn optimizer_step(net: &mut Mlp, grads: &MlpGrads, state: &mut OptimState) {
    if !grads.all_finite() {
        state.skipped += 1;
        return;
    }
    let mut clip_factor = 1.0;
    if let Some(bound) = state.gradient_clip {
        let norm = grads.l2_norm();
        if norm > bound {
            clip_factor = bound / norm;
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    let update = |param: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..param.len() {
            let gi = g[i] * clip_factor;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for l in 0..net.weights.len() {
        update(
            &mut net.weights[l],
            &grads.weights[l],
            &mut state.first_moment.weights[l],
            &mut state.second_moment.weights[l],
        );
        update(
            &mut net.biases[l],
            &grads.biases[l],
            &mut state.first_moment.biases[l],
            &mut state.second_moment.biases[l],
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_net_maps_everything_to_zero() {
        let mut net = Mlp::new(&[3, 4, 2], 1);
        for w in net.weights.iter_mut() {
            w.fill(0.0);
        }
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_identity_layer() {
        let mut net = Mlp::new(&[3, 3], 0);
        net.weights[0].fill(0.0);
        for i in 0..3 {
            net.weights[0][i * 3 + i] = 1.0;
        }
        let z = [0.3, -1.2, 5.0];
        assert_eq!(net.forward(&z), z.to_vec());
    }

    #[test]
    fn forward_is_deterministic_and_seeded() {
        let a = Mlp::new(&[2, 16, 16, 2], 99);
        let b = Mlp::new(&[2, 16, 16, 2], 99);
        let c = Mlp::new(&[2, 16, 16, 2], 100);
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        let z = [0.4, -0.7];
        assert_eq!(a.forward(&z), a.forward(&z));
    }

    #[test]
    fn param_count_matches_formula() {
        let net = Mlp::new(&[2, 32, 32, 4], 0);
        assert_eq!(net.param_count(), 3 * 32 + 33 * 32 + 33 * 4);
    }

    #[test]
    fn linear_weight_gradient_is_input_component() {
        // f(z) = W z, cotangent e_0: d<f,e_0>/dw_0j = z_j.
        let mut net = Mlp::new(&[3, 2], 5);
        net.weights[0].copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let z = [1.5, -2.5, 0.5];
        let (grads, input_grad) = net.backward(&z, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(grads.weights[0][0], 1.5);
        assert_relative_eq!(grads.weights[0][1], -2.5);
        assert_relative_eq!(grads.weights[0][2], 0.5);
        assert_eq!(&grads.weights[0][3..], &[0.0, 0.0, 0.0]);
        assert_relative_eq!(grads.biases[0][0], 1.0);
        // input gradient is the first row of W
        assert_relative_eq!(input_grad[0], 0.1);
        assert_relative_eq!(input_grad[1], 0.2);
        assert_relative_eq!(input_grad[2], 0.3);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = Mlp::new(&[2, 8, 2], 3);
        let (grads, input_grad) = net.backward(&[0.7, -0.1], &[0.0, 0.0]).unwrap();
        assert_eq!(grads.l2_norm(), 0.0);
        assert_eq!(input_grad, vec![0.0, 0.0]);
    }

    /// Central-difference oracle for <output, cotangent> over every
    /// parameter and input coordinate.
    fn finite_difference_check(net: &mut Mlp, z: &[f64], cot: &[f64]) -> f64 {
        let h = 1e-5;
        let (grads, input_grad) = net.backward(z, cot).unwrap();
        let mut max_rel = 0.0;
        let eval = |net: &Mlp, z: &[f64]| dot(&net.forward(z), cot);

        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        };

        for l in 0..net.weights.len() {
            for i in 0..net.weights[l].len() {
                let orig = net.weights[l][i];
                net.weights[l][i] = orig + h;
                let plus = eval(net, z);
                net.weights[l][i] = orig - h;
                let minus = eval(net, z);
                net.weights[l][i] = orig;
                check(grads.weights[l][i], plus, minus);
            }
            for i in 0..net.biases[l].len() {
                let orig = net.biases[l][i];
                net.biases[l][i] = orig + h;
                let plus = eval(net, z);
                net.biases[l][i] = orig - h;
                let minus = eval(net, z);
                net.biases[l][i] = orig;
                check(grads.biases[l][i], plus, minus);
            }
        }
        let mut zp = z.to_vec();
        for i in 0..z.len() {
            zp[i] = z[i] + h;
            let plus = eval(net, &zp);
            zp[i] = z[i] - h;
            let minus = eval(net, &zp);
            zp[i] = z[i];
            check(input_grad[i], plus, minus);
        }
        max_rel
    }

    #[test]
    fn gradients_match_central_differences_over_100_random_triples() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7777);
        let mut worst = 0.0;
        for trial in 0..100u64 {
            let sizes = [3, 8, 6, 2];
            let mut net = Mlp::new(&sizes, trial).with_scaling(
                &[0.1, -0.2, 0.3],
                &[1.5, 0.8, 1.1],
                &[2.0, 0.5],
            );
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cot: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rel = finite_difference_check(&mut net, &z, &cot);
            if rel > worst {
                worst = rel;
            }
        }
        assert!(worst < 1e-4, "max relative error {worst} vs finite differences");
    }

    #[test]
    fn quadratic_loss_decreases_under_adam() {
        // Minimize ||theta - theta*||^2 directly through optimizer_step by
        // feeding the gradient 2(theta - theta*).
        let mut net = Mlp::new(&[1, 4, 1], 2);
        let target = Mlp::new(&[1, 4, 1], 9);
        let mut state = OptimState::new(&net, 1e-3, None);
        let loss = |n: &Mlp| -> f64 {
            let mut acc = 0.0;
            for (a, b) in n.weights.iter().flatten().zip(target.weights.iter().flatten()) {
                acc += (a - b) * (a - b);
            }
            acc
        };
        let initial = loss(&net);
        let mut prev = initial;
        for _ in 0..100 {
            let mut grads = MlpGrads::zeros_like(&net);
            for l in 0..net.weights.len() {
                for i in 0..net.weights[l].len() {
                    grads.weights[l][i] = 2.0 * (net.weights[l][i] - target.weights[l][i]);
                }
            }
            optimizer_step(&mut net, &grads, &mut state);
            let now = loss(&net);
            assert!(now < prev, "loss must strictly decrease: {now} vs {prev}");
            prev = now;
        }
        assert!(prev < initial);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = Mlp::new(&[2, 6, 2], 4);
        let before = net.clone();
        let grads = MlpGrads::zeros_like(&net);
        let mut state = OptimState::new(&net, 1e-3, None);
        optimizer_step(&mut net, &grads, &mut state);
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut net = Mlp::new(&[1, 3, 1], 6);
        let before = net.clone();
        let mut grads = MlpGrads::zeros_like(&net);
        grads.weights[0][0] = f64::NAN;
        let mut state = OptimState::new(&net, 1e-3, None);
        optimizer_step(&mut net, &grads, &mut state);
        assert_eq!(net, before);
        assert_eq!(state.skipped, 1);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        // One parameter, gradient norm 10, clip 1.0: the applied update must
        // equal the update from the rescaled gradient of norm exactly 1.
        let mut a = Mlp::new(&[1, 1], 0);
        let mut b = a.clone();
        let mut ga = MlpGrads::zeros_like(&a);
        ga.weights[0][0] = 10.0;
        ga.biases[0][0] = 0.0;
        let mut gb = MlpGrads::zeros_like(&b);
        gb.weights[0][0] = 1.0;
        let mut sa = OptimState::new(&a, 1e-2, Some(1.0));
        let mut sb = OptimState::new(&b, 1e-2, None);
        optimizer_step(&mut a, &ga, &mut sa);
        optimizer_step(&mut b, &gb, &mut sb);
        assert_relative_eq!(a.weights[0][0], b.weights[0][0], max_relative = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Mlp::new(&[3, 4, 2], 1);
        assert!(net.try_forward(&[1.0, 2.0]).is_err());
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }
}
