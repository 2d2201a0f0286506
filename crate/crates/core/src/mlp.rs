//! One-hidden-layer perceptron `F: p_norm -> xi` with `tanh` units.
//!
//! Weights live in a single flat buffer: the hidden layer first, as an
//! `(n_in + 1) x n_hidden` row-major block whose last row holds the biases,
//! then the output layer as an `(n_hidden + 1) x n_out` block laid out the
//! same way. Optimizers treat the buffer as one vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 30;

#[inline]
pub fn sigma(e: f64) -> f64 {
    e.tanh()
}

#[inline]
pub fn sigma_prime(e: f64) -> f64 {
    let t = e.tanh();
    1.0 - t * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    n_in: usize,
    n_hidden: usize,
    n_out: usize,
    weights: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        let len = (n_in + 1) * n_hidden + (n_hidden + 1) * n_out;
        Self {
            n_in,
            n_hidden,
            n_out,
            weights: vec![0.0; len],
        }
    }

    /// Every weight i.i.d. uniform on `[-1, 1]`.
    pub fn init_weights(n_in: usize, n_hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut params = Self::zeros(n_in, n_hidden, n_out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut params.weights {
            *w = rng.gen_range(-1.0..=1.0);
        }
        params
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn output_start(&self) -> usize {
        (self.n_in + 1) * self.n_hidden
    }

    /// Flat index of hidden weight from input `l` (bias at `l == n_in`) to unit `k`.
    #[inline]
    pub fn hidden_index(&self, l: usize, k: usize) -> usize {
        l * self.n_hidden + k
    }

    /// Flat index of output weight from hidden unit `l` (bias at `l == n_hidden`) to output `k`.
    #[inline]
    pub fn output_index(&self, l: usize, k: usize) -> usize {
        self.output_start() + l * self.n_out + k
    }

    pub fn hidden_weight(&self, l: usize, k: usize) -> f64 {
        self.weights[self.hidden_index(l, k)]
    }

    pub fn output_weight(&self, l: usize, k: usize) -> f64 {
        self.weights[self.output_index(l, k)]
    }

    pub fn hidden_block(&self) -> &[f64] {
        &self.weights[..self.output_start()]
    }

    pub fn output_block(&self) -> &[f64] {
        &self.weights[self.output_start()..]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn forward(&self, p_norm: &[f64]) -> ForwardTrace {
        assert_eq!(p_norm.len(), self.n_in, "input dimension mismatch");
        let mut hidden_pre = vec![0.0; self.n_hidden];
        for (k, e) in hidden_pre.iter_mut().enumerate() {
            let mut acc = self.hidden_weight(self.n_in, k);
            for (l, x) in p_norm.iter().enumerate() {
                acc += self.hidden_weight(l, k) * x;
            }
            *e = acc;
        }
        let hidden_act: Vec<f64> = hidden_pre.iter().map(|&e| sigma(e)).collect();
        let mut output_pre = vec![0.0; self.n_out];
        for (k, e) in output_pre.iter_mut().enumerate() {
            let mut acc = self.output_weight(self.n_hidden, k);
            for (l, y) in hidden_act.iter().enumerate() {
                acc += self.output_weight(l, k) * y;
            }
            *e = acc;
        }
        let output_act = output_pre.iter().map(|&e| sigma(e)).collect();
        ForwardTrace {
            input: p_norm.to_vec(),
            hidden_pre,
            hidden_act,
            output_pre,
            output_act,
        }
    }

    /// `xi = F(p_norm)` without keeping intermediate values.
    pub fn evaluate(&self, p_norm: &[f64]) -> Vec<f64> {
        self.forward(p_norm).output_act
    }

    pub fn evaluate_batch<'a, I>(&self, inputs: I) -> Vec<Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        inputs.into_iter().map(|p| self.evaluate(p)).collect()
    }

    /// Adds to `grad` the weight gradient of a loss whose derivative with
    /// respect to this sample's outputs is `d_out`.
    pub fn backprop_into(&self, trace: &ForwardTrace, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.weights.len());
        let delta_out: Vec<f64> = d_out
            .iter()
            .zip(&trace.output_pre)
            .map(|(g, &e)| g * sigma_prime(e))
            .collect();
        for (l, &y) in trace
            .hidden_act
            .iter()
            .chain(std::iter::once(&1.0))
            .enumerate()
        {
            for (k, d) in delta_out.iter().enumerate() {
                grad[self.output_index(l, k)] += d * y;
            }
        }
        for m in 0..self.n_hidden {
            let back: f64 = delta_out
                .iter()
                .enumerate()
                .map(|(k, d)| self.output_weight(m, k) * d)
                .sum();
            let delta = back * sigma_prime(trace.hidden_pre[m]);
            if delta == 0.0 {
                continue;
            }
            for (l, &x) in trace
                .input
                .iter()
                .chain(std::iter::once(&1.0))
                .enumerate()
            {
                grad[self.hidden_index(l, m)] += delta * x;
            }
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            version: ModelDocument::VERSION,
            activation: "tanh".to_string(),
            n_in: self.n_in,
            n_hidden: self.n_hidden,
            n_out: self.n_out,
            w_hidden: self.hidden_block().to_vec(),
            w_output: self.output_block().to_vec(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.version != ModelDocument::VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model version {}",
                doc.version
            )));
        }
        if doc.activation != "tanh" {
            return Err(Error::InvalidArgument(format!(
                "unsupported activation {}",
                doc.activation
            )));
        }
        if doc.w_hidden.len() != (doc.n_in + 1) * doc.n_hidden
            || doc.w_output.len() != (doc.n_hidden + 1) * doc.n_out
        {
            return Err(Error::InvalidArgument("weight array shape mismatch".into()));
        }
        let mut weights = doc.w_hidden;
        weights.extend(doc.w_output);
        let params = Self {
            n_in: doc.n_in,
            n_hidden: doc.n_hidden,
            n_out: doc.n_out,
            weights,
        };
        if !params.is_finite() {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Serialized network: layer shapes plus row-major weight arrays with the
/// bias row last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    pub activation: String,
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub w_hidden: Vec<f64>,
    pub w_output: Vec<f64>,
}

impl ModelDocument {
    pub const VERSION: u32 = 1;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden_act: Vec<f64>,
    pub output_pre: Vec<f64>,
    pub output_act: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn init_is_uniform_on_unit_interval() {
        let a = NetworkParams::init_weights(3, 30, 2, 7);
        assert!(a.weights().iter().all(|w| (-1.0..=1.0).contains(w)));
        assert_eq!(a, NetworkParams::init_weights(3, 30, 2, 7));
        assert_ne!(a, NetworkParams::init_weights(3, 30, 2, 8));
        assert_eq!(a.n_weights(), 4 * 30 + 31 * 2);
    }

    #[test]
    fn init_mean_is_centered() {
        // 10^4 draws: the sample mean of U[-1, 1] has sigma = 1/sqrt(3e4).
        let p = NetworkParams::init_weights(3, 2000, 2, 11);
        let w = &p.weights()[..10_000];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 / (3.0e4f64).sqrt());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetworkParams::zeros(3, 30, 2);
        assert_eq!(p.evaluate(&[0.3, -0.5, 0.8]), vec![0.0, 0.0]);
    }

    #[test]
    fn single_hidden_unit_by_hand() {
        // hidden: e = 0.5*0.2 - 1.0*0.4 + 0.3*(-0.6) + 0.1 = -0.38
        // output: e_k = w_k * tanh(-0.38) + b_k
        let mut p = NetworkParams::zeros(3, 1, 2);
        let w = [0.5, -1.0, 0.3, 0.1];
        for (l, v) in w.iter().enumerate() {
            let i = p.hidden_index(l, 0);
            p.weights_mut()[i] = *v;
        }
        let outs = [(0.7, -0.2), (-1.5, 0.05)];
        for (k, (wk, bk)) in outs.iter().enumerate() {
            let i = p.output_index(0, k);
            p.weights_mut()[i] = *wk;
            let i = p.output_index(1, k);
            p.weights_mut()[i] = *bk;
        }
        let trace = p.forward(&[0.2, 0.4, -0.6]);
        assert_abs_diff_eq!(trace.hidden_pre[0], -0.38, epsilon = 1e-15);
        let h = (-0.38f64).tanh();
        assert_abs_diff_eq!(trace.output_act[0], (0.7 * h - 0.2).tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(trace.output_act[1], (-1.5 * h + 0.05).tanh(), epsilon = 1e-15);
    }

    #[test]
    fn evaluate_matches_forward_and_batch() {
        let p = NetworkParams::init_weights(3, 30, 2, 3);
        let xs = [[0.1, 0.2, 0.3], [-0.8, 0.8, 0.0], [0.5, -0.5, 0.25]];
        let batch = p.evaluate_batch(xs.iter().map(|x| x.as_slice()));
        for (x, b) in xs.iter().zip(&batch) {
            assert_eq!(&p.forward(x).output_act, b);
            assert_eq!(&p.evaluate(x), b);
        }
    }

    #[test]
    fn trace_activations_are_tanh_of_preactivations() {
        let p = NetworkParams::init_weights(3, 30, 2, 5);
        let t = p.forward(&[0.4, -0.1, 0.7]);
        for (a, e) in t.hidden_act.iter().zip(&t.hidden_pre) {
            assert_eq!(*a, e.tanh());
        }
        for (a, e) in t.output_act.iter().zip(&t.output_pre) {
            assert_eq!(*a, e.tanh());
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        // Loss L = sum_k c_k * xi_k, so dL/dxi = c.
        let p = NetworkParams::init_weights(3, 5, 2, 9);
        let x = [0.3, -0.6, 0.1];
        let c = [0.7, -1.3];
        let loss = |q: &NetworkParams| -> f64 {
            q.evaluate(&x).iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; p.n_weights()];
        p.backprop_into(&p.forward(&x), &c, &mut grad);
        let h = 1e-6;
        for i in 0..p.n_weights() {
            let mut plus = p.clone();
            plus.weights_mut()[i] += h;
            let mut minus = p.clone();
            minus.weights_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = NetworkParams::init_weights(3, 30, 2, 1);
        let text = p.to_json().unwrap();
        assert_eq!(NetworkParams::from_json(&text).unwrap(), p);
        let mut doc = p.to_document();
        doc.w_output.pop();
        assert!(NetworkParams::from_document(doc).is_err());
        let mut doc = p.to_document();
        doc.version = 99;
        assert!(NetworkParams::from_document(doc).is_err());
    }

    fn frobenius(block: &[f64], cols: usize, rows_without_bias: usize) -> f64 {
        block[..rows_without_bias * cols]
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    proptest! {
        #[test]
        fn sigma_properties(e in -20.0..20.0f64) {
            prop_assert!(sigma(e).abs() < 1.0 || e.abs() > 18.0);
            prop_assert!((sigma(-e) + sigma(e)).abs() < 1e-15);
            prop_assert!(sigma_prime(e) >= 0.0);
            prop_assert!(sigma_prime(e) > 0.0 || e.abs() > 18.0);
        }

        #[test]
        fn outputs_bounded_and_lipschitz(
            seed in 0u64..1000,
            x in proptest::array::uniform3(-0.8..0.8f64),
            d in proptest::array::uniform3(-1e-4..1e-4f64),
        ) {
            let p = NetworkParams::init_weights(3, 30, 2, seed);
            let a = p.evaluate(&x);
            prop_assert!(a.iter().all(|v| v.abs() < 1.0));
            let y = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
            let b = p.evaluate(&y);
            let dist_out = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let dist_in = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let lip = frobenius(p.hidden_block(), 30, 3) * frobenius(p.output_block(), 2, 30);
            prop_assert!(dist_out <= lip * dist_in + 1e-15);
        }
    }
}
