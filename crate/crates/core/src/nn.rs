//! Small dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use rectified-linear activations; the output layer is
//! linear. Parameters live in one flat vector so the optimizer can treat
//! them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations of one forward pass, input included.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::param_count(&sizes)).then_some(Self { sizes, params })
    }

    fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, biases)` slices of layer `l`; weights are row-major
    /// `outputs x inputs`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset = self.offset(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[offset..offset + n_in * n_out];
        let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        (w, b)
    }

    fn offset(&self, l: usize) -> usize {
        Self::param_count(&self.sizes[..=l])
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut acts = Activations::default();
        self.forward_cached(input, &mut acts);
        acts.layers.pop().unwrap()
    }

    pub fn forward_cached<'a>(&self, input: &[f64], acts: &'a mut Activations) -> &'a [f64] {
        debug_assert_eq!(input.len(), self.inputs());
        let n_layers = self.sizes.len() - 1;
        acts.layers.resize_with(n_layers + 1, Vec::new);
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(input);
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let n_in = self.sizes[l];
            let (prev, rest) = acts.layers.split_at_mut(l + 1);
            let x = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let hidden = l + 1 < n_layers;
            for (row, &bias) in w.chunks_exact(n_in).zip(b) {
                let z = bias + dot(row, x);
                out.push(if hidden { z.max(0.0) } else { z });
            }
        }
        acts.output()
    }

    /// Backpropagates `grad_out` (derivative of the loss with respect to the
    /// network output) through a cached forward pass. Parameter gradients are
    /// accumulated into `grads`; the gradient with respect to the input is
    /// returned.
    pub fn backward(&self, acts: &Activations, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let offset = self.offset(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &acts.layers[l];
            let (w, _) = self.layer(l);
            let (gw, gb) = grads[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut prev = vec![0.0; n_in];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                let row = &w[j * n_in..(j + 1) * n_in];
                let grow = &mut gw[j * n_in..(j + 1) * n_in];
                for k in 0..n_in {
                    grow[k] += d * x[k];
                    prev[k] += d * row[k];
                }
            }
            if l > 0 {
                // x is the post-ReLU activation of the previous layer.
                for (p, &a) in prev.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let input = [0.3, -1.2, 0.8];
        let mut acts = Activations::default();
        let out = net.forward_cached(&input, &mut acts).to_vec();
        // loss = out0 * 2 - out1
        let mut grads = vec![0.0; net.params().len()];
        let gin = net.backward(&acts, &[2.0, -1.0], &mut grads);

        let tape = Tape::new();
        let params: Vec<_> = net.params().iter().map(|&p| tape.var(p)).collect();
        let xs: Vec<_> = input.iter().map(|&v| tape.var(v)).collect();
        let mut layer_in = xs.clone();
        let mut offset = 0;
        for l in 0..3 {
            let (n_in, n_out) = (net.sizes()[l], net.sizes()[l + 1]);
            let mut next = Vec::new();
            for j in 0..n_out {
                let mut z = params[offset + n_in * n_out + j];
                for k in 0..n_in {
                    z = z + params[offset + j * n_in + k] * layer_in[k];
                }
                next.push(if l < 2 { z.relu() } else { z });
            }
            offset += n_in * n_out + n_out;
            layer_in = next;
        }
        assert!((layer_in[0].value() - out[0]).abs() < 1e-12);
        let loss = layer_in[0] * 2.0 - layer_in[1];
        let g = tape.backward(loss).unwrap();
        for (p, &gp) in params.iter().zip(&grads) {
            assert!((g.wrt(*p) - gp).abs() < 1e-12);
        }
        for (x, &gx) in xs.iter().zip(&gin) {
            assert!((g.wrt(*x) - gx).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn from_parts_checks_length() {
        assert!(Mlp::from_parts(vec![2, 3, 1], vec![0.0; 13]).is_some());
        assert!(Mlp::from_parts(vec![2, 3, 1], vec![0.0; 12]).is_none());
    }
}
