//! Dense layers, activations, losses and the Adam optimizer shared by the
//! classifier heads. Gradients are computed by hand; every model exposes its
//! parameters as flat slices so one optimizer drives all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Flat views over a model's trainable parameters, in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Content hash of every parameter bit pattern.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn fill_zero(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }
}

/// Fully connected layer `y = W x + b`, `W` stored row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init with bound sqrt(6 / fan_in) (He, for rectifier inputs).
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt();
        Self::init_uniform(in_dim, out_dim, bound, rng)
    }

    pub fn init_uniform<R: Rng>(in_dim: usize, out_dim: usize, bound: f64, rng: &mut R) -> Self {
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl Params for Dense {
    fn params(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of dense layers with rectifiers between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        Mlp {
            layers: dims.windows(2).map(|d| Dense::init(d[0], d[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pop().unwrap_or_default()
    }

    /// Activations `[x, h1, .., logits]`.
    pub fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(acts.last().unwrap());
            acts.push(if i + 1 < self.layers.len() { relu(&z) } else { z });
        }
        acts
    }

    /// Backpropagates dL/dlogits through a trace from [`Mlp::trace`],
    /// accumulating into `grad`. Returns dL/dx.
    pub fn backward(&self, trace: &[Vec<f64>], dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dout.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                relu_backward(&trace[i + 1], &mut d);
            }
            d = self.layers[i].backward(&trace[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Scales every gradient entry by `k`.
pub fn scale_grads<M: Params>(grads: &mut M, k: f64) {
    for p in grads.params_mut() {
        p.iter_mut().for_each(|v| *v *= k);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Rectifier; NaN passes through so divergence stays visible.
pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect()
}

/// Zeroes `grad` where the rectifier output was inactive.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Binary cross-entropy on a logit, numerically stable. Returns (loss, dL/dz).
pub fn bce_with_logit(z: f64, target: bool) -> (f64, f64) {
    let y = if target { 1.0 } else { 0.0 };
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// Cross-entropy on logits for class `target`. Returns (loss, dL/dz).
pub fn softmax_cross_entropy(z: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut g = softmax(z);
    g[target] -= 1.0;
    (lse - z[target], g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step<M: Params>(&mut self, model: &mut M, grads: &M) {
        let grads = grads.params();
        let mut params = model.params_mut();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Central finite-difference gradient of `loss` with respect to every
/// parameter of `model`, in [`Params`] order.
pub fn numeric_gradient<M: Params + Clone>(model: &M, h: f64, loss: impl Fn(&M) -> f64) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (k, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.params()[k][i];
            work.params_mut()[k][i] = orig + h;
            let up = loss(&work);
            work.params_mut()[k][i] = orig - h;
            let down = loss(&work);
            work.params_mut()[k][i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, tiny).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Dense::init(4, 3, &mut rng);
        let x = [0.3, -1.2, 0.8, 0.05];
        let w = [0.7, -0.4, 1.1];
        let loss = |l: &Dense| dot(&l.forward(&x), &w);
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &w, &mut g);
        let num = numeric_gradient(&layer, 1e-6, loss);
        for (a, n) in g.params().iter().zip(&num) {
            assert!(relative_error(a, n) < 1e-8);
        }
        // dx = W^T w
        #[allow(clippy::needless_range_loop)]
        for i in 0..4 {
            let expect: f64 = (0..3).map(|o| layer.weight[o * 4 + i] * w[o]).sum();
            assert!((dx[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp = Mlp::new(&[5, 7, 6, 3], &mut rng);
        let x = [0.2, -0.7, 1.3, 0.4, -0.1];
        let targets = [true, false, true];
        let loss = |m: &Mlp| m.forward(&x).iter().zip(&targets).map(|(&z, &t)| bce_with_logit(z, t).0).sum::<f64>();
        let trace = mlp.trace(&x);
        let dz: Vec<f64> = trace[3].iter().zip(&targets).map(|(&z, &t)| bce_with_logit(z, t).1).collect();
        let mut g = mlp.zeros_like();
        mlp.backward(&trace, &dz, &mut g);
        let num = numeric_gradient(&mlp, 1e-6, loss);
        for (a, n) in g.params().iter().zip(&num) {
            assert!(relative_error(a, n) < 1e-6);
        }
    }

    #[test]
    fn losses() {
        let (l, g) = bce_with_logit(0.0, true);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l, _) = bce_with_logit(800.0, true);
        assert!(l.is_finite() && l < 1e-300);
        let (l, g) = softmax_cross_entropy(&[0.0, 0.0, 0.0], 1);
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Dense::init(3, 2, &mut rng);
        let before = layer.fingerprint();
        let mut grads = layer.zeros_like();
        grads.weight.iter_mut().for_each(|g| *g = 1.5);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut layer, &grads);
        }
        assert_eq!(layer.fingerprint(), before);
    }
}
