//! Small dense networks, Adam, and seeded initialization shared by the
//! learners. Everything is f64 and single-threaded so runs are reproducible
//! bit for bit.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Collapses the network to a single affine map; used by tests that
    /// construct exact weight matrices by hand.
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Two-layer perceptron: affine, activation, affine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

/// Gradients with the same shapes as [`Mlp`] parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    /// Xavier-uniform initialization from a seeded RNG.
    pub fn init(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let w1 = xavier(hidden, input, rng);
        let b1 = Array1::zeros(hidden);
        let w2 = xavier(output, hidden, rng);
        let b2 = Array1::zeros(output);
        Self { w1, b1, w2, b2, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let h = (self.w1.dot(&x) + &self.b1).mapv(|v| self.activation.apply(v));
        self.w2.dot(&h) + &self.b2
    }

    /// Forward pass retaining the hidden activation for backprop.
    pub fn forward_cached(&self, x: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let h = (self.w1.dot(&x) + &self.b1).mapv(|v| self.activation.apply(v));
        let y = self.w2.dot(&h) + &self.b2;
        (y, h)
    }

    /// Accumulate parameter gradients for one sample given the upstream
    /// gradient on the output; returns the gradient on the input.
    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        hidden: &Array1<f64>,
        out_grad: ArrayView1<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Array1<f64> {
        for (i, &g) in out_grad.iter().enumerate() {
            grads.b2[i] += g;
            for (j, &h) in hidden.iter().enumerate() {
                grads.w2[[i, j]] += g * h;
            }
        }
        let mut h_grad = self.w2.t().dot(&out_grad);
        for (j, g) in h_grad.iter_mut().enumerate() {
            *g *= self.activation.derivative_from_output(hidden[j]);
        }
        for (j, &g) in h_grad.iter().enumerate() {
            grads.b1[j] += g;
            for (k, &xi) in x.iter().enumerate() {
                grads.w1[[j, k]] += g * xi;
            }
        }
        self.w1.t().dot(&h_grad)
    }

    /// Batched forward over rows of `x`; returns `(output, hidden)`,
    /// one row per input row.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let mut h = x.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(|v| self.activation.apply(v));
        let mut y = h.dot(&self.w2.t());
        y += &self.b2;
        (y, h)
    }

    /// Batched counterpart of [`Self::backward`]: accumulates the summed
    /// parameter gradients over all rows and returns the per-row input
    /// gradients.
    pub fn backward_batch(
        &self,
        x: ArrayView2<'_, f64>,
        hidden: &Array2<f64>,
        out_grad: ArrayView2<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &out_grad.t(), hidden, 1.0, &mut grads.w2);
        grads.b2 += &out_grad.sum_axis(Axis(0));
        let mut h_grad = out_grad.dot(&self.w2);
        Zip::from(&mut h_grad)
            .and(hidden)
            .for_each(|g, &h| *g *= self.activation.derivative_from_output(h));
        general_mat_mul(1.0, &h_grad.t(), &x, 1.0, &mut grads.w1);
        grads.b1 += &h_grad.sum_axis(Axis(0));
        h_grad.dot(&self.w1)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

impl MlpGrads {
    pub fn scale(&mut self, factor: f64) {
        self.w1.mapv_inplace(|v| v * factor);
        self.b1.mapv_inplace(|v| v * factor);
        self.w2.mapv_inplace(|v| v * factor);
        self.b2.mapv_inplace(|v| v * factor);
    }

    pub fn grad_slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Adam optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state over a set of parameter tensors addressed by flat slices.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, tensor_sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (ti, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Cosine decay from `base` to 5% of it across the epoch budget. The L1
/// spectral losses have non-vanishing gradients near their optimum, so a
/// fixed rate stalls at an lr-sized error floor.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch as f64 / epochs.max(1) as f64;
    let floor = 0.05 * base;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_activation_composes_affine() {
        let mlp = Mlp {
            w1: array![[2.0, 0.0], [0.0, 3.0]],
            b1: array![1.0, -1.0],
            w2: array![[1.0, 1.0]],
            b2: array![0.5],
            activation: Activation::Identity,
        };
        let y = mlp.forward(array![1.0, 1.0].view());
        // (2*1+1) + (3*1-1) + 0.5 = 5.5
        assert!((y[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::init(3, 4, 2, Activation::Tanh, &mut rng);
        let x = array![0.3, -0.7, 1.1];
        let target = array![0.5, -0.2];

        // loss = 0.5 * ||y - target||^2
        let (y, h) = mlp.forward_cached(x.view());
        let out_grad = &y - &target;
        let mut grads = mlp.zero_grads();
        mlp.backward(x.view(), &h, out_grad.view(), &mut grads);

        let loss = |m: &Mlp| {
            let y = m.forward(x.view());
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let h_step = 1e-6;
        let analytic = grads.grad_slices().concat();
        let mut idx = 0;
        let n = mlp.num_params();
        for slot in 0..n {
            let base;
            {
                let mut slices = mlp.param_slices_mut();
                let mut k = slot;
                let mut s = 0;
                while k >= slices[s].len() {
                    k -= slices[s].len();
                    s += 1;
                }
                base = slices[s][k];
                slices[s][k] = base + h_step;
            }
            let up = loss(&mlp);
            {
                let mut slices = mlp.param_slices_mut();
                let mut k = slot;
                let mut s = 0;
                while k >= slices[s].len() {
                    k -= slices[s].len();
                    s += 1;
                }
                slices[s][k] = base - h_step;
            }
            let down = loss(&mlp);
            {
                let mut slices = mlp.param_slices_mut();
                let mut k = slot;
                let mut s = 0;
                while k >= slices[s].len() {
                    k -= slices[s].len();
                    s += 1;
                }
                slices[s][k] = base;
            }
            let fd = (up - down) / (2.0 * h_step);
            let rel = (analytic[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "param {slot}: {} vs {fd}", analytic[idx]);
            idx += 1;
        }
    }

    #[test]
    fn batch_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::init(5, 4, 3, Activation::Tanh, &mut rng);
        let x = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let og = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));

        let (y, h) = mlp.forward_batch(x.view());
        let mut batch_grads = mlp.zero_grads();
        let x_grad = mlp.backward_batch(x.view(), &h, og.view(), &mut batch_grads);

        let mut loop_grads = mlp.zero_grads();
        for r in 0..x.nrows() {
            let (yr, hr) = mlp.forward_cached(x.row(r));
            for k in 0..yr.len() {
                assert!((y[[r, k]] - yr[k]).abs() < 1e-12);
            }
            let xr = mlp.backward(x.row(r), &hr, og.row(r), &mut loop_grads);
            for k in 0..xr.len() {
                assert!((x_grad[[r, k]] - xr[k]).abs() < 1e-12);
            }
        }
        for (a, b) in batch_grads.grad_slices().concat().iter().zip(loop_grads.grad_slices().concat()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut x = vec![5.0f64; 3];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[3]);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut x], &[&g]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(5, 7, 3, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Mlp::init(5, 7, 3, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);
    }
}
