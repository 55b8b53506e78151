//! Two-layer perceptron `tanh(x·W1 + b1)·W2 + b2`, applied row-wise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{matmul_nt, matmul_tn, matmul_unchecked, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Hidden activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub hidden: Matrix,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    /// Gaussian first layer with variance `1/input`; the output layer is
    /// scaled by `output_gain` (zero gives an all-zero output layer).
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let s1 = (1.0 / input as f64).sqrt();
        let w1 = Matrix::from_fn(input, hidden, |_, _| {
            s1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let s2 = output_gain * (1.0 / hidden as f64).sqrt();
        let w2 = if output_gain == 0.0 {
            Matrix::zeros(hidden, output)
        } else {
            Matrix::from_fn(hidden, output, |_, _| {
                s2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
        };
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let mut hidden = matmul_unchecked(x, &self.w1);
        for i in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(i).iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
        }
        let mut out = matmul_unchecked(&hidden, &self.w2);
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.b2) {
                *o += b;
            }
        }
        (out, MlpCache { hidden })
    }

    /// Accumulates parameter gradients into `grad` and returns `d/dx`.
    pub fn backward(&self, x: &Matrix, cache: &MlpCache, d_out: &Matrix, grad: &mut Mlp) -> Matrix {
        let h = &cache.hidden;
        grad.w2.add_scaled(&matmul_tn(h, d_out), 1.0);
        for i in 0..d_out.rows() {
            for (g, d) in grad.b2.iter_mut().zip(d_out.row(i)) {
                *g += d;
            }
        }
        let mut d_pre = matmul_nt(d_out, &self.w2);
        for i in 0..d_pre.rows() {
            for (d, hv) in d_pre.row_mut(i).iter_mut().zip(h.row(i)) {
                *d *= 1.0 - hv * hv;
            }
        }
        grad.w1.add_scaled(&matmul_tn(x, &d_pre), 1.0);
        for i in 0..d_pre.rows() {
            for (g, d) in grad.b1.iter_mut().zip(d_pre.row(i)) {
                *g += d;
            }
        }
        matmul_nt(&d_pre, &self.w1)
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    /// Mutable views of every parameter, in a fixed order.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::init(3, 4, 2, 1.0, &mut rng);
        let x = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let weights = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let objective = |m: &Mlp, x: &Matrix| -> f64 {
            let y = m.forward(x);
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = mlp.forward_cached(&x);
        let mut grad = Mlp::zeros(3, 4, 2);
        let dx = mlp.backward(&x, &cache, &weights, &mut grad);

        let h = 1e-6;
        for group in 0..4 {
            for idx in 0..mlp.params()[group].len() {
                let mut plus = mlp.clone();
                plus.params_mut()[group][idx] += h;
                let mut minus = mlp.clone();
                minus.params_mut()[group][idx] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                assert!((fd - grad.params()[group][idx]).abs() < 1e-8);
            }
        }
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_output_layer_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(1, 3, 2, 0.0, &mut rng);
        mlp.b2 = vec![0.25, -1.0];
        let y = mlp.forward(&Matrix::from_rows(&[vec![0.7]]).unwrap());
        assert_eq!(y.data(), &[0.25, -1.0]);
    }
}
