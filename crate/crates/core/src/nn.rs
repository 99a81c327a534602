//! Dense tanh networks with hand-written reverse mode, and Adam.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in, out]`, so a batch `X [B, in]` maps to `X·W + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Fully connected network; tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Post-activation values of every layer, input first.
#[derive(Debug, Clone)]
pub struct DenseCache {
    acts: Vec<Array2<f64>>,
}

impl DenseCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }
}

impl Dense {
    /// Glorot-normal weights, zero biases.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("network widths must have >= 2 positive entries, got {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] + w[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                Layer {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| normal.sample(rng)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { widths: widths.to_vec(), layers })
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Layer { w: Array2::zeros((w[0], w[1])), b: Array1::zeros(w[1]) })
            .collect();
        Self { widths: widths.to_vec(), layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w);
            z += &layer.b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> DenseCache {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&layer.w);
            z += &layer.b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        DenseCache { acts }
    }

    /// Accumulates `∂L/∂θ` into `grads` given `dout = ∂L/∂output`.
    pub fn backward(&self, cache: &DenseCache, dout: Array2<f64>, grads: &mut Dense) {
        let last = self.layers.len() - 1;
        let mut d = dout;
        for k in (0..self.layers.len()).rev() {
            if k < last {
                // tanh' = 1 − tanh²
                ndarray::Zip::from(&mut d).and(&cache.acts[k + 1]).for_each(|g, &a| *g *= 1.0 - a * a);
            }
            let a_in = &cache.acts[k];
            grads.layers[k].w += &a_in.t().dot(&d);
            grads.layers[k].b += &d.sum_axis(Axis(0));
            if k > 0 {
                d = d.dot(&self.layers[k].w.t());
            }
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect()
    }

    /// Widens the output layer to `new_out`, keeping existing columns
    /// and zero-filling the new ones.
    pub fn widen_output(&mut self, new_out: usize) {
        let l = self.layers.last_mut().unwrap();
        let (inp, out) = l.w.dim();
        assert!(new_out >= out);
        let mut w = Array2::zeros((inp, new_out));
        w.slice_mut(s![.., ..out]).assign(&l.w);
        let mut b = Array1::zeros(new_out);
        b.slice_mut(s![..out]).assign(&l.b);
        l.w = w;
        l.b = b;
        *self.widths.last_mut().unwrap() = new_out;
    }
}

/// Anything exposing its parameters as flat slices in a fixed order.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "parameter vector length mismatch");
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for Dense {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.slices_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn update<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.param_slices_mut().into_iter().zip(grads.param_slices()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Dense, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let o = net.forward(x.view());
        (&o - y).mapv(|v| v * v).sum() / o.len() as f64
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Dense::new(&[2, 7, 5, 3], &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.7).sin());
        let y = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f64 * 0.1);
        let cache = net.forward_cached(x.view());
        let dout = (cache.output() - &y) * (2.0 / y.len() as f64);
        let mut g = net.zeros_like();
        net.backward(&cache, dout, &mut g);
        let gflat = g.flat_params();
        let mut p = net.flat_params();
        for k in (0..p.len()).step_by(5) {
            let h = 1e-6;
            let orig = p[k];
            p[k] = orig + h;
            net.set_flat_params(&p);
            let lp = loss(&net, &x, &y);
            p[k] = orig - h;
            net.set_flat_params(&p);
            let lm = loss(&net, &x, &y);
            p[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gflat[k]).abs() <= 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", gflat[k]);
        }
        net.set_flat_params(&p);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut net = Dense::zeros(&[1, 1]);
        let target = array![[3.0]];
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let x = array![[1.0]];
        for _ in 0..3000 {
            let cache = net.forward_cached(x.view());
            let d = (cache.output() - &target) * 2.0;
            let mut g = net.zeros_like();
            net.backward(&cache, d, &mut g);
            adam.update(&mut net, &g, 1e-2);
        }
        assert!((net.forward(x.view())[[0, 0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn widening_keeps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Dense::new(&[2, 4, 3], &mut rng).unwrap();
        let x = array![[0.1, -0.2], [0.5, 0.3]];
        let before = net.forward(x.view());
        net.widen_output(6);
        let after = net.forward(x.view());
        assert_eq!(after.slice(s![.., ..3]), before);
        assert!(after.slice(s![.., 3..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Dense::new(&[2], &mut rng).is_err());
        assert!(Dense::new(&[2, 0, 1], &mut rng).is_err());
    }
}
