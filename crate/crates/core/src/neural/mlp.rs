//! Dense layers, LayerNorm and MLPs with hand-written reverse mode.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::num::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored row-major as `inputs x outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite limit");
        let weight = (0..inputs * outputs).map(|_| T::lit(dist.sample(rng))).collect();
        Self { inputs, outputs, weight, bias: vec![T::zero(); outputs] }
    }

    /// `out = x W + b` for `rows` rows of `x`.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out = self.product(x, rows);
        for row in out.chunks_exact_mut(self.outputs) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += *b);
        }
        out
    }

    /// `x W` without the bias.
    fn product(&self, x: &[T], rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.outputs];
        T::gemm(rows, self.inputs, self.outputs, x, (self.inputs, 1), &self.weight, (self.outputs, 1), &mut out, false);
        out
    }

    /// Bias broadcast to `rows` rows.
    pub fn bias_rows(&self, rows: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        out
    }

    /// Accumulates `dW += x^T dy` and `db += colsum(dy)`.
    pub fn accumulate_grads(&self, x: &[T], dy: &[T], rows: usize, grad: &mut Linear<T>) {
        T::gemm(self.inputs, rows, self.outputs, x, (1, self.inputs), dy, (self.outputs, 1), &mut grad.weight, true);
        accumulate_colsum(dy, self.outputs, &mut grad.bias);
    }

    /// `dx = dy W^T`.
    pub fn backward_input(&self, dy: &[T], rows: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); rows * self.inputs];
        T::gemm(rows, self.outputs, self.inputs, dy, (self.outputs, 1), &self.weight, (1, self.outputs), &mut dx, false);
        dx
    }
}

/// Sum with eight independent accumulators, which lets the compiler
/// vectorize short rows.
#[inline]
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] += f(c[k]);
        }
    }
    for (k, x) in chunks.remainder().iter().enumerate() {
        acc[k] += f(*x);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

pub(crate) fn accumulate_colsum<T: Real>(dy: &[T], cols: usize, out: &mut [T]) {
    for row in dy.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self { gamma: vec![T::one(); width], beta: vec![T::zero(); width] }
    }

    pub fn zeros(width: usize) -> Self {
        Self { gamma: vec![T::zero(); width], beta: vec![T::zero(); width] }
    }

    /// Normalizes `x` in place; the cache, when given, receives `xhat` and
    /// the inverse standard deviations.
    pub fn forward(&self, x: &mut [T], mut cache: Option<&mut LayerNormCache<T>>) {
        let w = self.gamma.len();
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_w = T::one() / T::lit(w as f64);
        if let Some(c) = cache.as_deref_mut() {
            c.xhat.clear();
            c.inv_std.clear();
            c.xhat.reserve(x.len());
            c.inv_std.reserve(x.len() / w.max(1));
        }
        for row in x.chunks_exact_mut(w) {
            self.normalize_row(row, eps, inv_w, cache.as_deref_mut());
        }
    }

    #[inline]
    fn normalize_row(&self, row: &mut [T], eps: T, inv_w: T, cache: Option<&mut LayerNormCache<T>>) {
        let mean = lane_sum(row, |v| v) * inv_w;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = lane_sum(row, |v| v * v) * inv_w;
        let inv_std = (var + eps).sqrt().recip();
        row.iter_mut().for_each(|v| *v *= inv_std);
        if let Some(c) = cache {
            c.inv_std.push(inv_std);
            c.xhat.extend_from_slice(row);
        }
        for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
            *v = *v * *g + *b;
        }
    }

    /// Consumes `dy`, returns the input gradient and accumulates parameter
    /// gradients.
    pub fn backward(&self, mut dy: Vec<T>, cache: &LayerNormCache<T>, grad: &mut LayerNorm<T>) -> Vec<T> {
        let w = self.gamma.len();
        let inv_w = T::one() / T::lit(w as f64);
        for (r, row) in dy.chunks_exact_mut(w).enumerate() {
            let xhat = &cache.xhat[r * w..(r + 1) * w];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for k in 0..w {
                grad.gamma[k] += row[k] * xhat[k];
                grad.beta[k] += row[k];
                let d = row[k] * self.gamma[k];
                row[k] = d;
                mean_d += d;
                mean_dx += d * xhat[k];
            }
            mean_d *= inv_w;
            mean_dx *= inv_w;
            let s = cache.inv_std[r];
            for k in 0..w {
                row[k] = s * (row[k] - mean_d - xhat[k] * mean_dx);
            }
        }
        dy
    }
}

/// Two ReLU hidden layers, a linear output and an optional trailing
/// LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: [Linear<T>; 3],
    pub norm: Option<LayerNorm<T>>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache<T> {
    rows: usize,
    /// Inputs of layers 0..3; layer 0's is empty when the caller computed
    /// its pre-activation.
    inputs: [Vec<T>; 3],
    norm: LayerNormCache<T>,
}

impl<T: Real> Mlp<T> {
    pub fn random(inputs: usize, hidden: usize, outputs: usize, layer_norm: bool, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::random(inputs, hidden, rng),
                Linear::random(hidden, hidden, rng),
                Linear::random(hidden, outputs, rng),
            ],
            norm: layer_norm.then(|| LayerNorm::new(outputs)),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize, layer_norm: bool) -> Self {
        Self {
            layers: [Linear::zeros(inputs, hidden), Linear::zeros(hidden, hidden), Linear::zeros(hidden, outputs)],
            norm: layer_norm.then(|| LayerNorm::zeros(outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[2].outputs
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        self.run(x, rows, true)
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, x: &[T], rows: usize) -> Vec<T> {
        self.run(x, rows, false).0
    }

    pub(crate) fn run(&self, x: &[T], rows: usize, keep: bool) -> (Vec<T>, MlpCache<T>) {
        let pre = self.layers[0].forward(x, rows);
        let (out, mut cache) = self.run_from_first(pre, rows, keep);
        if keep {
            cache.inputs[0] = x.to_vec();
        }
        (out, cache)
    }

    /// Continues from the first layer's pre-activation (bias included).
    pub fn forward_from_first(&self, pre: Vec<T>, rows: usize) -> (Vec<T>, MlpCache<T>) {
        self.run_from_first(pre, rows, true)
    }

    pub(crate) fn run_from_first(&self, mut pre: Vec<T>, rows: usize, keep: bool) -> (Vec<T>, MlpCache<T>) {
        let mut cache = MlpCache { rows, ..Default::default() };
        relu(&mut pre);
        let (l1, l2) = (&self.layers[1], &self.layers[2]);
        let mut h = l1.product(&pre, rows);
        for row in h.chunks_exact_mut(l1.outputs) {
            row.iter_mut().zip(&l1.bias).for_each(|(v, b)| *v = (*v + *b).max(T::zero()));
        }
        if keep {
            cache.inputs[1] = pre;
        }
        let mut out = l2.forward(&h, rows);
        if keep {
            cache.inputs[2] = h;
        }
        if let Some(norm) = &self.norm {
            norm.forward(&mut out, keep.then_some(&mut cache.norm));
        }
        (out, cache)
    }

    /// Backpropagates to the first layer's pre-activation. Gradients of
    /// layers 1, 2, the norm and layer 0's bias are accumulated.
    pub fn backward_to_first(&self, mut dy: Vec<T>, cache: &MlpCache<T>, grad: &mut Mlp<T>) -> Vec<T> {
        let rows = cache.rows;
        if let (Some(norm), Some(gn)) = (&self.norm, &mut grad.norm) {
            dy = norm.backward(dy, &cache.norm, gn);
        }
        self.layers[2].accumulate_grads(&cache.inputs[2], &dy, rows, &mut grad.layers[2]);
        let mut dh = self.layers[2].backward_input(&dy, rows);
        relu_mask(&mut dh, &cache.inputs[2]);
        self.layers[1].accumulate_grads(&cache.inputs[1], &dh, rows, &mut grad.layers[1]);
        let mut dpre = self.layers[1].backward_input(&dh, rows);
        relu_mask(&mut dpre, &cache.inputs[1]);
        accumulate_colsum(&dpre, self.layers[0].outputs, &mut grad.layers[0].bias);
        dpre
    }

    /// Full backward pass; returns the input gradient.
    pub fn backward(&self, dy: Vec<T>, cache: &MlpCache<T>, grad: &mut Mlp<T>) -> Vec<T> {
        let dpre = self.backward_to_first(dy, cache, grad);
        let first = &self.layers[0];
        T::gemm(
            first.inputs,
            cache.rows,
            first.outputs,
            &cache.inputs[0],
            (1, first.inputs),
            &dpre,
            (first.outputs, 1),
            &mut grad.layers[0].weight,
            true,
        );
        first.backward_input(&dpre, cache.rows)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        for (k, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.l{k}.w"), &l.weight);
            f(format!("{prefix}.l{k}.b"), &l.bias);
        }
        if let Some(n) = &self.norm {
            f(format!("{prefix}.ln.gamma"), &n.gamma);
            f(format!("{prefix}.ln.beta"), &n.beta);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T])) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.l{k}.w"), &mut l.weight);
            f(format!("{prefix}.l{k}.b"), &mut l.bias);
        }
        if let Some(n) = &mut self.norm {
            f(format!("{prefix}.ln.gamma"), &mut n.gamma);
            f(format!("{prefix}.ln.beta"), &mut n.beta);
        }
    }
}

fn relu<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes gradients where the (post-ReLU) activation is not positive.
fn relu_mask<T: Real>(d: &mut [T], activation: &[T]) {
    for (g, a) in d.iter_mut().zip(activation) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &[f64], coef: &[f64]) -> f64 {
        y.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::random(5, 8, 4, true, &mut rng);
        let rows = 3;
        let x: Vec<f64> = (0..rows * 5).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let coef: Vec<f64> = (0..rows * 4).map(|k| ((k * 13 % 7) as f64 - 3.0) * 0.5).collect();
        let (_, cache) = mlp.forward(&x, rows);
        let mut grad = Mlp::zeros(5, 8, 4, true);
        let dx = mlp.backward(coef.clone(), &cache, &mut grad);
        let h = 1e-6;
        let mut grads = Vec::new();
        grad.visit("g", &mut |_, g| grads.extend_from_slice(g));
        let mut k = 0;
        let mut params = Vec::new();
        mlp.visit("p", &mut |_, p| params.extend_from_slice(p));
        for idx in 0..params.len() {
            let bump = |delta: f64| {
                let mut m = mlp.clone();
                let mut c = 0;
                m.visit_mut("p", &mut |_, p| {
                    for v in p.iter_mut() {
                        if c == idx {
                            *v += delta;
                        }
                        c += 1;
                    }
                });
                loss(&m.forward(&x, rows).0, &coef)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grads[idx]);
            k += 1;
        }
        assert_eq!(k, grads.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&mlp.forward(&xp, rows).0, &coef) - loss(&mlp.forward(&xm, rows).0, &coef)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        mlp.layers[0].bias[0] = 0.0;
    }

    #[test]
    fn zero_mlp_outputs_beta() {
        let mut mlp = Mlp::<f32>::zeros(3, 4, 2, true);
        mlp.norm.as_mut().unwrap().beta = vec![0.5, -1.0];
        let (y, _) = mlp.forward(&[1.0, 2.0, 3.0], 1);
        assert_eq!(y, vec![0.5, -1.0]);
    }
}
