//! Encoder-processor-decoder graph network and its exact gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{GraphBatch, NormStats, EMBEDDING_DIM};
use super::mlp::{Mlp, MlpCache};
use crate::error::{argument, Error, Result};
use crate::linalg::Vector;
use crate::material::MaterialKind;
use crate::num::Real;
use crate::resolution::ACCEL_SKIP_THRESHOLD;

pub const DEFAULT_RADIUS: f64 = 0.015;

/// Architecture descriptor stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub layers: usize,
    pub width: usize,
    pub radius: f64,
    pub feature_dim: usize,
}

impl Architecture {
    /// L = 10, width 128.
    pub fn full(dim: usize) -> Self {
        Self::new(dim, 10, 128)
    }

    /// L = 3, width 32: trainable on a CPU in minutes.
    pub fn desk(dim: usize) -> Self {
        Self::new(dim, 3, 32)
    }

    pub fn new(dim: usize, layers: usize, width: usize) -> Self {
        Self { dim, layers, width, radius: DEFAULT_RADIUS, feature_dim: GraphBatch::<f64>::feature_dim(dim) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorLayer<T> {
    pub edge: Mlp<T>,
    pub node: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateWeights<T> {
    pub arch: Architecture,
    pub stats: NormStats,
    pub node_encoder: Mlp<T>,
    pub edge_encoder: Mlp<T>,
    pub processor: Vec<ProcessorLayer<T>>,
    pub decoder: Mlp<T>,
    /// `MaterialKind::COUNT x EMBEDDING_DIM`, row-major.
    pub embedding: Vec<T>,
}

struct LayerCache<T> {
    edges_in: Vec<T>,
    nodes_in: Vec<T>,
    edge: MlpCache<T>,
    node: MlpCache<T>,
}

/// Intermediate values of a forward pass.
pub struct ForwardCache<T> {
    node_encoder: MlpCache<T>,
    edge_encoder: MlpCache<T>,
    layers: Vec<LayerCache<T>>,
    decoder: MlpCache<T>,
}

impl<T: Real> SurrogateWeights<T> {
    pub fn random(arch: Architecture, stats: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = arch.width;
        let node_encoder = Mlp::random(arch.feature_dim, w, w, true, &mut rng);
        let edge_encoder = Mlp::random(arch.dim + 1, w, w, true, &mut rng);
        let processor = (0..arch.layers)
            .map(|_| ProcessorLayer {
                edge: Mlp::random(3 * w, w, w, true, &mut rng),
                node: Mlp::random(2 * w, w, w, true, &mut rng),
            })
            .collect();
        let decoder = Mlp::random(w, w, arch.dim, false, &mut rng);
        let dist = Uniform::new(-1.0, 1.0).expect("valid range");
        let embedding = (0..MaterialKind::COUNT * EMBEDDING_DIM).map(|_| T::lit(dist.sample(&mut rng))).collect();
        Self { arch, stats, node_encoder, edge_encoder, processor, decoder, embedding }
    }

    /// All parameters zero (LayerNorm gains included).
    pub fn zeros(arch: Architecture, stats: NormStats) -> Self {
        let w = arch.width;
        Self {
            node_encoder: Mlp::zeros(arch.feature_dim, w, w, true),
            edge_encoder: Mlp::zeros(arch.dim + 1, w, w, true),
            processor: (0..arch.layers)
                .map(|_| ProcessorLayer { edge: Mlp::zeros(3 * w, w, w, true), node: Mlp::zeros(2 * w, w, w, true) })
                .collect(),
            decoder: Mlp::zeros(w, w, arch.dim, false),
            embedding: vec![T::zero(); MaterialKind::COUNT * EMBEDDING_DIM],
            arch,
            stats,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch.clone(), self.stats.clone())
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [T])) {
        self.node_encoder.visit("node_encoder", f);
        self.edge_encoder.visit("edge_encoder", f);
        for (k, l) in self.processor.iter().enumerate() {
            l.edge.visit(&format!("processor.{k}.edge"), f);
            l.node.visit(&format!("processor.{k}.node"), f);
        }
        self.decoder.visit("decoder", f);
        f("material_embedding".into(), &self.embedding);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [T])) {
        self.node_encoder.visit_mut("node_encoder", f);
        self.edge_encoder.visit_mut("edge_encoder", f);
        for (k, l) in self.processor.iter_mut().enumerate() {
            l.edge.visit_mut(&format!("processor.{k}.edge"), f);
            l.node.visit_mut(&format!("processor.{k}.node"), f);
        }
        self.decoder.visit_mut("decoder", f);
        f("material_embedding".into(), &mut self.embedding);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    /// Fails when the weights were built for another spatial dimension.
    pub fn ensure_dim(&self, dim: usize) -> Result<()> {
        if self.arch.dim != dim {
            return Err(Error::Incompatible(format!("weights are {}D, session is {dim}D", self.arch.dim)));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &GraphBatch<T>) -> Result<()> {
        if batch.dim != self.arch.dim {
            return Err(argument(format!("batch is {}D, weights are {}D", batch.dim, self.arch.dim)));
        }
        let w = GraphBatch::<T>::dynamic_width(batch.dim);
        if batch.node_features.len() != batch.nodes * w || batch.kinds.len() != batch.nodes {
            return Err(argument("node feature block has the wrong shape"));
        }
        if batch.kinds.iter().any(|&k| k >= MaterialKind::COUNT) {
            return Err(argument("unknown material kind"));
        }
        if batch.receivers.len() != batch.senders.len()
            || batch.edge_features.len() != batch.senders.len() * (batch.dim + 1)
            || batch.senders.iter().chain(&batch.receivers).any(|&i| i >= batch.nodes)
        {
            return Err(argument("edge arrays have inconsistent shapes"));
        }
        Ok(())
    }

    /// Normalized accelerations (`N x dim`, row-major) and the cache.
    pub fn forward_normalized(&self, batch: &GraphBatch<T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.run(batch, true)
    }

    fn run(&self, batch: &GraphBatch<T>, keep: bool) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let n = batch.nodes;
        let e = batch.edge_count();
        let w = self.arch.width;
        let dw = GraphBatch::<T>::dynamic_width(batch.dim);
        let d = self.arch.feature_dim;
        let mut node_input = Vec::with_capacity(n * d);
        for i in 0..n {
            node_input.extend_from_slice(&batch.node_features[i * dw..(i + 1) * dw]);
            let k = batch.kinds[i];
            node_input.extend_from_slice(&self.embedding[k * EMBEDDING_DIM..(k + 1) * EMBEDDING_DIM]);
        }
        let (mut h, node_encoder) = self.node_encoder.run(&node_input, n, keep);
        let (mut edges, edge_encoder) = self.edge_encoder.run(&batch.edge_features, e, keep);
        let mut layers = Vec::with_capacity(self.processor.len());
        for layer in &self.processor {
            let first = &layer.edge.layers[0];
            let block = w * w;
            let mut ps = vec![T::zero(); n * w];
            let mut pr = first.bias_rows(n);
            T::gemm(n, w, w, &h, (w, 1), &first.weight[block..2 * block], (w, 1), &mut ps, false);
            T::gemm(n, w, w, &h, (w, 1), &first.weight[2 * block..], (w, 1), &mut pr, true);
            let mut pre = Vec::with_capacity(e * w);
            for (&s, &r) in batch.senders.iter().zip(&batch.receivers) {
                let (a, b) = (&ps[s * w..(s + 1) * w], &pr[r * w..(r + 1) * w]);
                pre.extend(a.iter().zip(b).map(|(x, y)| *x + *y));
            }
            T::gemm(e, w, w, &edges, (w, 1), &first.weight[..block], (w, 1), &mut pre, true);
            let (messages, edge_cache) = layer.edge.run_from_first(pre, e, keep);
            let mut node_in = Vec::with_capacity(n * 2 * w);
            let mut agg = vec![T::zero(); n * w];
            for (k, &r) in batch.receivers.iter().enumerate() {
                let dst = &mut agg[r * w..(r + 1) * w];
                for (a, m) in dst.iter_mut().zip(&messages[k * w..(k + 1) * w]) {
                    *a += *m;
                }
            }
            for i in 0..n {
                node_in.extend_from_slice(&h[i * w..(i + 1) * w]);
                node_in.extend_from_slice(&agg[i * w..(i + 1) * w]);
            }
            let (update, node_cache) = layer.node.run(&node_in, n, keep);
            if keep {
                let edges_in = std::mem::take(&mut edges);
                let nodes_in = std::mem::take(&mut h);
                edges = edges_in.iter().zip(&messages).map(|(a, b)| *a + *b).collect();
                h = nodes_in.iter().zip(&update).map(|(a, b)| *a + *b).collect();
                layers.push(LayerCache { edges_in, nodes_in, edge: edge_cache, node: node_cache });
            } else {
                edges.iter_mut().zip(&messages).for_each(|(a, b)| *a += *b);
                h.iter_mut().zip(&update).for_each(|(a, b)| *a += *b);
            }
        }
        let (out, decoder) = self.decoder.run(&h, n, keep);
        Ok((out, ForwardCache { node_encoder, edge_encoder, layers, decoder }))
    }

    /// Per-node accelerations in domain units.
    pub fn forward(&self, batch: &GraphBatch<T>) -> Result<Vec<Vector<T>>> {
        let (out, _) = self.run(batch, false)?;
        Ok(self.denormalize(&out))
    }

    pub fn denormalize(&self, out: &[T]) -> Vec<Vector<T>> {
        let dim = self.arch.dim;
        out.chunks_exact(dim)
            .map(|row| {
                let mut v = Vector::zero();
                for a in 0..dim {
                    v[a] = row[a] * T::lit(self.stats.acc_std[a]) + T::lit(self.stats.acc_mean[a]);
                }
                v
            })
            .collect()
    }

    pub fn normalize_accels(&self, accels: &[Vector<T>]) -> Vec<T> {
        let dim = self.arch.dim;
        let mut out = Vec::with_capacity(accels.len() * dim);
        for a in accels {
            for k in 0..dim {
                out.push((a[k] - T::lit(self.stats.acc_mean[k])) / T::lit(self.stats.acc_std[k]));
            }
        }
        out
    }

    /// Gradient of every parameter given `d loss / d normalized output`.
    pub fn backward(&self, batch: &GraphBatch<T>, cache: &ForwardCache<T>, d_out: Vec<T>) -> SurrogateWeights<T> {
        let mut grad = self.zeros_like();
        let n = batch.nodes;
        let e = batch.edge_count();
        let w = self.arch.width;
        let block = w * w;
        let mut dh = self.decoder.backward(d_out, &cache.decoder, &mut grad.decoder);
        let mut de = vec![T::zero(); e * w];
        for (l, layer) in self.processor.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let g = &mut grad.processor[l];
            let d_node_in = layer.node.backward(dh.clone(), &lc.node, &mut g.node);
            let mut dagg = vec![T::zero(); n * w];
            for i in 0..n {
                let row = &d_node_in[i * 2 * w..(i + 1) * 2 * w];
                for c in 0..w {
                    dh[i * w + c] += row[c];
                }
                dagg[i * w..(i + 1) * w].copy_from_slice(&row[w..]);
            }
            let mut dm = de.clone();
            for (k, &r) in batch.receivers.iter().enumerate() {
                for c in 0..w {
                    dm[k * w + c] += dagg[r * w + c];
                }
            }
            let dpre = layer.edge.backward_to_first(dm, &lc.edge, &mut g.edge);
            let first = &layer.edge.layers[0];
            let gw = &mut g.edge.layers[0].weight;
            T::gemm(w, e, w, &lc.edges_in, (1, w), &dpre, (w, 1), &mut gw[..block], true);
            T::gemm(e, w, w, &dpre, (w, 1), &first.weight[..block], (1, w), &mut de, true);
            let mut dps = vec![T::zero(); n * w];
            let mut dpr = vec![T::zero(); n * w];
            for (k, (&s, &r)) in batch.senders.iter().zip(&batch.receivers).enumerate() {
                for c in 0..w {
                    let v = dpre[k * w + c];
                    dps[s * w + c] += v;
                    dpr[r * w + c] += v;
                }
            }
            T::gemm(w, n, w, &lc.nodes_in, (1, w), &dps, (w, 1), &mut gw[block..2 * block], true);
            T::gemm(w, n, w, &lc.nodes_in, (1, w), &dpr, (w, 1), &mut gw[2 * block..], true);
            T::gemm(n, w, w, &dps, (w, 1), &first.weight[block..2 * block], (1, w), &mut dh, true);
            T::gemm(n, w, w, &dpr, (w, 1), &first.weight[2 * block..], (1, w), &mut dh, true);
        }
        self.edge_encoder.backward(de, &cache.edge_encoder, &mut grad.edge_encoder);
        let dx = self.node_encoder.backward(dh, &cache.node_encoder, &mut grad.node_encoder);
        let d = self.arch.feature_dim;
        let off = d - EMBEDDING_DIM;
        for i in 0..n {
            let k = batch.kinds[i];
            for c in 0..EMBEDDING_DIM {
                grad.embedding[k * EMBEDDING_DIM + c] += dx[i * d + off + c];
            }
        }
        grad
    }

    /// Relative acceleration error in normalized space and its gradient.
    pub fn loss_and_gradients(
        &self,
        batch: &GraphBatch<T>,
        targets: &[Vector<T>],
    ) -> Result<(T, SurrogateWeights<T>)> {
        if targets.len() != batch.nodes {
            return Err(argument(format!("{} targets for {} nodes", targets.len(), batch.nodes)));
        }
        let (out, cache) = self.forward_normalized(batch)?;
        let y = self.normalize_accels(targets);
        let (loss, d_out) = relative_loss(&out, &y, self.arch.dim)?;
        Ok((loss, self.backward(batch, &cache, d_out)))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, batch: &GraphBatch<T>, targets: &[Vector<T>]) -> Result<T> {
        let (out, _) = self.run(batch, false)?;
        let y = self.normalize_accels(targets);
        Ok(relative_loss(&out, &y, self.arch.dim)?.0)
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> SurrogateWeights<U> {
        let mut flat = Vec::new();
        self.visit(&mut |_, p| flat.extend(p.iter().map(|v| U::lit(v.as_f64()))));
        let mut out = SurrogateWeights::<U>::zeros(self.arch.clone(), self.stats.clone());
        let mut at = 0;
        out.visit_mut(&mut |_, p| {
            p.copy_from_slice(&flat[at..at + p.len()]);
            at += p.len();
        });
        out
    }
}

/// Mean over particles of `|yhat - y| / |y|`, skipping negligible targets.
pub(crate) fn relative_loss<T: Real>(out: &[T], y: &[T], dim: usize) -> Result<(T, Vec<T>)> {
    let mut kept = 0usize;
    let mut total = T::zero();
    let mut grad = vec![T::zero(); out.len()];
    let skip = T::lit(ACCEL_SKIP_THRESHOLD);
    let rows: Vec<(T, T)> = out
        .chunks_exact(dim)
        .zip(y.chunks_exact(dim))
        .map(|(o, t)| {
            let nt = t.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let nd = o.iter().zip(t).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>().sqrt();
            (nt, nd)
        })
        .collect();
    for &(nt, nd) in &rows {
        if nt >= skip {
            kept += 1;
            total += nd / nt;
        }
    }
    if kept == 0 {
        return Err(Error::UndefinedMetric("all target accelerations are zero".into()));
    }
    let inv_k = T::one() / T::lit(kept as f64);
    for (i, &(nt, nd)) in rows.iter().enumerate() {
        if nt < skip || nd == T::zero() {
            continue;
        }
        let s = inv_k / (nd * nt);
        for a in 0..dim {
            grad[i * dim + a] = (out[i * dim + a] - y[i * dim + a]) * s;
        }
    }
    Ok((total * inv_k, grad))
}
