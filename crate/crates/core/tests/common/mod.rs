//! Reference implementations used as test oracles. Everything here is
//! written directly from the definitions in f64 and shares no code with the
//! library kernels.

#![allow(dead_code)]

use polar_core::model::{MlpBlock, Model};
use polar_core::tensor::{HeadTensor, KvCache, Matrix, NeuronMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `A (m×k) · B (k×n)` in f64.
pub fn matmul_f64(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|t| a.get(i, t) as f64 * b.get(t, j) as f64).sum())
                .collect()
        })
        .collect()
}

/// Softmax attention of one query over `n` keys/values (row-major `n × d`).
pub fn attention_f64(q: &[f32], keys: &[f32], values: &[f32], d: usize, scale: f64) -> Vec<f64> {
    let n = keys.len() / d;
    let scores: Vec<f64> = (0..n)
        .map(|i| scale * (0..d).map(|t| q[t] as f64 * keys[i * d + t] as f64).sum::<f64>())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..d)
        .map(|t| (0..n).map(|i| w[i] * values[i * d + t] as f64).sum::<f64>() / z)
        .collect()
}

/// Cache with `lens[b]` random positions per sequence and capacity `cap`.
pub fn random_cache(r: &mut ChaCha8Rng, kv_heads: usize, lens: &[usize], cap: usize, d: usize) -> KvCache {
    let mut cache = KvCache::new(lens.len(), kv_heads, cap, d);
    for (b, &len) in lens.iter().enumerate() {
        for _ in 0..len {
            let k: Vec<f32> = (0..kv_heads * d).map(|_| r.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..kv_heads * d).map(|_| r.random_range(-1.0..1.0)).collect();
            cache.append(b, &k, &v).unwrap();
        }
    }
    cache
}

pub fn random_heads(r: &mut ChaCha8Rng, batch: usize, heads: usize, d: usize) -> HeadTensor {
    let data = (0..batch * heads * d).map(|_| r.random_range(-1.0..1.0)).collect();
    HeadTensor::new(batch, heads, d, data).unwrap()
}

/// Top-`k` by full sort: descending score, ties to the lower index, result
/// ascending.
pub fn topk_by_sort(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

/// Micro-averaged recall of top-`k` by sort, straight from the definition.
pub fn recall_by_sort(logits: &Matrix, labels: &[Vec<bool>], k: usize) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, lab) in labels.iter().enumerate() {
        let top = topk_by_sort(logits.row(i), k.min(logits.cols()));
        hit += top.iter().filter(|&&j| lab[j]).count();
        total += lab.iter().filter(|&&a| a).count();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn layer_norm_f64(x: &[f64], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * *g as f64 + *b as f64)
        .collect()
}

/// `x · W + b` where neuron `j` of `w` is column `j` of `W`.
fn linear_f64(x: &[f64], w: &NeuronMatrix, b: &[f32]) -> Vec<f64> {
    (0..w.neurons())
        .map(|j| w.neuron(j).iter().zip(x).map(|(a, v)| *a as f64 * v).sum::<f64>() + b[j] as f64)
        .collect()
}

/// Full causal forward pass of `model` over one sequence, in f64, returning
/// the next-token logits at every position. Written from the architecture
/// definition: pre-norm blocks, learned positions, tied output head.
pub fn reference_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &model.config;
    let (d, h, dh, g) = (c.model_dim, c.heads, c.model_dim / c.heads, c.heads / c.kv_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|i| model.embed.neuron(t as usize)[i] as f64 + model.positions.get(p, i) as f64)
                .collect()
        })
        .collect();
    for layer in &model.layers {
        let xn: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm_f64(x, &layer.ln1.gamma, &layer.ln1.beta)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|x| linear_f64(x, &layer.attn.q.w, &layer.attn.q.b)).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|x| linear_f64(x, &layer.attn.k.w, &layer.attn.k.b)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|x| linear_f64(x, &layer.attn.v.w, &layer.attn.v.b)).collect();
        for t in 0..xs.len() {
            let mut heads = vec![0.0; d];
            for hi in 0..h {
                let kv = (hi / g) * dh;
                let s: Vec<f64> = (0..=t)
                    .map(|u| scale * (0..dh).map(|e| q[t][hi * dh + e] * k[u][kv + e]).sum::<f64>())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for e in 0..dh {
                    heads[hi * dh + e] = (0..=t).map(|u| w[u] * v[u][kv + e]).sum::<f64>() / z;
                }
            }
            let o = linear_f64(&heads, &layer.attn.o.w, &layer.attn.o.b);
            xs[t].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        for x in xs.iter_mut() {
            let xn = layer_norm_f64(x, &layer.ln2.gamma, &layer.ln2.beta);
            let y: Vec<f64> = match &layer.mlp {
                MlpBlock::Relu(m) => {
                    let hid: Vec<f64> = linear_f64(&xn, &m.w1, &m.b1).into_iter().map(|v| v.max(0.0)).collect();
                    (0..d)
                        .map(|o| m.b2[o] as f64 + hid.iter().enumerate().map(|(j, a)| a * m.w2.neuron(j)[o] as f64).sum::<f64>())
                        .collect()
                }
                MlpBlock::SwiGlu(s) => {
                    let zero = vec![0.0; s.gate.neurons()];
                    let gate = linear_f64(&xn, &s.gate, &zero);
                    let up = linear_f64(&xn, &s.up, &zero);
                    (0..d)
                        .map(|o| {
                            (0..gate.len())
                                .map(|j| gate[j] / (1.0 + (-gate[j]).exp()) * up[j] * s.down.neuron(j)[o] as f64)
                                .sum::<f64>()
                        })
                        .collect()
                }
            };
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
    }
    let zero = vec![0.0; c.vocab];
    xs.iter()
        .map(|x| linear_f64(&layer_norm_f64(x, &model.final_norm.gamma, &model.final_norm.beta), &model.embed, &zero))
        .collect()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean elementwise BCE-with-logits of a two-layer router, in f64 from the
/// flat neuron-major parameter blocks `[w_in, b_in, w_out, b_out]`.
pub fn mlp_router_loss_f64(p: &[Vec<f64>], d: usize, h: usize, out: usize, x: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let hid: Vec<f64> = (0..h)
            .map(|j| ((0..d).map(|t| x.get(i, t) as f64 * p[0][j * d + t]).sum::<f64>() + p[1][j]).max(0.0))
            .collect();
        for o in 0..out {
            let z = (0..h).map(|j| hid[j] * p[2][o * h + j]).sum::<f64>() + p[3][o];
            total += softplus(z) - y.get(i, o) as f64 * z;
        }
    }
    total / (x.rows() * out) as f64
}

pub fn head_router_loss_f64(p: &[Vec<f64>], d: usize, out: usize, x: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        for o in 0..out {
            let z = (0..d).map(|t| x.get(i, t) as f64 * p[0][o * d + t]).sum::<f64>() + p[1][o];
            total += softplus(z) - y.get(i, o) as f64 * z;
        }
    }
    total / (x.rows() * out) as f64
}

/// Central differences of `loss` over every parameter, then the norm-wise
/// relative error against `analytic`.
pub fn fd_relative_error(params: &[&[f32]], analytic: &[Vec<f32>], loss: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let base: Vec<Vec<f64>> = params.iter().map(|b| b.iter().map(|v| *v as f64).collect()).collect();
    let eps = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (bi, block) in base.iter().enumerate() {
        for j in 0..block.len() {
            let mut plus = base.clone();
            plus[bi][j] += eps;
            let mut minus = base.clone();
            minus[bi][j] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an = analytic[bi][j] as f64;
            num += (fd - an).powi(2);
            den += fd.powi(2).max(an.powi(2));
        }
    }
    num.sqrt() / den.sqrt().max(1e-12)
}
