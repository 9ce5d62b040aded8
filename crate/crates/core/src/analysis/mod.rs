//! Desk-scale measurement harness: union-activation decay, head-activation
//! heatmaps, perplexity against head density, router overhead, decode
//! throughput, and a per-layer importance proxy.
//!
//! Every study returns plain rows plus a [`CsvTable`]; SVG rendering reads
//! the rows and never feeds back into them.

pub mod plot;
pub mod report;

use std::time::Instant;

use fixedbitset::FixedBitSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibration::LayerKTable;
use crate::engine::{
    evaluate_perplexity, fill_synthetic, head_budget, DecodeSession, HeadRanking, RouterSet,
    SparsityMode, SparsityPolicy,
};
use crate::error::{PolarError, Result};
use crate::kernels::{
    dense_attention_decode, dense_mlp_forward, gqa_selective_attention_decode, sparse_mlp_forward,
    union_neuron_indices, BatchHeadIndex, FlashBlockParams, NeuronIndexTensor,
};
use crate::model::{MlpBlock, Model};
use crate::routers::{default_router_hidden, group_norms, HeadRouter, MlpRouter, Router};
use crate::tensor::{argmax, topk_indices, HeadTensor, KvCache, Matrix};

pub use report::CsvTable;

/// Per-layer, per-token activation bitsets for MLP neurons and, optionally,
/// attention heads (or KV groups).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub model_id: String,
    mlp_width: usize,
    head_width: usize,
    mlp: Vec<Vec<FixedBitSet>>,
    heads: Vec<Vec<FixedBitSet>>,
}

/// Heavy-tailed activation profile: a small hot set fires often, the rest
/// rarely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HotNeuronProfile {
    pub hot_fraction: f64,
    pub hot_p: f64,
    pub cold_p: f64,
}

impl Default for HotNeuronProfile {
    fn default() -> Self {
        Self {
            hot_fraction: 0.05,
            hot_p: 0.6,
            cold_p: 0.02,
        }
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PolarError::arg(format!("{what} = {p} outside [0, 1]")));
    }
    Ok(())
}

impl ActivationTrace {
    /// `heads` may be empty when no head flags were recorded.
    pub fn new(
        model_id: impl Into<String>,
        mlp_width: usize,
        mlp: Vec<Vec<FixedBitSet>>,
        head_width: usize,
        heads: Vec<Vec<FixedBitSet>>,
    ) -> Result<Self> {
        let tokens = mlp.first().map_or(0, Vec::len);
        if mlp.iter().any(|l| l.len() != tokens) {
            return Err(PolarError::arg("every layer must trace the same tokens"));
        }
        if mlp.iter().flatten().any(|b| b.len() != mlp_width) {
            return Err(PolarError::arg(format!("MLP bitsets must have width {mlp_width}")));
        }
        if !heads.is_empty() {
            if heads.len() != mlp.len() || heads.iter().any(|l| l.len() != tokens) {
                return Err(PolarError::arg("head flags must match the MLP trace shape"));
            }
            if heads.iter().flatten().any(|b| b.len() != head_width) {
                return Err(PolarError::arg(format!("head bitsets must have width {head_width}")));
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            mlp_width,
            head_width,
            mlp,
            heads,
        })
    }

    /// Independent Bernoulli(`p`) activations for every neuron and token.
    pub fn synthetic_bernoulli(layers: usize, width: usize, tokens: usize, p: f64, seed: u64) -> Result<Self> {
        check_prob(p, "p")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = (0..layers)
            .map(|_| (0..tokens).map(|_| bernoulli_bits(width, |_| p, &mut rng)).collect())
            .collect();
        Self::new(format!("bernoulli(p={p})"), width, mlp, 0, Vec::new())
    }

    /// Hot-neuron activations: the hot set is drawn once per layer.
    pub fn synthetic_hot_neurons(
        layers: usize,
        width: usize,
        tokens: usize,
        profile: HotNeuronProfile,
        seed: u64,
    ) -> Result<Self> {
        check_prob(profile.hot_fraction, "hot_fraction")?;
        check_prob(profile.hot_p, "hot_p")?;
        check_prob(profile.cold_p, "cold_p")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hot_count = (profile.hot_fraction * width as f64).round() as usize;
        let mut mlp = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut order: Vec<usize> = (0..width).collect();
            order.shuffle(&mut rng);
            let mut hot = FixedBitSet::with_capacity(width);
            order[..hot_count].iter().for_each(|&j| hot.insert(j));
            let p = |j: usize| if hot.contains(j) { profile.hot_p } else { profile.cold_p };
            mlp.push((0..tokens).map(|_| bernoulli_bits(width, p, &mut rng)).collect());
        }
        Self::new("hot_neurons", width, mlp, 0, Vec::new())
    }

    /// Dense trace of a model over `sequences`. MLP bits mark positive ReLU
    /// pre-activations; gated MLPs have no exact zeros, so every bit is set.
    /// Head flags mark the top `head_k` heads (or KV groups) per token,
    /// ranked by the layer's head router when present and by output norm
    /// otherwise.
    pub fn from_model(model: &Model, sequences: &[Vec<u32>], head_k: usize, routers: Option<&RouterSet>) -> Result<Self> {
        let c = &model.config;
        let route = c.route_dim();
        if head_k == 0 || head_k > route {
            return Err(PolarError::arg(format!("head_k {head_k} outside 1..={route}")));
        }
        let trace = model.trace_dense(sequences)?;
        let mut mlp = Vec::with_capacity(c.layers);
        let mut heads = Vec::with_capacity(c.layers);
        for (l, tap) in trace.layers.iter().enumerate() {
            mlp.push(
                tap.mlp_active
                    .iter()
                    .map(|row| {
                        let mut b = FixedBitSet::with_capacity(c.ffn_dim);
                        if row.is_empty() {
                            b.insert_range(..);
                        } else {
                            row.iter().enumerate().filter(|(_, a)| **a).for_each(|(j, _)| b.insert(j));
                        }
                        b
                    })
                    .collect(),
            );
            let scores = match routers.and_then(|r| r.head_router(l)) {
                Some(r) => r.forward(&tap.attn_input)?,
                None => group_norms(&tap.head_outputs, c.group_size())?,
            };
            heads.push(
                scores
                    .row_iter()
                    .map(|r| {
                        let mut b = FixedBitSet::with_capacity(route);
                        topk_indices(r, head_k).map(|idx| {
                            idx.into_iter().for_each(|j| b.insert(j));
                            b
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(format!("model:{:016x}", model.checksum()), c.ffn_dim, mlp, route, heads)
    }

    pub fn layers(&self) -> usize {
        self.mlp.len()
    }

    pub fn tokens(&self) -> usize {
        self.mlp.first().map_or(0, Vec::len)
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_width
    }

    pub fn head_width(&self) -> usize {
        self.head_width
    }

    pub fn has_head_flags(&self) -> bool {
        !self.heads.is_empty()
    }

    pub fn mlp_layer(&self, layer: usize) -> &[FixedBitSet] {
        &self.mlp[layer]
    }

    pub fn head_layer(&self, layer: usize) -> &[FixedBitSet] {
        &self.heads[layer]
    }

    /// Mean fraction of active neurons per token in one layer.
    pub fn mean_density(&self, layer: usize) -> f64 {
        let bits = &self.mlp[layer];
        if bits.is_empty() || self.mlp_width == 0 {
            return 0.0;
        }
        let ones: usize = bits.iter().map(|b| b.count_ones(..)).sum();
        ones as f64 / (bits.len() * self.mlp_width) as f64
    }
}

fn bernoulli_bits(width: usize, p: impl Fn(usize) -> f64, rng: &mut ChaCha8Rng) -> FixedBitSet {
    let mut b = FixedBitSet::with_capacity(width);
    for j in 0..width {
        if rng.random_bool(p(j)) {
            b.insert(j);
        }
    }
    b
}

fn union_density(bits: &[FixedBitSet], members: &[usize], width: usize) -> f64 {
    let mut u = FixedBitSet::with_capacity(width);
    for &t in members {
        u.union_with(&bits[t]);
    }
    u.count_ones(..) as f64 / width as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn shuffled_tokens(tokens: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tokens).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnionRow {
    pub layer: usize,
    pub batch: usize,
    pub groups: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnionStudy {
    pub model_id: String,
    pub tokens: usize,
    pub seed: u64,
    pub rows: Vec<UnionRow>,
}

/// Union density `|S_B|/D` per layer and batch size. Tokens are shuffled
/// once; for each `B` the shuffled order is cut into `⌊T/B⌋` consecutive
/// groups (a partial tail group is dropped) and the mean and population std
/// over groups are reported. With `B` dividing `B'`, every `B'` group is a
/// union of `B` groups.
pub fn union_activation_study(trace: &ActivationTrace, batch_sizes: &[usize], seed: u64) -> Result<UnionStudy> {
    let t = trace.tokens();
    if t == 0 || trace.layers() == 0 {
        return Err(PolarError::arg("trace is empty"));
    }
    if trace.mlp_width == 0 {
        return Err(PolarError::arg("trace has zero-width MLP bitsets"));
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0 || b > t) {
        return Err(PolarError::arg(format!("batch size {b} outside 1..={t} traced tokens")));
    }
    let order = shuffled_tokens(t, seed);
    let rows = (0..trace.layers())
        .into_par_iter()
        .flat_map_iter(|l| {
            let bits = &trace.mlp[l];
            let order = &order;
            batch_sizes.iter().map(move |&b| {
                let dens: Vec<f64> = order
                    .chunks_exact(b)
                    .map(|g| union_density(bits, g, trace.mlp_width))
                    .collect();
                let (mean, std) = mean_std(&dens);
                UnionRow {
                    layer: l,
                    batch: b,
                    groups: dens.len(),
                    mean,
                    std,
                }
            })
        })
        .collect();
    Ok(UnionStudy {
        model_id: trace.model_id.clone(),
        tokens: t,
        seed,
        rows,
    })
}

/// Union density of the first `B` tokens of one shuffled order, for each
/// `B`. Sorted batch sizes give nested batches.
pub fn nested_union_densities(trace: &ActivationTrace, layer: usize, batch_sizes: &[usize], seed: u64) -> Result<Vec<f64>> {
    let t = trace.tokens();
    if layer >= trace.layers() {
        return Err(PolarError::Index {
            op: "nested_union_densities",
            index: layer,
            bound: trace.layers(),
        });
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0 || b > t) {
        return Err(PolarError::arg(format!("batch size {b} outside 1..={t} traced tokens")));
    }
    let order = shuffled_tokens(t, seed);
    Ok(batch_sizes
        .iter()
        .map(|&b| union_density(&trace.mlp[layer], &order[..b], trace.mlp_width))
        .collect())
}

impl UnionStudy {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new("union_activation", &["layer", "batch", "groups", "mean_density", "std_density"])
            .meta("model", &self.model_id)
            .meta("traced_tokens", self.tokens)
            .meta("seed", self.seed)
            .meta("batch_cap", format!("simulated batches are capped at {} traced tokens", self.tokens));
        for r in &self.rows {
            t.push(vec![
                r.layer.to_string(),
                r.batch.to_string(),
                r.groups.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
            ])
            .expect("fixed width");
        }
        t
    }

    pub fn to_svg(&self) -> String {
        let layers = self.rows.iter().map(|r| r.layer).max().map_or(0, |m| m + 1);
        let series: Vec<(String, Vec<(f64, f64)>)> = (0..layers)
            .map(|l| {
                let pts = self
                    .rows
                    .iter()
                    .filter(|r| r.layer == l)
                    .map(|r| (r.batch as f64, r.mean))
                    .collect();
                (format!("layer {l}"), pts)
            })
            .collect();
        plot::line_chart("Union neuron activation vs batch size", "batch size", "|S_B| / D", &series)
    }
}

/// Per-layer, per-head activation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadHeatmap {
    pub model_id: String,
    pub tokens: usize,
    pub counts: Vec<Vec<u64>>,
}

pub fn head_heatmap(trace: &ActivationTrace) -> Result<HeadHeatmap> {
    if !trace.has_head_flags() {
        return Err(PolarError::arg("trace has no head flags"));
    }
    let counts = trace
        .heads
        .iter()
        .map(|layer| {
            let mut c = vec![0u64; trace.head_width];
            for bits in layer {
                bits.ones().for_each(|h| c[h] += 1);
            }
            c
        })
        .collect();
    Ok(HeadHeatmap {
        model_id: trace.model_id.clone(),
        tokens: trace.tokens(),
        counts,
    })
}

impl HeadHeatmap {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new("head_heatmap", &["layer", "head", "count"])
            .meta("model", &self.model_id)
            .meta("traced_tokens", self.tokens);
        for (l, row) in self.counts.iter().enumerate() {
            for (h, c) in row.iter().enumerate() {
                t.push(vec![l.to_string(), h.to_string(), c.to_string()]).expect("fixed width");
            }
        }
        t
    }

    pub fn to_svg(&self) -> String {
        let values: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect();
        plot::heatmap("Head activation counts", "layer", "head", &values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub density: f64,
    pub ppl: f64,
    /// `(PPL(ρ) − PPL_dense) / PPL_dense`.
    pub relative_increase: f64,
}

/// Perplexity of `tokens` at each head density. The reference is the same
/// policy at density 1.0, which leaves attention dense.
pub fn ppl_density_sweep(
    model: &Model,
    tokens: &[u32],
    densities: &[f32],
    ranking: HeadRanking,
    routers: &RouterSet,
    mlp_k_table: Option<LayerKTable>,
) -> Result<Vec<SweepRow>> {
    if densities.is_empty() {
        return Err(PolarError::arg("density list is empty"));
    }
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(PolarError::arg(format!("density {d} outside (0, 1]")));
    }
    let policy = |rho: f32| SparsityPolicy {
        head_ranking: ranking,
        ..SparsityPolicy::polar(rho, mlp_k_table.clone())
    };
    let reference = evaluate_perplexity(model, tokens, &policy(1.0), routers)?;
    densities
        .iter()
        .map(|&rho| {
            let ppl = if rho == 1.0 {
                reference
            } else {
                evaluate_perplexity(model, tokens, &policy(rho), routers)?
            };
            Ok(SweepRow {
                density: rho as f64,
                ppl,
                relative_increase: (ppl - reference) / reference,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow], ranking: HeadRanking) -> CsvTable {
    let mut t = CsvTable::new("ppl_density", &["density", "ppl", "relative_increase"])
        .meta("ranking", format!("{ranking:?}").to_lowercase());
    for r in rows {
        t.push(vec![r.density.to_string(), r.ppl.to_string(), r.relative_increase.to_string()])
            .expect("fixed width");
    }
    t
}

pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let pts = rows.iter().map(|r| (r.density, r.ppl)).collect();
    plot::line_chart("Perplexity vs attention head density", "head density", "perplexity", &[("ppl".into(), pts)])
}

/// Latency summary of repeated trials, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub trials: usize,
}

/// Linear-interpolated percentile of sorted samples, `q ∈ [0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(PolarError::arg("no timing samples"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            median: percentile(&s, 0.5),
            p10: percentile(&s, 0.1),
            p90: percentile(&s, 0.9),
            trials: s.len(),
        })
    }
}

/// Runs `f` `warmup` times untimed, then `trials` times on a monotonic clock.
pub fn time_trials(warmup: usize, trials: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Timing::from_samples(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Mlp,
    Attention,
}

impl BlockKind {
    fn name(self) -> &'static str {
        match self {
            BlockKind::Mlp => "mlp",
            BlockKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadRow {
    pub block: BlockKind,
    pub density: f64,
    pub router: Timing,
    pub sparse: Timing,
    pub dense: Timing,
}

impl OverheadRow {
    /// Dense time minus router plus sparse time, by medians.
    pub fn net_saving(&self) -> f64 {
        self.dense.median - (self.router.median + self.sparse.median)
    }

    pub fn router_exceeds_dense(&self) -> bool {
        self.net_saving() <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadConfig {
    pub layer: usize,
    pub batch: usize,
    pub context: usize,
    pub warmup: usize,
    pub trials: usize,
    pub seed: u64,
    pub block: FlashBlockParams,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            layer: 0,
            batch: 8,
            context: 64,
            warmup: 2,
            trials: 20,
            seed: 0,
            block: FlashBlockParams::default(),
        }
    }
}

/// Sorted first `n` entries of a seeded permutation of `0..width`.
fn random_index_set(width: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..width).collect();
    order.shuffle(rng);
    let mut idx = order[..n].to_vec();
    idx.sort_unstable();
    idx
}

/// Router, sparse-block and dense-block latency for one layer at each
/// density. Sparse MLP timing uses `⌈ρ·D⌉` neurons; sparse attention uses
/// the head budget at `ρ`. Missing routers are replaced by random ones of
/// the same shape, which cost the same to run.
pub fn router_overhead_ablation(
    model: &Model,
    routers: &RouterSet,
    densities: &[f32],
    cfg: &OverheadConfig,
) -> Result<Vec<OverheadRow>> {
    let c = &model.config;
    if cfg.layer >= c.layers {
        return Err(PolarError::Index {
            op: "router_overhead_ablation",
            index: cfg.layer,
            bound: c.layers,
        });
    }
    if cfg.batch == 0 || cfg.trials == 0 || cfg.context == 0 {
        return Err(PolarError::arg("batch, context and trials must be >= 1"));
    }
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(PolarError::arg(format!("density {d} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layer = &model.layers[cfg.layer];
    let x = Matrix::random_normal(cfg.batch, c.model_dim, 1.0, &mut rng);
    let mut rows = Vec::new();

    if let MlpBlock::Relu(mlp) = &layer.mlp {
        let fallback;
        let router = match routers.mlp_router(cfg.layer) {
            Some(r) => r,
            None => {
                fallback = MlpRouter::random(c.model_dim, default_router_hidden(c.model_dim), c.ffn_dim, &mut rng);
                &fallback
            }
        };
        let dense = time_trials(cfg.warmup, cfg.trials, || dense_mlp_forward(&x, mlp).map(drop))?;
        for &rho in densities {
            let n = ((rho as f64 * c.ffn_dim as f64 - 1e-6).ceil() as usize).clamp(1, c.ffn_dim);
            let route = time_trials(cfg.warmup, cfg.trials, || {
                let logits = router.forward(&x)?;
                let sets = logits
                    .row_iter()
                    .map(|r| topk_indices(r, n))
                    .collect::<Result<Vec<_>>>()?;
                union_neuron_indices(cfg.layer, &sets);
                Ok(())
            })?;
            let active = NeuronIndexTensor::new(cfg.layer, random_index_set(c.ffn_dim, n, &mut rng), c.ffn_dim)?;
            let sparse = time_trials(cfg.warmup, cfg.trials, || sparse_mlp_forward(&x, mlp, &active).map(drop))?;
            rows.push(OverheadRow {
                block: BlockKind::Mlp,
                density: rho as f64,
                router: route,
                sparse,
                dense,
            });
        }
    }

    let fallback;
    let head_router = match routers.head_router(cfg.layer) {
        Some(r) => r,
        None => {
            fallback = HeadRouter::random(c.model_dim, c.route_dim(), &mut rng);
            &fallback
        }
    };
    let mut cache = KvCache::new(cfg.batch, c.kv_heads, cfg.context, c.head_dim());
    fill_synthetic(&mut cache, cfg.context, &mut rng)?;
    let q = HeadTensor::random_normal(cfg.batch, c.heads, c.head_dim(), 1.0, &mut rng);
    let scale = c.attention_scale();
    let o = &layer.attn.o;
    let dense = time_trials(cfg.warmup, cfg.trials, || {
        let h = dense_attention_decode(&q, &cache, cfg.block, scale)?;
        o.forward(&h.into_matrix());
        Ok(())
    })?;
    for &rho in densities {
        let k = head_budget(rho, c.route_dim());
        let route = time_trials(cfg.warmup, cfg.trials, || {
            let logits = head_router.forward(&x)?;
            let sel = logits
                .row_iter()
                .map(|r| topk_indices(r, k))
                .collect::<Result<Vec<_>>>()?;
            BatchHeadIndex::new(sel, c.route_dim()).map(drop)
        })?;
        let rows_idx = (0..cfg.batch)
            .map(|_| random_index_set(c.route_dim(), k, &mut rng))
            .collect();
        let bhi = BatchHeadIndex::new(rows_idx, c.route_dim())?;
        let sparse = time_trials(cfg.warmup, cfg.trials, || {
            let h = gqa_selective_attention_decode(&q, &cache, &bhi, cfg.block, scale)?;
            o.forward(&h.into_matrix());
            Ok(())
        })?;
        rows.push(OverheadRow {
            block: BlockKind::Attention,
            density: rho as f64,
            router: route,
            sparse,
            dense,
        });
    }
    Ok(rows)
}

pub fn overhead_csv(rows: &[OverheadRow], cfg: &OverheadConfig) -> CsvTable {
    let mut t = CsvTable::new(
        "router_overhead",
        &[
            "block",
            "density",
            "router_s",
            "sparse_s",
            "dense_s",
            "net_saving_s",
            "router_plus_sparse_exceeds_dense",
        ],
    )
    .meta("layer", cfg.layer)
    .meta("batch", cfg.batch)
    .meta("context", cfg.context)
    .meta("trials", cfg.trials);
    for r in rows {
        t.push(vec![
            r.block.name().into(),
            r.density.to_string(),
            r.router.median.to_string(),
            r.sparse.median.to_string(),
            r.dense.median.to_string(),
            r.net_saving().to_string(),
            r.router_exceeds_dense().to_string(),
        ])
        .expect("fixed width");
    }
    t
}

/// One decode configuration to benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub label: String,
    pub policy: SparsityPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub steps: usize,
    pub seed: u64,
    pub block: FlashBlockParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            steps: 50,
            seed: 0,
            block: FlashBlockParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: String,
    pub batch: usize,
    pub seq_len: usize,
    pub head_density: f64,
    pub mlp_density: f64,
    pub latency: Timing,
    pub tokens_per_s: f64,
    /// Against the dense case at the same batch and context; `None` when no
    /// dense case ran.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchFailure {
    pub mode: String,
    pub batch: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub failures: Vec<BenchFailure>,
}

fn policy_densities(policy: &SparsityPolicy, model: &Model) -> (f64, f64) {
    let c = &model.config;
    let head = if policy.mode == SparsityMode::Polar {
        policy.head_density as f64
    } else {
        1.0
    };
    let mlp = match &policy.mlp_k_table {
        Some(t) if policy.mlp_sparse(c) => {
            (0..c.layers).map(|l| t.k(l).unwrap_or(c.ffn_dim) as f64).sum::<f64>() / (c.layers * c.ffn_dim) as f64
        }
        _ => 1.0,
    };
    (head, mlp.min(1.0))
}

/// Inter-token latency per (case, batch size) at context `seq_len`. Caches
/// start with `seq_len` random positions; each step feeds the argmax of the
/// previous logits. Failed configurations are recorded and skipped.
pub fn throughput_bench(
    model: &Model,
    routers: &RouterSet,
    cases: &[BenchCase],
    batch_sizes: &[usize],
    seq_len: usize,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.steps == 0 {
        return Err(PolarError::arg("bench needs at least one timed step"));
    }
    let mut report = BenchReport::default();
    for &b in batch_sizes {
        let mut row: Vec<(usize, BenchResult)> = Vec::new();
        for (i, case) in cases.iter().enumerate() {
            match bench_one(model, routers, case, b, seq_len, cfg) {
                Ok(r) => row.push((i, r)),
                Err(e) => report.failures.push(BenchFailure {
                    mode: case.label.clone(),
                    batch: b,
                    message: e.to_string(),
                }),
            }
        }
        let baseline = row
            .iter()
            .find(|(i, _)| cases[*i].policy.mode == SparsityMode::Dense)
            .map(|(i, r)| (*i, r.latency.median));
        for (i, r) in &mut row {
            r.speedup = match baseline {
                Some((bi, _)) if bi == *i => Some(1.0),
                Some((_, base)) => Some(base / r.latency.median),
                None => None,
            };
        }
        report.results.extend(row.into_iter().map(|(_, r)| r));
    }
    Ok(report)
}

fn bench_one(
    model: &Model,
    routers: &RouterSet,
    case: &BenchCase,
    batch: usize,
    seq_len: usize,
    cfg: &BenchConfig,
) -> Result<BenchResult> {
    let needed = seq_len + cfg.warmup + cfg.steps + 1;
    if needed > model.config.max_seq {
        return Err(PolarError::Capacity(format!(
            "context {seq_len} plus {} steps exceeds max_seq {}",
            cfg.warmup + cfg.steps,
            model.config.max_seq
        )));
    }
    let mut session =
        DecodeSession::with_synthetic_context(model, batch, seq_len, case.policy.clone(), routers.clone(), cfg.seed)?;
    session.set_block_params(cfg.block);
    let mut step = || {
        let next: Vec<u32> = session.last_logits().row_iter().map(|r| argmax(r) as u32).collect();
        session.decode_step(model, &next).map(drop)
    };
    let latency = time_trials(cfg.warmup, cfg.steps, &mut step)?;
    let (head_density, mlp_density) = policy_densities(&case.policy, model);
    Ok(BenchResult {
        mode: case.label.clone(),
        batch,
        seq_len,
        head_density,
        mlp_density,
        latency,
        tokens_per_s: batch as f64 / latency.median,
        speedup: None,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(
            "throughput",
            &[
                "mode",
                "batch",
                "seq_len",
                "head_density",
                "mlp_density",
                "median_s",
                "p10_s",
                "p90_s",
                "tokens_per_s",
                "speedup",
            ],
        );
        for r in &self.results {
            t.push(vec![
                r.mode.clone(),
                r.batch.to_string(),
                r.seq_len.to_string(),
                r.head_density.to_string(),
                r.mlp_density.to_string(),
                r.latency.median.to_string(),
                r.latency.p10.to_string(),
                r.latency.p90.to_string(),
                r.tokens_per_s.to_string(),
                r.speedup.map_or(String::new(), |s| s.to_string()),
            ])
            .expect("fixed width");
        }
        for f in &self.failures {
            t.metadata.push((format!("failed:{}:B={}", f.mode, f.batch), f.message.clone()));
        }
        t
    }

    pub fn to_svg(&self) -> String {
        let mut modes: Vec<&str> = self.results.iter().map(|r| r.mode.as_str()).collect();
        modes.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = modes
            .iter()
            .map(|m| {
                let pts = self
                    .results
                    .iter()
                    .filter(|r| r.mode == *m)
                    .map(|r| (r.batch as f64, r.tokens_per_s))
                    .collect();
                (m.to_string(), pts)
            })
            .collect();
        plot::line_chart("Decode throughput", "batch size", "tokens / s", &series)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layer: usize,
    pub score: f64,
}

/// Proxy for layer importance: mean over tokens of
/// `‖attention output‖ / ‖residual entering the block‖`. Tokens with a zero
/// residual contribute zero.
pub fn layer_importance_proxy(model: &Model, sequences: &[Vec<u32>]) -> Result<Vec<LayerImportance>> {
    let trace = model.trace_dense(sequences)?;
    let norm = |r: &[f32]| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    Ok(trace
        .layers
        .iter()
        .enumerate()
        .map(|(l, tap)| {
            let total: f64 = tap
                .attn_output
                .row_iter()
                .zip(tap.residual.row_iter())
                .map(|(a, r)| {
                    let rn = norm(r);
                    if rn > 0.0 {
                        norm(a) / rn
                    } else {
                        0.0
                    }
                })
                .sum();
            LayerImportance {
                layer: l,
                score: total / trace.tokens as f64,
            }
        })
        .collect())
}

pub fn importance_csv(rows: &[LayerImportance]) -> CsvTable {
    let mut t = CsvTable::new("layer_importance", &["layer", "score"]).meta(
        "note",
        "proxy score: mean attention-output norm over residual norm; not an external importance method",
    );
    for r in rows {
        t.push(vec![r.layer.to_string(), r.score.to_string()]).expect("fixed width");
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyInit, TransformerConfig};

    #[test]
    fn batch_one_equals_mean_density() {
        let tr = ActivationTrace::synthetic_bernoulli(2, 64, 50, 0.3, 1).unwrap();
        let s = union_activation_study(&tr, &[1], 0).unwrap();
        for r in &s.rows {
            assert!((r.mean - tr.mean_density(r.layer)).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_batch_is_error() {
        let tr = ActivationTrace::synthetic_bernoulli(1, 8, 4, 0.5, 1).unwrap();
        assert!(union_activation_study(&tr, &[5], 0).is_err());
        assert!(union_activation_study(&tr, &[0], 0).is_err());
    }

    #[test]
    fn percentiles_interpolate() {
        let t = Timing::from_samples(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(t.median, 2.5);
        assert!((t.p10 - 1.3).abs() < 1e-12);
        assert!((t.p90 - 3.7).abs() < 1e-12);
    }

    #[test]
    fn heatmap_counts_single_head() {
        let mut bits = FixedBitSet::with_capacity(3);
        bits.insert(1);
        let tr = ActivationTrace::new(
            "t",
            2,
            vec![vec![FixedBitSet::with_capacity(2); 4]],
            3,
            vec![vec![bits; 4]],
        )
        .unwrap();
        assert_eq!(head_heatmap(&tr).unwrap().counts, vec![vec![0, 4, 0]]);
        let bare = ActivationTrace::synthetic_bernoulli(1, 4, 2, 0.5, 0).unwrap();
        assert!(head_heatmap(&bare).is_err());
    }

    #[test]
    fn sweep_single_density() {
        let m = Model::random(TransformerConfig::toy(), ToyInit::default(), 1).unwrap();
        let toks: Vec<u32> = (0..12).collect();
        let rows = ppl_density_sweep(&m, &toks, &[1.0], HeadRanking::OracleNorm, &RouterSet::empty(3), None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].relative_increase, 0.0);
        assert_eq!(sweep_csv(&rows, HeadRanking::OracleNorm).rows.len(), 1);
        assert!(ppl_density_sweep(&m, &toks, &[0.0], HeadRanking::OracleNorm, &RouterSet::empty(3), None).is_err());
    }

    #[test]
    fn bench_reports_capacity_failures() {
        let m = Model::random(TransformerConfig::toy(), ToyInit::default(), 2).unwrap();
        let cases = [BenchCase {
            label: "dense".into(),
            policy: SparsityPolicy::dense(),
        }];
        let cfg = BenchConfig {
            warmup: 1,
            steps: 3,
            ..Default::default()
        };
        let rep = throughput_bench(&m, &RouterSet::empty(3), &cases, &[2], 200, &cfg).unwrap();
        assert!(rep.results.is_empty());
        assert_eq!(rep.failures.len(), 1);
        let rep = throughput_bench(&m, &RouterSet::empty(3), &cases, &[2], 16, &cfg).unwrap();
        assert_eq!(rep.results[0].speedup, Some(1.0));
        assert!(rep.to_csv().to_string_lossy().starts_with("# schema=throughput version=1\n"));
    }
}
