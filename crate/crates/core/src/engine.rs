//! Batched autoregressive decoding under a sparsity policy.
//!
//! Three modes share one pipeline:
//!
//! * `dense` runs every head and every neuron;
//! * `dejavu_mlp` sparsifies only ReLU MLP blocks: each sequence's router
//!   top-k sets are merged into one batch-wide neuron index set;
//! * `polar` additionally routes attention per sequence to the top
//!   `⌈ρ·H_route⌉` heads (or KV groups), keeping layer 0 dense by default.
//!
//! Prefill is always dense and uses the reference attention path.

use serde::{Deserialize, Serialize};

use crate::calibration::LayerKTable;
use crate::error::{PolarError, Result};
use crate::kernels::{
    dense_attention_decode, dense_mlp_forward, gqa_selective_attention_decode, sparse_mlp_forward,
    union_neuron_indices, BatchHeadIndex, FlashBlockParams, NeuronIndexTensor,
};
use crate::model::{LayerWeights, MlpActivation, MlpBlock, Model, TransformerConfig};
use crate::routers::{group_norms, HeadRouter, MlpRouter, Router};
use crate::tensor::{
    argmax, axpy, log_sum_exp, naive_softmax_attention_single_head, rank_descending, topk_indices,
    HeadTensor, KvCache, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    #[default]
    Dense,
    DejavuMlp,
    Polar,
}

/// How active heads are chosen in `polar` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadRanking {
    #[default]
    Router,
    /// Compute every head, keep the largest output norms. A study tool, not
    /// a speedup.
    OracleNorm,
}

/// How active neurons are chosen when MLP sparsity is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpRanking {
    #[default]
    Router,
    /// Rank by the true pre-activations of the layer.
    Oracle,
}

fn default_density() -> f32 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPolicy {
    pub mode: SparsityMode,
    /// Per-layer MLP top-k. Without a table MLP blocks stay dense.
    #[serde(default)]
    pub mlp_k_table: Option<LayerKTable>,
    /// Share of heads (or KV groups) kept in every routed layer.
    #[serde(default = "default_density")]
    pub head_density: f32,
    #[serde(default = "default_true")]
    pub layer0_dense_attention: bool,
    #[serde(default)]
    pub head_ranking: HeadRanking,
    #[serde(default)]
    pub mlp_ranking: MlpRanking,
}

impl Default for SparsityPolicy {
    fn default() -> Self {
        Self::dense()
    }
}

impl SparsityPolicy {
    pub fn dense() -> Self {
        Self {
            mode: SparsityMode::Dense,
            mlp_k_table: None,
            head_density: 1.0,
            layer0_dense_attention: true,
            head_ranking: HeadRanking::Router,
            mlp_ranking: MlpRanking::Router,
        }
    }

    pub fn dejavu(table: LayerKTable) -> Self {
        Self {
            mode: SparsityMode::DejavuMlp,
            mlp_k_table: Some(table),
            ..Self::dense()
        }
    }

    pub fn polar(head_density: f32, table: Option<LayerKTable>) -> Self {
        Self {
            mode: SparsityMode::Polar,
            mlp_k_table: table,
            head_density,
            ..Self::dense()
        }
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        if !(self.head_density > 0.0 && self.head_density <= 1.0) {
            return Err(PolarError::Config(format!(
                "head_density {} outside (0, 1]",
                self.head_density
            )));
        }
        if let Some(t) = &self.mlp_k_table {
            if self.mlp_sparse(config) {
                t.validate_for(config.layers, config.ffn_dim)?;
            }
        }
        Ok(())
    }

    /// Whether MLP blocks run sparse under this policy on this model.
    pub fn mlp_sparse(&self, config: &TransformerConfig) -> bool {
        matches!(self.mode, SparsityMode::DejavuMlp | SparsityMode::Polar)
            && self.mlp_k_table.is_some()
            && config.activation == MlpActivation::Relu
    }

    pub fn routes_heads(&self, layer: usize) -> bool {
        self.mode == SparsityMode::Polar && !(layer == 0 && self.layer0_dense_attention)
    }
}

/// Heads (or groups) kept at density `ρ`: `⌈ρ·route_dim⌉`, at least one.
pub fn head_budget(density: f32, route_dim: usize) -> usize {
    let exact = density as f64 * route_dim as f64;
    // f32 densities like 0.3 sit slightly above their decimal value.
    ((exact - 1e-6).ceil() as usize).clamp(1, route_dim)
}

/// Per-layer routers. Either kind may be absent for any layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouterSet {
    pub mlp: Vec<Option<MlpRouter>>,
    pub head: Vec<Option<HeadRouter>>,
}

impl RouterSet {
    pub fn empty(layers: usize) -> Self {
        Self {
            mlp: vec![None; layers],
            head: vec![None; layers],
        }
    }

    pub fn mlp_router(&self, layer: usize) -> Option<&MlpRouter> {
        self.mlp.get(layer).and_then(Option::as_ref)
    }

    pub fn head_router(&self, layer: usize) -> Option<&HeadRouter> {
        self.head.get(layer).and_then(Option::as_ref)
    }

    fn check_for(&self, model: &Model, policy: &SparsityPolicy) -> Result<()> {
        let c = &model.config;
        for l in 0..c.layers {
            if policy.routes_heads(l) && policy.head_ranking == HeadRanking::Router {
                let r = self
                    .head_router(l)
                    .ok_or_else(|| PolarError::Config(format!("no head router for layer {l}")))?;
                if r.input_dim() != c.model_dim || r.output_dim() != c.route_dim() {
                    return Err(PolarError::Config(format!("head router {l} has the wrong shape")));
                }
            }
            if policy.mlp_sparse(c) && policy.mlp_ranking == MlpRanking::Router {
                let r = self
                    .mlp_router(l)
                    .ok_or_else(|| PolarError::Config(format!("no MLP router for layer {l}")))?;
                if r.input_dim() != c.model_dim || r.output_dim() != c.ffn_dim {
                    return Err(PolarError::Config(format!("MLP router {l} has the wrong shape")));
                }
            }
        }
        Ok(())
    }
}

/// Which heads an attention block computes.
#[derive(Debug, Clone, Copy)]
pub enum HeadSelection<'a> {
    Dense,
    /// Router logits, keep the top `budget` per sequence.
    Router(&'a HeadRouter, usize),
    /// Compute all heads, keep the top `budget` by output norm.
    OracleNorm(usize),
}

/// Which neurons an MLP block computes.
#[derive(Debug, Clone, Copy)]
pub enum NeuronSelection<'a> {
    Dense,
    /// Per-sequence router top-`k`, merged over the batch.
    Router(&'a MlpRouter, usize),
    /// Per-sequence top-`k` of the true pre-activations, merged over the batch.
    Oracle(usize),
}

#[derive(Debug, Clone)]
pub struct AttentionBlockOutput {
    /// Output projection result, `B × d`, to be added to the residual.
    pub out: Matrix,
    pub heads: HeadTensor,
    pub index: Option<BatchHeadIndex>,
}

/// Per-sequence top-`k` rows of a logit matrix.
fn topk_rows(logits: &Matrix, k: usize, bound: usize) -> Result<BatchHeadIndex> {
    let rows = logits
        .row_iter()
        .map(|r| topk_indices(r, k))
        .collect::<Result<Vec<_>>>()?;
    BatchHeadIndex::new(rows, bound)
}

/// One decode-step attention block on normalized input `xn` (`B × d`).
/// Appends this step's keys and values to `cache` before attending.
pub fn attention_block(
    config: &TransformerConfig,
    layer: &LayerWeights,
    xn: &Matrix,
    cache: &mut KvCache,
    selection: HeadSelection<'_>,
    block: FlashBlockParams,
) -> Result<AttentionBlockOutput> {
    let route = config.route_dim();
    // Routing first: the router reads only the block input.
    let routed = match selection {
        HeadSelection::Router(r, budget) => Some(topk_rows(&r.forward(xn)?, budget, route)?),
        _ => None,
    };
    let q = HeadTensor::from_matrix(layer.attn.q.forward(xn), config.heads)?;
    let k = layer.attn.k.forward(xn);
    let v = layer.attn.v.forward(xn);
    for b in 0..xn.rows() {
        cache.append(b, k.row(b), v.row(b))?;
    }
    let scale = config.attention_scale();
    let (heads, index) = match selection {
        HeadSelection::Dense => (dense_attention_decode(&q, cache, block, scale)?, None),
        HeadSelection::Router(..) => {
            let bhi = routed.expect("router selection computed above");
            (gqa_selective_attention_decode(&q, cache, &bhi, block, scale)?, Some(bhi))
        }
        HeadSelection::OracleNorm(budget) => {
            let full = dense_attention_decode(&q, cache, block, scale)?;
            let bhi = oracle_head_selection(&full, config.group_size(), budget)?;
            (mask_heads(full, &bhi, config.group_size()), Some(bhi))
        }
    };
    let out = layer.attn.o.forward(&heads.clone().into_matrix());
    Ok(AttentionBlockOutput { out, heads, index })
}

/// Zeroes every head outside the selected groups.
fn mask_heads(mut t: HeadTensor, bhi: &BatchHeadIndex, group: usize) -> HeadTensor {
    for b in 0..t.batch() {
        let row = bhi.row(b);
        for h in 0..t.heads() {
            if !row.contains(&(h / group)) {
                t.head_mut(b, h).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    t
}

/// Per-sequence top-`k` heads (or groups of `group_size` query heads) by
/// attention-output L2 norm.
pub fn oracle_head_selection(attn_outputs: &HeadTensor, group_size: usize, k: usize) -> Result<BatchHeadIndex> {
    let norms = group_norms(attn_outputs, group_size)?;
    topk_rows(&norms, k, norms.cols())
}

/// One decode-step MLP block on normalized input `xn`. Returns the block
/// output and, when sparse, the batch-wide neuron set used.
pub fn mlp_block(
    layer_index: usize,
    layer: &LayerWeights,
    xn: &Matrix,
    selection: NeuronSelection<'_>,
) -> Result<(Matrix, Option<NeuronIndexTensor>)> {
    match (&layer.mlp, selection) {
        (MlpBlock::SwiGlu(s), _) => Ok((s.forward(xn), None)),
        (MlpBlock::Relu(m), NeuronSelection::Dense) => Ok((dense_mlp_forward(xn, m)?, None)),
        (MlpBlock::Relu(m), sel) => {
            let (scores, k) = match sel {
                NeuronSelection::Router(r, k) => (r.forward(xn)?, k),
                NeuronSelection::Oracle(k) => (m.preactivations(xn)?, k),
                NeuronSelection::Dense => unreachable!(),
            };
            let k = k.min(m.ffn_dim());
            let sets = scores
                .row_iter()
                .map(|r| topk_indices(r, k))
                .collect::<Result<Vec<_>>>()?;
            let active = union_neuron_indices(layer_index, &sets);
            Ok((sparse_mlp_forward(xn, m, &active)?, Some(active)))
        }
    }
}

/// What the last decode step selected in each layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub head_index: Vec<Option<BatchHeadIndex>>,
    /// `|S_B|` per layer when the MLP ran sparse.
    pub union_size: Vec<Option<usize>>,
}

/// Decode state for a batch of sequences.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    caches: Vec<KvCache>,
    prompt_lens: Vec<usize>,
    steps: usize,
    routers: RouterSet,
    policy: SparsityPolicy,
    block: FlashBlockParams,
    last_logits: Matrix,
    last_stats: StepStats,
}

impl DecodeSession {
    /// Dense prefill of every prompt; the returned session holds the logits
    /// of each prompt's last position.
    pub fn prefill(
        model: &Model,
        prompts: &[Vec<u32>],
        policy: SparsityPolicy,
        routers: RouterSet,
    ) -> Result<Self> {
        let c = &model.config;
        if prompts.is_empty() {
            return Err(PolarError::arg("prefill needs at least one prompt"));
        }
        if let Some(p) = prompts.iter().find(|p| p.is_empty()) {
            let _ = p;
            return Err(PolarError::arg("prompts must hold at least one token"));
        }
        if let Some(p) = prompts.iter().find(|p| p.len() > c.max_seq) {
            return Err(PolarError::Capacity(format!(
                "prompt of {} tokens exceeds max_seq {}",
                p.len(),
                c.max_seq
            )));
        }
        policy.validate(c)?;
        routers.check_for(model, &policy)?;
        let bsz = prompts.len();
        let mut caches: Vec<KvCache> = (0..c.layers)
            .map(|_| KvCache::new(bsz, c.kv_heads, c.max_seq, c.head_dim()))
            .collect();
        let mut last_logits = Matrix::zeros(bsz, c.vocab);
        for (b, prompt) in prompts.iter().enumerate() {
            let logits = model.forward_causal(&mut caches, b, prompt, None)?;
            last_logits.row_mut(b).copy_from_slice(logits.row(prompt.len() - 1));
        }
        Ok(Self {
            caches,
            prompt_lens: prompts.iter().map(Vec::len).collect(),
            steps: 0,
            routers,
            policy,
            block: FlashBlockParams::default(),
            last_logits,
            last_stats: StepStats::default(),
        })
    }

    /// A session whose caches hold `context_len` random positions per
    /// sequence, for latency measurements at long context without paying for
    /// prefill. Last logits start at zero.
    pub fn with_synthetic_context(
        model: &Model,
        batch: usize,
        context_len: usize,
        policy: SparsityPolicy,
        routers: RouterSet,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let c = &model.config;
        if batch == 0 {
            return Err(PolarError::arg("batch must be >= 1"));
        }
        if context_len >= c.max_seq {
            return Err(PolarError::Capacity(format!(
                "context {context_len} leaves no room under max_seq {}",
                c.max_seq
            )));
        }
        policy.validate(c)?;
        routers.check_for(model, &policy)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut caches = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            let mut cache = KvCache::new(batch, c.kv_heads, c.max_seq, c.head_dim());
            fill_synthetic(&mut cache, context_len, &mut rng)?;
            caches.push(cache);
        }
        Ok(Self {
            caches,
            prompt_lens: vec![context_len; batch],
            steps: 0,
            routers,
            policy,
            block: FlashBlockParams::default(),
            last_logits: Matrix::zeros(batch, c.vocab),
            last_stats: StepStats::default(),
        })
    }

    pub fn batch(&self) -> usize {
        self.prompt_lens.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Current length of every sequence.
    pub fn lengths(&self) -> Vec<usize> {
        self.prompt_lens.iter().map(|p| p + self.steps).collect()
    }

    pub fn cache(&self, layer: usize) -> &KvCache {
        &self.caches[layer]
    }

    pub fn policy(&self) -> &SparsityPolicy {
        &self.policy
    }

    pub fn set_block_params(&mut self, block: FlashBlockParams) {
        self.block = block;
    }

    pub fn last_logits(&self) -> &Matrix {
        &self.last_logits
    }

    pub fn last_stats(&self) -> &StepStats {
        &self.last_stats
    }

    /// Feeds one token per sequence and returns the next-token logits, `B × V`.
    pub fn decode_step(&mut self, model: &Model, tokens: &[u32]) -> Result<Matrix> {
        let c = &model.config;
        if tokens.len() != self.batch() {
            return Err(PolarError::dim("decode_step", self.batch(), tokens.len()));
        }
        let positions = self.lengths();
        if let Some(p) = positions.iter().find(|&&p| p >= c.max_seq) {
            return Err(PolarError::Capacity(format!("position {p} reaches max_seq {}", c.max_seq)));
        }
        let mut x = model.embed_tokens(tokens, &positions)?;
        let mut stats = StepStats {
            head_index: Vec::with_capacity(c.layers),
            union_size: Vec::with_capacity(c.layers),
        };
        let route = c.route_dim();
        let budget = head_budget(self.policy.head_density, route);
        for (l, layer) in model.layers.iter().enumerate() {
            let head_sel = if self.policy.routes_heads(l) {
                match self.policy.head_ranking {
                    HeadRanking::Router => HeadSelection::Router(
                        self.routers.head_router(l).expect("checked at session start"),
                        budget,
                    ),
                    HeadRanking::OracleNorm => HeadSelection::OracleNorm(budget),
                }
            } else {
                HeadSelection::Dense
            };
            let xn = layer.ln1.apply(&x);
            let attn = attention_block(c, layer, &xn, &mut self.caches[l], head_sel, self.block)?;
            axpy(1.0, attn.out.as_slice(), x.as_mut_slice());
            stats.head_index.push(attn.index);

            let neuron_sel = match (&self.policy.mlp_k_table, self.policy.mlp_sparse(c)) {
                (Some(table), true) => {
                    let k = table.k(l).expect("validated at session start");
                    match self.policy.mlp_ranking {
                        MlpRanking::Router => NeuronSelection::Router(
                            self.routers.mlp_router(l).expect("checked at session start"),
                            k,
                        ),
                        MlpRanking::Oracle => NeuronSelection::Oracle(k),
                    }
                }
                _ => NeuronSelection::Dense,
            };
            let xn = layer.ln2.apply(&x);
            let (y, active) = mlp_block(l, layer, &xn, neuron_sel)?;
            axpy(1.0, y.as_slice(), x.as_mut_slice());
            stats.union_size.push(active.map(|a| a.len()));
        }
        self.steps += 1;
        self.last_logits = model.logits(&x);
        self.last_stats = stats;
        Ok(self.last_logits.clone())
    }

    /// Greedy generation: each step takes the argmax of the current logits
    /// (ties to the lower token id) and feeds it back. Returns `B × steps`.
    pub fn generate(&mut self, model: &Model, steps: usize) -> Result<Vec<Vec<u32>>> {
        if steps == 0 {
            return Err(PolarError::arg("generate needs steps >= 1"));
        }
        let mut out = vec![Vec::with_capacity(steps); self.batch()];
        for s in 0..steps {
            let next: Vec<u32> = self.last_logits.row_iter().map(|r| argmax(r) as u32).collect();
            for (o, t) in out.iter_mut().zip(&next) {
                o.push(*t);
            }
            if s + 1 < steps {
                self.decode_step(model, &next)?;
            }
        }
        Ok(out)
    }
}

pub(crate) fn fill_synthetic<R: rand::Rng>(cache: &mut KvCache, len: usize, rng: &mut R) -> Result<()> {
    use rand_distr::{Distribution, StandardNormal};
    for b in 0..cache.batch() {
        for h in 0..cache.kv_heads() {
            let n = len * cache.head_dim();
            let (k, v) = cache.head_storage_mut(b, h);
            for x in k[..n].iter_mut().chain(v[..n].iter_mut()) {
                *x = StandardNormal.sample(rng);
            }
        }
        cache.set_len(b, len)?;
    }
    Ok(())
}

/// Dense activations of one layer, one row per traced token.
#[derive(Debug, Clone)]
pub struct LayerTap {
    /// Residual stream entering the block.
    pub residual: Matrix,
    /// Normalized attention input; what the head router reads.
    pub attn_input: Matrix,
    pub head_outputs: HeadTensor,
    /// Attention block output after the output projection.
    pub attn_output: Matrix,
    /// Normalized MLP input; what the MLP router reads.
    pub mlp_input: Matrix,
    /// `ReLU(x·W1 + b1) > 0` per neuron; empty rows for gated MLPs.
    pub mlp_active: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct DenseTrace {
    pub layers: Vec<LayerTap>,
    pub tokens: usize,
}

#[derive(Default)]
struct TapRows {
    residual: Vec<f32>,
    attn_input: Vec<f32>,
    heads: Vec<f32>,
    attn_output: Vec<f32>,
    mlp_input: Vec<f32>,
    mlp_active: Vec<Vec<bool>>,
}

impl Model {
    /// Causal forward of `tokens` for sequence `b`, appending to `caches`.
    /// Returns logits for every position.
    fn forward_causal(
        &self,
        caches: &mut [KvCache],
        b: usize,
        tokens: &[u32],
        mut taps: Option<&mut [TapRows]>,
    ) -> Result<Matrix> {
        let c = &self.config;
        let start = caches[0].len(b);
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        if start + tokens.len() > c.max_seq {
            return Err(PolarError::Capacity(format!(
                "{} positions exceed max_seq {}",
                start + tokens.len(),
                c.max_seq
            )));
        }
        let mut x = self.embed_tokens(tokens, &positions)?;
        let (hd, group, scale) = (c.head_dim(), c.group_size(), c.attention_scale());
        for (l, layer) in self.layers.iter().enumerate() {
            let cache = &mut caches[l];
            let xn = layer.ln1.apply(&x);
            let q = layer.attn.q.forward(&xn);
            let k = layer.attn.k.forward(&xn);
            let v = layer.attn.v.forward(&xn);
            for i in 0..tokens.len() {
                cache.append(b, k.row(i), v.row(i))?;
            }
            let mut heads = HeadTensor::zeros(tokens.len(), c.heads, hd);
            for i in 0..tokens.len() {
                let live = (start + i + 1) * hd;
                for h in 0..c.heads {
                    let kvh = h / group;
                    let o = naive_softmax_attention_single_head(
                        &q.row(i)[h * hd..(h + 1) * hd],
                        &cache.keys(b, kvh)[..live],
                        &cache.values(b, kvh)[..live],
                        hd,
                        scale,
                    )?;
                    heads.head_mut(i, h).copy_from_slice(&o);
                }
            }
            let attn_out = layer.attn.o.forward(&heads.clone().into_matrix());
            let residual = x.clone();
            axpy(1.0, attn_out.as_slice(), x.as_mut_slice());
            let xn2 = layer.ln2.apply(&x);
            let y = match &layer.mlp {
                MlpBlock::Relu(m) => dense_mlp_forward(&xn2, m)?,
                MlpBlock::SwiGlu(s) => s.forward(&xn2),
            };
            if let Some(taps) = taps.as_deref_mut() {
                let t = &mut taps[l];
                t.residual.extend_from_slice(residual.as_slice());
                t.attn_input.extend_from_slice(xn.as_slice());
                t.heads.extend_from_slice(heads.as_slice());
                t.attn_output.extend_from_slice(attn_out.as_slice());
                t.mlp_input.extend_from_slice(xn2.as_slice());
                match &layer.mlp {
                    MlpBlock::Relu(m) => {
                        let pre = m.preactivations(&xn2)?;
                        t.mlp_active
                            .extend(pre.row_iter().map(|r| r.iter().map(|v| *v > 0.0).collect()));
                    }
                    MlpBlock::SwiGlu(_) => t.mlp_active.extend((0..tokens.len()).map(|_| Vec::new())),
                }
            }
            axpy(1.0, y.as_slice(), x.as_mut_slice());
        }
        Ok(self.logits(&x))
    }

    /// Dense logits at every position of one sequence.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(PolarError::arg("forward needs at least one token"));
        }
        let c = &self.config;
        let mut caches: Vec<KvCache> = (0..c.layers)
            .map(|_| KvCache::new(1, c.kv_heads, tokens.len(), c.head_dim()))
            .collect();
        self.forward_causal(&mut caches, 0, tokens, None)
    }

    /// Dense causal pass over each sequence, recording every layer's
    /// intermediate activations for every token.
    pub fn trace_dense(&self, sequences: &[Vec<u32>]) -> Result<DenseTrace> {
        let c = &self.config;
        if sequences.iter().all(|s| s.is_empty()) {
            return Err(PolarError::arg("trace needs at least one token"));
        }
        let mut taps: Vec<TapRows> = (0..c.layers).map(|_| TapRows::default()).collect();
        let mut tokens = 0;
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let mut caches: Vec<KvCache> = (0..c.layers)
                .map(|_| KvCache::new(1, c.kv_heads, seq.len(), c.head_dim()))
                .collect();
            self.forward_causal(&mut caches, 0, seq, Some(&mut taps))?;
            tokens += seq.len();
        }
        let d = c.model_dim;
        let layers = taps
            .into_iter()
            .map(|t| {
                Ok(LayerTap {
                    residual: Matrix::new(tokens, d, t.residual)?,
                    attn_input: Matrix::new(tokens, d, t.attn_input)?,
                    head_outputs: HeadTensor::new(tokens, c.heads, c.head_dim(), t.heads)?,
                    attn_output: Matrix::new(tokens, d, t.attn_output)?,
                    mlp_input: Matrix::new(tokens, d, t.mlp_input)?,
                    mlp_active: t.mlp_active,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseTrace { layers, tokens })
    }
}

/// Perplexity of a token stream under `policy`: the stream is cut into
/// windows of at most `max_seq` tokens; each window's first token is
/// prefilled densely and every later token is scored by a policy-governed
/// decode step.
pub fn evaluate_perplexity(
    model: &Model,
    tokens: &[u32],
    policy: &SparsityPolicy,
    routers: &RouterSet,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(PolarError::arg("perplexity needs at least two tokens"));
    }
    let mut nll = 0.0f64;
    let mut scored = 0usize;
    for window in tokens.chunks(model.config.max_seq) {
        if window.len() < 2 {
            continue;
        }
        let mut session =
            DecodeSession::prefill(model, &[vec![window[0]]], policy.clone(), routers.clone())?;
        let mut logits = session.last_logits().clone();
        for i in 1..window.len() {
            let row = logits.row(0);
            nll += log_sum_exp(row) - row[window[i] as usize] as f64;
            scored += 1;
            if i + 1 < window.len() {
                logits = session.decode_step(model, &[window[i]])?;
            }
        }
    }
    Ok((nll / scored as f64).exp())
}

/// Draws `count` sequences of `len` tokens by ancestral sampling from the
/// dense model at temperature 1, starting from uniform first tokens. Used to
/// build study corpora for randomly initialized models.
pub fn sample_corpus(model: &Model, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    use rand::{Rng, SeedableRng};
    let c = &model.config;
    if count == 0 || len == 0 || len > c.max_seq {
        return Err(PolarError::arg(format!(
            "corpus needs count >= 1 and 1 <= len <= {}",
            c.max_seq
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let first: Vec<Vec<u32>> = (0..count)
        .map(|_| vec![rng.random_range(0..c.vocab as u32)])
        .collect();
    let mut seqs = first.clone();
    let mut session = DecodeSession::prefill(model, &first, SparsityPolicy::dense(), RouterSet::empty(c.layers))?;
    for step in 1..len {
        let next: Vec<u32> = session
            .last_logits()
            .row_iter()
            .map(|row| {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let w: Vec<f64> = row.iter().map(|v| ((v - m) as f64).exp()).collect();
                let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                for (t, wt) in w.iter().enumerate() {
                    u -= wt;
                    if u <= 0.0 {
                        return t as u32;
                    }
                }
                (w.len() - 1) as u32
            })
            .collect();
        for (s, t) in seqs.iter_mut().zip(&next) {
            s.push(*t);
        }
        if step + 1 < len {
            session.decode_step(model, &next)?;
        }
    }
    Ok(seqs)
}

/// Per-sequence head ranking for a `B × H_route` score matrix, best first.
pub fn rank_heads(scores: &Matrix) -> Vec<Vec<usize>> {
    scores.row_iter().map(rank_descending).collect()
}
