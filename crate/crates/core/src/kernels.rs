//! Sparsity-aware decode kernels.
//!
//! * [`selective_gemm`] multiplies against a subset of neuron columns without
//!   materializing a gathered copy of the weights, and [`selective_gemm_rows`]
//!   is its transpose-side twin used by the down projection.
//! * [`selective_head_flash_attention_decode`] runs blocked online-softmax
//!   attention for only the heads named in a [`BatchHeadIndex`], one parallel
//!   work unit per `(sequence, selected head)` pair.
//!
//! Dense baselines share the same inner loops so full-density sparse runs
//! reproduce the dense result.

use rayon::prelude::*;

use crate::error::{PolarError, Result};
use crate::tensor::{axpy, dot, relu, HeadTensor, KvCache, Matrix, NeuronMatrix};

/// Default rows of K/V processed per attention block on CPU.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Union of active MLP neurons for one layer and one batch step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronIndexTensor {
    layer: usize,
    indices: Vec<usize>,
}

impl NeuronIndexTensor {
    /// Validates that `indices` is strictly ascending and bounded by `ffn_dim`.
    pub fn new(layer: usize, indices: Vec<usize>, ffn_dim: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(PolarError::arg("neuron index set is empty"));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(PolarError::arg("neuron indices must be strictly ascending"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= ffn_dim {
                return Err(PolarError::Index {
                    op: "NeuronIndexTensor::new",
                    index: last,
                    bound: ffn_dim,
                });
            }
        }
        Ok(Self { layer, indices })
    }

    pub fn full(layer: usize, ffn_dim: usize) -> Self {
        Self {
            layer,
            indices: (0..ffn_dim).collect(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-sequence active head (or KV group) ids, `B × top_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchHeadIndex {
    batch: usize,
    top_k: usize,
    entries: Vec<usize>,
}

impl BatchHeadIndex {
    /// Builds from one row per sequence. Rows must share a length, be
    /// duplicate-free, and only hold ids below `bound`.
    pub fn new(rows: Vec<Vec<usize>>, bound: usize) -> Result<Self> {
        let batch = rows.len();
        let top_k = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(batch * top_k);
        let mut seen = vec![false; bound];
        for row in &rows {
            if row.len() != top_k {
                return Err(PolarError::dim("BatchHeadIndex::new", top_k, row.len()));
            }
            seen.iter_mut().for_each(|s| *s = false);
            for &h in row {
                if h >= bound {
                    return Err(PolarError::Index {
                        op: "BatchHeadIndex::new",
                        index: h,
                        bound,
                    });
                }
                if seen[h] {
                    return Err(PolarError::arg(format!("duplicate head id {h} in row")));
                }
                seen[h] = true;
            }
            entries.extend_from_slice(row);
        }
        Ok(Self {
            batch,
            top_k,
            entries,
        })
    }

    /// Every head selected for every sequence.
    pub fn all(batch: usize, heads: usize) -> Self {
        Self {
            batch,
            top_k: heads,
            entries: (0..batch).flat_map(|_| 0..heads).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.entries[b * self.top_k..(b + 1) * self.top_k]
    }
}

/// Block geometry for the blocked attention loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlashBlockParams {
    block_size: usize,
}

impl FlashBlockParams {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(PolarError::arg("attention block size must be >= 1"));
        }
        Ok(Self { block_size })
    }

    /// Maps an on-chip byte budget to a block size, `⌊budget / (4·d)⌋`, floored at 1.
    pub fn from_sram_budget(bytes: usize, dim: usize) -> Self {
        Self {
            block_size: (bytes / (4 * dim.max(1))).max(1),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of blocks needed to cover `n_kv` keys.
    pub fn num_blocks(&self, n_kv: usize) -> usize {
        n_kv.div_ceil(self.block_size)
    }
}

impl Default for FlashBlockParams {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

/// Running state of the one-pass softmax: accumulator `o_acc` kept normalized
/// after every block, normalizer `l_acc`, running max `m_acc`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState {
    pub o_acc: Vec<f32>,
    pub l_acc: f32,
    pub m_acc: f32,
}

impl OnlineSoftmaxState {
    pub fn new(head_dim: usize) -> Self {
        Self {
            o_acc: vec![0.0; head_dim],
            l_acc: 0.0,
            m_acc: f32::NEG_INFINITY,
        }
    }

    /// Folds one block in. `scores` holds the already-scaled logits of the
    /// block and is overwritten with the unnormalized block probabilities;
    /// `values` holds the matching value rows.
    pub fn absorb(&mut self, scores: &mut [f32], values: &[f32], pv: &mut [f32]) {
        let d = self.o_acc.len();
        let (m_blk, l_blk) = block_probabilities(scores);
        weighted_value_sum(scores, values, d, pv);

        let m_new = self.m_acc.max(m_blk);
        let alpha = (self.m_acc - m_new).exp();
        let beta = (m_blk - m_new).exp();
        let l_new = alpha * self.l_acc + beta * l_blk;
        let keep = alpha * self.l_acc;
        for (o, p) in self.o_acc.iter_mut().zip(pv.iter()) {
            *o = (keep * *o + beta * p) / l_new;
        }
        self.l_acc = l_new;
        self.m_acc = m_new;
    }
}

/// Deferred-division form of the same recurrence: the accumulator stays
/// unnormalized and is divided by the final normalizer once at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferredSoftmaxState {
    pub o_acc: Vec<f32>,
    pub l_acc: f32,
    pub m_acc: f32,
}

impl DeferredSoftmaxState {
    pub fn new(head_dim: usize) -> Self {
        Self {
            o_acc: vec![0.0; head_dim],
            l_acc: 0.0,
            m_acc: f32::NEG_INFINITY,
        }
    }

    pub fn absorb(&mut self, scores: &mut [f32], values: &[f32], pv: &mut [f32]) {
        let d = self.o_acc.len();
        let (m_blk, l_blk) = block_probabilities(scores);
        weighted_value_sum(scores, values, d, pv);

        let m_new = self.m_acc.max(m_blk);
        let alpha = (self.m_acc - m_new).exp();
        let beta = (m_blk - m_new).exp();
        for (o, p) in self.o_acc.iter_mut().zip(pv.iter()) {
            *o = alpha * *o + beta * p;
        }
        self.l_acc = alpha * self.l_acc + beta * l_blk;
        self.m_acc = m_new;
    }

    pub fn finish(self) -> Vec<f32> {
        let l = self.l_acc;
        self.o_acc.into_iter().map(|o| o / l).collect()
    }
}

/// Replaces scores by `exp(s - max)` and returns `(max, Σ exp(s - max))`.
#[inline]
fn block_probabilities(scores: &mut [f32]) -> (f32, f32) {
    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut l = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        l += *s;
    }
    (m, l)
}

#[inline]
fn weighted_value_sum(p: &[f32], values: &[f32], d: usize, pv: &mut [f32]) {
    pv.iter_mut().for_each(|x| *x = 0.0);
    for (w, v) in p.iter().zip(values.chunks_exact(d)) {
        axpy(*w, v, pv);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(PolarError::arg(format!("{op}: empty index set")));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= bound) {
        return Err(PolarError::Index {
            op,
            index: bad,
            bound,
        });
    }
    Ok(())
}

/// `C[:, j] = act(A × B[:, I[j]])` for a logical `K × N` matrix `B` stored
/// neuron-major. Selected neurons are read in place; no gathered copy of `B`
/// is built.
pub fn selective_gemm(
    a: &Matrix,
    b: &NeuronMatrix,
    idx: &[usize],
    activation: Activation,
) -> Result<Matrix> {
    selective_gemm_bias(a, b, idx, None, activation)
}

/// [`selective_gemm`] with a per-neuron bias added before the activation.
/// `bias` is indexed by neuron id, so it has length `N`.
pub fn selective_gemm_bias(
    a: &Matrix,
    b: &NeuronMatrix,
    idx: &[usize],
    bias: Option<&[f32]>,
    activation: Activation,
) -> Result<Matrix> {
    if a.cols() != b.fan() {
        return Err(PolarError::dim("selective_gemm", b.fan(), a.cols()));
    }
    check_indices("selective_gemm", idx, b.neurons())?;
    if let Some(bias) = bias {
        if bias.len() != b.neurons() {
            return Err(PolarError::dim("selective_gemm bias", b.neurons(), bias.len()));
        }
    }
    let mut out = Matrix::zeros(a.rows(), idx.len());
    for i in 0..a.rows() {
        let x = a.row(i);
        let dst = out.row_mut(i);
        for (c, &j) in dst.iter_mut().zip(idx) {
            let mut v = dot(x, b.neuron(j));
            if let Some(bias) = bias {
                v += bias[j];
            }
            *c = match activation {
                Activation::None => v,
                Activation::Relu => relu(v),
            };
        }
    }
    Ok(out)
}

/// `Y = H × W[I, :]` where row `I[j]` of the logical `N × K` matrix is the
/// contiguous run `w.neuron(I[j])`. `h` is `M × |I|`; the result is `M × K`.
pub fn selective_gemm_rows(h: &Matrix, w: &NeuronMatrix, idx: &[usize]) -> Result<Matrix> {
    if h.cols() != idx.len() {
        return Err(PolarError::dim("selective_gemm_rows", idx.len(), h.cols()));
    }
    check_indices("selective_gemm_rows", idx, w.neurons())?;
    let mut out = Matrix::zeros(h.rows(), w.fan());
    for i in 0..h.rows() {
        let hrow = h.row(i);
        let dst = out.row_mut(i);
        for (&coef, &j) in hrow.iter().zip(idx) {
            if coef != 0.0 {
                axpy(coef, w.neuron(j), dst);
            }
        }
    }
    Ok(out)
}

/// ReLU MLP block weights. Both projections are logical `d × D` matrices
/// stored neuron-major, so neuron `j`'s input weights `W1[:, j]` and output
/// weights `W2[:, j]` are each one contiguous run of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: NeuronMatrix,
    pub b1: Vec<f32>,
    pub w2: NeuronMatrix,
    pub b2: Vec<f32>,
}

impl MlpWeights {
    pub fn new(w1: NeuronMatrix, b1: Vec<f32>, w2: NeuronMatrix, b2: Vec<f32>) -> Result<Self> {
        let (d, ffn) = (w1.fan(), w1.neurons());
        if w2.fan() != d || w2.neurons() != ffn {
            return Err(PolarError::dim(
                "MlpWeights::new",
                format!("W2 {d}x{ffn}"),
                format!("{}x{}", w2.fan(), w2.neurons()),
            ));
        }
        if b1.len() != ffn || b2.len() != d {
            return Err(PolarError::dim(
                "MlpWeights::new",
                format!("b1 {ffn}, b2 {d}"),
                format!("b1 {}, b2 {}", b1.len(), b2.len()),
            ));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// From logical `d × D` dense matrices.
    pub fn from_dense(w1: &Matrix, b1: Vec<f32>, w2: &Matrix, b2: Vec<f32>) -> Result<Self> {
        Self::new(
            NeuronMatrix::from_dense(w1),
            b1,
            NeuronMatrix::from_dense(w2),
            b2,
        )
    }

    pub fn model_dim(&self) -> usize {
        self.w1.fan()
    }

    pub fn ffn_dim(&self) -> usize {
        self.w1.neurons()
    }

    /// Pre-activation hidden values `x·W1 + b1` for every neuron.
    pub fn preactivations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.model_dim() {
            return Err(PolarError::dim("mlp preactivations", self.model_dim(), x.cols()));
        }
        let mut h = crate::tensor::matmul_neuron(x, &self.w1);
        h.add_row_bias(&self.b1)?;
        Ok(h)
    }
}

/// `y = ReLU(x·W1[:, S] + b1[S]) · W2[:, S]ᵀ + b2` over the active set `S`.
pub fn sparse_mlp_forward(x: &Matrix, mlp: &MlpWeights, active: &NeuronIndexTensor) -> Result<Matrix> {
    if x.cols() != mlp.model_dim() {
        return Err(PolarError::dim("sparse_mlp_forward", mlp.model_dim(), x.cols()));
    }
    let idx = active.indices();
    let hidden = selective_gemm_bias(x, &mlp.w1, idx, Some(&mlp.b1), Activation::Relu)?;
    let mut y = selective_gemm_rows(&hidden, &mlp.w2, idx)?;
    y.add_row_bias(&mlp.b2)?;
    Ok(y)
}

/// Dense two-layer ReLU MLP over every neuron.
pub fn dense_mlp_forward(x: &Matrix, mlp: &MlpWeights) -> Result<Matrix> {
    if x.cols() != mlp.model_dim() {
        return Err(PolarError::dim("dense_mlp_forward", mlp.model_dim(), x.cols()));
    }
    let ffn = mlp.ffn_dim();
    let mut y = Matrix::zeros(x.rows(), mlp.model_dim());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let dst = y.row_mut(i);
        for j in 0..ffn {
            let h = relu(dot(xr, mlp.w1.neuron(j)) + mlp.b1[j]);
            if h != 0.0 {
                axpy(h, mlp.w2.neuron(j), dst);
            }
        }
    }
    y.add_row_bias(&mlp.b2)?;
    Ok(y)
}

/// Sorted, deduplicated union of per-sequence active sets.
pub fn union_neuron_indices(layer: usize, per_sequence: &[Vec<usize>]) -> NeuronIndexTensor {
    let mut all: Vec<usize> = per_sequence.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    NeuronIndexTensor { layer, indices: all }
}

/// One attention work unit: a single query vector against one KV head.
fn attend_unit(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
    params: FlashBlockParams,
    scale: f32,
    out: &mut [f32],
) {
    let n_kv = keys.len() / head_dim;
    let bc = params.block_size();
    let mut state = OnlineSoftmaxState::new(head_dim);
    let mut scores = vec![0.0f32; bc.min(n_kv)];
    let mut pv = vec![0.0f32; head_dim];
    for j in 0..params.num_blocks(n_kv) {
        let start = j * bc;
        let end = (start + bc).min(n_kv);
        let kb = &keys[start * head_dim..end * head_dim];
        let vb = &values[start * head_dim..end * head_dim];
        let s = &mut scores[..end - start];
        for (sv, k) in s.iter_mut().zip(kb.chunks_exact(head_dim)) {
            *sv = scale * dot(q, k);
        }
        state.absorb(s, vb, &mut pv);
    }
    out.copy_from_slice(&state.o_acc);
}

/// `(sequence, query head, kv head)` triples to compute.
fn run_units(
    q: &HeadTensor,
    cache: &KvCache,
    units: Vec<(usize, usize, usize)>,
    params: FlashBlockParams,
    scale: f32,
) -> Result<HeadTensor> {
    let (bsz, heads, d) = (q.batch(), q.heads(), q.head_dim());
    let mut out = HeadTensor::zeros(bsz, heads, d);
    let mut slots: Vec<Option<&mut [f32]>> = out.as_mut_slice().chunks_mut(d).map(Some).collect();
    let mut work = Vec::with_capacity(units.len());
    for (b, qh, kvh) in units {
        let slot = slots[b * heads + qh].take().ok_or_else(|| {
            PolarError::arg(format!("head {qh} selected twice for sequence {b}"))
        })?;
        work.push((b, qh, kvh, slot));
    }
    work.into_par_iter().for_each(|(b, qh, kvh, slot)| {
        attend_unit(
            q.head(b, qh),
            cache.keys(b, kvh),
            cache.values(b, kvh),
            d,
            params,
            scale,
            slot,
        );
    });
    Ok(out)
}

fn check_attention_inputs(
    op: &'static str,
    q: &HeadTensor,
    cache: &KvCache,
    bhi: &BatchHeadIndex,
    id_bound: usize,
    scale: f32,
) -> Result<()> {
    if q.head_dim() != cache.head_dim() {
        return Err(PolarError::dim(op, cache.head_dim(), q.head_dim()));
    }
    if q.batch() != cache.batch() || bhi.batch() != q.batch() {
        return Err(PolarError::dim(
            op,
            format!("batch {}", q.batch()),
            format!("cache {}, index {}", cache.batch(), bhi.batch()),
        ));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(PolarError::arg("attention scale must be positive"));
    }
    for b in 0..q.batch() {
        if cache.len(b) == 0 {
            return Err(PolarError::EmptyCache(b));
        }
        if let Some(&h) = bhi.row(b).iter().find(|&&h| h >= id_bound) {
            return Err(PolarError::Index {
                op,
                index: h,
                bound: id_bound,
            });
        }
    }
    Ok(())
}

/// Blocked online-softmax decode attention over only the heads listed in
/// `bhi`. Outputs of heads not selected for a sequence are exactly zero and
/// their cache regions are never read. Requires `H_kv == H`.
pub fn selective_head_flash_attention_decode(
    q: &HeadTensor,
    cache: &KvCache,
    bhi: &BatchHeadIndex,
    params: FlashBlockParams,
    scale: f32,
) -> Result<HeadTensor> {
    let op = "selective_head_flash_attention_decode";
    if cache.kv_heads() != q.heads() {
        return Err(PolarError::dim(op, q.heads(), cache.kv_heads()));
    }
    check_attention_inputs(op, q, cache, bhi, q.heads(), scale)?;
    let units = (0..bhi.batch())
        .flat_map(|b| bhi.row(b).iter().map(move |&h| (b, h, h)))
        .collect();
    run_units(q, cache, units, params, scale)
}

/// Group-sparse variant for grouped-query attention: selecting KV group `g`
/// activates the `H / H_kv` query heads `g·G .. (g+1)·G`, all reading the
/// group's shared keys and values.
pub fn gqa_selective_attention_decode(
    q: &HeadTensor,
    cache: &KvCache,
    group_bhi: &BatchHeadIndex,
    params: FlashBlockParams,
    scale: f32,
) -> Result<HeadTensor> {
    let op = "gqa_selective_attention_decode";
    let (heads, kv_heads) = (q.heads(), cache.kv_heads());
    if kv_heads == 0 || heads % kv_heads != 0 {
        return Err(PolarError::dim(
            op,
            format!("H divisible by H_kv={kv_heads}"),
            heads,
        ));
    }
    check_attention_inputs(op, q, cache, group_bhi, kv_heads, scale)?;
    let group = heads / kv_heads;
    let units = (0..group_bhi.batch())
        .flat_map(|b| {
            group_bhi
                .row(b)
                .iter()
                .flat_map(move |&g| (g * group..(g + 1) * group).map(move |qh| (b, qh, g)))
        })
        .collect();
    run_units(q, cache, units, params, scale)
}

/// All heads, for MHA and GQA alike.
pub fn dense_attention_decode(
    q: &HeadTensor,
    cache: &KvCache,
    params: FlashBlockParams,
    scale: f32,
) -> Result<HeadTensor> {
    let all = BatchHeadIndex::all(q.batch(), cache.kv_heads());
    gqa_selective_attention_decode(q, cache, &all, params, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, naive_softmax_attention_single_head};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn filled_cache(bsz: usize, kvh: usize, lens: &[usize], d: usize, r: &mut ChaCha8Rng) -> KvCache {
        let cap = *lens.iter().max().unwrap();
        let mut c = KvCache::new(bsz, kvh, cap, d);
        for (b, &n) in lens.iter().enumerate() {
            for _ in 0..n {
                let k: Vec<f32> = (0..kvh * d).map(|_| r.random_range(-1.0..1.0)).collect();
                let v: Vec<f32> = (0..kvh * d).map(|_| r.random_range(-1.0..1.0)).collect();
                c.append(b, &k, &v).unwrap();
            }
        }
        c
    }

    #[test]
    fn selective_gemm_full_set_equals_matmul() {
        let mut r = rng(1);
        let a = Matrix::random_normal(5, 7, 1.0, &mut r);
        let b = Matrix::random_normal(7, 9, 1.0, &mut r);
        let idx: Vec<usize> = (0..9).collect();
        let c = selective_gemm(&a, &NeuronMatrix::from_dense(&b), &idx, Activation::None).unwrap();
        assert_eq!(c, matmul(&a, &b).unwrap());
    }

    #[test]
    fn selective_gemm_single_column() {
        let mut r = rng(2);
        let a = Matrix::random_normal(4, 3, 1.0, &mut r);
        let b = Matrix::random_normal(3, 6, 1.0, &mut r);
        let c = selective_gemm(&a, &NeuronMatrix::from_dense(&b), &[4], Activation::None).unwrap();
        let full = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (4, 1));
        for i in 0..4 {
            assert_eq!(c.get(i, 0), full.get(i, 4));
        }
    }

    #[test]
    fn selective_gemm_errors() {
        let a = Matrix::zeros(2, 3);
        let b = NeuronMatrix::zeros(3, 4);
        assert!(matches!(
            selective_gemm(&a, &b, &[4], Activation::None),
            Err(PolarError::Index { index: 4, .. })
        ));
        assert!(matches!(
            selective_gemm(&a, &b, &[], Activation::None),
            Err(PolarError::Argument(_))
        ));
    }

    #[test]
    fn dense_mlp_scalar_case() {
        let mlp = MlpWeights::from_dense(
            &Matrix::new(1, 1, vec![3.0]).unwrap(),
            vec![-1.0],
            &Matrix::new(1, 1, vec![4.0]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let x = Matrix::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(dense_mlp_forward(&x, &mlp).unwrap().as_slice(), &[20.0]);
        let s = NeuronIndexTensor::full(0, 1);
        assert_eq!(sparse_mlp_forward(&x, &mlp, &s).unwrap().as_slice(), &[20.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mlp = MlpWeights::new(
            NeuronMatrix::zeros(3, 5),
            vec![0.0; 5],
            NeuronMatrix::zeros(3, 5),
            vec![1.5, -2.0, 0.25],
        )
        .unwrap();
        let x = Matrix::random_normal(2, 3, 1.0, &mut rng(3));
        let y = dense_mlp_forward(&x, &mlp).unwrap();
        for row in y.row_iter() {
            assert_eq!(row, &[1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn sparse_mlp_kills_hidden_with_nonpositive_bias() {
        let mut r = rng(4);
        let mlp = MlpWeights::from_dense(
            &Matrix::random_normal(4, 8, 1.0, &mut r),
            (0..8).map(|i| -(i as f32) * 0.1).collect(),
            &Matrix::random_normal(4, 8, 1.0, &mut r),
            vec![0.5, 0.25, -1.0, 2.0],
        )
        .unwrap();
        let x = Matrix::zeros(3, 4);
        let s = NeuronIndexTensor::new(0, vec![0, 3, 5], 8).unwrap();
        let y = sparse_mlp_forward(&x, &mlp, &s).unwrap();
        for row in y.row_iter() {
            assert_eq!(row, &[0.5, 0.25, -1.0, 2.0]);
        }
    }

    #[test]
    fn neuron_index_validation() {
        assert!(NeuronIndexTensor::new(0, vec![], 4).is_err());
        assert!(NeuronIndexTensor::new(0, vec![1, 1], 4).is_err());
        assert!(NeuronIndexTensor::new(0, vec![2, 1], 4).is_err());
        assert!(matches!(
            NeuronIndexTensor::new(0, vec![1, 4], 4),
            Err(PolarError::Index { .. })
        ));
    }

    #[test]
    fn batch_head_index_validation() {
        assert!(BatchHeadIndex::new(vec![vec![0, 1], vec![2]], 4).is_err());
        assert!(BatchHeadIndex::new(vec![vec![0, 0]], 4).is_err());
        assert!(BatchHeadIndex::new(vec![vec![0, 4]], 4).is_err());
        let bhi = BatchHeadIndex::new(vec![vec![3, 1], vec![0, 2]], 4).unwrap();
        assert_eq!(bhi.row(1), &[0, 2]);
    }

    #[test]
    fn block_params() {
        assert!(FlashBlockParams::new(0).is_err());
        let p = FlashBlockParams::new(7).unwrap();
        assert_eq!(p.num_blocks(1), 1);
        assert_eq!(p.num_blocks(7), 1);
        assert_eq!(p.num_blocks(8), 2);
        assert_eq!(FlashBlockParams::from_sram_budget(65536, 64).block_size(), 256);
        assert_eq!(FlashBlockParams::from_sram_budget(10, 64).block_size(), 1);
    }

    #[test]
    fn single_cached_position_returns_value_row() {
        let mut r = rng(5);
        let cache = filled_cache(2, 3, &[1, 4], 4, &mut r);
        let q = HeadTensor::random_normal(2, 3, 4, 1.0, &mut r);
        let bhi = BatchHeadIndex::new(vec![vec![0, 2], vec![1, 2]], 3).unwrap();
        let o = selective_head_flash_attention_decode(&q, &cache, &bhi, FlashBlockParams::default(), 0.5)
            .unwrap();
        assert_eq!(o.head(0, 0), cache.values(0, 0));
        assert_eq!(o.head(0, 2), cache.values(0, 2));
        assert!(o.head(0, 1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_heads_match_naive() {
        let mut r = rng(6);
        let (bsz, h, d) = (4, 8, 16);
        let cache = filled_cache(bsz, h, &[128; 4], d, &mut r);
        let q = HeadTensor::random_normal(bsz, h, d, 1.0, &mut r);
        let scale = 1.0 / (d as f32).sqrt();
        let o = selective_head_flash_attention_decode(
            &q,
            &cache,
            &BatchHeadIndex::all(bsz, h),
            FlashBlockParams::default(),
            scale,
        )
        .unwrap();
        for b in 0..bsz {
            for hh in 0..h {
                let want = naive_softmax_attention_single_head(
                    q.head(b, hh),
                    cache.keys(b, hh),
                    cache.values(b, hh),
                    d,
                    scale,
                )
                .unwrap();
                for (x, y) in o.head(b, hh).iter().zip(&want) {
                    assert!((x - y).abs() <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn block_size_invariance_small() {
        let mut r = rng(7);
        let n = 19;
        let cache = filled_cache(2, 4, &[n, n], 8, &mut r);
        let q = HeadTensor::random_normal(2, 4, 8, 1.0, &mut r);
        let bhi = BatchHeadIndex::new(vec![vec![1], vec![3]], 4).unwrap();
        let base = selective_head_flash_attention_decode(&q, &cache, &bhi, FlashBlockParams::new(1).unwrap(), 0.3)
            .unwrap();
        for bc in [7, n] {
            let o = selective_head_flash_attention_decode(&q, &cache, &bhi, FlashBlockParams::new(bc).unwrap(), 0.3)
                .unwrap();
            for (x, y) in o.as_slice().iter().zip(base.as_slice()) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn attention_errors() {
        let mut r = rng(8);
        let cache = filled_cache(2, 2, &[3, 0], 4, &mut r);
        let q = HeadTensor::random_normal(2, 2, 4, 1.0, &mut r);
        let p = FlashBlockParams::default();
        let bhi = BatchHeadIndex::all(2, 2);
        assert!(matches!(
            selective_head_flash_attention_decode(&q, &cache, &bhi, p, 1.0),
            Err(PolarError::EmptyCache(1))
        ));
        let cache = filled_cache(2, 2, &[3, 2], 4, &mut r);
        let bad = BatchHeadIndex::new(vec![vec![0], vec![1]], 3).unwrap();
        let bad = BatchHeadIndex::new(vec![vec![2], bad.row(1).to_vec()], 3).unwrap();
        assert!(matches!(
            selective_head_flash_attention_decode(&q, &cache, &bad, p, 1.0),
            Err(PolarError::Index { index: 2, .. })
        ));
    }

    #[test]
    fn gqa_degenerates_to_mha() {
        let mut r = rng(9);
        let cache = filled_cache(3, 4, &[5, 9, 2], 8, &mut r);
        let q = HeadTensor::random_normal(3, 4, 8, 1.0, &mut r);
        let bhi = BatchHeadIndex::new(vec![vec![0, 3], vec![2, 1], vec![1, 0]], 4).unwrap();
        let p = FlashBlockParams::new(3).unwrap();
        let a = selective_head_flash_attention_decode(&q, &cache, &bhi, p, 0.35).unwrap();
        let b = gqa_selective_attention_decode(&q, &cache, &bhi, p, 0.35).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gqa_one_group_activates_its_query_heads() {
        let mut r = rng(10);
        let cache = filled_cache(2, 4, &[6, 6], 4, &mut r);
        let q = HeadTensor::random_normal(2, 8, 4, 1.0, &mut r);
        let bhi = BatchHeadIndex::new(vec![vec![1], vec![3]], 4).unwrap();
        let o = gqa_selective_attention_decode(&q, &cache, &bhi, FlashBlockParams::default(), 0.5).unwrap();
        for b in 0..2 {
            let live: Vec<usize> = (0..8)
                .filter(|&h| o.head(b, h).iter().any(|v| *v != 0.0))
                .collect();
            let g = bhi.row(b)[0];
            assert_eq!(live, vec![2 * g, 2 * g + 1]);
        }
    }

    #[test]
    fn union_small_cases() {
        let u = union_neuron_indices(2, &[vec![3, 1, 7]]);
        assert_eq!(u.indices(), &[1, 3, 7]);
        let u = union_neuron_indices(0, &[vec![0, 1], vec![2, 3]]);
        assert_eq!(u.indices(), &[0, 1, 2, 3]);
        assert_eq!(u.layer(), 0);
    }

    #[test]
    fn deferred_and_running_agree() {
        let mut r = rng(11);
        let d = 4;
        let keys: Vec<f32> = (0..10 * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let vals: Vec<f32> = (0..10 * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let q: Vec<f32> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut run = OnlineSoftmaxState::new(d);
        let mut def = DeferredSoftmaxState::new(d);
        let mut pv = vec![0.0; d];
        for blk in 0..4 {
            let s0 = blk * 3;
            let s1 = (s0 + 3).min(10);
            let scores: Vec<f32> = (s0..s1).map(|i| dot(&q, &keys[i * d..(i + 1) * d])).collect();
            run.absorb(&mut scores.clone(), &vals[s0 * d..s1 * d], &mut pv);
            def.absorb(&mut scores.clone(), &vals[s0 * d..s1 * d], &mut pv);
        }
        let want = naive_softmax_attention_single_head(&q, &keys, &vals, d, 1.0).unwrap();
        for ((a, b), w) in run.o_acc.iter().zip(def.finish()).zip(want) {
            assert!((a - w).abs() < 1e-5 && (b - w).abs() < 1e-5);
        }
    }
}
