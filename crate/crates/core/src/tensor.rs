//! Dense numeric substrate: row-major matrices, neuron-major weight storage,
//! per-head activation tensors, the KV cache, and the reference primitives the
//! sparse kernels are checked against.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PolarError, Result};

/// Row-major `rows × cols` matrix of `f32`.
///
/// Hidden states of a decode step are stored as a `B × d` matrix; the
/// singleton token axis of the logical `B × 1 × d` shape is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PolarError::dim(
                "Matrix::new",
                format!("{} elements", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let data = gaussian_vec(rows * cols, std, rng);
        Self { rows, cols, data }
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        lo: f32,
        hi: f32,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(PolarError::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(PolarError::dim("add_row_bias", self.cols, bias.len()));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }
}

/// A logical `K × N` weight matrix stored neuron-major: the `K` weights that
/// belong to output neuron `j` (column `j` of the logical matrix) are one
/// contiguous run. Selecting a subset of neurons therefore touches whole
/// contiguous rows and never strides across the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMatrix {
    fan: usize,
    neurons: usize,
    data: Vec<f32>,
}

impl NeuronMatrix {
    /// Stores a logical `K × N` dense matrix in neuron-major order.
    pub fn from_dense(m: &Matrix) -> Self {
        let t = m.transpose();
        Self {
            fan: m.rows(),
            neurons: m.cols(),
            data: t.into_vec(),
        }
    }

    /// Wraps data already laid out as `N` runs of `K` weights.
    pub fn from_neuron_rows(fan: usize, neurons: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != fan * neurons {
            return Err(PolarError::dim(
                "NeuronMatrix::from_neuron_rows",
                fan * neurons,
                data.len(),
            ));
        }
        Ok(Self { fan, neurons, data })
    }

    pub fn zeros(fan: usize, neurons: usize) -> Self {
        Self {
            fan,
            neurons,
            data: vec![0.0; fan * neurons],
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(fan: usize, neurons: usize, std: f32, rng: &mut R) -> Self {
        Self {
            fan,
            neurons,
            data: gaussian_vec(fan * neurons, std, rng),
        }
    }

    /// Length of each neuron's weight run (`K`, the logical row count).
    #[inline]
    pub fn fan(&self) -> usize {
        self.fan
    }

    /// Number of neurons (`N`, the logical column count).
    #[inline]
    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn neuron(&self, j: usize) -> &[f32] {
        &self.data[j * self.fan..(j + 1) * self.fan]
    }

    #[inline]
    pub fn neuron_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.data[j * self.fan..(j + 1) * self.fan]
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix {
            rows: self.neurons,
            cols: self.fan,
            data: self.data.clone(),
        }
        .transpose()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Per-head activations for one decode step, logical shape `B × H × 1 × d_h`.
/// Used for queries and for attention outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    batch: usize,
    heads: usize,
    head_dim: usize,
    data: Vec<f32>,
}

impl HeadTensor {
    pub fn zeros(batch: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            batch,
            heads,
            head_dim,
            data: vec![0.0; batch * heads * head_dim],
        }
    }

    pub fn new(batch: usize, heads: usize, head_dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != batch * heads * head_dim {
            return Err(PolarError::dim(
                "HeadTensor::new",
                batch * heads * head_dim,
                data.len(),
            ));
        }
        Ok(Self {
            batch,
            heads,
            head_dim,
            data,
        })
    }

    /// Reinterprets a `B × (H·d_h)` matrix as per-head vectors.
    pub fn from_matrix(m: Matrix, heads: usize) -> Result<Self> {
        if heads == 0 || !m.cols().is_multiple_of(heads) {
            return Err(PolarError::dim(
                "HeadTensor::from_matrix",
                format!("cols divisible by {heads}"),
                m.cols(),
            ));
        }
        let head_dim = m.cols() / heads;
        Ok(Self {
            batch: m.rows(),
            heads,
            head_dim,
            data: m.into_vec(),
        })
    }

    pub fn random_normal<R: Rng + ?Sized>(
        batch: usize,
        heads: usize,
        head_dim: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            batch,
            heads,
            head_dim,
            data: gaussian_vec(batch * heads * head_dim, std, rng),
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.heads
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn head(&self, b: usize, h: usize) -> &[f32] {
        let off = (b * self.heads + h) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    #[inline]
    pub fn head_mut(&mut self, b: usize, h: usize) -> &mut [f32] {
        let off = (b * self.heads + h) * self.head_dim;
        &mut self.data[off..off + self.head_dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flattens back to a `B × (H·d_h)` matrix.
    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.batch,
            cols: self.heads * self.head_dim,
            data: self.data,
        }
    }
}

/// Key/value history for one attention layer, laid out `B × H_kv × capacity × d_h`.
///
/// Writes are append-only per sequence. Slots at or beyond `len(b)` are never
/// read by any kernel.
#[derive(Debug, Clone)]
pub struct KvCache {
    batch: usize,
    kv_heads: usize,
    capacity: usize,
    head_dim: usize,
    lengths: Vec<usize>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvCache {
    pub fn new(batch: usize, kv_heads: usize, capacity: usize, head_dim: usize) -> Self {
        let n = batch * kv_heads * capacity * head_dim;
        Self {
            batch,
            kv_heads,
            capacity,
            head_dim,
            lengths: vec![0; batch],
            keys: vec![0.0; n],
            values: vec![0.0; n],
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn len(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    #[inline]
    fn head_offset(&self, b: usize, h: usize) -> usize {
        (b * self.kv_heads + h) * self.capacity * self.head_dim
    }

    /// Appends one position for sequence `b`. `k` and `v` hold `H_kv · d_h`
    /// values, head-major.
    pub fn append(&mut self, b: usize, k: &[f32], v: &[f32]) -> Result<()> {
        if b >= self.batch {
            return Err(PolarError::Index {
                op: "KvCache::append",
                index: b,
                bound: self.batch,
            });
        }
        let width = self.kv_heads * self.head_dim;
        if k.len() != width || v.len() != width {
            return Err(PolarError::dim("KvCache::append", width, k.len().max(v.len())));
        }
        let pos = self.lengths[b];
        if pos >= self.capacity {
            return Err(PolarError::Capacity(format!(
                "sequence {b} already holds {pos} of {} positions",
                self.capacity
            )));
        }
        let d = self.head_dim;
        for h in 0..self.kv_heads {
            let off = self.head_offset(b, h) + pos * d;
            self.keys[off..off + d].copy_from_slice(&k[h * d..(h + 1) * d]);
            self.values[off..off + d].copy_from_slice(&v[h * d..(h + 1) * d]);
        }
        self.lengths[b] = pos + 1;
        Ok(())
    }

    /// Live keys of `(b, h)`: `len(b)` rows of `d_h`.
    #[inline]
    pub fn keys(&self, b: usize, h: usize) -> &[f32] {
        let off = self.head_offset(b, h);
        &self.keys[off..off + self.lengths[b] * self.head_dim]
    }

    #[inline]
    pub fn values(&self, b: usize, h: usize) -> &[f32] {
        let off = self.head_offset(b, h);
        &self.values[off..off + self.lengths[b] * self.head_dim]
    }

    /// Full-capacity key and value storage of `(b, h)`, including slots past
    /// the live length. Intended for seeding synthetic contexts and tests.
    pub fn head_storage_mut(&mut self, b: usize, h: usize) -> (&mut [f32], &mut [f32]) {
        let off = self.head_offset(b, h);
        let n = self.capacity * self.head_dim;
        (&mut self.keys[off..off + n], &mut self.values[off..off + n])
    }

    /// Marks the first `len` slots of sequence `b` as live without writing them.
    pub fn set_len(&mut self, b: usize, len: usize) -> Result<()> {
        if len > self.capacity {
            return Err(PolarError::Capacity(format!(
                "length {len} exceeds capacity {}",
                self.capacity
            )));
        }
        self.lengths[b] = len;
        Ok(())
    }
}

pub(crate) fn gaussian_vec<R: Rng + ?Sized>(n: usize, std: f32, rng: &mut R) -> Vec<f32> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Inner product with eight independent accumulators so the loop vectorizes.
/// Every dense and sparse product in the crate funnels through this kernel,
/// which keeps full-density sparse paths bitwise equal to their dense twins.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dense product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(PolarError::dim(
            "matmul",
            format!("b.rows == {}", a.cols()),
            b.rows(),
        ));
    }
    let bt = NeuronMatrix::from_dense(b);
    Ok(matmul_neuron(a, &bt))
}

/// `a × W` where `W` is stored neuron-major. Shapes are assumed checked.
pub(crate) fn matmul_neuron(a: &Matrix, w: &NeuronMatrix) -> Matrix {
    let n = w.neurons();
    let mut out = Matrix::zeros(a.rows(), n);
    for i in 0..a.rows() {
        let x = a.row(i);
        let dst = out.row_mut(i);
        for (j, d) in dst.iter_mut().enumerate() {
            *d = dot(x, w.neuron(j));
        }
    }
    out
}

/// Reference single-head attention: `softmax(scale · q Kᵀ) V` via the two-pass
/// (max-subtract, then normalize) softmax with 64-bit accumulation.
///
/// `keys` and `values` hold `N` rows of `head_dim`.
pub fn naive_softmax_attention_single_head(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
    scale: f32,
) -> Result<Vec<f32>> {
    if head_dim == 0 || q.len() != head_dim {
        return Err(PolarError::dim("naive_attention", head_dim, q.len()));
    }
    if keys.len() != values.len() || !keys.len().is_multiple_of(head_dim) {
        return Err(PolarError::dim("naive_attention", keys.len(), values.len()));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(PolarError::arg("attention scale must be positive"));
    }
    let n = keys.len() / head_dim;
    if n == 0 {
        return Err(PolarError::EmptyCache(0));
    }
    let scores: Vec<f64> = keys
        .chunks_exact(head_dim)
        .map(|k| {
            let s: f64 = q.iter().zip(k).map(|(a, b)| *a as f64 * *b as f64).sum();
            s * scale as f64
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0f64; head_dim];
    for (w, v) in weights.iter().zip(values.chunks_exact(head_dim)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * *x as f64;
        }
    }
    Ok(out.into_iter().map(|o| (o / total) as f32).collect())
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn topk_indices(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(PolarError::arg(format!(
            "top-k requires 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Full ranking of `scores`: indices ordered by descending score, ties to the
/// lower index.
pub fn rank_descending(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx
}

/// Euclidean norm of every `(b, h)` head vector, as a `B × H` matrix.
pub fn l2_norm_per_head(attn_out: &HeadTensor) -> Matrix {
    let (bsz, heads) = (attn_out.batch(), attn_out.heads());
    Matrix::from_fn(bsz, heads, |b, h| {
        attn_out.head(b, h).iter().map(|v| v * v).sum::<f32>().sqrt()
    })
}

/// Position of the maximum, ties to the lower index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// `log(Σ exp(x))` computed stably.
pub fn log_sum_exp(xs: &[f32]) -> f64 {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (*x as f64 - max).exp()).sum();
    max + s.ln()
}

/// Layer normalization of every row with learned gain and shift.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Matrix {
    let mut out = x.clone();
    let d = x.cols();
    for row in out.as_mut_slice().chunks_exact_mut(d.max(1)) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

#[inline]
pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
