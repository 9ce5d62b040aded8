//! Activation predictors.
//!
//! An [`MlpRouter`] (two layers, ReLU hidden) scores every MLP neuron of a
//! layer; a [`HeadRouter`] (one linear layer) scores every attention head, or
//! every KV group under grouped-query attention. Both are trained as
//! multi-label binary classifiers on labels harvested from dense forward
//! passes, with sigmoid cross-entropy and AdamW.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PolarError, Result};
use crate::io::{check_version, LeReader, LeWriter};
use crate::kernels::MlpWeights;
use crate::tensor::{axpy, dot, relu, sigmoid, topk_indices, HeadTensor, Matrix, NeuronMatrix};

/// Width of the MLP router hidden layer for a model of width `model_dim`.
pub fn default_router_hidden(model_dim: usize) -> usize {
    (4 * model_dim).min(1024)
}

/// Head budget used to label supervision records, `⌈H_route / 2⌉`.
pub fn default_supervision_top_k(route_dim: usize) -> usize {
    route_dim.div_ceil(2)
}

/// Common surface of the trainable routers.
pub trait Router: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// One row of logits per input row.
    fn forward(&self, x: &Matrix) -> Result<Matrix>;

    /// Parameter blocks in declaration order.
    fn params(&self) -> Vec<&[f32]>;

    fn params_mut(&mut self) -> Vec<&mut [f32]>;

    /// Mean elementwise sigmoid cross-entropy of `forward(x)` against
    /// `labels`, and its exact gradient for every parameter block.
    fn loss_and_gradients(&self, x: &Matrix, labels: &Matrix) -> Result<(f32, Vec<Vec<f32>>)>;
}

/// Two-layer router: `ReLU(x·W_in + b_in)·W_out + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRouter {
    pub w_in: NeuronMatrix,
    pub b_in: Vec<f32>,
    pub w_out: NeuronMatrix,
    pub b_out: Vec<f32>,
}

impl MlpRouter {
    pub fn zeros(model_dim: usize, hidden: usize, ffn_dim: usize) -> Self {
        Self {
            w_in: NeuronMatrix::zeros(model_dim, hidden),
            b_in: vec![0.0; hidden],
            w_out: NeuronMatrix::zeros(hidden, ffn_dim),
            b_out: vec![0.0; ffn_dim],
        }
    }

    /// Fan-in scaled Gaussian initialization.
    pub fn random<R: Rng + ?Sized>(model_dim: usize, hidden: usize, ffn_dim: usize, rng: &mut R) -> Self {
        Self {
            w_in: NeuronMatrix::random_normal(model_dim, hidden, (2.0 / model_dim as f32).sqrt(), rng),
            b_in: vec![0.0; hidden],
            w_out: NeuronMatrix::random_normal(hidden, ffn_dim, (1.0 / hidden as f32).sqrt(), rng),
            b_out: vec![0.0; ffn_dim],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.neurons()
    }

    fn hidden_pre(&self, x: &Matrix) -> Matrix {
        let mut pre = Matrix::zeros(x.rows(), self.hidden_dim());
        for i in 0..x.rows() {
            let xr = x.row(i);
            for (k, p) in pre.row_mut(i).iter_mut().enumerate() {
                *p = dot(xr, self.w_in.neuron(k)) + self.b_in[k];
            }
        }
        pre
    }
}

impl Router for MlpRouter {
    fn input_dim(&self) -> usize {
        self.w_in.fan()
    }

    fn output_dim(&self) -> usize {
        self.w_out.neurons()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(PolarError::dim("mlp_router_forward", self.input_dim(), x.cols()));
        }
        let mut hidden = self.hidden_pre(x);
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
        Ok(linear(&hidden, &self.w_out, &self.b_out))
    }

    fn params(&self) -> Vec<&[f32]> {
        vec![
            self.w_in.as_slice(),
            &self.b_in,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.w_in.as_mut_slice(),
            &mut self.b_in,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    fn loss_and_gradients(&self, x: &Matrix, labels: &Matrix) -> Result<(f32, Vec<Vec<f32>>)> {
        check_batch(self, x, labels)?;
        let pre = self.hidden_pre(x);
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
        let logits = linear(&hidden, &self.w_out, &self.b_out);
        let (loss, gz) = bce_with_logits(&logits, labels);

        let (w_out_g, b_out_g) = linear_grads(&hidden, &gz, self.w_out.fan());

        let h = self.hidden_dim();
        let mut g_pre = Matrix::zeros(x.rows(), h);
        for i in 0..x.rows() {
            let dst = g_pre.row_mut(i);
            for (j, &g) in gz.row(i).iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.w_out.neuron(j), dst);
                }
            }
            for (d, p) in dst.iter_mut().zip(pre.row(i)) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let (w_in_g, b_in_g) = linear_grads(x, &g_pre, self.w_in.fan());
        Ok((loss, vec![w_in_g, b_in_g, w_out_g, b_out_g]))
    }
}

/// Single linear layer: `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRouter {
    pub w: NeuronMatrix,
    pub b: Vec<f32>,
}

impl HeadRouter {
    pub fn zeros(model_dim: usize, route_dim: usize) -> Self {
        Self {
            w: NeuronMatrix::zeros(model_dim, route_dim),
            b: vec![0.0; route_dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(model_dim: usize, route_dim: usize, rng: &mut R) -> Self {
        Self {
            w: NeuronMatrix::random_normal(model_dim, route_dim, (1.0 / model_dim as f32).sqrt(), rng),
            b: vec![0.0; route_dim],
        }
    }
}

impl Router for HeadRouter {
    fn input_dim(&self) -> usize {
        self.w.fan()
    }

    fn output_dim(&self) -> usize {
        self.w.neurons()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(PolarError::dim("head_router_forward", self.input_dim(), x.cols()));
        }
        Ok(linear(x, &self.w, &self.b))
    }

    fn params(&self) -> Vec<&[f32]> {
        vec![self.w.as_slice(), &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![self.w.as_mut_slice(), &mut self.b]
    }

    fn loss_and_gradients(&self, x: &Matrix, labels: &Matrix) -> Result<(f32, Vec<Vec<f32>>)> {
        check_batch(self, x, labels)?;
        let logits = linear(x, &self.w, &self.b);
        let (loss, gz) = bce_with_logits(&logits, labels);
        let (wg, bg) = linear_grads(x, &gz, self.w.fan());
        Ok((loss, vec![wg, bg]))
    }
}

fn check_batch<R: Router + ?Sized>(r: &R, x: &Matrix, labels: &Matrix) -> Result<()> {
    if x.cols() != r.input_dim() {
        return Err(PolarError::dim("router gradients", r.input_dim(), x.cols()));
    }
    if labels.shape() != (x.rows(), r.output_dim()) {
        return Err(PolarError::dim(
            "router gradients",
            format!("labels {}x{}", x.rows(), r.output_dim()),
            format!("{}x{}", labels.rows(), labels.cols()),
        ));
    }
    if x.rows() == 0 {
        return Err(PolarError::arg("empty training batch"));
    }
    Ok(())
}

fn linear(x: &Matrix, w: &NeuronMatrix, b: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.neurons());
    for i in 0..x.rows() {
        let xr = x.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = dot(xr, w.neuron(j)) + b[j];
        }
    }
    out
}

/// Gradients of a linear layer given its input and the upstream gradient,
/// laid out like the neuron-major weights.
fn linear_grads(input: &Matrix, upstream: &Matrix, fan: usize) -> (Vec<f32>, Vec<f32>) {
    let outs = upstream.cols();
    let mut wg = vec![0.0f32; fan * outs];
    let mut bg = vec![0.0f32; outs];
    for i in 0..input.rows() {
        let xr = input.row(i);
        for (j, &g) in upstream.row(i).iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, &mut wg[j * fan..(j + 1) * fan]);
                bg[j] += g;
            }
        }
    }
    (wg, bg)
}

/// Mean sigmoid cross-entropy and its gradient with respect to the logits.
fn bce_with_logits(logits: &Matrix, labels: &Matrix) -> (f32, Matrix) {
    let n = (logits.rows() * logits.cols()) as f64;
    let mut loss = 0.0f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for ((g, &z), &y) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(labels.as_slice())
    {
        let zf = z as f64;
        loss += zf.max(0.0) - zf * y as f64 + (-zf.abs()).exp().ln_1p();
        *g = ((sigmoid(z) - y) as f64 / n) as f32;
    }
    ((loss / n) as f32, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`. `step` counts from 1.
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f32],
    moments: &mut AdamMoments,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(PolarError::arg("AdamW step counter starts at 1"));
    }
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(PolarError::dim("adamw_step", params.len(), grads.len()));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(PolarError::Numeric(format!("non-finite gradient at {bad}")));
    }
    let t = step as i32;
    let c1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let c2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m as f64 / c1;
        let v_hat = *v as f64 / c2;
        let update = m_hat / (v_hat.sqrt() + cfg.eps as f64) + cfg.weight_decay as f64 * *p as f64;
        *p = (*p as f64 - cfg.learning_rate as f64 * update) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterTrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub early_stop_patience: usize,
    /// Share of records held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            early_stop_patience: 3,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RouterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(PolarError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(PolarError::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(PolarError::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One training example: router input and the binary activity of every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionRecord {
    pub hidden_state: Vec<f32>,
    pub labels: Vec<bool>,
}

/// Labels neuron `j` active iff `ReLU(x·W1 + b1)[j] > 0`.
pub fn collect_mlp_supervision(mlp: &MlpWeights, hidden_states: &Matrix) -> Result<Vec<SupervisionRecord>> {
    let pre = mlp.preactivations(hidden_states)?;
    Ok(hidden_states
        .row_iter()
        .zip(pre.row_iter())
        .map(|(x, h)| SupervisionRecord {
            hidden_state: x.to_vec(),
            labels: h.iter().map(|v| relu(*v) > 0.0).collect(),
        })
        .collect())
}

/// Labels the `top_k` heads (or groups of `group_size` consecutive query
/// heads) with the largest attention-output L2 norm as active.
pub fn collect_head_supervision(
    hidden_states: &Matrix,
    attn_outputs: &HeadTensor,
    group_size: usize,
    top_k: usize,
) -> Result<Vec<SupervisionRecord>> {
    if hidden_states.rows() != attn_outputs.batch() {
        return Err(PolarError::dim(
            "collect_head_supervision",
            attn_outputs.batch(),
            hidden_states.rows(),
        ));
    }
    let norms = group_norms(attn_outputs, group_size)?;
    let mut out = Vec::with_capacity(norms.rows());
    for (b, row) in norms.row_iter().enumerate() {
        let active = topk_indices(row, top_k)?;
        let mut labels = vec![false; row.len()];
        for a in active {
            labels[a] = true;
        }
        out.push(SupervisionRecord {
            hidden_state: hidden_states.row(b).to_vec(),
            labels,
        });
    }
    Ok(out)
}

/// L2 norm over each group's concatenated query-head outputs, `B × (H / group_size)`.
pub fn group_norms(attn_outputs: &HeadTensor, group_size: usize) -> Result<Matrix> {
    let heads = attn_outputs.heads();
    if group_size == 0 || !heads.is_multiple_of(group_size) {
        return Err(PolarError::dim(
            "group_norms",
            format!("group size dividing {heads}"),
            group_size,
        ));
    }
    let groups = heads / group_size;
    Ok(Matrix::from_fn(attn_outputs.batch(), groups, |b, g| {
        (g * group_size..(g + 1) * group_size)
            .flat_map(|h| attn_outputs.head(b, h).iter())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }))
}

fn records_to_batch(records: &[&SupervisionRecord]) -> Result<(Matrix, Matrix)> {
    let d = records[0].hidden_state.len();
    let w = records[0].labels.len();
    let mut x = Vec::with_capacity(records.len() * d);
    let mut y = Vec::with_capacity(records.len() * w);
    for r in records {
        if r.hidden_state.len() != d || r.labels.len() != w {
            return Err(PolarError::dim("supervision batch", format!("{d}/{w}"), format!(
                "{}/{}",
                r.hidden_state.len(),
                r.labels.len()
            )));
        }
        x.extend_from_slice(&r.hidden_state);
        y.extend(r.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    }
    Ok((Matrix::new(records.len(), d, x)?, Matrix::new(records.len(), w, y)?))
}

/// Mean cross-entropy of a router over records, evaluated in chunks.
pub fn evaluate_loss<R: Router + ?Sized>(router: &R, records: &[&SupervisionRecord]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in records.chunks(256) {
        let (x, y) = records_to_batch(chunk)?;
        let logits = router.forward(&x)?;
        let (l, _) = bce_with_logits(&logits, &y);
        total += l as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((total / count as f64) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f32,
    pub validation: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_validation_loss(&self) -> f32 {
        self.history[self.best_epoch].validation
    }
}

/// Trains `router` in place on shuffled mini-batches with AdamW, holding out
/// a validation split for early stopping. The parameters of the best
/// validation epoch are restored before returning.
pub fn train_router<R: Router + ?Sized>(
    router: &mut R,
    records: &[SupervisionRecord],
    cfg: &RouterTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(PolarError::arg("router training needs at least one record"));
    }
    for r in records {
        if r.hidden_state.len() != router.input_dim() || r.labels.len() != router.output_dim() {
            return Err(PolarError::dim(
                "train_router",
                format!("{}/{}", router.input_dim(), router.output_dim()),
                format!("{}/{}", r.hidden_state.len(), r.labels.len()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let (train_idx, val_idx) = if records.len() < 2 {
        (order.clone(), order)
    } else {
        let n_val = ((records.len() as f64 * cfg.validation_fraction).round() as usize)
            .clamp(usize::from(cfg.validation_fraction > 0.0), records.len() - 1);
        let val = order.split_off(records.len() - n_val);
        if val.is_empty() {
            (order.clone(), order)
        } else {
            (order, val)
        }
    };
    let val_refs: Vec<&SupervisionRecord> = val_idx.iter().map(|&i| &records[i]).collect();

    let adam = cfg.adamw();
    let mut moments: Vec<AdamMoments> = router.params().iter().map(|p| AdamMoments::zeros(p.len())).collect();
    let mut step = 0u64;
    let mut best: Option<(f32, usize, Vec<Vec<f32>>)> = None;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut epoch_order = train_idx;

    for epoch in 0..cfg.max_epochs {
        epoch_order.shuffle(&mut rng);
        let mut train_loss = 0.0f64;
        for chunk in epoch_order.chunks(cfg.batch_size) {
            let refs: Vec<&SupervisionRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let (x, y) = records_to_batch(&refs)?;
            let (loss, grads) = router.loss_and_gradients(&x, &y)?;
            train_loss += loss as f64 * chunk.len() as f64;
            step += 1;
            for ((p, g), m) in router.params_mut().into_iter().zip(&grads).zip(moments.iter_mut()) {
                adamw_step(p, g, m, &adam, step)?;
            }
        }
        let train = (train_loss / epoch_order.len() as f64) as f32;
        let validation = evaluate_loss(router, &val_refs)?;
        history.push(EpochLoss {
            epoch,
            train,
            validation,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| validation < *b);
        if improved {
            let snapshot = router.params().iter().map(|p| p.to_vec()).collect();
            best = Some((validation, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    for (p, s) in router.params_mut().into_iter().zip(snapshot) {
        p.copy_from_slice(&s);
    }
    Ok(TrainReport {
        history,
        best_epoch,
        stopped_early,
    })
}

const ROUTER_MAGIC: &[u8; 4] = b"PSRT";
const TRACE_MAGIC: &[u8; 4] = b"PSSV";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RouterKind {
    Mlp = 0,
    Head = 1,
}

impl RouterKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(RouterKind::Mlp),
            1 => Ok(RouterKind::Head),
            other => Err(PolarError::Format(format!("unknown router kind {other}"))),
        }
    }
}

/// A router as stored on disk.
///
/// Layout: `"PSRT"`, version `u32`, kind `u8` (0 = MLP, 1 = head), then the
/// dimensions as `u32` (`d, h_r, D` for MLP routers, `d, H_route` for head
/// routers), then each parameter block as little-endian `f32` in declaration
/// order. Weight matrices are written neuron-major: one contiguous run of
/// fan-in weights per output unit.
#[derive(Debug, Clone, PartialEq)]
pub enum RouterCheckpoint {
    Mlp(MlpRouter),
    Head(HeadRouter),
}

impl RouterCheckpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(ROUTER_MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        let params = match self {
            RouterCheckpoint::Mlp(r) => {
                w.u8(RouterKind::Mlp as u8)?;
                w.usize32(r.input_dim())?;
                w.usize32(r.hidden_dim())?;
                w.usize32(r.output_dim())?;
                r.params()
            }
            RouterCheckpoint::Head(r) => {
                w.u8(RouterKind::Head as u8)?;
                w.usize32(r.input_dim())?;
                w.usize32(r.output_dim())?;
                r.params()
            }
        };
        for p in params {
            w.f32s(p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(ROUTER_MAGIC)?;
        check_version(r.u32()?, FORMAT_VERSION)?;
        let out = match RouterKind::from_u8(r.u8()?)? {
            RouterKind::Mlp => {
                let (d, h, ffn) = (r.usize32()?, r.usize32()?, r.usize32()?);
                let mut m = MlpRouter::zeros(d, h, ffn);
                for p in m.params_mut() {
                    let n = p.len();
                    p.copy_from_slice(&r.f32s(n)?);
                }
                RouterCheckpoint::Mlp(m)
            }
            RouterKind::Head => {
                let (d, route) = (r.usize32()?, r.usize32()?);
                let mut m = HeadRouter::zeros(d, route);
                for p in m.params_mut() {
                    let n = p.len();
                    p.copy_from_slice(&r.f32s(n)?);
                }
                RouterCheckpoint::Head(m)
            }
        };
        r.finish()?;
        Ok(out)
    }
}

/// Writes supervision records.
///
/// Layout: `"PSSV"`, version `u32`, kind `u8`, `d` `u32`, label width `u32`,
/// record count `u64`, then per record `d` little-endian `f32` followed by the
/// labels as a bitset of `⌈width / 8⌉` bytes, least significant bit first.
pub fn write_supervision_trace<W: Write>(
    w: W,
    kind: RouterKind,
    records: &[SupervisionRecord],
) -> Result<()> {
    let d = records.first().map_or(0, |r| r.hidden_state.len());
    let width = records.first().map_or(0, |r| r.labels.len());
    let mut w = LeWriter::new(w);
    w.bytes(TRACE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u8(kind as u8)?;
    w.usize32(d)?;
    w.usize32(width)?;
    w.u64(records.len() as u64)?;
    for r in records {
        if r.hidden_state.len() != d || r.labels.len() != width {
            return Err(PolarError::dim("write_supervision_trace", d, r.hidden_state.len()));
        }
        w.f32s(&r.hidden_state)?;
        let mut bits = vec![0u8; width.div_ceil(8)];
        for (j, &l) in r.labels.iter().enumerate() {
            if l {
                bits[j / 8] |= 1 << (j % 8);
            }
        }
        w.bytes(&bits)?;
    }
    Ok(())
}

pub fn read_supervision_trace<R: Read>(r: R) -> Result<(RouterKind, Vec<SupervisionRecord>)> {
    let mut r = LeReader::new(r);
    r.magic(TRACE_MAGIC)?;
    check_version(r.u32()?, FORMAT_VERSION)?;
    let kind = RouterKind::from_u8(r.u8()?)?;
    let d = r.usize32()?;
    let width = r.usize32()?;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let hidden_state = r.f32s(d)?;
        let bits = r.bytes(width.div_ceil(8))?;
        let labels = (0..width).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
        out.push(SupervisionRecord {
            hidden_state,
            labels,
        });
    }
    r.finish()?;
    Ok((kind, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_router_emits_bias() {
        let mut r = MlpRouter::zeros(3, 4, 5);
        r.b_out = vec![0.5; 5];
        let x = Matrix::random_normal(2, 3, 1.0, &mut rng(1));
        let z = r.forward(&x).unwrap();
        assert!(z.as_slice().iter().all(|v| *v == 0.5));

        let mut h = HeadRouter::zeros(3, 2);
        h.b = vec![-1.0, 2.0];
        assert_eq!(h.forward(&x).unwrap().row(1), &[-1.0, 2.0]);
    }

    #[test]
    fn mlp_router_hand_case() {
        // d = h_r = D = 2, identity-like input layer.
        let mut r = MlpRouter::zeros(2, 2, 2);
        r.w_in = NeuronMatrix::from_dense(&Matrix::identity(2));
        r.b_in = vec![0.0, -1.0];
        r.w_out = NeuronMatrix::from_dense(&Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        r.b_out = vec![0.5, -0.5];
        let x = Matrix::new(1, 2, vec![2.0, 0.5]).unwrap();
        // hidden = ReLU([2, -0.5]) = [2, 0]; logits = [2*1 + 0.5, 2*2 - 0.5]
        assert_eq!(r.forward(&x).unwrap().as_slice(), &[2.5, 3.5]);
    }

    #[test]
    fn head_router_hand_case() {
        let mut h = HeadRouter::zeros(2, 2);
        h.w = NeuronMatrix::from_dense(&Matrix::new(2, 2, vec![1.0, 0.0, 1.0, -2.0]).unwrap());
        h.b = vec![0.0, 1.0];
        let x = Matrix::new(1, 2, vec![3.0, 1.0]).unwrap();
        assert_eq!(h.forward(&x).unwrap().as_slice(), &[4.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let r = MlpRouter::zeros(3, 4, 5);
        assert!(r.forward(&Matrix::zeros(1, 2)).is_err());
        let h = HeadRouter::zeros(3, 2);
        assert!(h.forward(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn scalar_gradient_is_residual_times_input() {
        let mut h = HeadRouter::zeros(1, 1);
        h.w = NeuronMatrix::from_neuron_rows(1, 1, vec![0.7]).unwrap();
        h.b = vec![-0.2];
        let x = Matrix::new(1, 1, vec![1.5]).unwrap();
        let y = Matrix::new(1, 1, vec![1.0]).unwrap();
        let (_, g) = h.loss_and_gradients(&x, &y).unwrap();
        let resid = sigmoid(0.7 * 1.5 - 0.2) - 1.0;
        assert!((g[0][0] - resid * 1.5).abs() < 1e-6);
        assert!((g[1][0] - resid).abs() < 1e-6);
    }

    #[test]
    fn gradients_vanish_at_saturated_fit() {
        let mut h = HeadRouter::zeros(2, 2);
        h.b = vec![40.0, -40.0];
        let x = Matrix::random_normal(3, 2, 1.0, &mut rng(2));
        let y = Matrix::from_fn(3, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let (loss, g) = h.loss_and_gradients(&x, &y).unwrap();
        assert!(loss < 1e-12);
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0];
        let mut m = AdamMoments::zeros(2);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &cfg, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let mut p = vec![1.0f32];
        let mut m = AdamMoments::zeros(1);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adamw_step(&mut p, &[1.0], &mut m, &cfg, 1).unwrap();
        // m_hat = v_hat = 1, so θ' = 1 - 0.1 / (1 + 1e-8).
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] as f64 - want).abs() < 1e-7);
        assert_eq!(m.m[0], 1.0 - 0.9f32);
        assert_eq!(m.v[0], 1.0 - 0.999f32);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = vec![2.0f32];
        let mut m = AdamMoments::zeros(1);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.0], &mut m, &cfg, 1).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_bad_input() {
        let mut p = vec![0.0f32];
        let mut m = AdamMoments::zeros(1);
        let cfg = AdamWConfig::default();
        assert!(matches!(
            adamw_step(&mut p, &[f32::NAN], &mut m, &cfg, 1),
            Err(PolarError::Numeric(_))
        ));
        assert!(adamw_step(&mut p, &[0.0], &mut m, &cfg, 0).is_err());
    }

    #[test]
    fn mlp_supervision_labels() {
        let mlp = MlpWeights::new(
            NeuronMatrix::zeros(2, 2),
            vec![1.0, -1.0],
            NeuronMatrix::zeros(2, 2),
            vec![0.0, 0.0],
        )
        .unwrap();
        let recs = collect_mlp_supervision(&mlp, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(recs[0].labels, vec![true, false]);

        let mlp = MlpWeights::new(
            NeuronMatrix::random_normal(2, 3, 1.0, &mut rng(3)),
            vec![-1e30; 3],
            NeuronMatrix::zeros(2, 3),
            vec![0.0; 2],
        )
        .unwrap();
        let x = Matrix::random_normal(4, 2, 1.0, &mut rng(4));
        let recs = collect_mlp_supervision(&mlp, &x).unwrap();
        assert!(recs.iter().all(|r| r.labels.iter().all(|l| !l)));
    }

    #[test]
    fn head_supervision_labels() {
        let x = Matrix::zeros(1, 2);
        let attn = HeadTensor::random_normal(1, 4, 3, 1.0, &mut rng(5));
        let recs = collect_head_supervision(&x, &attn, 1, 4).unwrap();
        assert!(recs[0].labels.iter().all(|l| *l));

        let mut attn = HeadTensor::zeros(1, 4, 3);
        attn.head_mut(0, 2)[1] = -0.5;
        let recs = collect_head_supervision(&x, &attn, 1, 1).unwrap();
        assert_eq!(recs[0].labels, vec![false, false, true, false]);

        assert!(collect_head_supervision(&x, &attn, 1, 0).is_err());
        assert!(collect_head_supervision(&x, &attn, 1, 5).is_err());
    }

    #[test]
    fn grouped_head_supervision_uses_concatenated_norm() {
        let x = Matrix::zeros(1, 1);
        let mut attn = HeadTensor::zeros(1, 4, 1);
        // group 0 = heads {0,1}: norm sqrt(0.36+0.64)=1; group 1: norm 0.9
        attn.head_mut(0, 0)[0] = 0.6;
        attn.head_mut(0, 1)[0] = 0.8;
        attn.head_mut(0, 2)[0] = 0.9;
        let recs = collect_head_supervision(&x, &attn, 2, 1).unwrap();
        assert_eq!(recs[0].labels, vec![true, false]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut h = HeadRouter::zeros(2, 2);
        let r = train_router(&mut h, &[], &RouterTrainConfig::default());
        assert!(matches!(r, Err(PolarError::Argument(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut r = rng(6);
        let mut h = HeadRouter::random(3, 2, &mut r);
        let before = h.clone();
        let recs: Vec<SupervisionRecord> = (0..40)
            .map(|i| SupervisionRecord {
                hidden_state: vec![i as f32 * 0.1, 1.0, -0.5],
                labels: vec![i % 2 == 0, i % 3 == 0],
            })
            .collect();
        let cfg = RouterTrainConfig {
            learning_rate: 0.0,
            max_epochs: 4,
            early_stop_patience: 10,
            weight_decay: 0.3,
            ..Default::default()
        };
        let rep = train_router(&mut h, &recs, &cfg).unwrap();
        assert_eq!(h, before);
        let v0 = rep.history[0].validation;
        assert!(rep.history.iter().all(|e| e.validation == v0));
    }

    #[test]
    fn overfits_single_record() {
        let rec = SupervisionRecord {
            hidden_state: vec![0.5, -1.0, 2.0],
            labels: vec![true, false, true, true],
        };
        let recs = vec![rec; 64];
        let mut m = MlpRouter::random(3, 8, 4, &mut rng(7));
        let cfg = RouterTrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            ..Default::default()
        };
        let rep = train_router(&mut m, &recs, &cfg).unwrap();
        assert!(rep.final_validation_loss() < 1e-2, "{:?}", rep.history);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RouterCheckpoint::Mlp(MlpRouter::random(3, 5, 7, &mut rng(8)));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PSRT");
        assert_eq!(buf[8], 0);
        assert_eq!(buf.len(), 4 + 4 + 1 + 12 + 4 * (15 + 5 + 35 + 7));
        assert_eq!(RouterCheckpoint::read_from(&buf[..]).unwrap(), m);

        let h = RouterCheckpoint::Head(HeadRouter::random(3, 4, &mut rng(9)));
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        assert_eq!(buf[8], 1);
        assert_eq!(RouterCheckpoint::read_from(&buf[..]).unwrap(), h);
        buf.push(0);
        assert!(RouterCheckpoint::read_from(&buf[..]).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let recs: Vec<SupervisionRecord> = (0..3)
            .map(|i| SupervisionRecord {
                hidden_state: vec![i as f32, 0.5],
                labels: (0..11).map(|j| (i + j) % 3 == 0).collect(),
            })
            .collect();
        let mut buf = Vec::new();
        write_supervision_trace(&mut buf, RouterKind::Mlp, &recs).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 4 + 4 + 8 + 3 * (8 + 2));
        let (kind, back) = read_supervision_trace(&buf[..]).unwrap();
        assert_eq!(kind, RouterKind::Mlp);
        assert_eq!(back, recs);
    }
}
