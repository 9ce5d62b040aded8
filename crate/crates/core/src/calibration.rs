//! Router recall and per-layer top-k calibration.
//!
//! Recall is micro-averaged: hits and active units are pooled over all tokens
//! before dividing, so tokens with no active neuron contribute nothing.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::RouterSet;
use crate::error::{PolarError, Result};
use crate::model::{MlpBlock, Model};
use crate::routers::Router;
use crate::tensor::{rank_descending, topk_indices, Matrix};

/// Fraction of truly active units covered by each token's top-`k` logits.
pub fn compute_recall(logits: &Matrix, labels: &[Vec<bool>], k: usize) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut hits = 0usize;
    let mut active = 0usize;
    for (row, lab) in logits.row_iter().zip(labels) {
        let n_active = lab.iter().filter(|l| **l).count();
        if n_active == 0 {
            continue;
        }
        active += n_active;
        hits += topk_indices(row, k)?.into_iter().filter(|&j| lab[j]).count();
    }
    if active == 0 {
        return Err(PolarError::UndefinedRecall);
    }
    Ok(hits as f64 / active as f64)
}

fn check_labels(logits: &Matrix, labels: &[Vec<bool>]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(PolarError::dim("recall", logits.rows(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != logits.cols()) {
        return Err(PolarError::dim("recall", logits.cols(), bad.len()));
    }
    Ok(())
}

/// Recall as a function of `k`, from a single ranking pass over the logits.
///
/// For every active unit the position it takes in its token's ranking is
/// histogrammed; recall at `k` is then the share of active units ranked
/// below `k`.
#[derive(Debug, Clone)]
pub struct RecallCurve {
    cumulative_hits: Vec<usize>,
    total_active: usize,
}

impl RecallCurve {
    pub fn new(logits: &Matrix, labels: &[Vec<bool>]) -> Result<Self> {
        check_labels(logits, labels)?;
        let width = logits.cols();
        let mut hist = vec![0usize; width];
        let mut total_active = 0;
        for (row, lab) in logits.row_iter().zip(labels) {
            if !lab.iter().any(|l| *l) {
                continue;
            }
            for (rank, j) in rank_descending(row).into_iter().enumerate() {
                if lab[j] {
                    hist[rank] += 1;
                    total_active += 1;
                }
            }
        }
        if total_active == 0 {
            return Err(PolarError::UndefinedRecall);
        }
        let mut cumulative_hits = Vec::with_capacity(width + 1);
        cumulative_hits.push(0);
        let mut acc = 0;
        for h in hist {
            acc += h;
            cumulative_hits.push(acc);
        }
        Ok(Self {
            cumulative_hits,
            total_active,
        })
    }

    pub fn width(&self) -> usize {
        self.cumulative_hits.len() - 1
    }

    /// Recall at `k`; `k` beyond the width is clamped.
    pub fn recall(&self, k: usize) -> f64 {
        let k = k.min(self.width());
        self.cumulative_hits[k] as f64 / self.total_active as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyConfig {
    pub k0: usize,
    pub r_target: f64,
    pub step: usize,
    /// Return the value after the loop's final unconditional `k += step`,
    /// matching the loop as literally written, instead of the first `k` that
    /// meets the target.
    pub literal_trailing_increment: bool,
}

impl GreedyConfig {
    /// `k0 = D/32`, `step = D/128` (both at least 1), target 0.99.
    pub fn for_width(width: usize) -> Self {
        Self {
            k0: (width / 32).max(1),
            r_target: 0.99,
            step: (width / 128).max(1),
            literal_trailing_increment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k0 == 0 || self.step == 0 {
            return Err(PolarError::Config("k0 and step must be >= 1".into()));
        }
        if !(self.r_target > 0.0 && self.r_target <= 1.0) {
            return Err(PolarError::Config("r_target must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOutcome {
    pub k: usize,
    /// Recall achieved at `k`.
    pub recall: f64,
}

/// Smallest `k` on the grid `k0, k0 + step, …` (capped at the width) whose
/// recall reaches the target. Router inference runs once.
pub fn greedy_topk<R: Router + ?Sized>(
    router: &R,
    hidden_states: &Matrix,
    true_activations: &[Vec<bool>],
    cfg: &GreedyConfig,
) -> Result<GreedyOutcome> {
    let logits = router.forward(hidden_states)?;
    greedy_topk_from_logits(&logits, true_activations, cfg)
}

pub fn greedy_topk_from_logits(
    logits: &Matrix,
    true_activations: &[Vec<bool>],
    cfg: &GreedyConfig,
) -> Result<GreedyOutcome> {
    cfg.validate()?;
    let curve = RecallCurve::new(logits, true_activations)?;
    let width = curve.width();
    let mut k = cfg.k0.min(width);
    loop {
        let r = curve.recall(k);
        if r >= cfg.r_target || k >= width {
            if cfg.literal_trailing_increment {
                let k = (k + cfg.step).min(width);
                return Ok(GreedyOutcome {
                    k,
                    recall: curve.recall(k),
                });
            }
            return Ok(GreedyOutcome { k, recall: r });
        }
        k = (k + cfg.step).min(width);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerK {
    pub layer: usize,
    pub k: usize,
    pub recall: f64,
}

/// Calibrated MLP top-k per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerKTable {
    pub entries: Vec<LayerK>,
}

impl LayerKTable {
    /// Every layer at `k` with nominal recall 1.
    pub fn uniform(layers: usize, k: usize) -> Self {
        Self {
            entries: (0..layers).map(|layer| LayerK { layer, k, recall: 1.0 }).collect(),
        }
    }

    pub fn k(&self, layer: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.layer == layer).map(|e| e.k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One line per layer: `layer<TAB>k<TAB>recall`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{:.6}", e.layer, e.k, e.recall);
        }
        s
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || PolarError::Format(format!("k table line {}: {line:?}", n + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let layer = fields[0].parse().map_err(|_| bad())?;
            let k = fields[1].parse().map_err(|_| bad())?;
            let recall = fields[2].parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            entries.push(LayerK { layer, k, recall });
        }
        Ok(Self { entries })
    }

    /// Checks that every layer of a model has a `k` in `1..=D`.
    pub fn validate_for(&self, layers: usize, ffn_dim: usize) -> Result<()> {
        for l in 0..layers {
            match self.k(l) {
                Some(k) if (1..=ffn_dim).contains(&k) => {}
                Some(k) => return Err(PolarError::Config(format!("layer {l}: k={k} outside 1..={ffn_dim}"))),
                None => return Err(PolarError::Config(format!("k table has no entry for layer {l}"))),
            }
        }
        Ok(())
    }
}

/// Runs a dense pass over the calibration sequences, then calibrates each
/// ReLU MLP layer's router against the observed activations.
pub fn calibrate_all_layers(
    model: &Model,
    routers: &RouterSet,
    calibration_sequences: &[Vec<u32>],
    cfg: &GreedyConfig,
) -> Result<LayerKTable> {
    cfg.validate()?;
    let trace = model.trace_dense(calibration_sequences)?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for (layer, (weights, tap)) in model.layers.iter().zip(&trace.layers).enumerate() {
        if !matches!(weights.mlp, MlpBlock::Relu(_)) {
            return Err(PolarError::Config(format!(
                "layer {layer} has a gated MLP; neuron calibration needs ReLU"
            )));
        }
        let router = routers
            .mlp_router(layer)
            .ok_or_else(|| PolarError::Config(format!("no MLP router for layer {layer}")))?;
        let out = greedy_topk(router, &tap.mlp_input, &tap.mlp_active, cfg)?;
        entries.push(LayerK {
            layer,
            k: out.k,
            recall: out.recall,
        });
    }
    Ok(LayerKTable { entries })
}
