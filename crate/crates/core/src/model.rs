//! Transformer shape, weights, seeded toy initialization and the weight file.
//!
//! Blocks are pre-norm: `x += Attn(LN1(x))`, then `x += MLP(LN2(x))`, with
//! learned absolute position embeddings and an output head tied to the token
//! embedding.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};
use crate::io::{check_version, LeReader, LeWriter};
use crate::kernels::MlpWeights;
use crate::tensor::{axpy, dot, layer_norm, matmul_neuron, Matrix, NeuronMatrix};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// The generator behind every seeded initialization in this crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MlpActivation {
    /// OPT-style ReLU MLP; eligible for neuron sparsity.
    #[default]
    Relu,
    /// LLaMA-style gated MLP; always run dense.
    Swiglu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    /// Optional in JSON; when present it must equal `model_dim / heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub activation: MlpActivation,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PolarError::Config(format!("{name} must be >= 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(PolarError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(PolarError::Config(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if let Some(hd) = self.head_dim {
            if hd * self.heads != self.model_dim {
                return Err(PolarError::Config(format!(
                    "head_dim {hd} * heads {} != model_dim {}",
                    self.heads, self.model_dim
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    /// Units a head router scores: heads under MHA, KV groups under GQA.
    pub fn route_dim(&self) -> usize {
        self.kv_heads
    }

    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.head_dim() as f32).sqrt()
    }

    /// Small OPT-like shape for tests and demos.
    pub fn toy() -> Self {
        Self {
            layers: 3,
            model_dim: 32,
            ffn_dim: 128,
            heads: 4,
            kv_heads: 4,
            head_dim: None,
            vocab: 64,
            max_seq: 96,
            activation: MlpActivation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl Norm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Fully connected layer `x·W + b`, `W` stored neuron-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: NeuronMatrix,
    pub b: Vec<f32>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: NeuronMatrix::zeros(fan_in, fan_out),
            b: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul_neuron(x, &self.w);
        y.add_row_bias(&self.b).expect("bias sized at construction");
        y
    }

    pub fn fan_in(&self) -> usize {
        self.w.fan()
    }

    pub fn fan_out(&self) -> usize {
        self.w.neurons()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Gated MLP: `(SiLU(x·Wg) ⊙ x·Wu) · Wdᵀ`, all three logical `d × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGluWeights {
    pub gate: NeuronMatrix,
    pub up: NeuronMatrix,
    pub down: NeuronMatrix,
}

impl SwiGluWeights {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let ffn = self.gate.neurons();
        let mut y = Matrix::zeros(x.rows(), self.gate.fan());
        for i in 0..x.rows() {
            let xr = x.row(i);
            let dst = y.row_mut(i);
            for j in 0..ffn {
                let g = dot(xr, self.gate.neuron(j));
                let h = g / (1.0 + (-g).exp()) * dot(xr, self.up.neuron(j));
                axpy(h, self.down.neuron(j), dst);
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MlpBlock {
    Relu(MlpWeights),
    SwiGlu(SwiGluWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: Norm,
    pub attn: AttentionWeights,
    pub ln2: Norm,
    pub mlp: MlpBlock,
}

/// Random-initialization knobs for toy models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyInit {
    /// Standard deviation of every weight matrix and embedding.
    pub std: f32,
    /// ReLU MLP bias `b1` is set to `-shift · std · √d`, i.e. `shift`
    /// standard deviations of the pre-activation, which controls how many
    /// neurons fire per token.
    pub mlp_bias_shift: f32,
}

impl Default for ToyInit {
    fn default() -> Self {
        Self {
            std: 0.02,
            mlp_bias_shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TransformerConfig,
    /// Token embeddings; neuron `t` is the vector of token `t`. Doubles as
    /// the output head.
    pub embed: NeuronMatrix,
    /// `max_seq × d` learned positions.
    pub positions: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
}

impl Model {
    pub fn random(config: TransformerConfig, init: ToyInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (d, ffn, kv_width) = (c.model_dim, c.ffn_dim, c.kv_heads * c.head_dim());
        let std = init.std;
        let lin = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| Linear {
            w: NeuronMatrix::random_normal(fan_in, fan_out, std, rng),
            b: vec![0.0; fan_out],
        };
        let mut layers = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            let attn = AttentionWeights {
                q: lin(d, d, &mut rng),
                k: lin(d, kv_width, &mut rng),
                v: lin(d, kv_width, &mut rng),
                o: lin(d, d, &mut rng),
            };
            let mlp = match c.activation {
                MlpActivation::Relu => {
                    let shift = -init.mlp_bias_shift * std * (d as f32).sqrt();
                    MlpBlock::Relu(MlpWeights::new(
                        NeuronMatrix::random_normal(d, ffn, std, &mut rng),
                        vec![shift; ffn],
                        NeuronMatrix::random_normal(d, ffn, std, &mut rng),
                        vec![0.0; d],
                    )?)
                }
                MlpActivation::Swiglu => MlpBlock::SwiGlu(SwiGluWeights {
                    gate: NeuronMatrix::random_normal(d, ffn, std, &mut rng),
                    up: NeuronMatrix::random_normal(d, ffn, std, &mut rng),
                    down: NeuronMatrix::random_normal(d, ffn, std, &mut rng),
                }),
            };
            layers.push(LayerWeights {
                ln1: Norm::identity(d),
                attn,
                ln2: Norm::identity(d),
                mlp,
            });
        }
        Ok(Self {
            embed: NeuronMatrix::random_normal(d, c.vocab, std, &mut rng),
            positions: Matrix::random_normal(c.max_seq, d, std, &mut rng),
            layers,
            final_norm: Norm::identity(d),
            config,
        })
    }

    /// Embedding plus position for each `(token, position)` pair.
    pub fn embed_tokens(&self, tokens: &[u32], positions: &[usize]) -> Result<Matrix> {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let t = t as usize;
            if t >= self.config.vocab {
                return Err(PolarError::Index {
                    op: "embed_tokens",
                    index: t,
                    bound: self.config.vocab,
                });
            }
            if p >= self.config.max_seq {
                return Err(PolarError::Capacity(format!(
                    "position {p} beyond max_seq {}",
                    self.config.max_seq
                )));
            }
            let row = x.row_mut(i);
            row.copy_from_slice(self.embed.neuron(t));
            axpy(1.0, self.positions.row(p), row);
        }
        Ok(x)
    }

    /// Final norm and tied output head.
    pub fn logits(&self, x: &Matrix) -> Matrix {
        matmul_neuron(&self.final_norm.apply(x), &self.embed)
    }

    /// Order-sensitive digest of every weight, for checking that nothing
    /// mutated the model.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for block in self.param_blocks() {
            for v in block {
                h.write_u32(v.to_bits());
            }
        }
        h.finish()
    }

    fn param_blocks(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embed.as_slice(), self.positions.as_slice()];
        for l in &self.layers {
            out.extend([&l.ln1.gamma[..], &l.ln1.beta[..]]);
            for lin in [&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o] {
                out.extend([lin.w.as_slice(), &lin.b[..]]);
            }
            out.extend([&l.ln2.gamma[..], &l.ln2.beta[..]]);
            match &l.mlp {
                MlpBlock::Relu(m) => out.extend([m.w1.as_slice(), &m.b1[..], m.w2.as_slice(), &m.b2[..]]),
                MlpBlock::SwiGlu(s) => out.extend([s.gate.as_slice(), s.up.as_slice(), s.down.as_slice()]),
            }
        }
        out.extend([&self.final_norm.gamma[..], &self.final_norm.beta[..]]);
        out
    }

    /// Writes the weight file.
    ///
    /// Layout: `"PSWT"`, version `u32`, then `layers, model_dim, ffn_dim,
    /// heads, kv_heads, vocab, max_seq` as `u32` and the activation as `u8`
    /// (0 = ReLU, 1 = SwiGLU); then little-endian `f32` blocks: token
    /// embeddings (`V` runs of `d`), positions (`max_seq` rows of `d`), and per
    /// layer `ln1.gamma, ln1.beta, Wq, bq, Wk, bk, Wv, bv, Wo, bo, ln2.gamma,
    /// ln2.beta` followed by `W1, b1, W2, b2` (ReLU) or `Wgate, Wup, Wdown`
    /// (SwiGLU); finally the output norm `gamma, beta`. Matrices are
    /// neuron-major: one run of fan-in weights per output unit.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let mut w = LeWriter::new(w);
        w.bytes(MODEL_MAGIC)?;
        w.u32(MODEL_VERSION)?;
        for v in [c.layers, c.model_dim, c.ffn_dim, c.heads, c.kv_heads, c.vocab, c.max_seq] {
            w.usize32(v)?;
        }
        w.u8(match c.activation {
            MlpActivation::Relu => 0,
            MlpActivation::Swiglu => 1,
        })?;
        for block in self.param_blocks() {
            w.f32s(block)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(MODEL_MAGIC)?;
        check_version(r.u32()?, MODEL_VERSION)?;
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.usize32()?;
        }
        let activation = match r.u8()? {
            0 => MlpActivation::Relu,
            1 => MlpActivation::Swiglu,
            other => return Err(PolarError::Format(format!("unknown activation {other}"))),
        };
        let config = TransformerConfig {
            layers: dims[0],
            model_dim: dims[1],
            ffn_dim: dims[2],
            heads: dims[3],
            kv_heads: dims[4],
            head_dim: None,
            vocab: dims[5],
            max_seq: dims[6],
            activation,
        };
        config.validate()?;
        // Zero init only allocates; every block is overwritten below.
        let mut model = Model::random(
            config,
            ToyInit {
                std: 0.0,
                mlp_bias_shift: 0.0,
            },
            0,
        )?;
        for block in model.param_blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&r.f32s(n)?);
        }
        r.finish()?;
        Ok(model)
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embed.as_mut_slice(), self.positions.as_mut_slice()];
        for l in &mut self.layers {
            out.push(&mut l.ln1.gamma);
            out.push(&mut l.ln1.beta);
            let AttentionWeights { q, k, v, o } = &mut l.attn;
            for lin in [q, k, v, o] {
                out.push(lin.w.as_mut_slice());
                out.push(&mut lin.b);
            }
            out.push(&mut l.ln2.gamma);
            out.push(&mut l.ln2.beta);
            match &mut l.mlp {
                MlpBlock::Relu(m) => {
                    out.push(m.w1.as_mut_slice());
                    out.push(&mut m.b1);
                    out.push(m.w2.as_mut_slice());
                    out.push(&mut m.b2);
                }
                MlpBlock::SwiGlu(s) => {
                    out.push(s.gate.as_mut_slice());
                    out.push(s.up.as_mut_slice());
                    out.push(s.down.as_mut_slice());
                }
            }
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out
    }
}

const MODEL_MAGIC: &[u8; 4] = b"PSWT";
const MODEL_VERSION: u32 = 1;
