//! Loading the model, policy, routers and token streams named on the command line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use polar_core::engine::sample_corpus;
use polar_core::model::ToyInit;
use polar_core::routers::RouterCheckpoint;
use polar_core::{LayerKTable, Model, PolarError, RouterSet, SparsityPolicy, TransformerConfig};
use serde::Deserialize;

pub type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// The `--config` document: both sections are optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: Option<TransformerConfig>,
    #[serde(default)]
    pub policy: Option<SparsityPolicy>,
}

pub fn read_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
    }
}

/// Weights file if given, otherwise a seeded random model of the configured
/// (or toy) shape.
pub fn load_model(cfg: &ConfigFile, weights: Option<&Path>, seed: u64) -> CliResult<Model> {
    match weights {
        Some(p) => {
            let m = Model::read_from(BufReader::new(File::open(p)?))?;
            if let Some(c) = &cfg.model {
                if *c != m.config {
                    return Err(PolarError::Config("weights file disagrees with --config model".into()).into());
                }
            }
            Ok(m)
        }
        None => {
            let c = cfg.model.clone().unwrap_or_else(TransformerConfig::toy);
            Ok(Model::random(c, ToyInit::default(), seed)?)
        }
    }
}

/// Policy from the config, with `--k-table` overriding its MLP table.
pub fn load_policy(cfg: &ConfigFile, k_table: Option<&Path>) -> CliResult<SparsityPolicy> {
    let mut p = cfg.policy.clone().unwrap_or_default();
    if let Some(path) = k_table {
        p.mlp_k_table = Some(read_k_table(path)?);
    }
    Ok(p)
}

pub fn read_k_table(path: &Path) -> CliResult<LayerKTable> {
    Ok(LayerKTable::read_tsv(BufReader::new(File::open(path)?))?)
}

pub fn router_path(dir: &Path, kind: &str, layer: usize) -> PathBuf {
    dir.join(format!("{kind}_{layer}.psrt"))
}

/// Every `mlp_<l>.psrt` and `head_<l>.psrt` present in `dir`.
pub fn load_routers(dir: Option<&Path>, layers: usize) -> CliResult<RouterSet> {
    let mut set = RouterSet::empty(layers);
    let Some(dir) = dir else { return Ok(set) };
    for l in 0..layers {
        for kind in ["mlp", "head"] {
            let p = router_path(dir, kind, l);
            if !p.exists() {
                continue;
            }
            match RouterCheckpoint::read_from(BufReader::new(File::open(&p)?))? {
                RouterCheckpoint::Mlp(r) if kind == "mlp" => set.mlp[l] = Some(r),
                RouterCheckpoint::Head(r) if kind == "head" => set.head[l] = Some(r),
                _ => return Err(PolarError::Format(format!("{} holds the wrong router kind", p.display())).into()),
            }
        }
    }
    Ok(set)
}

pub fn save_router(dir: &Path, kind: &str, layer: usize, ckpt: &RouterCheckpoint) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    ckpt.write_to(BufWriter::new(File::create(router_path(dir, kind, layer))?))?;
    Ok(())
}

/// Newline-delimited unsigned integers; blank lines are skipped.
pub fn read_token_stream(path: &Path, vocab: usize) -> CliResult<Vec<u32>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: u32 = t
            .parse()
            .map_err(|e| PolarError::Format(format!("line {}: {e}", i + 1)))?;
        if v as usize >= vocab {
            return Err(PolarError::Format(format!("line {}: token {v} outside vocabulary {vocab}", i + 1)).into());
        }
        out.push(v);
    }
    Ok(out)
}

/// About `tokens` tokens as sequences of at most `max_seq`: cut from the
/// token file when given, otherwise sampled from the model.
pub fn corpus(model: &Model, tokens_file: Option<&Path>, tokens: usize, seed: u64) -> CliResult<Vec<Vec<u32>>> {
    let max_seq = model.config.max_seq;
    match tokens_file {
        Some(p) => {
            let stream = read_token_stream(p, model.config.vocab)?;
            let take = stream.len().min(tokens);
            Ok(stream[..take].chunks(max_seq).map(<[u32]>::to_vec).collect())
        }
        None => {
            let count = tokens.div_ceil(max_seq).max(1);
            Ok(sample_corpus(model, count, max_seq.min(tokens.max(1)), seed)?)
        }
    }
}

pub fn flat(seqs: &[Vec<u32>]) -> Vec<u32> {
    seqs.iter().flatten().copied().collect()
}
