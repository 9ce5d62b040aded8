//! Subcommand bodies. Each writes its CSV (and SVG where there is a plot)
//! under `--out` and prints a short summary.

use std::fs;

use polar_core::analysis::{
    head_heatmap, importance_csv, layer_importance_proxy, overhead_csv, ppl_density_sweep,
    router_overhead_ablation, sweep_csv, sweep_svg, throughput_bench, union_activation_study,
    ActivationTrace, BenchCase, BenchConfig, CsvTable, HotNeuronProfile, OverheadConfig,
};
use polar_core::calibration::calibrate_all_layers;
use polar_core::engine::{evaluate_perplexity, HeadRanking, SparsityMode};
use polar_core::kernels::FlashBlockParams;
use polar_core::model::MlpBlock;
use polar_core::routers::{
    collect_head_supervision, collect_mlp_supervision, default_router_hidden, default_supervision_top_k,
    train_router, RouterCheckpoint, RouterTrainConfig,
};
use polar_core::{GreedyConfig, HeadRouter, LayerKTable, Model, MlpRouter, RouterSet, SparsityPolicy};

use crate::inputs::{self, CliResult};
use crate::{BenchArgs, CalibrateArgs, Common, EvalArgs, Ranking, RouterKinds, StatsArgs, StatsKind, SweepArgs, TraceSource, TrainArgs};

/// Distinct per-purpose seeds derived from `--seed`.
fn seeded(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn model_for(common: &Common) -> CliResult<Model> {
    let cfg = inputs::read_config(common.config.as_deref())?;
    inputs::load_model(&cfg, common.weights.as_deref(), common.seed)
}

fn policy_for(common: &Common) -> CliResult<Option<SparsityPolicy>> {
    let cfg = inputs::read_config(common.config.as_deref())?;
    if cfg.policy.is_none() && common.k_table.is_none() {
        return Ok(None);
    }
    Ok(Some(inputs::load_policy(&cfg, common.k_table.as_deref())?))
}

fn save(common: &Common, name: &str, table: &CsvTable) -> CliResult<()> {
    table.save(&common.out.join(name))?;
    println!("wrote {}", common.out.join(name).display());
    Ok(())
}

fn save_svg(common: &Common, name: &str, svg: &str) -> CliResult<()> {
    fs::write(common.out.join(name), svg)?;
    Ok(())
}

pub fn train_routers(common: &Common, a: &TrainArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let c = &model.config;
    let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.train_tokens, seeded(common.seed, 1))?;
    let trace = model.trace_dense(&seqs)?;
    let dir = common.out.join("routers");
    let head_k = a.head_top_k.unwrap_or_else(|| default_supervision_top_k(c.route_dim()));
    let mut log = CsvTable::new("router_training", &["kind", "layer", "epoch", "train_loss", "validation_loss"])
        .meta("tokens", trace.tokens)
        .meta("learning_rate", a.lr)
        .meta("head_top_k", head_k);
    for (l, (layer, tap)) in model.layers.iter().zip(&trace.layers).enumerate() {
        let cfg = RouterTrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            max_epochs: a.epochs,
            seed: seeded(common.seed, 100 + l as u64),
            ..Default::default()
        };
        let mut rng = polar_core::model::seeded_rng(seeded(common.seed, 200 + l as u64));
        if a.kinds != RouterKinds::Head {
            if let MlpBlock::Relu(m) = &layer.mlp {
                let records = collect_mlp_supervision(m, &tap.mlp_input)?;
                let mut r = MlpRouter::random(c.model_dim, default_router_hidden(c.model_dim), c.ffn_dim, &mut rng);
                let rep = train_router(&mut r, &records, &cfg)?;
                for e in &rep.history {
                    log.push(vec!["mlp".into(), l.to_string(), e.epoch.to_string(), e.train.to_string(), e.validation.to_string()])?;
                }
                inputs::save_router(&dir, "mlp", l, &RouterCheckpoint::Mlp(r))?;
            }
        }
        if a.kinds != RouterKinds::Mlp {
            let records = collect_head_supervision(&tap.attn_input, &tap.head_outputs, c.group_size(), head_k)?;
            let mut r = HeadRouter::random(c.model_dim, c.route_dim(), &mut rng);
            let rep = train_router(&mut r, &records, &cfg)?;
            for e in &rep.history {
                log.push(vec!["head".into(), l.to_string(), e.epoch.to_string(), e.train.to_string(), e.validation.to_string()])?;
            }
            inputs::save_router(&dir, "head", l, &RouterCheckpoint::Head(r))?;
        }
    }
    save(common, "router_training.csv", &log)?;
    println!("routers saved under {}", dir.display());
    Ok(())
}

pub fn calibrate(common: &Common, a: &CalibrateArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let routers = inputs::load_routers(common.routers.as_deref(), model.config.layers)?;
    let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.calib_tokens, seeded(common.seed, 2))?;
    let mut cfg = GreedyConfig::for_width(model.config.ffn_dim);
    cfg.r_target = a.target;
    if let Some(k0) = a.k0 {
        cfg.k0 = k0;
    }
    if let Some(s) = a.step {
        cfg.step = s;
    }
    let table = calibrate_all_layers(&model, &routers, &seqs, &cfg)?;
    fs::write(common.out.join("k_table.tsv"), table.to_tsv())?;
    let mut csv = CsvTable::new("calibration", &["layer", "k", "recall"])
        .meta("target_recall", a.target)
        .meta("k0", cfg.k0)
        .meta("step", cfg.step)
        .meta("tokens", inputs::flat(&seqs).len());
    for e in &table.entries {
        csv.push(vec![e.layer.to_string(), e.k.to_string(), e.recall.to_string()])?;
    }
    save(common, "calibration.csv", &csv)?;
    Ok(())
}

/// Routers from `--routers`, with seeded random ones filling any gap so
/// that timing runs never fail for lack of training.
fn routers_or_random(common: &Common, model: &Model) -> CliResult<(RouterSet, bool)> {
    let c = &model.config;
    let mut set = inputs::load_routers(common.routers.as_deref(), c.layers)?;
    let mut filled = false;
    let mut rng = polar_core::model::seeded_rng(seeded(common.seed, 3));
    for l in 0..c.layers {
        if set.mlp[l].is_none() && matches!(model.layers[l].mlp, MlpBlock::Relu(_)) {
            set.mlp[l] = Some(MlpRouter::random(c.model_dim, default_router_hidden(c.model_dim), c.ffn_dim, &mut rng));
            filled = true;
        }
        if set.head[l].is_none() {
            set.head[l] = Some(HeadRouter::random(c.model_dim, c.route_dim(), &mut rng));
            filled = true;
        }
    }
    Ok((set, filled))
}

pub fn decode_bench(common: &Common, a: &BenchArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let c = &model.config;
    let (routers, filled) = routers_or_random(common, &model)?;
    let configured = policy_for(common)?;
    let table = match configured.as_ref().and_then(|p| p.mlp_k_table.clone()) {
        Some(t) => t,
        None => {
            let k = ((a.mlp_density as f64 * c.ffn_dim as f64).ceil() as usize).clamp(1, c.ffn_dim);
            LayerKTable::uniform(c.layers, k)
        }
    };
    let polar = match configured {
        Some(p) if p.mode == SparsityMode::Polar => SparsityPolicy {
            mlp_k_table: Some(table.clone()),
            ..p
        },
        _ => SparsityPolicy::polar(a.head_density, Some(table.clone())),
    };
    let mut cases = vec![BenchCase {
        label: "dense".into(),
        policy: SparsityPolicy::dense(),
    }];
    if polar.mlp_sparse(c) {
        cases.push(BenchCase {
            label: "dejavu_mlp".into(),
            policy: SparsityPolicy::dejavu(table),
        });
    }
    cases.push(BenchCase {
        label: "polar".into(),
        policy: polar,
    });
    let cfg = BenchConfig {
        warmup: a.warmup,
        steps: a.steps,
        seed: seeded(common.seed, 4),
        block: FlashBlockParams::default(),
    };
    let report = throughput_bench(&model, &routers, &cases, &a.batch_sizes, a.seq_len, &cfg)?;
    let mut csv = report.to_csv();
    if filled {
        csv.metadata.push(("routers".into(), "untrained routers filled in; latency only".into()));
    }
    save(common, "throughput.csv", &csv)?;
    save_svg(common, "throughput.svg", &report.to_svg())?;
    for r in &report.results {
        println!(
            "{:<11} B={:<3} median {:.3} ms  {:.1} tok/s  speedup {}",
            r.mode,
            r.batch,
            r.latency.median * 1e3,
            r.tokens_per_s,
            r.speedup.map_or("-".into(), |s| format!("{s:.2}x"))
        );
    }
    for f in &report.failures {
        println!("{:<11} B={:<3} failed: {}", f.mode, f.batch, f.message);
    }
    let ocfg = OverheadConfig {
        layer: c.layers - 1,
        batch: *a.batch_sizes.iter().max().unwrap_or(&1),
        context: a.seq_len.max(1),
        seed: seeded(common.seed, 5),
        ..Default::default()
    };
    let rows = router_overhead_ablation(&model, &routers, &a.overhead_densities, &ocfg)?;
    save(common, "router_overhead.csv", &overhead_csv(&rows, &ocfg))?;
    Ok(())
}

pub fn stats(common: &Common, a: &StatsArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let c = &model.config;
    let seed = seeded(common.seed, 6);
    match a.kind {
        StatsKind::Union => {
            let trace = match a.source {
                TraceSource::Model => {
                    let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.trace_tokens, seed)?;
                    ActivationTrace::from_model(&model, &seqs, c.route_dim(), None)?
                }
                TraceSource::Bernoulli => {
                    ActivationTrace::synthetic_bernoulli(c.layers, c.ffn_dim, a.trace_tokens, a.p, seed)?
                }
                TraceSource::Hot => ActivationTrace::synthetic_hot_neurons(
                    c.layers,
                    c.ffn_dim,
                    a.trace_tokens,
                    HotNeuronProfile::default(),
                    seed,
                )?,
            };
            let study = union_activation_study(&trace, &a.batch_sizes, seed)?;
            save(common, "union_activation.csv", &study.to_csv())?;
            save_svg(common, "union_activation.svg", &study.to_svg())?;
        }
        StatsKind::Heatmap => {
            let routers = inputs::load_routers(common.routers.as_deref(), c.layers)?;
            let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.trace_tokens, seed)?;
            let k = a.head_k.unwrap_or_else(|| default_supervision_top_k(c.route_dim()));
            let trace = ActivationTrace::from_model(&model, &seqs, k, Some(&routers))?;
            let map = head_heatmap(&trace)?;
            save(common, "head_heatmap.csv", &map.to_csv().meta("head_k", k))?;
            save_svg(common, "head_heatmap.svg", &map.to_svg())?;
        }
        StatsKind::Importance => {
            let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.trace_tokens, seed)?;
            let rows = layer_importance_proxy(&model, &seqs)?;
            save(common, "layer_importance.csv", &importance_csv(&rows))?;
        }
    }
    Ok(())
}

pub fn eval_ppl(common: &Common, a: &EvalArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let routers = inputs::load_routers(common.routers.as_deref(), model.config.layers)?;
    let policy = policy_for(common)?.unwrap_or_default();
    let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.eval_tokens, seeded(common.seed, 7))?;
    let stream = inputs::flat(&seqs);
    let dense = evaluate_perplexity(&model, &stream, &SparsityPolicy::dense(), &routers)?;
    let sparse = evaluate_perplexity(&model, &stream, &policy, &routers)?;
    let mut csv = CsvTable::new("ppl", &["policy", "tokens", "ppl"]);
    csv.push(vec!["dense".into(), stream.len().to_string(), dense.to_string()])?;
    csv.push(vec!["configured".into(), stream.len().to_string(), sparse.to_string()])?;
    println!("dense ppl {dense:.4}  configured ppl {sparse:.4}");
    save(common, "ppl.csv", &csv)?;
    Ok(())
}

pub fn sweep(common: &Common, a: &SweepArgs) -> CliResult<()> {
    let model = model_for(common)?;
    let routers = inputs::load_routers(common.routers.as_deref(), model.config.layers)?;
    let table = policy_for(common)?.and_then(|p| p.mlp_k_table);
    let seqs = inputs::corpus(&model, common.tokens.as_deref(), a.eval_tokens, seeded(common.seed, 8))?;
    let ranking = match a.ranking {
        Ranking::OracleNorm => HeadRanking::OracleNorm,
        Ranking::Router => HeadRanking::Router,
    };
    let rows = ppl_density_sweep(&model, &inputs::flat(&seqs), &a.densities, ranking, &routers, table)?;
    for r in &rows {
        println!("density {:.3}  ppl {:.4}  +{:.2}%", r.density, r.ppl, 100.0 * r.relative_increase);
    }
    save(common, "ppl_density.csv", &sweep_csv(&rows, ranking))?;
    save_svg(common, "ppl_density.svg", &sweep_svg(&rows))?;
    Ok(())
}
