//! Ablation grids over seed replicas: active-expert count, routing
//! strategy, frozen/scratch expert mixes, and the taper schedule. Every
//! cell reports mean and sample standard deviation across seeds.

use std::path::{Path, PathBuf};

use ver_core::ParamStore;
use ver_model::{ablate_topk, finetune_router, RoutingStrategy, VerModel};

use crate::config::ExperimentConfig;
use crate::error::{config_err, usage_err, Result};
use crate::finetune::{finetune_config, load_pretrained, task_from};
use crate::io::{csv_row, fmt_f64, write_atomic};

pub const ABLATION_KINDS: [&str; 4] = ["topk", "routing-strategy", "dfm-tfs", "cta"];

#[derive(Debug, Clone)]
pub struct CellStats {
    pub label: String,
    pub success_mean: f64,
    pub success_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Kind-specific trailing columns (name, value).
    pub extra: Vec<(String, f64)>,
}

pub struct AblationSummary {
    pub kind: String,
    pub rows: Vec<CellStats>,
    pub table: PathBuf,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn cell(label: String, success: &[f64], rmse: &[f64]) -> CellStats {
    let (sm, ss) = mean_std(success);
    let (rm, rs) = mean_std(rmse);
    CellStats {
        label,
        success_mean: sm,
        success_std: ss,
        rmse_mean: rm,
        rmse_std: rs,
        extra: Vec::new(),
    }
}

fn seeds_of(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.ablate.seeds as u64)
        .map(|r| cfg.finetune.seed.wrapping_add(r))
        .collect()
}

/// Keeps only the first `keep` distilled experts in every expert block and
/// drops the orphaned parameters, so scratch experts added later can reuse
/// the freed index range.
pub fn keep_frozen_experts(
    model: &mut VerModel,
    store: &mut ParamStore,
    keep: usize,
) -> Result<()> {
    let l = model.num_experts();
    if keep > l {
        return config_err(format!("cannot keep {keep} of {l} experts"));
    }
    for block in &mut model.expert_blocks {
        let drop: Vec<String> = block.moe.experts[keep..]
            .iter()
            .map(|e| format!("{}.", e.prefix()))
            .collect();
        block.moe.experts.truncate(keep);
        for p in &drop {
            store.remove_prefix(p);
        }
    }
    model.cfg.num_experts = keep;
    Ok(())
}

/// Flattens `[layer][expert]` utilization tables from several seeds and
/// returns the mean over positions of the across-seed sample variance.
fn across_seed_util_variance(utils: &[Vec<Vec<f64>>]) -> f64 {
    let n = utils.len();
    if n < 2 {
        return 0.0;
    }
    let layers = utils[0].len();
    let experts = utils[0][0].len();
    let mut acc = 0.0;
    for l in 0..layers {
        for e in 0..experts {
            let col: Vec<f64> = utils.iter().map(|u| u[l][e]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            acc += col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        }
    }
    acc / (layers * experts) as f64
}

fn run_topk(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<CellStats>> {
    let task = task_from(cfg)?;
    let ks = &cfg.ablate.topk_values;
    let mut success = vec![Vec::new(); ks.len()];
    let mut rmse = vec![Vec::new(); ks.len()];
    let mut active = vec![0usize; ks.len()];
    for seed in seeds_of(cfg) {
        let (model, store) = load_pretrained(cfg, checkpoint)?;
        let base = finetune_config(cfg, &model)?;
        let rows = ablate_topk(&model, &store, &task, &base, ks, seed)?;
        for (i, row) in rows.iter().enumerate() {
            success[i].push(row.success);
            rmse[i].push(row.mean_rmse);
            active[i] = row.active_params;
        }
    }
    Ok(ks
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let mut c = cell(k.to_string(), &success[i], &rmse[i]);
            c.extra.push(("active_params".into(), active[i] as f64));
            c
        })
        .collect())
}

fn run_cell(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    strategy: RoutingStrategy,
    with_cta: bool,
    seed: u64,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut cfg = cfg.clone();
    cfg.finetune.strategy = strategy.to_string();
    cfg.finetune.cta = with_cta;
    let task = task_from(&cfg)?;
    let (mut model, mut store) = load_pretrained(&cfg, checkpoint)?;
    let fc = finetune_config(&cfg, &model)?;
    let run = finetune_router(&mut model, &mut store, &task, &fc, seed)?;
    Ok((run.final_success, run.final_mean_rmse, run.eval_expert_util))
}

fn run_routing(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<CellStats>> {
    let teachers = cfg.teachers.dims.len();
    let mut cells: Vec<(String, RoutingStrategy, bool)> = (0..teachers)
        .map(|i| {
            (
                format!("teacher:{i}"),
                RoutingStrategy::TeacherSpecific(i),
                false,
            )
        })
        .collect();
    cells.push(("frame".into(), RoutingStrategy::FrameRouted, false));
    cells.push(("layer".into(), RoutingStrategy::LayerRouted, false));
    cells.push(("patch".into(), RoutingStrategy::PatchRouted, false));
    cells.push(("patch+cta".into(), RoutingStrategy::PatchRouted, true));

    let mut rows = Vec::with_capacity(cells.len());
    for (label, strategy, with_cta) in cells {
        let mut success = Vec::new();
        let mut rmse = Vec::new();
        for seed in seeds_of(cfg) {
            let (s, r, _) = run_cell(cfg, checkpoint, strategy, with_cta, seed)?;
            success.push(s);
            rmse.push(r);
        }
        rows.push(cell(label, &success, &rmse));
    }
    Ok(rows)
}

fn run_mixes(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<CellStats>> {
    let task = task_from(cfg)?;
    let mut rows = Vec::new();
    for &[frozen, scratch] in &cfg.ablate.expert_mixes {
        if frozen + scratch == 0 {
            return config_err("an expert mix needs at least one expert");
        }
        // Teacher gates keep their pretrained width, so mixed libraries
        // route through the trainable per-token gate only.
        let mut mix_cfg = cfg.clone();
        mix_cfg.finetune.strategy = "patch".into();
        mix_cfg.finetune.cta = false;
        mix_cfg.finetune.scratch_experts = scratch;
        let mut success = Vec::new();
        let mut rmse = Vec::new();
        for seed in seeds_of(cfg) {
            let (mut model, mut store) = load_pretrained(&mix_cfg, checkpoint)?;
            keep_frozen_experts(&mut model, &mut store, frozen)?;
            let fc = finetune_config(&mix_cfg, &model)?;
            let run = finetune_router(&mut model, &mut store, &task, &fc, seed)?;
            success.push(run.final_success);
            rmse.push(run.final_mean_rmse);
        }
        rows.push(cell(format!("{frozen}+{scratch}"), &success, &rmse));
    }
    Ok(rows)
}

fn run_cta(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<CellStats>> {
    let mut rows = Vec::new();
    for (label, with_cta) in [("patch+cta", true), ("patch", false)] {
        let mut success = Vec::new();
        let mut rmse = Vec::new();
        let mut utils = Vec::new();
        for seed in seeds_of(cfg) {
            let (s, r, u) = run_cell(cfg, checkpoint, RoutingStrategy::PatchRouted, with_cta, seed)?;
            success.push(s);
            rmse.push(r);
            utils.push(u);
        }
        let mut c = cell(label.into(), &success, &rmse);
        c.extra.push((
            "across_seed_util_variance".into(),
            across_seed_util_variance(&utils),
        ));
        rows.push(c);
    }
    Ok(rows)
}

pub fn run_ablation(
    cfg: &ExperimentConfig,
    kind: &str,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<AblationSummary> {
    if cfg.ablate.seeds == 0 {
        return config_err("ablation needs at least one seed");
    }
    let (rows, label_cols) = match kind {
        "topk" => (run_topk(cfg, checkpoint)?, "k"),
        "routing-strategy" => (run_routing(cfg, checkpoint)?, "strategy"),
        "dfm-tfs" => (run_mixes(cfg, checkpoint)?, "mix"),
        "cta" => (run_cta(cfg, checkpoint)?, "variant"),
        other => {
            return usage_err(format!(
                "unknown ablation kind {other:?}; valid kinds: {}",
                ABLATION_KINDS.join(", ")
            ))
        }
    };

    let mut csv = format!("{label_cols},success_mean,success_std,rmse_mean,rmse_std");
    for (name, _) in &rows[0].extra {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for row in &rows {
        let mut fields = vec![
            row.label.clone(),
            fmt_f64(row.success_mean),
            fmt_f64(row.success_std),
            fmt_f64(row.rmse_mean),
            fmt_f64(row.rmse_std),
        ];
        fields.extend(row.extra.iter().map(|(_, v)| fmt_f64(*v)));
        csv.push_str(&csv_row(&fields));
    }
    let table = out_dir.join(format!("ablation_{kind}.csv"));
    write_atomic(&table, csv.as_bytes())?;

    Ok(AblationSummary {
        kind: kind.to_string(),
        rows,
        table,
    })
}
