//! Post-hoc analysis of a finetuned checkpoint: expert utilization over
//! the eval set, mean feature-norm maps, and the per-patch information
//! map (mutual information between pre- and post-expert features).

use std::path::{Path, PathBuf};

use ver_analysis::{
    feature_norm_map, per_patch_mi_before_after, write_map_csv, write_pgm, MiMap, PatchMiConfig,
};
use ver_core::rng::substream;
use ver_core::{ParamStore, Session};
use ver_model::{
    evaluate, load_checkpoint_into, ForwardCtx, PolicyHead, RoutingStrategy, SyntheticTask,
    VerModel,
};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::finetune::task_from;
use crate::io::{csv_row, fmt_f64, write_atomic};

pub struct AnalyzeSummary {
    pub mi_map: MiMap,
    pub success_rate: f64,
    pub expert_util: Vec<Vec<f64>>,
    pub files: Vec<PathBuf>,
}

/// Rebuilds the adapted model so its parameter set matches a finetuned
/// checkpoint: base init, scratch experts, the strategy's router, and the
/// policy head, in the exact order the finetuning phase created them.
/// Values all come from the checkpoint afterwards.
pub fn load_finetuned(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<(VerModel, ParamStore, PolicyHead)> {
    let mut store = ParamStore::new();
    let mut rng = substream(cfg.pretrain.seed, "init");
    let mut model = VerModel::init(&mut store, cfg.model_config(), &mut rng)?;

    let mut init_rng = substream(cfg.finetune.seed, "init");
    model.freeze_for_adaptation(&mut store);
    if cfg.finetune.scratch_experts > 0 {
        model.add_experts(&mut store, cfg.finetune.scratch_experts, &mut init_rng)?;
    }
    match cfg.strategy()? {
        RoutingStrategy::TeacherSpecific(_) => {}
        RoutingStrategy::FrameRouted => model.attach_frame_router(&mut store, &mut init_rng)?,
        RoutingStrategy::LayerRouted => model.attach_layer_routers(&mut store, &mut init_rng)?,
        RoutingStrategy::PatchRouted => model.attach_patch_gates(&mut store, &mut init_rng)?,
    }
    let policy = PolicyHead::init(
        &mut store,
        "policy",
        cfg.model.token_dim,
        cfg.finetune.policy_hidden,
        cfg.task.target_dim,
        cfg.model.init_std,
        &mut init_rng,
    )?;
    load_checkpoint_into(&mut store, checkpoint)?;
    Ok((model, store, policy))
}

/// Mean post-expert feature-norm map over the first `n` eval images.
fn mean_norm_map(
    model: &VerModel,
    store: &ParamStore,
    task: &SyntheticTask,
    strategy: RoutingStrategy,
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let set = task.eval_set(n)?;
    let sess = Session::new(store);
    let mut acc = vec![0.0; rows * cols];
    for sample in &set {
        let z = model.forward_base(&sess, &sample.image)?;
        let mut ctx = ForwardCtx::eval();
        let (y, _) = model.forward_experts(&sess, &z, strategy, &mut ctx)?;
        let vals = y.value();
        let t = rows * cols;
        let dim = vals.len() / t;
        let map = feature_norm_map(&vals, t, dim, rows, cols)?;
        for (a, m) in acc.iter_mut().zip(&map) {
            *a += m / n as f64;
        }
    }
    Ok(acc)
}

pub fn run_analyze(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<AnalyzeSummary> {
    let (model, store, policy) = load_finetuned(cfg, checkpoint)?;
    let task = task_from(cfg)?;
    let strategy = cfg.strategy()?;
    let rows = cfg.model.image_height / cfg.model.patch;
    let cols = cfg.model.image_width / cfg.model.patch;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let report = evaluate(
        &model,
        &store,
        &task,
        &policy,
        strategy,
        cfg.finetune.eval_episodes,
    )?;
    let mut util_csv = String::from("layer");
    for e in 0..model.num_experts() {
        util_csv.push_str(&format!(",expert_freq_{e}"));
    }
    util_csv.push('\n');
    for (l, row) in report.expert_util.iter().enumerate() {
        let mut fields = vec![l.to_string()];
        fields.extend(row.iter().map(|v| fmt_f64(*v)));
        util_csv.push_str(&csv_row(&fields));
    }
    let util_path = out_dir.join("utilization.csv");
    write_atomic(&util_path, util_csv.as_bytes())?;
    files.push(util_path);

    let norm = mean_norm_map(
        &model,
        &store,
        &task,
        strategy,
        cfg.finetune.eval_episodes.min(64),
        rows,
        cols,
    )?;
    let norm_pgm = out_dir.join("norm_map.pgm");
    let norm_csv = out_dir.join("norm_map.csv");
    write_pgm(&norm_pgm, &norm, rows, cols)?;
    write_map_csv(&norm_csv, &norm, rows, cols)?;
    files.push(norm_pgm);
    files.push(norm_csv);

    let mut mi_cfg = PatchMiConfig::new(cfg.analysis.dataset, cfg.analysis.seed);
    mi_cfg.fraction = cfg.analysis.fraction;
    mi_cfg.pca_dims = cfg.analysis.pca_dims;
    mi_cfg.neighbors = cfg.analysis.neighbors;
    let mi_map = per_patch_mi_before_after(&model, &store, &task, strategy, &mi_cfg)?;
    let mi_pgm = out_dir.join("mi_map.pgm");
    let mi_csv = out_dir.join("mi_map.csv");
    write_pgm(&mi_pgm, &mi_map.values, mi_map.rows, mi_map.cols)?;
    write_map_csv(&mi_csv, &mi_map.values, mi_map.rows, mi_map.cols)?;
    files.push(mi_pgm);
    files.push(mi_csv);

    Ok(AnalyzeSummary {
        mi_map,
        success_rate: report.success_rate,
        expert_util: report.expert_util,
        files,
    })
}
