//! Adaptation phase: load a distilled checkpoint, freeze it, attach the
//! configured router plus a policy head, and train on the synthetic task.

use std::path::{Path, PathBuf};

use ver_core::rng::substream;
use ver_core::ParamStore;
use ver_model::{
    load_checkpoint_into, save_checkpoint, CtaSchedule, FinetuneConfig, FinetuneRun,
    RoutingStrategy, SyntheticTask, SyntheticTeacher, TeacherBank, TeacherKind, VerModel,
};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::io::{csv_row, fmt_f64, write_atomic};
use crate::schedule::LrSchedule;

pub struct FinetuneSummary {
    pub run: FinetuneRun,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Rebuilds the pretrained model and fills its parameters from the
/// checkpoint. The architecture comes from the config, so a mismatch
/// surfaces as a manifest diff rather than garbage values.
pub fn load_pretrained(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<(VerModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = substream(cfg.pretrain.seed, "init");
    let model = VerModel::init(&mut store, cfg.model_config(), &mut rng)?;
    load_checkpoint_into(&mut store, checkpoint)?;
    Ok((model, store))
}

/// Builds the teacher bank for a config: teacher `i` takes the `i`-th kind
/// cycling through local, mixing, global. For three teachers this is the
/// standard one-of-each bank.
pub fn bank_from(cfg: &ExperimentConfig) -> Result<TeacherBank> {
    let kinds = [TeacherKind::Local, TeacherKind::Mixing, TeacherKind::Global];
    let teachers = cfg
        .teachers
        .dims
        .iter()
        .enumerate()
        .map(|(i, &dim)| {
            SyntheticTeacher::new(
                kinds[i % kinds.len()],
                dim,
                cfg.teachers.seed.wrapping_add(i as u64),
                cfg.model.patch,
                cfg.model.image_channels,
            )
        })
        .collect::<ver_model::Result<Vec<_>>>()?;
    Ok(TeacherBank::new(teachers)?)
}

pub fn task_from(cfg: &ExperimentConfig) -> Result<SyntheticTask> {
    let bank = bank_from(cfg)?;
    Ok(SyntheticTask::build(
        cfg.task_spec(),
        &bank,
        cfg.model.image_height,
        cfg.model.image_width,
        cfg.model.image_channels,
    )?)
}

pub fn finetune_config(cfg: &ExperimentConfig, model: &VerModel) -> Result<FinetuneConfig> {
    let f = &cfg.finetune;
    let strategy = cfg.strategy()?;
    let mut fc = FinetuneConfig::new(strategy);
    fc.steps = f.steps;
    fc.batch = f.batch;
    fc.lr = f.lr;
    fc.gumbel_tau = f.gumbel_tau;
    fc.scratch_experts = f.scratch_experts;
    fc.policy_hidden = f.policy_hidden;
    fc.eval_episodes = f.eval_episodes;
    if f.cta {
        let full = model.num_experts() + f.scratch_experts;
        let horizon = ((f.steps as f64 * f.cta_horizon_frac).round() as usize).max(1);
        fc.cta = Some(CtaSchedule::new(full, f.cta_k_min, horizon)?);
    }
    if f.use_schedule {
        let sched = LrSchedule::new(f.steps, f.lr, cfg.pretrain.warmup_frac, cfg.pretrain.constant_frac)?;
        fc.lr_by_step = Some((0..f.steps).map(|s| sched.lr(s)).collect::<Result<_>>()?);
    }
    Ok(fc)
}

/// CSV with one row per training step. The frequency columns hold teacher
/// choices for the frame/layer strategies and expert utilization otherwise.
fn metrics_csv(cfg: &ExperimentConfig, run: &FinetuneRun) -> String {
    let teacher_choice = matches!(
        run.strategy,
        RoutingStrategy::FrameRouted | RoutingStrategy::LayerRouted
    );
    let cols = run.records.first().map_or(0, |r| r.freqs.len());
    let mut out = String::from("step,loss,k");
    for i in 0..cols {
        if teacher_choice {
            out.push_str(&format!(",teacher_freq_{i}"));
        } else {
            out.push_str(&format!(",expert_freq_{i}"));
        }
    }
    out.push('\n');
    let _ = cfg;
    for r in &run.records {
        let mut fields = vec![r.step.to_string(), fmt_f64(r.loss), r.k.to_string()];
        fields.extend(r.freqs.iter().map(|f| fmt_f64(*f)));
        out.push_str(&csv_row(&fields));
    }
    out
}

pub fn run_finetune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<FinetuneSummary> {
    let (mut model, mut store) = load_pretrained(cfg, checkpoint)?;
    let task = task_from(cfg)?;
    let fc = finetune_config(cfg, &model)?;
    let run = ver_model::finetune_router(&mut model, &mut store, &task, &fc, cfg.finetune.seed)?;

    let metrics = out_dir.join("finetune_metrics.csv");
    let out_ckpt = out_dir.join("finetuned.ckpt");
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&metrics, metrics_csv(cfg, &run).as_bytes())?;
    save_checkpoint(&store, &out_ckpt)?;

    Ok(FinetuneSummary {
        run,
        checkpoint: out_ckpt,
        metrics,
    })
}
