//! Distillation phase: train the student against the frozen synthetic
//! teacher bank on random images, log per-step metrics, and write a
//! checkpoint of every parameter.

use std::path::{Path, PathBuf};

use ver_core::rng::{substream, uniform_vec};
use ver_core::{Adam, ParamStore, Session};
use ver_model::{pretrain_batch_loss, save_checkpoint, ForwardCtx, Image, TeacherBank, VerModel};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::finetune::bank_from;
use crate::io::{csv_row, fmt_f64, write_atomic};
use crate::schedule::LrSchedule;

pub struct DistillSummary {
    pub steps: usize,
    /// Per-teacher mean cosine distance on a held-out probe batch, before
    /// and after training.
    pub initial_cos: Vec<f64>,
    pub final_cos: Vec<f64>,
    /// Mutual-information penalty on the probe batch (eval mode).
    pub initial_mi: f64,
    pub final_mi: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn random_images(
    rng: &mut ver_core::rng::SeedRng,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<Image> {
    (0..n)
        .map(|_| Image {
            height: h,
            width: w,
            channels: c,
            data: uniform_vec(rng, h * w * c, -1.0, 1.0),
        })
        .collect()
}

fn probe_metrics(
    model: &VerModel,
    store: &ParamStore,
    probe: &[Image],
    bank: &TeacherBank,
    weights: &ver_model::DistillWeights,
) -> Result<(Vec<f64>, f64)> {
    let sess = Session::new(store);
    let mut ctx = ForwardCtx::eval();
    let out = pretrain_batch_loss(model, &sess, probe, bank, weights, &mut ctx)?;
    Ok((out.per_teacher_cos.clone(), out.mi.item()))
}

pub fn run_distill(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DistillSummary> {
    let mcfg = cfg.model_config();
    let weights = cfg.distill_weights()?;
    let bank = bank_from(cfg)?;
    let p = &cfg.pretrain;
    let sched = LrSchedule::new(p.steps, p.peak_lr, p.warmup_frac, p.constant_frac)?;

    let mut store = ParamStore::new();
    let mut init_rng = substream(p.seed, "init");
    let model = VerModel::init(&mut store, mcfg.clone(), &mut init_rng)?;

    let mut data_rng = substream(p.seed, "data");
    let mut gate_rng = substream(p.seed, "gate-noise");
    let mut dropout_rng = substream(p.seed, "dropout");
    let mut probe_rng = substream(p.seed, "probe");
    let probe = random_images(
        &mut probe_rng,
        16,
        mcfg.image_height,
        mcfg.image_width,
        mcfg.image_channels,
    );

    let (initial_cos, initial_mi) = probe_metrics(&model, &store, &probe, &bank, &weights)?;

    let teachers = bank.len();
    let mut csv = String::from("step,lr,loss,distill,mi");
    for i in 0..teachers {
        csv.push_str(&format!(",cos_{i}"));
    }
    csv.push('\n');

    let mut opt = Adam::new(p.peak_lr);
    let mut final_loss = 0.0;
    for step in 0..p.steps {
        opt.lr = sched.lr(step)?;
        let images = random_images(
            &mut data_rng,
            p.batch,
            mcfg.image_height,
            mcfg.image_width,
            mcfg.image_channels,
        );
        let sess = Session::new(&store);
        let mut ctx = ForwardCtx {
            train: true,
            k_override: None,
            gumbel_tau: 1.0,
            gate_rng: Some(&mut gate_rng),
            gumbel_rng: None,
            dropout_rng: Some(&mut dropout_rng),
        };
        let out = pretrain_batch_loss(&model, &sess, &images, &bank, &weights, &mut ctx)?;
        let loss_val = out.loss.item();
        let mut fields = vec![
            step.to_string(),
            fmt_f64(opt.lr),
            fmt_f64(loss_val),
            fmt_f64(out.distill.item()),
            fmt_f64(out.mi.item()),
        ];
        fields.extend(out.per_teacher_cos.iter().map(|c| fmt_f64(*c)));
        csv.push_str(&csv_row(&fields));

        sess.backward(&out.loss)?;
        let grads = sess.gradients();
        opt.step(&mut store, &grads)?;
        final_loss = loss_val;
    }

    let (final_cos, final_mi) = probe_metrics(&model, &store, &probe, &bank, &weights)?;

    let checkpoint = out_dir.join("model.ckpt");
    let metrics = out_dir.join("distill_metrics.csv");
    std::fs::create_dir_all(out_dir)?;
    save_checkpoint(&store, &checkpoint)?;
    write_atomic(&metrics, csv.as_bytes())?;

    Ok(DistillSummary {
        steps: p.steps,
        initial_cos,
        final_cos,
        initial_mi,
        final_mi,
        final_loss,
        checkpoint,
        metrics,
    })
}
