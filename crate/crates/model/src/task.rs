//! Synthetic adaptation task exercising the frozen-backbone phase.
//!
//! Every pixel carries an i.i.d. noise floor resampled per sample; a fixed
//! subset of patches ("relevant") additionally carries a rendered
//! low-dimensional latent. The regression target is a linear readout of
//! one designated teacher's features summed over the relevant patches, as
//! observed (noise included). Teachers compress patches many-to-one, so no
//! other teacher's features determine the target: routing through teacher
//! r is the only way to predict it well, and the target carries zero
//! information about the irrelevant patches.

use ver_core::rng::{normal_vec, substream, SeedRng};
use ver_core::{Adam, ParamStore, Session, Tensor};

use crate::backbone::{extract_patches, ForwardCtx, Image, VerModel};
use crate::error::{config_err, Result};
use crate::routing::{CtaSchedule, RoutingStrategy};
use crate::teachers::TeacherBank;

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub seed: u64,
    /// Which teacher's features define the target.
    pub relevant_teacher: usize,
    /// Patch indices carrying signal; all others are noise.
    pub relevant_patches: Vec<usize>,
    pub latent_dim: usize,
    pub target_dim: usize,
    /// Std of the per-pixel noise floor under the whole image.
    pub noise_std: f64,
    /// A sample counts as a success when prediction RMSE (in normalized
    /// target units) falls below this.
    pub success_threshold: f64,
}

impl TaskSpec {
    pub fn reference() -> Self {
        Self {
            seed: 7,
            relevant_teacher: 2,
            relevant_patches: vec![5, 6, 9, 10],
            latent_dim: 4,
            target_dim: 4,
            noise_std: 1.0,
            success_threshold: 0.1,
        }
    }
}

pub struct TaskSample {
    pub image: Image,
    pub target: Vec<f64>,
    pub latent: Vec<f64>,
}

/// Frozen task definition: latent-to-pixel basis for the relevant patches
/// plus a calibrated readout from teacher features to normalized targets.
pub struct SyntheticTask {
    pub spec: TaskSpec,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
    tokens: usize,
    patch_dim: usize,
    teacher: crate::teachers::SyntheticTeacher,
    /// `[relevant][patch_dim][latent]` latent-to-pixel map.
    basis: Vec<f64>,
    /// `[target_dim][teacher_dim]` readout of the summed relevant features.
    readout: Vec<f64>,
    target_mean: Vec<f64>,
    target_scale: Vec<f64>,
}

impl SyntheticTask {
    pub fn build(
        spec: TaskSpec,
        bank: &TeacherBank,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if spec.relevant_teacher >= bank.len() {
            return config_err(format!(
                "relevant teacher {} out of range for bank of {}",
                spec.relevant_teacher,
                bank.len()
            ));
        }
        let teacher = bank.teachers[spec.relevant_teacher].clone();
        let patch = teacher.patch();
        if height % patch != 0 || width % patch != 0 {
            return config_err("image extents must align with the teacher patch grid");
        }
        let tokens = (height / patch) * (width / patch);
        let patch_dim = patch * patch * channels;
        if spec.relevant_patches.is_empty()
            || spec.relevant_patches.iter().any(|p| *p >= tokens)
        {
            return config_err(format!(
                "relevant patches must be a nonempty subset of 0..{tokens}"
            ));
        }
        let mut sorted = spec.relevant_patches.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != spec.relevant_patches.len() {
            return config_err("relevant patches must be unique");
        }
        if spec.latent_dim == 0 || spec.target_dim == 0 {
            return config_err("latent and target dims must be positive");
        }
        if spec.noise_std < 0.0 || spec.success_threshold <= 0.0 {
            return config_err("noise std must be >= 0, success threshold > 0");
        }

        let nrel = spec.relevant_patches.len();
        let mut brng = substream(spec.seed, "task-basis");
        let basis = normal_vec(
            &mut brng,
            nrel * patch_dim * spec.latent_dim,
            0.0,
            1.0 / (spec.latent_dim as f64).sqrt(),
        );
        let readout = normal_vec(
            &mut brng,
            spec.target_dim * teacher.dim,
            0.0,
            1.0 / (teacher.dim as f64).sqrt(),
        );

        let mut task = Self {
            spec,
            height,
            width,
            channels,
            patch,
            tokens,
            patch_dim,
            teacher,
            basis,
            readout,
            target_mean: vec![],
            target_scale: vec![],
        };

        // Calibrate per-dim target statistics over a fixed draw of full
        // samples (latent and noise both matter to the target) so
        // normalized targets have roughly zero mean and unit variance.
        let mut crng = substream(task.spec.seed, "task-calib");
        let calib = 256;
        let mut raws = Vec::with_capacity(calib);
        for _ in 0..calib {
            let img = task.render(&mut crng)?;
            raws.push(task.raw_target_from_image(&img)?);
        }
        let d = task.spec.target_dim;
        let mut mean = vec![0.0; d];
        for r in &raws {
            for (j, v) in r.iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= calib as f64);
        let mut var = vec![0.0; d];
        for r in &raws {
            for (j, v) in r.iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| (v / calib as f64).sqrt().max(1e-6))
            .collect();
        task.target_mean = mean;
        task.target_scale = scale;
        Ok(task)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Pixels of relevant patch slot `j` for latent `u`.
    fn patch_pixels(&self, j: usize, u: &[f64]) -> Vec<f64> {
        let ld = self.spec.latent_dim;
        let base = j * self.patch_dim * ld;
        (0..self.patch_dim)
            .map(|p| {
                (0..ld)
                    .map(|q| self.basis[base + p * ld + q] * u[q])
                    .sum::<f64>()
                    .tanh()
            })
            .collect()
    }

    /// Writes (`add == false`) or accumulates (`add == true`) patch
    /// `idx`'s pixels into an image buffer.
    fn blit_patch(&self, img: &mut Image, idx: usize, pixels: &[f64], add: bool) {
        let grid_w = self.width / self.patch;
        let (gy, gx) = (idx / grid_w, idx % grid_w);
        let mut p = 0;
        for iy in 0..self.patch {
            let y = gy * self.patch + iy;
            for ix in 0..self.patch {
                let x = gx * self.patch + ix;
                for c in 0..self.channels {
                    let cell = &mut img.data[(y * self.width + x) * self.channels + c];
                    *cell = if add { *cell + pixels[p] } else { pixels[p] };
                    p += 1;
                }
            }
        }
    }

    /// One observation: a fresh noise floor everywhere, plus the rendered
    /// latent on top of the relevant patches.
    fn render(&self, rng: &mut SeedRng) -> Result<Image> {
        let u: Vec<f64> = normal_vec(rng, self.spec.latent_dim, 0.0, 1.0);
        Ok(self.render_with(&u, rng)?)
    }

    fn render_with(&self, u: &[f64], rng: &mut SeedRng) -> Result<Image> {
        let mut img = Image::new(
            self.height,
            self.width,
            self.channels,
            normal_vec(
                rng,
                self.height * self.width * self.channels,
                0.0,
                self.spec.noise_std,
            ),
        )?;
        for (j, &idx) in self.spec.relevant_patches.iter().enumerate() {
            let pix = self.patch_pixels(j, u);
            self.blit_patch(&mut img, idx, &pix, true);
        }
        Ok(img)
    }

    /// Readout applied to the designated teacher's features of the
    /// canonical form of an image: relevant patches kept as observed, the
    /// rest zeroed, features summed over the relevant positions. The
    /// target therefore depends on the relevant pixels alone.
    fn raw_target_from_image(&self, image: &Image) -> Result<Vec<f64>> {
        let (pdata, _, pdim) = extract_patches(image, self.patch)?;
        let mut canon = Image::zeros(self.height, self.width, self.channels);
        for &idx in &self.spec.relevant_patches {
            let pix = &pdata[idx * pdim..(idx + 1) * pdim];
            self.blit_patch(&mut canon, idx, pix, false);
        }
        let feats = self.teacher.features(&canon)?;
        let d = self.teacher.dim;
        let mut summed = vec![0.0; d];
        for &idx in &self.spec.relevant_patches {
            for (s, f) in summed.iter_mut().zip(&feats[idx * d..(idx + 1) * d]) {
                *s += f;
            }
        }
        let mut out = vec![0.0; self.spec.target_dim];
        for (ti, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.readout[ti * d + j] * summed[j]).sum();
        }
        Ok(out)
    }

    fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.target_mean)
            .zip(&self.target_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Draws one sample: fresh latent, fresh noise floor.
    pub fn sample(&self, rng: &mut SeedRng) -> Result<TaskSample> {
        let u: Vec<f64> = normal_vec(rng, self.spec.latent_dim, 0.0, 1.0);
        let img = self.render_with(&u, rng)?;
        let target = self.normalize(&self.raw_target_from_image(&img)?);
        Ok(TaskSample {
            image: img,
            target,
            latent: u,
        })
    }

    /// Fixed evaluation set: deterministic in the task seed alone.
    pub fn eval_set(&self, n: usize) -> Result<Vec<TaskSample>> {
        let mut rng = substream(self.spec.seed, "task-eval");
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// Ideal policy: reads the image, keeps only relevant patches, applies
    /// the task's own readout. Exact on any sample by construction.
    pub fn oracle_policy(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.normalize(&self.raw_target_from_image(image)?))
    }

    pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
        let n = pred.len().max(1);
        (pred
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64)
            .sqrt()
    }

    /// Success rate of an arbitrary image-to-prediction function on the
    /// fixed evaluation set.
    pub fn policy_success<F>(&self, episodes: usize, mut policy: F) -> Result<f64>
    where
        F: FnMut(&Image) -> Result<Vec<f64>>,
    {
        let set = self.eval_set(episodes)?;
        let mut ok = 0usize;
        for s in &set {
            let pred = policy(&s.image)?;
            if Self::rmse(&pred, &s.target) < self.spec.success_threshold {
                ok += 1;
            }
        }
        Ok(ok as f64 / episodes as f64)
    }
}

/// Mean-pooled two-layer readout from expert-stage tokens to the target.
#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub prefix: String,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl PolicyHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        token_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let h = Self {
            prefix: prefix.to_string(),
            token_dim,
            hidden_dim,
            out_dim,
        };
        store.insert(
            &h.name("w1"),
            vec![token_dim, hidden_dim],
            normal_vec(rng, token_dim * hidden_dim, 0.0, std),
        )?;
        store.insert(&h.name("b1"), vec![hidden_dim], vec![0.0; hidden_dim])?;
        store.insert(
            &h.name("w2"),
            vec![hidden_dim, out_dim],
            normal_vec(rng, hidden_dim * out_dim, 0.0, std),
        )?;
        store.insert(&h.name("b2"), vec![out_dim], vec![0.0; out_dim])?;
        Ok(h)
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    /// `tokens` is `[T, token_dim]`; returns `[out_dim]`.
    pub fn forward(&self, sess: &Session<'_>, tokens: &Tensor) -> Result<Tensor> {
        let pooled = tokens.mean_axis(0)?.reshape(&[1, self.token_dim])?;
        let w1 = sess.param(&self.name("w1"))?;
        let b1 = sess.param(&self.name("b1"))?;
        let w2 = sess.param(&self.name("w2"))?;
        let b2 = sess.param(&self.name("b2"))?;
        let h = pooled.matmul(&w1)?.add(&b1)?.gelu();
        Ok(h.matmul(&w2)?.add(&b2)?.reshape(&[self.out_dim])?)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub strategy: RoutingStrategy,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub gumbel_tau: f64,
    /// Fresh trainable experts appended before training.
    pub scratch_experts: usize,
    /// Active-count taper; valid with the patch-routed strategy only.
    pub cta: Option<CtaSchedule>,
    /// Per-step learning rates overriding `lr`; length must equal `steps`.
    pub lr_by_step: Option<Vec<f64>>,
    pub policy_hidden: usize,
    pub eval_episodes: usize,
}

impl FinetuneConfig {
    pub fn new(strategy: RoutingStrategy) -> Self {
        Self {
            strategy,
            steps: 300,
            batch: 8,
            lr: 1e-3,
            gumbel_tau: 1.0,
            scratch_experts: 0,
            cta: None,
            lr_by_step: None,
            policy_hidden: 32,
            eval_episodes: 200,
        }
    }
}

/// One training-step record. `freqs` holds teacher-selection frequencies
/// for the teacher-choice strategies and expert utilization otherwise.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub k: usize,
    pub freqs: Vec<f64>,
}

pub struct FinetuneRun {
    pub strategy: RoutingStrategy,
    pub records: Vec<StepRecord>,
    pub final_success: f64,
    pub final_mean_rmse: f64,
    /// Eval-mode teacher-choice frequencies (teacher-choice strategies).
    pub eval_teacher_freqs: Vec<f64>,
    /// Eval-mode expert utilization per layer, normalized to sum 1.
    pub eval_expert_util: Vec<Vec<f64>>,
}

fn teacher_freqs_from_counts(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|c| *c as f64 / total.max(1) as f64)
        .collect()
}

/// Adapts a frozen model to a task: freezes everything, optionally appends
/// scratch experts, attaches the strategy's router and a policy head, and
/// trains only those pieces with Adam on per-sample MSE.
pub fn finetune_router(
    model: &mut VerModel,
    store: &mut ParamStore,
    task: &SyntheticTask,
    fcfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    if fcfg.cta.is_some() && fcfg.strategy != RoutingStrategy::PatchRouted {
        return config_err("the taper schedule applies to patch routing only");
    }
    if fcfg.steps == 0 || fcfg.batch == 0 || fcfg.eval_episodes == 0 {
        return config_err("steps, batch, and eval episodes must be positive");
    }
    if let Some(t) = &fcfg.lr_by_step {
        if t.len() != fcfg.steps {
            return config_err(format!(
                "lr table has {} entries for {} steps",
                t.len(),
                fcfg.steps
            ));
        }
    }
    if let Some(cta) = &fcfg.cta {
        if cta.full != model.num_experts() + fcfg.scratch_experts {
            return config_err(format!(
                "taper starts at {} but the library will hold {} experts",
                cta.full,
                model.num_experts() + fcfg.scratch_experts
            ));
        }
    }

    let mut init_rng = substream(seed, "init");
    model.freeze_for_adaptation(store);
    if fcfg.scratch_experts > 0 {
        model.add_experts(store, fcfg.scratch_experts, &mut init_rng)?;
    }

    let mut trainable_prefixes: Vec<String> = vec!["policy.".into()];
    match fcfg.strategy {
        RoutingStrategy::TeacherSpecific(_) => {}
        RoutingStrategy::FrameRouted => {
            if model.frame_router.is_none() {
                model.attach_frame_router(store, &mut init_rng)?;
            }
            trainable_prefixes.push("frame_router.".into());
        }
        RoutingStrategy::LayerRouted => {
            if model.layer_routers.is_none() {
                model.attach_layer_routers(store, &mut init_rng)?;
            }
            trainable_prefixes.push("layer_router.".into());
        }
        RoutingStrategy::PatchRouted => {
            if model.patch_gates.is_none() {
                model.attach_patch_gates(store, &mut init_rng)?;
            }
            trainable_prefixes.push("per_gate.".into());
        }
    }
    trainable_prefixes.extend(model.scratch_expert_prefixes());

    let policy = if store.contains("policy.w1") {
        PolicyHead {
            prefix: "policy".into(),
            token_dim: model.cfg.token_dim,
            hidden_dim: fcfg.policy_hidden,
            out_dim: task.spec.target_dim,
        }
    } else {
        PolicyHead::init(
            store,
            "policy",
            model.cfg.token_dim,
            fcfg.policy_hidden,
            task.spec.target_dim,
            model.cfg.init_std,
            &mut init_rng,
        )?
    };
    for p in &trainable_prefixes {
        store.set_trainable_prefix(p, true);
    }

    let mut data_rng = substream(seed, "data");
    let mut gate_rng = substream(seed, "gate-noise");
    let mut gumbel_rng = substream(seed, "gumbel");
    let mut dropout_rng = substream(seed, "dropout");
    let mut opt = Adam::new(fcfg.lr);

    let num_teachers = model.num_teachers();
    let num_experts = model.num_experts();
    let teacher_choice = matches!(
        fcfg.strategy,
        RoutingStrategy::FrameRouted | RoutingStrategy::LayerRouted
    );

    let mut records = Vec::with_capacity(fcfg.steps);
    for step in 0..fcfg.steps {
        if let Some(t) = &fcfg.lr_by_step {
            opt.lr = t[step];
        }
        let k_override = fcfg.cta.as_ref().map(|c| c.k_at(step));
        let sess = Session::new(store);
        let mut loss_acc: Option<Tensor> = None;
        let mut teacher_counts = vec![0usize; num_teachers];
        let mut expert_counts = vec![0usize; num_experts];
        let mut k_used = model.cfg.active_k.min(num_experts);

        for _ in 0..fcfg.batch {
            let sample = task.sample(&mut data_rng)?;
            let z = model.forward_base(&sess, &sample.image)?;
            let mut ctx = ForwardCtx {
                train: true,
                k_override,
                gumbel_tau: fcfg.gumbel_tau,
                gate_rng: Some(&mut gate_rng),
                gumbel_rng: Some(&mut gumbel_rng),
                dropout_rng: Some(&mut dropout_rng),
            };
            let (y, trace) = model.forward_experts(&sess, &z, fcfg.strategy, &mut ctx)?;
            let pred = policy.forward(&sess, &y)?;
            let target = sess.constant(sample.target.clone(), &[task.spec.target_dim])?;
            let diff = pred.sub(&target)?;
            let mse = diff.mul(&diff)?.mean();
            loss_acc = Some(match loss_acc {
                Some(a) => a.add(&mse)?,
                None => mse,
            });

            for lt in &trace.layers {
                if let Some(t) = lt.teacher {
                    teacher_counts[t] += 1;
                }
                for (e, c) in lt.eval_counts.iter().enumerate() {
                    expert_counts[e] += c;
                }
                k_used = lt.k_used;
            }
        }

        let loss = loss_acc.unwrap().scale(1.0 / fcfg.batch as f64, 0.0);
        let loss_val = loss.item();
        sess.backward(&loss)?;
        let grads = sess.gradients();
        opt.step(store, &grads)?;

        let freqs = if teacher_choice {
            teacher_freqs_from_counts(&teacher_counts)
        } else {
            teacher_freqs_from_counts(&expert_counts)
        };
        records.push(StepRecord {
            step,
            loss: loss_val,
            k: k_used,
            freqs,
        });
    }

    // Final greedy evaluation on the fixed eval set.
    let eval = evaluate(model, store, task, &policy, fcfg.strategy, fcfg.eval_episodes)?;
    Ok(FinetuneRun {
        strategy: fcfg.strategy,
        records,
        final_success: eval.success_rate,
        final_mean_rmse: eval.mean_rmse,
        eval_teacher_freqs: eval.teacher_freqs,
        eval_expert_util: eval.expert_util,
    })
}

pub struct EvalReport {
    pub success_rate: f64,
    pub mean_rmse: f64,
    /// Teacher-choice frequency over the eval set (teacher-choice
    /// strategies; one-hot for teacher-specific routing, zeros otherwise).
    pub teacher_freqs: Vec<f64>,
    /// `[layer][expert]` share of expert evaluations.
    pub expert_util: Vec<Vec<f64>>,
}

/// Greedy (noise-free) evaluation of a trained policy head under a routing
/// strategy. Deterministic given model, task, and episode count.
pub fn evaluate(
    model: &VerModel,
    store: &ParamStore,
    task: &SyntheticTask,
    policy: &PolicyHead,
    strategy: RoutingStrategy,
    episodes: usize,
) -> Result<EvalReport> {
    let set = task.eval_set(episodes)?;
    let layers = model.expert_blocks.len();
    let num_experts = model.num_experts();
    let mut teacher_counts = vec![0usize; model.num_teachers()];
    let mut util = vec![vec![0usize; num_experts]; layers];
    let mut ok = 0usize;
    let mut rmse_sum = 0.0;

    for s in &set {
        let sess = Session::new(store);
        let z = model.forward_base(&sess, &s.image)?;
        let mut ctx = ForwardCtx::eval();
        let (y, trace) = model.forward_experts(&sess, &z, strategy, &mut ctx)?;
        let pred = policy.forward(&sess, &y)?.value();
        let rmse = SyntheticTask::rmse(&pred, &s.target);
        rmse_sum += rmse;
        if rmse < task.spec.success_threshold {
            ok += 1;
        }
        for lt in &trace.layers {
            if let Some(t) = lt.teacher {
                teacher_counts[t] += 1;
            }
            for (e, c) in lt.eval_counts.iter().enumerate() {
                util[lt.layer][e] += c;
            }
        }
    }

    let expert_util = util
        .iter()
        .map(|row| teacher_freqs_from_counts(row))
        .collect();
    Ok(EvalReport {
        success_rate: ok as f64 / episodes as f64,
        mean_rmse: rmse_sum / episodes as f64,
        teacher_freqs: teacher_freqs_from_counts(&teacher_counts),
        expert_util,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub k: usize,
    pub success: f64,
    pub mean_rmse: f64,
    pub active_params: usize,
}

/// Fine-tunes a fresh copy of the model per active-expert count and
/// reports success plus active-parameter accounting.
pub fn ablate_topk(
    model: &VerModel,
    store: &ParamStore,
    task: &SyntheticTask,
    base: &FinetuneConfig,
    k_values: &[usize],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let l = model.num_experts();
    if k_values.is_empty() || k_values.iter().any(|k| *k == 0 || *k > l) {
        return config_err(format!("ablation counts must lie in 1..={l}"));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut m = model.clone();
        let mut s = store.clone();
        m.cfg.active_k = k;
        let fcfg = FinetuneConfig {
            strategy: RoutingStrategy::PatchRouted,
            cta: None,
            ..base.clone()
        };
        let run = finetune_router(&mut m, &mut s, task, &fcfg, seed)?;
        rows.push(AblationRow {
            k,
            success: run.final_success,
            mean_rmse: run.final_mean_rmse,
            active_params: m.active_param_count(&s, k),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::teachers::TeacherBank;
    use ver_core::rng::substream;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            image_channels: 2,
            patch: 4,
            token_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            plain_blocks: 1,
            expert_blocks: 2,
            num_experts: 3,
            active_k: 2,
            gate_hidden: 8,
            per_gate_hidden: 2,
            router_hidden: 8,
            teacher_dims: vec![8, 8],
            dropout: 0.0,
            init_std: 0.05,
            ln_eps: 1e-5,
            renormalize_gates: false,
            per_gate_budget: 0.05,
        }
    }

    fn tiny_spec() -> TaskSpec {
        TaskSpec {
            seed: 11,
            relevant_teacher: 1,
            relevant_patches: vec![1, 2],
            latent_dim: 2,
            target_dim: 3,
            noise_std: 1.0,
            success_threshold: 0.1,
        }
    }

    fn tiny_task() -> SyntheticTask {
        use crate::teachers::{SyntheticTeacher, TeacherKind};
        let bank = TeacherBank::new(vec![
            SyntheticTeacher::new(TeacherKind::Local, 8, 5, 4, 2).unwrap(),
            SyntheticTeacher::new(TeacherKind::Mixing, 8, 6, 4, 2).unwrap(),
        ])
        .unwrap();
        SyntheticTask::build(tiny_spec(), &bank, 8, 8, 2).unwrap()
    }

    fn build_model() -> (ParamStore, VerModel) {
        let mut store = ParamStore::new();
        let mut rng = substream(42, "init");
        let model = VerModel::init(&mut store, tiny_cfg(), &mut rng).unwrap();
        (store, model)
    }

    fn quick(strategy: RoutingStrategy) -> FinetuneConfig {
        FinetuneConfig {
            steps: 12,
            batch: 2,
            eval_episodes: 16,
            ..FinetuneConfig::new(strategy)
        }
    }

    #[test]
    fn oracle_policy_is_exact_on_every_sample() {
        // Relevant pixels carry no noise, so reading them back and applying
        // the task's own readout reproduces the stored target bitwise.
        let task = tiny_task();
        let set = task.eval_set(32).unwrap();
        for s in &set {
            let pred = task.oracle_policy(&s.image).unwrap();
            assert_eq!(pred, s.target);
        }
        let rate = task
            .policy_success(32, |img| task.oracle_policy(img))
            .unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn eval_set_depends_only_on_the_task_seed() {
        let a = tiny_task().eval_set(8).unwrap();
        let b = tiny_task().eval_set(8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.target, y.target);
        }
    }

    #[test]
    fn calibration_roughly_normalizes_targets() {
        let task = tiny_task();
        let set = task.eval_set(400).unwrap();
        let d = task.spec.target_dim;
        for j in 0..d {
            let vals: Vec<f64> = set.iter().map(|s| s.target[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 0.3, "dim {j} mean {mean}");
            assert!((0.4..2.5).contains(&var), "dim {j} var {var}");
        }
    }

    #[test]
    fn constant_predictor_fails_the_threshold() {
        // Predicting the mean target everywhere should essentially never
        // land within 0.1 RMSE of a unit-variance target.
        let task = tiny_task();
        let rate = task
            .policy_success(64, |_| Ok(vec![0.0; task.spec.target_dim]))
            .unwrap();
        assert!(rate < 0.1, "got {rate}");
    }

    #[test]
    fn finetuning_never_touches_frozen_parameters() {
        for strategy in [
            RoutingStrategy::TeacherSpecific(1),
            RoutingStrategy::FrameRouted,
            RoutingStrategy::LayerRouted,
            RoutingStrategy::PatchRouted,
        ] {
            let (mut store, mut model) = {
                let (s, m) = build_model();
                (s, m)
            };
            let task = tiny_task();
            let fcfg = FinetuneConfig {
                scratch_experts: 1,
                ..quick(strategy)
            };
            let run = finetune_router(&mut model, &mut store, &task, &fcfg, 3).unwrap();
            assert_eq!(run.records.len(), fcfg.steps);

            // Everything still frozen after the run must match, bit for
            // bit, a fresh initialization taken through the same freeze and
            // expert-append steps (the append widens frozen gate matrices).
            let (mut fresh, mut fresh_model) = build_model();
            let mut replay_rng = substream(3, "init");
            fresh_model.freeze_for_adaptation(&mut fresh);
            fresh_model
                .add_experts(&mut fresh, 1, &mut replay_rng)
                .unwrap();
            for (name, p) in store.iter() {
                if p.trainable {
                    continue;
                }
                let q = fresh.get(name).unwrap_or_else(|_| {
                    panic!("[{strategy}] frozen param {name} not in fresh init")
                });
                let a: Vec<u64> = p.data.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = q.data.iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "[{strategy}] frozen param {name} drifted");
            }
        }
    }

    #[test]
    fn finetuning_trains_the_attached_pieces() {
        let (mut store, mut model) = build_model();
        let task = tiny_task();
        let before = store.get("ts_gate.0.1.w_score").map(|p| p.data.clone()).unwrap();
        let run = finetune_router(
            &mut model,
            &mut store,
            &task,
            &quick(RoutingStrategy::FrameRouted),
            9,
        )
        .unwrap();
        // The policy head and router moved; the frozen gate did not.
        assert!(store.get("policy.w1").unwrap().trainable);
        assert!(store.get("frame_router.w1").unwrap().trainable);
        assert_eq!(before, store.get("ts_gate.0.1.w_score").unwrap().data);
        assert!(run.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(run.eval_teacher_freqs.len(), 2);
        let total: f64 = run.eval_teacher_freqs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taper_trace_matches_the_schedule_exactly() {
        let (mut store, mut model) = build_model();
        let task = tiny_task();
        let cta = CtaSchedule::new(4, 1, 10).unwrap();
        let fcfg = FinetuneConfig {
            scratch_experts: 1,
            cta: Some(cta.clone()),
            ..quick(RoutingStrategy::PatchRouted)
        };
        let run = finetune_router(&mut model, &mut store, &task, &fcfg, 5).unwrap();
        for r in &run.records {
            assert_eq!(r.k, cta.k_at(r.step), "step {}", r.step);
        }
        let ks: Vec<usize> = run.records.iter().map(|r| r.k).collect();
        assert!(ks.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*ks.last().unwrap(), 1);
        assert_eq!(ks[0], 4);
    }

    #[test]
    fn taper_is_rejected_off_patch_routing_and_on_bad_counts() {
        let task = tiny_task();
        {
            let (mut store, mut model) = build_model();
            let fcfg = FinetuneConfig {
                cta: Some(CtaSchedule::new(3, 1, 10).unwrap()),
                ..quick(RoutingStrategy::FrameRouted)
            };
            assert!(finetune_router(&mut model, &mut store, &task, &fcfg, 1).is_err());
        }
        {
            let (mut store, mut model) = build_model();
            // Library will hold 3 + 2 experts; schedule claims 4.
            let fcfg = FinetuneConfig {
                scratch_experts: 2,
                cta: Some(CtaSchedule::new(4, 1, 10).unwrap()),
                ..quick(RoutingStrategy::PatchRouted)
            };
            assert!(finetune_router(&mut model, &mut store, &task, &fcfg, 1).is_err());
        }
    }

    #[test]
    fn ablation_reports_monotone_active_parameter_counts() {
        let (store, model) = build_model();
        let task = tiny_task();
        let base = FinetuneConfig {
            steps: 4,
            batch: 2,
            eval_episodes: 8,
            ..FinetuneConfig::new(RoutingStrategy::PatchRouted)
        };
        let rows = ablate_topk(&model, &store, &task, &base, &[1, 2, 3], 2).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, k) in rows.iter().zip([1usize, 2, 3]) {
            assert_eq!(row.k, k);
            assert!(row.mean_rmse.is_finite());
        }
        assert!(rows[0].active_params < rows[1].active_params);
        assert!(rows[1].active_params < rows[2].active_params);
        assert!(ablate_topk(&model, &store, &task, &base, &[0], 2).is_err());
        assert!(ablate_topk(&model, &store, &task, &base, &[4], 2).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (mut store, mut model) = build_model();
        let task = tiny_task();
        finetune_router(
            &mut model,
            &mut store,
            &task,
            &quick(RoutingStrategy::PatchRouted),
            4,
        )
        .unwrap();
        let policy = PolicyHead {
            prefix: "policy".into(),
            token_dim: model.cfg.token_dim,
            hidden_dim: 32,
            out_dim: task.spec.target_dim,
        };
        let a = evaluate(&model, &store, &task, &policy, RoutingStrategy::PatchRouted, 16).unwrap();
        let b = evaluate(&model, &store, &task, &policy, RoutingStrategy::PatchRouted, 16).unwrap();
        assert_eq!(a.success_rate, b.success_rate);
        assert_eq!(a.mean_rmse, b.mean_rmse);
        assert_eq!(a.expert_util, b.expert_util);
    }
}
