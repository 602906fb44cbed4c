//! Pretraining objective: per-teacher feature distillation plus a
//! mutual-information penalty that pushes teachers toward disjoint expert
//! usage.
//!
//! The MI term treats teacher identity as a uniform categorical variable
//! and expert usage as the batch-mean soft gate distribution; the loss is
//! the negated mutual information summed over expert layers, so minimizing
//! it raises MI. Hard selection counts are kept for reporting only.

use ver_core::{Session, Tensor};

use crate::backbone::{ForwardCtx, Image, VerModel};
use crate::error::{config_err, Result};
use crate::routing::RoutingStrategy;
use crate::teachers::TeacherBank;

/// Loss mixing knobs. `alpha` weights teachers, `beta` mixes cosine vs
/// smooth-L1, `gamma` scales the MI term, `delta` is the smooth-L1 corner.
#[derive(Debug, Clone)]
pub struct DistillWeights {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl DistillWeights {
    /// Defaults: uniform teacher weights, beta 0.9, gamma 5e-4, delta 1.
    pub fn uniform(teachers: usize) -> Self {
        Self {
            alpha: vec![1.0 / teachers as f64; teachers],
            beta: 0.9,
            gamma: 0.0005,
            delta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.alpha.iter().any(|a| *a < 0.0) {
            return config_err("teacher weights must be nonnegative and nonempty");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return config_err(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.gamma < 0.0 {
            return config_err("gamma must be nonnegative");
        }
        if self.delta <= 0.0 {
            return config_err("delta must be positive");
        }
        Ok(())
    }
}

/// Mean over rows of (1 - cosine similarity). `target` rows with vanishing
/// norm are clamped at 1e-12 rather than erroring. Range [0, 2].
pub fn cosine_distance(student: &Tensor, target: &Tensor) -> Result<Tensor> {
    if student.shape() != target.shape() || student.shape().len() != 2 {
        return config_err(format!(
            "cosine distance wants matching 2-D shapes, got {:?} vs {:?}",
            student.shape(),
            target.shape()
        ));
    }
    let dot = student.mul(target)?.sum_axis(1)?;
    // Clamp the squared norms at 1e-24 (norms at 1e-12) before the square
    // root so zero rows stay differentiable instead of producing 0/0.
    let ns = student.mul(student)?.sum_axis(1)?.clamp_min(1e-24).sqrt()?;
    let nt = target.mul(target)?.sum_axis(1)?.clamp_min(1e-24).sqrt()?;
    let cos = dot.div(&ns.mul(&nt)?)?;
    Ok(cos.scale(-1.0, 1.0).mean())
}

/// Batch-accumulated soft gate usage per (expert layer, teacher).
pub struct SelectionStats {
    layers: usize,
    teachers: usize,
    acc: Vec<Vec<Option<Tensor>>>,
    counts: Vec<Vec<usize>>,
}

impl SelectionStats {
    pub fn new(layers: usize, teachers: usize) -> Self {
        Self {
            layers,
            teachers,
            acc: (0..layers).map(|_| vec![None; teachers]).collect(),
            counts: vec![vec![0; teachers]; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn teachers(&self) -> usize {
        self.teachers
    }

    /// Folds one frame's `[T, L]` gate probabilities into the running mean
    /// for (layer, teacher).
    pub fn record(&mut self, layer: usize, teacher: usize, probs: &Tensor) -> Result<()> {
        if layer >= self.layers || teacher >= self.teachers {
            return config_err(format!(
                "selection stats index ({layer}, {teacher}) out of range"
            ));
        }
        let row = probs.mean_axis(0)?;
        let slot = &mut self.acc[layer][teacher];
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&row)?,
            None => row,
        });
        self.counts[layer][teacher] += 1;
        Ok(())
    }

    /// Batch-mean usage distribution of `teacher` at `layer` (`[L]`,
    /// differentiable).
    pub fn conditional(&self, layer: usize, teacher: usize) -> Result<Tensor> {
        let n = self.counts[layer][teacher];
        if n == 0 {
            return config_err(format!(
                "no stats recorded for layer {layer}, teacher {teacher}"
            ));
        }
        Ok(self.acc[layer][teacher]
            .as_ref()
            .unwrap()
            .scale(1.0 / n as f64, 0.0))
    }

    /// Plain-data copy of every conditional, `[layer][teacher][expert]`.
    pub fn conditionals_data(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..self.layers)
            .map(|n| {
                (0..self.teachers)
                    .map(|i| Ok(self.conditional(n, i)?.value()))
                    .collect()
            })
            .collect()
    }

    /// Negated mutual information between teacher identity (uniform) and
    /// expert usage, summed over layers. Differentiable; in
    /// [-layers*ln(min(teachers, experts)), 0].
    pub fn mi_loss(&self) -> Result<Tensor> {
        let inv_i = 1.0 / self.teachers as f64;
        let mut total: Option<Tensor> = None;
        for n in 0..self.layers {
            let conds: Vec<Tensor> = (0..self.teachers)
                .map(|i| self.conditional(n, i))
                .collect::<Result<_>>()?;
            let mut marginal = conds[0].scale(inv_i, 0.0);
            for c in &conds[1..] {
                marginal = marginal.add(&c.scale(inv_i, 0.0))?;
            }
            // p ln(p/q) with p = 0 contributes 0: the clamps only affect
            // the log argument, and the outer factor is the exact p.
            let m_safe = marginal.clamp_min(1e-300);
            for cond in &conds {
                let ratio = cond.clamp_min(1e-300).div(&m_safe)?;
                let term = cond.mul(&ratio.log()?)?.sum().scale(inv_i, 0.0);
                total = Some(match total {
                    Some(t) => t.add(&term)?,
                    None => term,
                });
            }
        }
        Ok(total.unwrap().negate())
    }
}

/// Reference computation of the (non-negated) mutual information in nats
/// for conditionals `cond[i][l] = p(expert l | teacher i)` with a uniform
/// teacher prior. Zero-probability cells contribute zero.
pub fn mutual_information(cond: &[Vec<f64>]) -> f64 {
    let i_count = cond.len();
    let l_count = cond[0].len();
    let inv_i = 1.0 / i_count as f64;
    let mut marginal = vec![0.0; l_count];
    for row in cond {
        for (l, p) in row.iter().enumerate() {
            marginal[l] += inv_i * p;
        }
    }
    let mut mi = 0.0;
    for row in cond {
        for (l, p) in row.iter().enumerate() {
            let joint = inv_i * p;
            if joint > 0.0 && marginal[l] > 0.0 {
                mi += joint * (joint / (inv_i * marginal[l])).ln();
            }
        }
    }
    mi
}

/// Everything one optimization step needs from a batch forward pass.
pub struct BatchOutcome {
    /// Total loss: distillation + gamma * MI penalty.
    pub loss: Tensor,
    pub distill: Tensor,
    pub mi: Tensor,
    /// Mean cosine distance per teacher over the batch (reporting).
    pub per_teacher_cos: Vec<f64>,
    /// Mean smooth-L1 per teacher over the batch (reporting).
    pub per_teacher_sl1: Vec<f64>,
    /// Soft usage conditionals `[layer][teacher][expert]` (reporting).
    pub conditionals: Vec<Vec<Vec<f64>>>,
    /// Hard selection counts `[layer][teacher][expert]` over the batch.
    pub hard_counts: Vec<Vec<Vec<usize>>>,
}

/// Distills a batch: runs the base once per image, the expert stage once
/// per (image, teacher), compares each projection to its teacher target,
/// and accumulates the MI penalty from the gate probabilities.
pub fn pretrain_batch_loss(
    model: &VerModel,
    sess: &Session<'_>,
    images: &[Image],
    bank: &TeacherBank,
    weights: &DistillWeights,
    ctx: &mut ForwardCtx<'_>,
) -> Result<BatchOutcome> {
    weights.validate()?;
    let teachers = model.num_teachers();
    if bank.len() != teachers || weights.alpha.len() != teachers {
        return config_err(format!(
            "teacher count mismatch: model {teachers}, bank {}, alpha {}",
            bank.len(),
            weights.alpha.len()
        ));
    }
    if images.is_empty() {
        return config_err("empty batch");
    }

    let layers = model.expert_blocks.len();
    let experts = model.num_experts();
    let mut stats = SelectionStats::new(layers, teachers);
    let mut hard_counts = vec![vec![vec![0usize; experts]; teachers]; layers];
    let mut per_teacher_cos = vec![0.0; teachers];
    let mut per_teacher_sl1 = vec![0.0; teachers];
    let mut distill_acc: Option<Tensor> = None;

    for image in images {
        let z = model.forward_base(sess, image)?;
        for i in 0..teachers {
            let (y, trace) =
                model.forward_experts(sess, &z, RoutingStrategy::TeacherSpecific(i), ctx)?;
            let proj = model.project_to_teacher(sess, &y, i)?;
            let feats = bank.features(i, image)?;
            let t = proj.shape()[0];
            let d = proj.shape()[1];
            if feats.len() != t * d {
                return config_err(format!(
                    "teacher {i} features have {} values, student projects {t}x{d}",
                    feats.len()
                ));
            }
            let target = sess.constant(feats, &[t, d])?;
            let lcos = cosine_distance(&proj, &target)?;
            let lsl1 = proj.smooth_l1(&target, weights.delta)?;
            per_teacher_cos[i] += lcos.item();
            per_teacher_sl1[i] += lsl1.item();

            let term = lcos
                .scale(weights.beta, 0.0)
                .add(&lsl1.scale(1.0 - weights.beta, 0.0))?
                .scale(weights.alpha[i], 0.0);
            distill_acc = Some(match distill_acc {
                Some(a) => a.add(&term)?,
                None => term,
            });

            for lt in &trace.layers {
                stats.record(lt.layer, i, &lt.soft_probs)?;
                for (e, c) in lt.eval_counts.iter().enumerate() {
                    hard_counts[lt.layer][i][e] += c;
                }
            }
        }
    }

    let b = images.len() as f64;
    let distill = distill_acc.unwrap().scale(1.0 / b, 0.0);
    let mi = stats.mi_loss()?;
    let loss = distill.add(&mi.scale(weights.gamma, 0.0))?;
    per_teacher_cos.iter_mut().for_each(|v| *v /= b);
    per_teacher_sl1.iter_mut().for_each(|v| *v /= b);

    Ok(BatchOutcome {
        loss,
        distill,
        mi,
        per_teacher_cos,
        per_teacher_sl1,
        conditionals: stats.conditionals_data()?,
        hard_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::{substream, uniform_vec};
    use ver_core::{Adam, ParamStore};

    fn sess_pair(vals: (Vec<f64>, Vec<f64>), shape: &[usize]) -> f64 {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let a = sess.constant(vals.0, shape).unwrap();
        let b = sess.constant(vals.1, shape).unwrap();
        cosine_distance(&a, &b).unwrap().item()
    }

    #[test]
    fn cosine_distance_canonical_values() {
        let v = vec![0.3, -0.7, 0.2, 0.9];
        assert!(sess_pair((v.clone(), v.clone()), &[2, 2]).abs() < 1e-12);

        let a = vec![1.0, 0.0, 0.0, 2.0];
        let b = vec![0.0, 3.0, -5.0, 0.0];
        assert!((sess_pair((a.clone(), b), &[2, 2]) - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((sess_pair((a, neg), &[2, 2]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_survives_zero_rows() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let a = sess.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
        let b = sess.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let d = cosine_distance(&a, &b).unwrap();
        assert!(d.item().is_finite());
        sess.backward(&d).unwrap(); // must not NaN either
    }

    #[test]
    fn smooth_l1_canonical_values() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let zero = sess.constant(vec![0.0], &[1]).unwrap();
        let half = sess.constant(vec![0.5], &[1]).unwrap();
        let two = sess.constant(vec![2.0], &[1]).unwrap();
        assert!((half.smooth_l1(&zero, 1.0).unwrap().item() - 0.125).abs() < 1e-12);
        assert!((two.smooth_l1(&zero, 1.0).unwrap().item() - 1.5).abs() < 1e-12);
        assert!(zero.smooth_l1(&zero, 1.0).unwrap().item() == 0.0);
    }

    fn stats_from(cond: &[Vec<f64>]) -> f64 {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let mut stats = SelectionStats::new(1, cond.len());
        for (i, row) in cond.iter().enumerate() {
            let p = sess.constant(row.clone(), &[1, row.len()]).unwrap();
            stats.record(0, i, &p).unwrap();
        }
        stats.mi_loss().unwrap().item()
    }

    #[test]
    fn identical_usage_gives_zero_mi() {
        let row = vec![0.4, 0.3, 0.2, 0.1];
        let v = stats_from(&[row.clone(), row.clone(), row]);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn disjoint_usage_hits_the_lower_bound() {
        let cond = [
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let v = stats_from(&cond);
        assert!((v + 3.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn loss_matches_brute_force_mi_on_random_tables() {
        let mut rng = substream(31, "tables");
        for _ in 0..200 {
            let raw: Vec<f64> = uniform_vec(&mut rng, 3 * 5, 0.01, 1.0);
            let cond: Vec<Vec<f64>> = raw
                .chunks(5)
                .map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(|v| v / s).collect()
                })
                .collect();
            let via_loss = -stats_from(&cond);
            let brute = mutual_information(&cond);
            assert!((via_loss - brute).abs() < 1e-9, "{via_loss} vs {brute}");
            assert!(via_loss >= -1e-12 && via_loss <= 3.0f64.min(5.0).ln() + 1e-12);
        }
    }

    #[test]
    fn optimizing_the_mi_loss_separates_teacher_usage() {
        // Two teachers, four experts, logits trained directly: the loss
        // alone should drive usage toward disjoint experts, with MI
        // approaching ln 2.
        let mut store = ParamStore::new();
        let mut rng = substream(17, "init");
        store
            .insert("logits", vec![2, 4], uniform_vec(&mut rng, 8, -0.1, 0.1))
            .unwrap();
        let mut opt = Adam::new(0.05);
        let mut last = f64::NAN;
        for _ in 0..400 {
            let sess = Session::new(&store);
            let probs = sess.param("logits").unwrap().softmax(1).unwrap();
            let mut stats = SelectionStats::new(1, 2);
            for i in 0..2 {
                stats.record(0, i, &probs.gather_rows(&[i]).unwrap()).unwrap();
            }
            let loss = stats.mi_loss().unwrap();
            last = -loss.item();
            sess.backward(&loss).unwrap();
            let grads = sess.gradients();
            opt.step(&mut store, &grads).unwrap();
        }
        let bound = 2.0f64.ln();
        assert!(
            (bound - last) / bound < 0.05,
            "final MI {last} vs bound {bound}"
        );
    }

    fn tiny_setup() -> (
        ParamStore,
        crate::backbone::VerModel,
        TeacherBank,
        Vec<Image>,
    ) {
        let cfg = crate::backbone::ModelConfig {
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
            teacher_dims: vec![6, 6],
            dropout: 0.0,
            init_std: 0.05,
            ln_eps: 1e-5,
            renormalize_gates: false,
            per_gate_budget: 0.05,
        };
        let mut store = ParamStore::new();
        let mut rng = substream(99, "init");
        let model = crate::backbone::VerModel::init(&mut store, cfg, &mut rng).unwrap();
        let bank = TeacherBank::new(vec![
            crate::teachers::SyntheticTeacher::new(crate::teachers::TeacherKind::Local, 6, 1, 4, 2)
                .unwrap(),
            crate::teachers::SyntheticTeacher::new(crate::teachers::TeacherKind::Mixing, 6, 2, 4, 2)
                .unwrap(),
        ])
        .unwrap();
        let mut drng = substream(5, "data");
        let images = (0..2)
            .map(|_| Image::new(8, 8, 2, uniform_vec(&mut drng, 128, -1.0, 1.0)).unwrap())
            .collect();
        (store, model, bank, images)
    }

    #[test]
    fn batch_loss_combines_components_exactly() {
        let (store, model, bank, images) = tiny_setup();
        let weights = DistillWeights {
            alpha: vec![0.5, 0.5],
            beta: 0.9,
            gamma: 0.0005,
            delta: 1.0,
        };
        let sess = Session::new(&store);
        let mut ctx = ForwardCtx::eval();
        let out =
            pretrain_batch_loss(&model, &sess, &images, &bank, &weights, &mut ctx).unwrap();
        let want = out.distill.item() + 0.0005 * out.mi.item();
        assert!((out.loss.item() - want).abs() < 1e-12);
        assert!(out.mi.item() <= 1e-12);
        assert!(out.mi.item() >= -2.0 * 2.0f64.ln() - 1e-12);

        // gamma = 0 collapses to the distillation term alone.
        let w0 = DistillWeights {
            gamma: 0.0,
            ..weights
        };
        let sess2 = Session::new(&store);
        let mut ctx2 = ForwardCtx::eval();
        let out2 =
            pretrain_batch_loss(&model, &sess2, &images, &bank, &w0, &mut ctx2).unwrap();
        assert!((out2.loss.item() - out2.distill.item()).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_matches_plain_recomputation() {
        // Recompute the distillation term from the projected features and
        // teacher targets with raw f64 arithmetic.
        let (store, model, bank, images) = tiny_setup();
        let weights = DistillWeights::uniform(2);
        let sess = Session::new(&store);
        let mut ctx = ForwardCtx::eval();
        let out =
            pretrain_batch_loss(&model, &sess, &images, &bank, &weights, &mut ctx).unwrap();

        let mut want = 0.0;
        for image in &images {
            let sess2 = Session::new(&store);
            let mut ctx2 = ForwardCtx::eval();
            let z = model.forward_base(&sess2, image).unwrap();
            for i in 0..2 {
                let (y, _) = model
                    .forward_experts(&sess2, &z, RoutingStrategy::TeacherSpecific(i), &mut ctx2)
                    .unwrap();
                let proj = model.project_to_teacher(&sess2, &y, i).unwrap().value();
                let tgt = bank.features(i, image).unwrap();
                let t = 4;
                let d = 6;
                let mut cos_sum = 0.0;
                for ti in 0..t {
                    let a = &proj[ti * d..(ti + 1) * d];
                    let b = &tgt[ti * d..(ti + 1) * d];
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    cos_sum += 1.0 - dot / (na * nb);
                }
                let lcos = cos_sum / t as f64;
                let mut sl1_sum = 0.0;
                for (a, b) in proj.iter().zip(&tgt) {
                    let diff = (a - b).abs();
                    sl1_sum += if diff < 1.0 { 0.5 * diff * diff } else { diff - 0.5 };
                }
                let lsl1 = sl1_sum / (t * d) as f64;
                want += 0.5 * (0.9 * lcos + 0.1 * lsl1);
            }
        }
        want /= images.len() as f64;
        assert!(
            (out.distill.item() - want).abs() < 1e-10,
            "{} vs {want}",
            out.distill.item()
        );
    }

    #[test]
    fn permuting_rows_of_both_operands_leaves_losses_unchanged() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let mut rng = substream(8, "data");
        let a_data = uniform_vec::<f64>(&mut rng, 5 * 3, -1.0, 1.0);
        let b_data = uniform_vec::<f64>(&mut rng, 5 * 3, -1.0, 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |v: &[f64]| -> Vec<f64> {
            perm.iter().flat_map(|&r| v[r * 3..(r + 1) * 3].to_vec()).collect()
        };
        let a = sess.constant(a_data.clone(), &[5, 3]).unwrap();
        let b = sess.constant(b_data.clone(), &[5, 3]).unwrap();
        let ap = sess.constant(permute(&a_data), &[5, 3]).unwrap();
        let bp = sess.constant(permute(&b_data), &[5, 3]).unwrap();
        let c1 = cosine_distance(&a, &b).unwrap().item();
        let c2 = cosine_distance(&ap, &bp).unwrap().item();
        assert!((c1 - c2).abs() < 1e-12);
        let s1 = a.smooth_l1(&b, 1.0).unwrap().item();
        let s2 = ap.smooth_l1(&bp, 1.0).unwrap().item();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn mi_pressure_reaches_gate_parameters() {
        let (store, model, bank, images) = tiny_setup();
        let weights = DistillWeights {
            alpha: vec![0.5, 0.5],
            beta: 0.9,
            gamma: 0.1,
            delta: 1.0,
        };
        let sess = Session::new(&store);
        let mut ctx = ForwardCtx::eval();
        let out =
            pretrain_batch_loss(&model, &sess, &images, &bank, &weights, &mut ctx).unwrap();
        sess.backward(&out.loss).unwrap();
        let grads = sess.gradients();
        let gate_grad_norm: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with("ts_gate."))
            .flat_map(|(_, g)| g.iter().map(|v| v * v))
            .sum();
        assert!(gate_grad_norm > 0.0);
    }
}
