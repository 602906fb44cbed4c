//! Per-patch mutual information between features entering and leaving the
//! expert stage, measured across a sample of task images: each patch
//! position yields two feature clouds (before/after), both PCA-reduced,
//! then fed to the kNN MI estimator. Low MI at a patch means the expert
//! stage passed little of that patch's variation through.

use ver_core::{ParamStore, Session};
use ver_model::{ForwardCtx, RoutingStrategy, SyntheticTask, VerModel};

use crate::error::{contract_err, Result};
use crate::knn::knn_mutual_information;
use crate::pca::PcaProjector;

#[derive(Debug, Clone)]
pub struct PatchMiConfig {
    /// Samples drawn from the task before applying `fraction`.
    pub dataset: usize,
    /// Fraction of the dataset actually measured.
    pub fraction: f64,
    pub pca_dims: usize,
    pub neighbors: usize,
    pub seed: u64,
}

impl PatchMiConfig {
    pub fn new(dataset: usize, seed: u64) -> Self {
        Self {
            dataset,
            fraction: 0.3,
            pca_dims: 5,
            neighbors: 3,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiMap {
    pub rows: usize,
    pub cols: usize,
    /// Nats per patch position, row-major on the patch grid.
    pub values: Vec<f64>,
}

pub fn per_patch_mi_before_after(
    model: &VerModel,
    store: &ParamStore,
    task: &SyntheticTask,
    strategy: RoutingStrategy,
    cfg: &PatchMiConfig,
) -> Result<MiMap> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return contract_err("dataset fraction must lie in [0, 1]");
    }
    let n = ((cfg.dataset as f64) * cfg.fraction).ceil() as usize;
    if n < 2 * cfg.neighbors || n <= cfg.pca_dims {
        return contract_err(format!(
            "{n} samples cannot support k={} neighbors and {} pca dims",
            cfg.neighbors, cfg.pca_dims
        ));
    }
    let t = model.cfg.tokens();
    let m = model.cfg.token_dim;
    let rows = model.cfg.image_height / model.cfg.patch;
    let cols = model.cfg.image_width / model.cfg.patch;

    let mut data_rng = ver_core::rng::substream(cfg.seed, "analysis-data");
    let mut before = vec![Vec::with_capacity(n * m); t];
    let mut after = vec![Vec::with_capacity(n * m); t];
    for _ in 0..n {
        let sample = task.sample(&mut data_rng)?;
        let sess = Session::new(store);
        let z = model.forward_base(&sess, &sample.image)?;
        let mut ctx = ForwardCtx::eval();
        let (y, _) = model.forward_experts(&sess, &z, strategy, &mut ctx)?;
        let zv = z.value();
        let yv = y.value();
        for p in 0..t {
            before[p].extend_from_slice(&zv[p * m..(p + 1) * m]);
            after[p].extend_from_slice(&yv[p * m..(p + 1) * m]);
        }
    }

    let mut values = Vec::with_capacity(t);
    for p in 0..t {
        let pb = PcaProjector::fit(&before[p], n, m, cfg.pca_dims)?;
        let pa = PcaProjector::fit(&after[p], n, m, cfg.pca_dims)?;
        let zb = pb.apply(&before[p], n)?;
        let za = pa.apply(&after[p], n)?;
        let mi =
            knn_mutual_information(&zb, &za, n, cfg.pca_dims, cfg.pca_dims, cfg.neighbors)?;
        values.push(mi.value);
    }
    Ok(MiMap { rows, cols, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::substream;
    use ver_model::{ModelConfig, SyntheticTask, TaskSpec, TeacherBank};
    use ver_model::teachers::{SyntheticTeacher, TeacherKind};

    fn tiny() -> (ParamStore, VerModel, SyntheticTask) {
        let cfg = ModelConfig {
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
        };
        let mut store = ParamStore::new();
        let mut rng = substream(42, "init");
        let model = VerModel::init(&mut store, cfg, &mut rng).unwrap();
        let bank = TeacherBank::new(vec![
            SyntheticTeacher::new(TeacherKind::Local, 8, 5, 4, 2).unwrap(),
            SyntheticTeacher::new(TeacherKind::Mixing, 8, 6, 4, 2).unwrap(),
        ])
        .unwrap();
        let spec = TaskSpec {
            seed: 11,
            relevant_teacher: 1,
            relevant_patches: vec![1, 2],
            latent_dim: 2,
            target_dim: 3,
            noise_std: 1.0,
            success_threshold: 0.1,
        };
        let task = SyntheticTask::build(spec, &bank, 8, 8, 2).unwrap();
        (store, model, task)
    }

    #[test]
    fn untrained_model_yields_a_finite_deterministic_map() {
        let (store, model, task) = tiny();
        let cfg = PatchMiConfig {
            dataset: 120,
            fraction: 0.5,
            pca_dims: 3,
            neighbors: 3,
            seed: 8,
        };
        let run = || {
            per_patch_mi_before_after(
                &model,
                &store,
                &task,
                RoutingStrategy::TeacherSpecific(0),
                &cfg,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!((a.rows, a.cols), (2, 2));
        assert_eq!(a.values.len(), 4);
        assert!(a.values.iter().all(|v| v.is_finite()));
        let b = run();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn starving_the_estimator_is_a_contract_error() {
        let (store, model, task) = tiny();
        let cfg = PatchMiConfig {
            dataset: 10,
            fraction: 0.3,
            pca_dims: 3,
            neighbors: 3,
            seed: 8,
        };
        assert!(per_patch_mi_before_after(
            &model,
            &store,
            &task,
            RoutingStrategy::TeacherSpecific(0),
            &cfg
        )
        .is_err());
    }
}
