//! Experiment configuration: a TOML file with sections for the model, the
//! teacher bank, the distillation loss, both training phases, and the
//! analysis pass. Every key has a default, so an empty file (or no file)
//! reproduces the reference desk setup. Unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ver_model::{DistillWeights, ModelConfig, RoutingStrategy, TaskSpec};

use crate::error::{config_err, usage_err, HarnessError, Result};

fn d_image() -> usize {
    32
}
fn d_channels() -> usize {
    3
}
fn d_patch() -> usize {
    8
}
fn d_token_dim() -> usize {
    32
}
fn d_heads() -> usize {
    2
}
fn d_mlp_ratio() -> usize {
    4
}
fn d_plain_blocks() -> usize {
    4
}
fn d_expert_blocks() -> usize {
    3
}
fn d_num_experts() -> usize {
    6
}
fn d_active_k() -> usize {
    2
}
fn d_gate_hidden() -> usize {
    32
}
fn d_per_gate_hidden() -> usize {
    4
}
fn d_router_hidden() -> usize {
    32
}
fn d_dropout() -> f64 {
    0.1
}
fn d_init_std() -> f64 {
    0.02
}
fn d_ln_eps() -> f64 {
    1e-5
}
fn d_per_gate_budget() -> f64 {
    0.004
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_image")]
    pub image_height: usize,
    #[serde(default = "d_image")]
    pub image_width: usize,
    #[serde(default = "d_channels")]
    pub image_channels: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_token_dim")]
    pub token_dim: usize,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_plain_blocks")]
    pub plain_blocks: usize,
    #[serde(default = "d_expert_blocks")]
    pub expert_blocks: usize,
    #[serde(default = "d_num_experts")]
    pub num_experts: usize,
    #[serde(default = "d_active_k")]
    pub active_k: usize,
    #[serde(default = "d_gate_hidden")]
    pub gate_hidden: usize,
    #[serde(default = "d_per_gate_hidden")]
    pub per_gate_hidden: usize,
    #[serde(default = "d_router_hidden")]
    pub router_hidden: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
    #[serde(default = "d_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub renormalize_gates: bool,
    #[serde(default = "d_per_gate_budget")]
    pub per_gate_budget: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new()).try_into().unwrap()
    }
}

fn d_teacher_dims() -> Vec<usize> {
    vec![32, 32, 32]
}
fn d_teacher_seed() -> u64 {
    17
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    #[serde(default = "d_teacher_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "d_teacher_seed")]
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            dims: d_teacher_dims(),
            seed: d_teacher_seed(),
        }
    }
}

fn d_beta() -> f64 {
    0.9
}
fn d_gamma() -> f64 {
    0.0005
}
fn d_delta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    /// Per-teacher weights; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: None,
            beta: d_beta(),
            gamma: d_gamma(),
            delta: d_delta(),
        }
    }
}

fn d_pretrain_steps() -> usize {
    2000
}
fn d_batch() -> usize {
    8
}
fn d_peak_lr() -> f64 {
    0.002
}
fn d_warmup_frac() -> f64 {
    0.10
}
fn d_constant_frac() -> f64 {
    0.40
}
fn d_pretrain_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "d_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "d_constant_frac")]
    pub constant_frac: f64,
    #[serde(default = "d_pretrain_seed")]
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new()).try_into().unwrap()
    }
}

fn d_task_seed() -> u64 {
    7
}
fn d_relevant_teacher() -> usize {
    2
}
fn d_relevant_patches() -> Vec<usize> {
    vec![5, 6, 9, 10]
}
fn d_latent_dim() -> usize {
    4
}
fn d_target_dim() -> usize {
    4
}
fn d_noise_std() -> f64 {
    1.0
}
fn d_success_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "d_task_seed")]
    pub seed: u64,
    #[serde(default = "d_relevant_teacher")]
    pub relevant_teacher: usize,
    #[serde(default = "d_relevant_patches")]
    pub relevant_patches: Vec<usize>,
    #[serde(default = "d_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "d_target_dim")]
    pub target_dim: usize,
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    #[serde(default = "d_success_threshold")]
    pub success_threshold: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new()).try_into().unwrap()
    }
}

fn d_strategy() -> String {
    "patch".into()
}
fn d_finetune_steps() -> usize {
    300
}
fn d_finetune_lr() -> f64 {
    1e-3
}
fn d_tau() -> f64 {
    1.0
}
fn d_cta_k_min() -> usize {
    1
}
fn d_cta_horizon_frac() -> f64 {
    0.5
}
fn d_policy_hidden() -> usize {
    32
}
fn d_eval_episodes() -> usize {
    200
}
fn d_finetune_seed() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// "teacher:i", "frame", "layer", or "patch".
    #[serde(default = "d_strategy")]
    pub strategy: String,
    #[serde(default = "d_finetune_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_finetune_lr")]
    pub lr: f64,
    #[serde(default = "d_tau")]
    pub gumbel_tau: f64,
    #[serde(default)]
    pub scratch_experts: usize,
    /// Taper the active-expert count down over the first part of training
    /// (patch strategy only).
    #[serde(default)]
    pub cta: bool,
    #[serde(default = "d_cta_k_min")]
    pub cta_k_min: usize,
    #[serde(default = "d_cta_horizon_frac")]
    pub cta_horizon_frac: f64,
    #[serde(default = "d_policy_hidden")]
    pub policy_hidden: usize,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    /// Use the warmup/constant/cosine schedule instead of a constant lr.
    #[serde(default)]
    pub use_schedule: bool,
    #[serde(default = "d_finetune_seed")]
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new()).try_into().unwrap()
    }
}

fn d_analysis_dataset() -> usize {
    400
}
fn d_fraction() -> f64 {
    0.3
}
fn d_pca_dims() -> usize {
    5
}
fn d_neighbors() -> usize {
    3
}
fn d_analysis_seed() -> u64 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Task samples the analysis pool is drawn from.
    #[serde(default = "d_analysis_dataset")]
    pub dataset: usize,
    /// Fraction of the pool actually used for the estimate.
    #[serde(default = "d_fraction")]
    pub fraction: f64,
    #[serde(default = "d_pca_dims")]
    pub pca_dims: usize,
    #[serde(default = "d_neighbors")]
    pub neighbors: usize,
    #[serde(default = "d_analysis_seed")]
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        toml::Value::Table(toml::Table::new()).try_into().unwrap()
    }
}

fn d_ablate_seeds() -> usize {
    5
}
fn d_topk_values() -> Vec<usize> {
    vec![1, 2, 4, 6]
}
fn d_expert_mixes() -> Vec<[usize; 2]> {
    vec![[6, 0], [0, 2], [6, 1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Replicas per cell; replica r runs with seed finetune.seed + r.
    #[serde(default = "d_ablate_seeds")]
    pub seeds: usize,
    #[serde(default = "d_topk_values")]
    pub topk_values: Vec<usize>,
    /// (frozen kept, scratch added) pairs for the expert-mix sweep.
    #[serde(default = "d_expert_mixes")]
    pub expert_mixes: Vec<[usize; 2]>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: d_ablate_seeds(),
            topk_values: d_topk_values(),
            expert_mixes: d_expert_mixes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub teachers: TeacherSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

impl ExperimentConfig {
    /// Builds the config from an optional file plus `key.path=value`
    /// overrides, then validates it. With no file, overrides apply on top
    /// of the defaults.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    HarnessError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, sets)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.pretrain.seed = s;
            cfg.finetune.seed = s;
            cfg.analysis.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.teachers.dims.is_empty() {
            return config_err("teacher bank must not be empty");
        }
        self.strategy()?;
        self.distill_weights()?;
        if self.pretrain.steps == 0 || self.pretrain.batch == 0 {
            return config_err("pretrain steps and batch must be positive");
        }
        if self.pretrain.warmup_frac < 0.0
            || self.pretrain.constant_frac < 0.0
            || self.pretrain.warmup_frac + self.pretrain.constant_frac > 1.0
        {
            return config_err("schedule fractions must be non-negative and sum to at most 1");
        }
        if !(0.0..=1.0).contains(&self.finetune.cta_horizon_frac) {
            return config_err("cta_horizon_frac must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.analysis.fraction) {
            return config_err("analysis fraction must lie in [0, 1]");
        }
        if self.task.relevant_teacher >= self.teachers.dims.len() {
            return config_err(format!(
                "task teacher {} out of range for {} teachers",
                self.task.relevant_teacher,
                self.teachers.dims.len()
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_height: m.image_height,
            image_width: m.image_width,
            image_channels: m.image_channels,
            patch: m.patch,
            token_dim: m.token_dim,
            num_heads: m.num_heads,
            mlp_ratio: m.mlp_ratio,
            plain_blocks: m.plain_blocks,
            expert_blocks: m.expert_blocks,
            num_experts: m.num_experts,
            active_k: m.active_k,
            gate_hidden: m.gate_hidden,
            per_gate_hidden: m.per_gate_hidden,
            router_hidden: m.router_hidden,
            teacher_dims: self.teachers.dims.clone(),
            dropout: m.dropout,
            init_std: m.init_std,
            ln_eps: m.ln_eps,
            renormalize_gates: m.renormalize_gates,
            per_gate_budget: m.per_gate_budget,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        TaskSpec {
            seed: t.seed,
            relevant_teacher: t.relevant_teacher,
            relevant_patches: t.relevant_patches.clone(),
            latent_dim: t.latent_dim,
            target_dim: t.target_dim,
            noise_std: t.noise_std,
            success_threshold: t.success_threshold,
        }
    }

    pub fn distill_weights(&self) -> Result<DistillWeights> {
        let n = self.teachers.dims.len();
        let mut w = DistillWeights::uniform(n);
        if let Some(alpha) = &self.loss.alpha {
            if alpha.len() != n {
                return config_err(format!(
                    "alpha has {} entries for {n} teachers",
                    alpha.len()
                ));
            }
            w.alpha = alpha.clone();
        }
        w.beta = self.loss.beta;
        w.gamma = self.loss.gamma;
        w.delta = self.loss.delta;
        if !(0.0..=1.0).contains(&w.beta) || w.gamma < 0.0 || w.delta <= 0.0 {
            return config_err("loss weights out of range");
        }
        Ok(w)
    }

    pub fn strategy(&self) -> Result<RoutingStrategy> {
        let s = RoutingStrategy::from_str(&self.finetune.strategy)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let RoutingStrategy::TeacherSpecific(i) = s {
            if i >= self.teachers.dims.len() {
                return config_err(format!(
                    "strategy names teacher {i} but the bank has {}",
                    self.teachers.dims.len()
                ));
            }
        }
        Ok(s)
    }
}

/// Parses the right side of a `--set` assignment as a bare TOML value;
/// anything that does not parse is taken as a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value` assignments onto a raw TOML table. Missing
/// intermediate tables are created; a path through a non-table is an error.
pub fn apply_overrides(table: &mut toml::Table, sets: &[String]) -> Result<()> {
    for set in sets {
        let Some((path, raw)) = set.split_once('=') else {
            return usage_err(format!("--set needs key.path=value, got {set:?}"));
        };
        let segs: Vec<&str> = path.split('.').collect();
        if segs.iter().any(|s| s.is_empty()) {
            return usage_err(format!("--set has an empty path segment: {set:?}"));
        }
        let mut cur = &mut *table;
        for seg in &segs[..segs.len() - 1] {
            cur = cur
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| {
                    HarnessError::Usage(format!("--set path {path:?} crosses a non-table key"))
                })?;
        }
        cur.insert(segs[segs.len() - 1].to_string(), parse_value(raw));
    }
    Ok(())
}
