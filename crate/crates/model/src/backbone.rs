//! The student model: patch embedder, a stack of plain transformer blocks
//! (the shared base), then a stack of expert blocks whose feed-forward
//! sublayer is a routed mixture over the expert library, and per-teacher
//! affine projection heads.
//!
//! Blocks are pre-norm and there is no class token; every analysis here is
//! patch-level.

use ver_core::rng::{normal_vec, SeedRng};
use ver_core::{ParamStore, Session, Tensor};

use crate::error::{config_err, Result};
use crate::expert::TwoLayerMlp;
use crate::gate::NoisyGate;
use crate::moe::MoeLayer;
use crate::routing::{sample_categorical_st, GumbelChoice, RoutingStrategy, TeacherChoiceRouter};

/// Channel-last raster image, index `(y * width + x) * channels + c`.
#[derive(Debug, Clone)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return config_err(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }
}

/// Flattens an image into non-overlapping patch rows. Patches scan the
/// grid row-major; within a patch, pixels scan row-major with channels
/// fastest. Returns (data, token_count, patch_dim).
pub fn extract_patches(img: &Image, patch: usize) -> Result<(Vec<f64>, usize, usize)> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return config_err(format!(
            "patch size {patch} must evenly divide image {}x{}",
            img.height, img.width
        ));
    }
    let gy = img.height / patch;
    let gx = img.width / patch;
    let t = gy * gx;
    let pdim = patch * patch * img.channels;
    let mut out = Vec::with_capacity(t * pdim);
    for py in 0..gy {
        for px in 0..gx {
            for iy in 0..patch {
                let y = py * patch + iy;
                for ix in 0..patch {
                    let x = px * patch + ix;
                    let base = (y * img.width + x) * img.channels;
                    out.extend_from_slice(&img.data[base..base + img.channels]);
                }
            }
        }
    }
    Ok((out, t, pdim))
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub patch: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub plain_blocks: usize,
    pub expert_blocks: usize,
    pub num_experts: usize,
    pub active_k: usize,
    /// Hidden width of the per-teacher gates.
    pub gate_hidden: usize,
    /// Hidden width of the trainable per-token gate added for adaptation.
    /// Kept tiny so that router stays well under the parameter budget.
    pub per_gate_hidden: usize,
    /// Hidden width of the teacher-choice router MLP.
    pub router_hidden: usize,
    /// Output dim of each teacher's projection head.
    pub teacher_dims: Vec<usize>,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Renormalize kept gate weights after the top-K cut (off by default;
    /// the kept weights are then raw softmax values).
    pub renormalize_gates: bool,
    /// Max fraction of all parameters the trainable per-token gates may
    /// occupy; attachment fails beyond it.
    pub per_gate_budget: f64,
}

impl ModelConfig {
    /// The reference configuration used throughout the experiments.
    pub fn reference() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            patch: 8,
            token_dim: 32,
            num_heads: 2,
            mlp_ratio: 4,
            plain_blocks: 4,
            expert_blocks: 3,
            num_experts: 6,
            active_k: 2,
            gate_hidden: 32,
            per_gate_hidden: 4,
            router_hidden: 32,
            teacher_dims: vec![32, 32, 32],
            dropout: 0.1,
            init_std: 0.02,
            ln_eps: 1e-5,
            renormalize_gates: false,
            per_gate_budget: 0.004,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.image_channels
    }

    pub fn num_teachers(&self) -> usize {
        self.teacher_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return config_err("patch size must evenly divide both image extents");
        }
        if self.token_dim == 0 || self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return config_err(format!(
                "token dim {} must be divisible by {} heads",
                self.token_dim, self.num_heads
            ));
        }
        if self.expert_blocks == 0 {
            return config_err("need at least one expert block");
        }
        if self.num_experts == 0 {
            return config_err("expert library must not be empty");
        }
        if self.active_k == 0 || self.active_k > self.num_experts {
            return config_err(format!(
                "active expert count {} outside 1..={}",
                self.active_k, self.num_experts
            ));
        }
        if self.teacher_dims.is_empty() {
            return config_err("need at least one teacher");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config_err("dropout must lie in [0, 1)");
        }
        if self.mlp_ratio == 0 || self.init_std <= 0.0 || self.ln_eps <= 0.0 {
            return config_err("mlp_ratio, init_std, ln_eps must be positive");
        }
        Ok(())
    }
}

/// Learned gain/bias pair for layer normalization.
#[derive(Debug, Clone)]
struct LnParams {
    gain: String,
    bias: String,
    eps: f64,
}

impl LnParams {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        store.insert(&gain, vec![dim], vec![1.0; dim])?;
        store.insert(&bias, vec![dim], vec![0.0; dim])?;
        Ok(Self { gain, bias, eps })
    }

    fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let g = sess.param(&self.gain)?;
        let b = sess.param(&self.bias)?;
        Ok(x.layer_norm(&g, &b, self.eps)?)
    }
}

/// Multi-head self-attention over the token sequence.
#[derive(Debug, Clone)]
pub struct Attention {
    pub prefix: String,
    pub token_dim: usize,
    pub num_heads: usize,
}

impl Attention {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        token_dim: usize,
        num_heads: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let a = Self {
            prefix: prefix.to_string(),
            token_dim,
            num_heads,
        };
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{prefix}.{w}"),
                vec![token_dim, token_dim],
                normal_vec(rng, token_dim * token_dim, 0.0, std),
            )?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(&format!("{prefix}.{b}"), vec![token_dim], vec![0.0; token_dim])?;
        }
        Ok(a)
    }

    pub fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let proj = |w: &str, b: &str| -> Result<Tensor> {
            let wt = sess.param(&format!("{}.{w}", self.prefix))?;
            let bt = sess.param(&format!("{}.{b}", self.prefix))?;
            Ok(x.matmul(&wt)?.add(&bt)?)
        };
        let q = proj("wq", "bq")?;
        let k = proj("wk", "bk")?;
        let v = proj("wv", "bv")?;

        let dh = self.token_dim / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale, 0.0);
            let attn = scores.softmax(1)?;
            heads.push(attn.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let merged = sess.tape().concat_cols(&refs)?;
        let wo = sess.param(&format!("{}.wo", self.prefix))?;
        let bo = sess.param(&format!("{}.bo", self.prefix))?;
        Ok(merged.matmul(&wo)?.add(&bo)?)
    }
}

/// Plain pre-norm transformer block: attention and MLP sublayers, each with
/// a residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LnParams,
    ln2: LnParams,
    attn: Attention,
    ffn: TwoLayerMlp,
}

impl Block {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            ln1: LnParams::init(store, &format!("{prefix}.ln1"), cfg.token_dim, cfg.ln_eps)?,
            ln2: LnParams::init(store, &format!("{prefix}.ln2"), cfg.token_dim, cfg.ln_eps)?,
            attn: Attention::init(
                store,
                &format!("{prefix}.attn"),
                cfg.token_dim,
                cfg.num_heads,
                cfg.init_std,
                rng,
            )?,
            ffn: TwoLayerMlp::init(
                store,
                &format!("{prefix}.ffn"),
                cfg.token_dim,
                cfg.token_dim * cfg.mlp_ratio,
                cfg.init_std,
                rng,
            )?,
        })
    }

    fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let h = x.add(&self.attn.forward(sess, &self.ln1.forward(sess, x)?)?)?;
        Ok(h.add(&self.ffn.forward(sess, &self.ln2.forward(sess, &h)?)?)?)
    }
}

/// Expert block: the MLP sublayer is replaced by a routed expert mixture.
#[derive(Debug, Clone)]
pub struct ExpertBlock {
    ln1: LnParams,
    ln2: LnParams,
    attn: Attention,
    pub moe: MoeLayer,
}

impl ExpertBlock {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self {
            ln1: LnParams::init(store, &format!("{prefix}.ln1"), cfg.token_dim, cfg.ln_eps)?,
            ln2: LnParams::init(store, &format!("{prefix}.ln2"), cfg.token_dim, cfg.ln_eps)?,
            attn: Attention::init(
                store,
                &format!("{prefix}.attn"),
                cfg.token_dim,
                cfg.num_heads,
                cfg.init_std,
                rng,
            )?,
            moe: MoeLayer::init(
                store,
                prefix,
                cfg.token_dim,
                cfg.token_dim * cfg.mlp_ratio,
                cfg.num_experts,
                cfg.init_std,
                rng,
            )?,
        })
    }
}

/// Single affine map from the expert-stage output to one teacher's feature
/// space.
#[derive(Debug, Clone)]
pub struct AffineHead {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        store.insert(
            &format!("{prefix}.w"),
            vec![in_dim, out_dim],
            normal_vec(rng, in_dim * out_dim, 0.0, std),
        )?;
        store.insert(&format!("{prefix}.b"), vec![out_dim], vec![0.0; out_dim])?;
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
        })
    }

    /// Overwrites the map with the identity (square heads only); test hook.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.in_dim != self.out_dim {
            return config_err("identity init needs a square head");
        }
        let w = store.get_mut(&format!("{}.w", self.prefix))?;
        for (i, v) in w.data.iter_mut().enumerate() {
            *v = if i / self.out_dim == i % self.out_dim { 1.0 } else { 0.0 };
        }
        let b = store.get_mut(&format!("{}.b", self.prefix))?;
        b.data.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    pub fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let w = sess.param(&format!("{}.w", self.prefix))?;
        let b = sess.param(&format!("{}.b", self.prefix))?;
        Ok(x.matmul(&w)?.add(&b)?)
    }
}

/// Per-pass mutable context: mode flags plus the noise sources each
/// stochastic component draws from. Eval passes need no rngs.
pub struct ForwardCtx<'r> {
    pub train: bool,
    /// Overrides the configured active-expert count (used by the taper
    /// schedule during adaptation).
    pub k_override: Option<usize>,
    pub gumbel_tau: f64,
    pub gate_rng: Option<&'r mut SeedRng>,
    pub gumbel_rng: Option<&'r mut SeedRng>,
    pub dropout_rng: Option<&'r mut SeedRng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            k_override: None,
            gumbel_tau: 1.0,
            gate_rng: None,
            gumbel_rng: None,
            dropout_rng: None,
        }
    }
}

/// What the expert stage did on one frame, per layer.
pub struct LayerTrace {
    pub layer: usize,
    /// Which teacher's gate routed this layer (None for the per-token gate).
    pub teacher: Option<usize>,
    pub k_used: usize,
    /// Hard per-expert evaluation counts.
    pub eval_counts: Vec<usize>,
    /// `[T, L]` differentiable gate probabilities (pre top-K).
    pub soft_probs: Tensor,
}

pub struct VelTrace {
    pub layers: Vec<LayerTrace>,
    /// The frame-level teacher choice, when the frame router ran.
    pub frame_choice: Option<usize>,
}

impl VelTrace {
    /// Mean soft probability per expert at `layer`, over tokens.
    pub fn mean_probs(&self, layer: usize) -> Vec<f64> {
        let tr = &self.layers[layer];
        let v = tr.soft_probs.value();
        let t = tr.soft_probs.shape()[0];
        let l = tr.soft_probs.shape()[1];
        let mut m = vec![0.0; l];
        for row in v.chunks(l) {
            for (j, p) in row.iter().enumerate() {
                m[j] += p;
            }
        }
        m.iter_mut().for_each(|x| *x /= t as f64);
        m
    }
}

#[derive(Clone)]
pub struct VerModel {
    pub cfg: ModelConfig,
    pub blocks: Vec<Block>,
    pub expert_blocks: Vec<ExpertBlock>,
    /// `teacher_gates[layer][teacher]`.
    pub teacher_gates: Vec<Vec<NoisyGate>>,
    pub heads: Vec<AffineHead>,
    pub frame_router: Option<TeacherChoiceRouter>,
    pub layer_routers: Option<Vec<TeacherChoiceRouter>>,
    pub patch_gates: Option<Vec<NoisyGate>>,
}

impl VerModel {
    /// Builds embedder, base blocks, expert blocks, per-teacher gates and
    /// heads. Robot-phase routers are attached separately.
    pub fn init(store: &mut ParamStore, cfg: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.tokens();
        let pdim = cfg.patch_dim();
        store.insert(
            "embed.w",
            vec![pdim, cfg.token_dim],
            normal_vec(rng, pdim * cfg.token_dim, 0.0, cfg.init_std),
        )?;
        store.insert("embed.b", vec![cfg.token_dim], vec![0.0; cfg.token_dim])?;
        store.insert(
            "embed.pos",
            vec![t, cfg.token_dim],
            normal_vec(rng, t * cfg.token_dim, 0.0, cfg.init_std),
        )?;

        let mut blocks = Vec::with_capacity(cfg.plain_blocks);
        for b in 0..cfg.plain_blocks {
            blocks.push(Block::init(store, &format!("bvt.{b}"), &cfg, rng)?);
        }
        let mut expert_blocks = Vec::with_capacity(cfg.expert_blocks);
        for n in 0..cfg.expert_blocks {
            expert_blocks.push(ExpertBlock::init(store, &format!("vel.{n}"), &cfg, rng)?);
        }
        let mut teacher_gates = Vec::with_capacity(cfg.expert_blocks);
        for n in 0..cfg.expert_blocks {
            let mut row = Vec::with_capacity(cfg.num_teachers());
            for i in 0..cfg.num_teachers() {
                row.push(NoisyGate::init(
                    store,
                    &format!("ts_gate.{n}.{i}"),
                    cfg.token_dim,
                    cfg.gate_hidden,
                    cfg.num_experts,
                    cfg.init_std,
                    rng,
                )?);
            }
            teacher_gates.push(row);
        }
        let mut heads = Vec::with_capacity(cfg.num_teachers());
        for (i, d) in cfg.teacher_dims.iter().enumerate() {
            heads.push(AffineHead::init(
                store,
                &format!("head.{i}"),
                cfg.token_dim,
                *d,
                cfg.init_std,
                rng,
            )?);
        }
        Ok(Self {
            cfg,
            blocks,
            expert_blocks,
            teacher_gates,
            heads,
            frame_router: None,
            layer_routers: None,
            patch_gates: None,
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.cfg.num_teachers()
    }

    pub fn num_experts(&self) -> usize {
        self.expert_blocks[0].moe.num_experts()
    }

    /// Image to unified tokens: patch projection + positions, then the
    /// plain blocks. Carries no teacher-specific conditioning.
    pub fn forward_base(&self, sess: &Session<'_>, image: &Image) -> Result<Tensor> {
        if image.height != self.cfg.image_height
            || image.width != self.cfg.image_width
            || image.channels != self.cfg.image_channels
        {
            return config_err(format!(
                "image {}x{}x{} does not match model {}x{}x{}",
                image.height,
                image.width,
                image.channels,
                self.cfg.image_height,
                self.cfg.image_width,
                self.cfg.image_channels
            ));
        }
        let (pdata, t, pdim) = extract_patches(image, self.cfg.patch)?;
        let patches = sess.constant(pdata, &[t, pdim])?;
        let w = sess.param("embed.w")?;
        let b = sess.param("embed.b")?;
        let pos = sess.param("embed.pos")?;
        let mut x = patches.matmul(&w)?.add(&b)?.add(&pos)?;
        for block in &self.blocks {
            x = block.forward(sess, &x)?;
        }
        Ok(x)
    }

    /// Runs the expert blocks over `z` under a routing strategy, recording
    /// per-layer selection statistics.
    pub fn forward_experts(
        &self,
        sess: &Session<'_>,
        z: &Tensor,
        strategy: RoutingStrategy,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor, VelTrace)> {
        let num_teachers = self.num_teachers();
        match strategy {
            RoutingStrategy::TeacherSpecific(i) if i >= num_teachers => {
                return config_err(format!(
                    "teacher index {i} out of range for {num_teachers} teachers"
                ));
            }
            RoutingStrategy::FrameRouted if self.frame_router.is_none() => {
                return config_err("frame router not attached");
            }
            RoutingStrategy::LayerRouted if self.layer_routers.is_none() => {
                return config_err("layer routers not attached");
            }
            RoutingStrategy::PatchRouted if self.patch_gates.is_none() => {
                return config_err("patch gates not attached");
            }
            _ => {}
        }

        // Frame-level choice is drawn once and shared by every layer.
        let frame_choice: Option<GumbelChoice> = match strategy {
            RoutingStrategy::FrameRouted => {
                let router = self.frame_router.as_ref().unwrap();
                let pi = router.forward(sess, z, ctx.train, ctx.dropout_rng.as_deref_mut())?;
                Some(sample_categorical_st(
                    sess,
                    &pi,
                    ctx.gumbel_tau,
                    ctx.train,
                    ctx.gumbel_rng.as_deref_mut(),
                )?)
            }
            _ => None,
        };

        let mut x = z.clone();
        let mut layers = Vec::with_capacity(self.expert_blocks.len());
        for (n, block) in self.expert_blocks.iter().enumerate() {
            let layer_input = x.clone();
            let h = x.add(&block.attn.forward(sess, &block.ln1.forward(sess, &x)?)?)?;
            let normed = block.ln2.forward(sess, &h)?;

            let (gate_out, teacher, st_weights, k) = match strategy {
                RoutingStrategy::TeacherSpecific(i) => {
                    let g = &self.teacher_gates[n][i];
                    let out = g.forward(sess, &normed, ctx.train, ctx.gate_rng.as_deref_mut())?;
                    (out, Some(i), None, self.cfg.active_k)
                }
                RoutingStrategy::FrameRouted => {
                    let choice = frame_choice.as_ref().unwrap();
                    let g = &self.teacher_gates[n][choice.index];
                    let out = g.forward(sess, &normed, ctx.train, ctx.gate_rng.as_deref_mut())?;
                    let st = choice.soft.is_some().then(|| choice.weights.clone());
                    (out, Some(choice.index), st, self.cfg.active_k)
                }
                RoutingStrategy::LayerRouted => {
                    let router = &self.layer_routers.as_ref().unwrap()[n];
                    let pi =
                        router.forward(sess, &layer_input, ctx.train, ctx.dropout_rng.as_deref_mut())?;
                    let choice = sample_categorical_st(
                        sess,
                        &pi,
                        ctx.gumbel_tau,
                        ctx.train,
                        ctx.gumbel_rng.as_deref_mut(),
                    )?;
                    let g = &self.teacher_gates[n][choice.index];
                    let out = g.forward(sess, &normed, ctx.train, ctx.gate_rng.as_deref_mut())?;
                    let st = choice.soft.is_some().then(|| choice.weights.clone());
                    (out, Some(choice.index), st, self.cfg.active_k)
                }
                RoutingStrategy::PatchRouted => {
                    let g = &self.patch_gates.as_ref().unwrap()[n];
                    let out = g.forward(sess, &normed, ctx.train, ctx.gate_rng.as_deref_mut())?;
                    let k = ctx.k_override.unwrap_or(self.cfg.active_k);
                    (out, None, None, k)
                }
            };

            let (mut moe_out, info) = block.moe.forward(
                sess,
                &normed,
                &gate_out.probs,
                k,
                self.cfg.renormalize_gates,
            )?;
            // Straight-through teacher weight: multiplying by the (forward
            // value 1.0) selected one-hot entry routes gradient back into
            // the choice logits without changing the forward pass.
            if let (Some(w), Some(i)) = (&st_weights, teacher) {
                let wi = w.reshape(&[1, w.numel()])?.slice_cols(i, 1)?;
                moe_out = moe_out.mul(&wi)?;
            }
            x = h.add(&moe_out)?;

            layers.push(LayerTrace {
                layer: n,
                teacher,
                k_used: k.min(block.moe.num_experts()),
                eval_counts: info.eval_counts,
                soft_probs: gate_out.probs,
            });
        }

        Ok((
            x,
            VelTrace {
                layers,
                frame_choice: frame_choice.map(|c| c.index),
            },
        ))
    }

    /// Maps expert-stage tokens into teacher `i`'s feature space.
    pub fn project_to_teacher(&self, sess: &Session<'_>, y: &Tensor, i: usize) -> Result<Tensor> {
        if i >= self.heads.len() {
            return config_err(format!("teacher index {i} out of range"));
        }
        self.heads[i].forward(sess, y)
    }

    /// Attaches the frame-level teacher-choice router (fresh trainable
    /// parameters under "frame_router.").
    pub fn attach_frame_router(&mut self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        if self.frame_router.is_some() {
            return config_err("frame router already attached");
        }
        self.frame_router = Some(TeacherChoiceRouter::init(
            store,
            "frame_router",
            self.cfg.token_dim,
            self.cfg.router_hidden,
            self.num_teachers(),
            self.cfg.dropout,
            self.cfg.init_std,
            rng,
        )?);
        Ok(())
    }

    /// Attaches one teacher-choice router per expert block, under
    /// "layer_router.{n}.".
    pub fn attach_layer_routers(&mut self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        if self.layer_routers.is_some() {
            return config_err("layer routers already attached");
        }
        let mut routers = Vec::with_capacity(self.expert_blocks.len());
        for n in 0..self.expert_blocks.len() {
            routers.push(TeacherChoiceRouter::init(
                store,
                &format!("layer_router.{n}"),
                self.cfg.token_dim,
                self.cfg.router_hidden,
                self.num_teachers(),
                self.cfg.dropout,
                self.cfg.init_std,
                rng,
            )?);
        }
        self.layer_routers = Some(routers);
        Ok(())
    }

    /// Attaches the trainable per-token gates ("per_gate.{n}."), one per
    /// expert block, and enforces the parameter budget: the new gates must
    /// stay under `cfg.per_gate_budget` as a fraction of all parameters
    /// after attachment.
    pub fn attach_patch_gates(&mut self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        if self.patch_gates.is_some() {
            return config_err("patch gates already attached");
        }
        let l = self.num_experts();
        let per_gate = self.cfg.token_dim * self.cfg.per_gate_hidden
            + self.cfg.per_gate_hidden
            + 2 * (self.cfg.per_gate_hidden * l + l);
        let added = per_gate * self.expert_blocks.len();
        let total = store.total_elements() + added;
        let share = added as f64 / total as f64;
        if share >= self.cfg.per_gate_budget {
            return config_err(format!(
                "patch gates would be {:.3}% of {} parameters; budget is < {:.3}%",
                share * 100.0,
                total,
                self.cfg.per_gate_budget * 100.0
            ));
        }
        let mut gates = Vec::with_capacity(self.expert_blocks.len());
        for n in 0..self.expert_blocks.len() {
            gates.push(NoisyGate::init(
                store,
                &format!("per_gate.{n}"),
                self.cfg.token_dim,
                self.cfg.per_gate_hidden,
                l,
                self.cfg.init_std,
                rng,
            )?);
        }
        self.patch_gates = Some(gates);
        Ok(())
    }

    /// Fraction of all stored parameters held by the per-token gates.
    pub fn patch_gate_share(&self, store: &ParamStore) -> f64 {
        store.elements_with_prefix("per_gate.") as f64 / store.total_elements() as f64
    }

    /// Freezes every existing parameter and silences gate noise on the
    /// frozen per-teacher gates. Adaptation then unfreezes only the pieces
    /// it trains (router, policy head, fresh experts).
    pub fn freeze_for_adaptation(&mut self, store: &mut ParamStore) {
        store.freeze_all();
        for row in &mut self.teacher_gates {
            for gate in row {
                gate.noise_enabled = false;
            }
        }
    }

    /// Appends `count` fresh trainable experts to every expert block and
    /// widens all gates. Frozen per-teacher gates give the newcomers a
    /// large negative score bias, so frozen-route outputs are unchanged;
    /// trainable per-token gates score them neutrally. Returns the new
    /// expert indices.
    pub fn add_experts(
        &mut self,
        store: &mut ParamStore,
        count: usize,
        rng: &mut SeedRng,
    ) -> Result<Vec<usize>> {
        let mut new_indices = Vec::new();
        for (n, block) in self.expert_blocks.iter_mut().enumerate() {
            let mut idx = Vec::with_capacity(count);
            for _ in 0..count {
                idx.push(block.moe.push_expert(store, self.cfg.init_std, rng)?);
            }
            for gate in &mut self.teacher_gates[n] {
                gate.extend_experts(store, count, self.cfg.init_std, -1e9, rng)?;
            }
            if let Some(gates) = self.patch_gates.as_mut() {
                gates[n].extend_experts(store, count, self.cfg.init_std, 0.0, rng)?;
            }
            new_indices = idx;
        }
        self.cfg.num_experts += count;
        Ok(new_indices)
    }

    /// Prefixes of all fresh (scratch-origin) experts, for unfreezing.
    pub fn scratch_expert_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for block in &self.expert_blocks {
            for e in &block.moe.experts {
                if e.origin == crate::expert::ExpertOrigin::Scratch {
                    out.push(format!("{}.", e.prefix()));
                }
            }
        }
        out
    }

    /// Parameters evaluated per frame at a given active-expert count:
    /// everything outside the expert library plus `k` experts per expert
    /// block. Used by the top-K ablation report.
    pub fn active_param_count(&self, store: &ParamStore, k: usize) -> usize {
        let mut expert_elems = 0;
        for block in &self.expert_blocks {
            for e in &block.moe.experts {
                expert_elems += store.elements_with_prefix(&format!("{}.", e.prefix()));
            }
        }
        let per_expert = self.expert_blocks[0].moe.experts[0].param_count();
        let kk = k.min(self.num_experts());
        store.total_elements() - expert_elems + kk * per_expert * self.expert_blocks.len()
    }
}
