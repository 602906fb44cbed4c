//! Per-token noisy top-K gate.
//!
//! A shared two-layer trunk produces two heads per expert: a score and a
//! noise-scale logit. During training the score is perturbed by Gaussian
//! noise whose per-token, per-expert standard deviation is
//! `softplus(noise_logit)`; the perturbed scores pass through a softmax.
//! Evaluation drops the noise entirely.

use ver_core::rng::{normal_vec, SeedRng};
use ver_core::{ParamStore, Session, Tensor};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct NoisyGate {
    pub prefix: String,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    /// When false the gate is permanently noiseless, even in train mode.
    /// Frozen gates reused for routing after pretraining set this.
    pub noise_enabled: bool,
}

/// Forward products of one gating pass.
pub struct GateOutput {
    /// `[tokens, experts]` softmax of the (possibly noisy) scores.
    pub probs: Tensor,
    /// `[tokens, experts]` pre-softmax scores actually used (noise included).
    pub logits: Tensor,
    /// `[tokens, experts]` noise-free scores.
    pub clean_scores: Tensor,
    /// `softplus` of the noise head, present only when noise was applied.
    pub noise_std: Option<Tensor>,
}

impl NoisyGate {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        token_dim: usize,
        hidden_dim: usize,
        num_experts: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let g = Self {
            prefix: prefix.to_string(),
            token_dim,
            hidden_dim,
            num_experts,
            noise_enabled: true,
        };
        store.insert(
            &g.name("w1"),
            vec![token_dim, hidden_dim],
            normal_vec(rng, token_dim * hidden_dim, 0.0, std),
        )?;
        store.insert(&g.name("b1"), vec![hidden_dim], vec![0.0; hidden_dim])?;
        store.insert(
            &g.name("w_score"),
            vec![hidden_dim, num_experts],
            normal_vec(rng, hidden_dim * num_experts, 0.0, std),
        )?;
        store.insert(&g.name("b_score"), vec![num_experts], vec![0.0; num_experts])?;
        store.insert(
            &g.name("w_noise"),
            vec![hidden_dim, num_experts],
            normal_vec(rng, hidden_dim * num_experts, 0.0, std),
        )?;
        store.insert(&g.name("b_noise"), vec![num_experts], vec![0.0; num_experts])?;
        Ok(g)
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_names(&self) -> [String; 6] {
        [
            self.name("w1"),
            self.name("b1"),
            self.name("w_score"),
            self.name("b_score"),
            self.name("w_noise"),
            self.name("b_noise"),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.token_dim * self.hidden_dim
            + self.hidden_dim
            + 2 * (self.hidden_dim * self.num_experts + self.num_experts)
    }

    /// Gate probabilities for `tokens` (`[T, token_dim]`). Noise is applied
    /// only when `train` is set, the gate has noise enabled, and `noise_rng`
    /// is provided.
    pub fn forward(
        &self,
        sess: &Session<'_>,
        tokens: &Tensor,
        train: bool,
        noise_rng: Option<&mut SeedRng>,
    ) -> Result<GateOutput> {
        let w1 = sess.param(&self.name("w1"))?;
        let b1 = sess.param(&self.name("b1"))?;
        let w_score = sess.param(&self.name("w_score"))?;
        let b_score = sess.param(&self.name("b_score"))?;

        let h = tokens.matmul(&w1)?.add(&b1)?.gelu();
        let clean = h.matmul(&w_score)?.add(&b_score)?;

        let noisy = match (train && self.noise_enabled, noise_rng) {
            (true, Some(rng)) => {
                let w_noise = sess.param(&self.name("w_noise"))?;
                let b_noise = sess.param(&self.name("b_noise"))?;
                let std = h.matmul(&w_noise)?.add(&b_noise)?.softplus();
                let draws = sess.constant(
                    normal_vec(rng, clean.numel(), 0.0, 1.0),
                    &clean.shape(),
                )?;
                let logits = clean.add(&std.mul(&draws)?)?;
                Some((logits, std))
            }
            _ => None,
        };

        let (logits, noise_std) = match noisy {
            Some((l, s)) => (l, Some(s)),
            None => (clean.clone(), None),
        };
        Ok(GateOutput {
            probs: logits.softmax(1)?,
            logits,
            clean_scores: clean,
            noise_std,
        })
    }

    /// Appends `additional` expert columns to both heads. Existing columns
    /// keep their exact values. New score/noise weights are N(0, std^2) and
    /// new biases are `new_bias` (use a large negative score bias to make
    /// fresh experts initially silent).
    pub fn extend_experts(
        &mut self,
        store: &mut ParamStore,
        additional: usize,
        std: f64,
        new_bias: f64,
        rng: &mut SeedRng,
    ) -> Result<()> {
        let old = self.num_experts;
        let new = old + additional;
        for head in ["score", "noise"] {
            let wname = self.name(&format!("w_{head}"));
            let fresh = normal_vec::<f64>(rng, self.hidden_dim * additional, 0.0, std);
            {
                let p = store.get_mut(&wname)?;
                let mut data = Vec::with_capacity(self.hidden_dim * new);
                for r in 0..self.hidden_dim {
                    data.extend_from_slice(&p.data[r * old..(r + 1) * old]);
                    data.extend_from_slice(&fresh[r * additional..(r + 1) * additional]);
                }
                p.data = data;
                p.shape = vec![self.hidden_dim, new];
            }
            let bname = self.name(&format!("b_{head}"));
            let p = store.get_mut(&bname)?;
            p.data.extend(std::iter::repeat(new_bias).take(additional));
            p.shape = vec![new];
        }
        self.num_experts = new;
        Ok(())
    }
}
